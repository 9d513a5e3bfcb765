//! End-to-end pipeline over the library API: corpus on disk, retrieval
//! manifest, training, checkpointing, evaluation, and plots.

use tvnet::checkpoint::{load_checkpoint, save_checkpoint};
use tvnet::config::Config;
use tvnet::data::{load_split, Vocab};
use tvnet::metrics::{evaluate, EvalReport};
use tvnet::model::{Model, Variant};
use tvnet::plot::{line_plot, PlotOptions, Series};
use tvnet::retrieval::{build_index, read_manifest, write_manifest, RetrievalManifest};
use tvnet::rng::{stream, substream, Stream};
use tvnet::synth::{build_corpus, generate_split, make_sample, planted_count, split_base};
use tvnet::train::{read_loss_history, train, write_loss_history, TrainOptions};

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.n_train = 6;
    cfg.n_val = 3;
    cfg.n_pool = 10;
    cfg.shortlist_k = 4;
    cfg.max_iterations = 8;
    cfg.seed = 11;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn disk_round_trip_train_eval_plot() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let counts = build_corpus(&cfg, root).unwrap();
    assert_eq!((counts.train, counts.val, counts.pool), (6, 3, 10));

    let vocab = Vocab::standard();
    let train_split = load_split(&root.join("train"), vocab, cfg.max_tokens).unwrap();
    let val_split = load_split(&root.join("val"), vocab, cfg.max_tokens).unwrap();
    let pool_split = load_split(&root.join("pool"), vocab, cfg.max_tokens).unwrap();
    assert_eq!(train_split.len(), 6);

    let index = build_index(&pool_split, vocab).unwrap();
    let queries: Vec<_> = train_split.iter().chain(&val_split).cloned().collect();
    let manifest =
        RetrievalManifest::build(&queries, &index, cfg.shortlist_k, false, vocab).unwrap();
    let mpath = root.join("manifest.tsv");
    write_manifest(&manifest, &mpath).unwrap();
    assert_eq!(read_manifest(&mpath).unwrap(), manifest);

    let mut model = Model::<f32>::new(&cfg, Variant::BaselineRes, vocab.len());
    model.init(&mut stream(cfg.seed, Stream::Init));
    let opts = TrainOptions::from_config(&cfg);
    let history =
        train(&mut model, &train_split, &pool_split, Some(&manifest), &opts, |_, _| {}).unwrap();
    assert_eq!(history.len(), 8);
    assert!(history.iter().all(|&(_, l)| l.is_finite() && l >= 0.0));

    let lpath = root.join("loss.tsv");
    write_loss_history(&lpath, &history).unwrap();
    assert_eq!(read_loss_history(&lpath).unwrap(), history);

    let cpath = root.join("model.ckpt");
    save_checkpoint(&mut model, &cpath).unwrap();
    let loaded = load_checkpoint::<f32>(&cpath).unwrap();
    let r1 = evaluate(&model, &val_split, &pool_split, Some(&manifest), cfg.threshold).unwrap();
    let r2 = evaluate(&loaded, &val_split, &pool_split, Some(&manifest), cfg.threshold).unwrap();
    assert_eq!(r1, r2, "checkpoint round-trip must not change predictions");
    assert_eq!(r1.all.count, 3);

    let rpath = root.join("eval-val.txt");
    r1.save(&rpath).unwrap();
    assert_eq!(EvalReport::load(&rpath).unwrap(), r1);

    let pts: Vec<(f64, f64)> = history.iter().map(|&(t, l)| (t as f64, l)).collect();
    let loss_png = root.join("loss.png");
    line_plot(&loss_png, &[Series { label: "loss", points: &pts }], &PlotOptions::default())
        .unwrap();
    assert!(std::fs::metadata(&loss_png).unwrap().len() > 0);
}

#[test]
fn rebuilt_corpus_is_byte_identical() {
    let cfg = small_config();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_corpus(&cfg, da.path()).unwrap();
    build_corpus(&cfg, db.path()).unwrap();
    for split in ["train", "val", "pool"] {
        let meta_a = std::fs::read(da.path().join(split).join("meta.jsonl")).unwrap();
        let meta_b = std::fs::read(db.path().join(split).join("meta.jsonl")).unwrap();
        assert_eq!(meta_a, meta_b, "{split} metadata");
        for kind in ["images", "masks"] {
            let dir_a = da.path().join(split).join(kind);
            let mut names: Vec<_> = std::fs::read_dir(&dir_a)
                .unwrap()
                .map(|e| e.unwrap().file_name())
                .collect();
            names.sort();
            assert!(!names.is_empty());
            for name in names {
                let a = std::fs::read(dir_a.join(&name)).unwrap();
                let b = std::fs::read(db.path().join(split).join(kind).join(&name)).unwrap();
                assert_eq!(a, b, "{split}/{kind}/{name:?}");
            }
        }
    }
}

/// The pool plants a same-kind-same-color relative for every train sample;
/// retrieval should find one of those relatives nearly always. The bound is
/// a regression check measured on this seeded corpus.
#[test]
fn retrieval_pairs_planted_relatives() {
    let cfg = Config::default();
    let vocab = Vocab::standard();
    let train_split = generate_split(&cfg, "train", cfg.n_train).unwrap();
    let planted = planted_count(&cfg);
    assert_eq!(planted, cfg.n_train, "default config plants every train sample");

    // regenerate the pool with scene inventories visible
    let mut pool = Vec::new();
    let mut scenes = std::collections::HashMap::new();
    for j in 0..cfg.n_pool {
        let plant = (j < planted).then(|| &train_split[j].target);
        let mut rng = substream(cfg.seed, Stream::Corpus, split_base("pool") + j as u64);
        let (sample, scene, _) =
            make_sample(&cfg, format!("pool_{j:04}"), &mut rng, plant).unwrap();
        scenes.insert(sample.sample_id.clone(), scene);
        pool.push(sample);
    }

    let index = build_index(&pool, vocab).unwrap();
    let manifest =
        RetrievalManifest::build(&train_split, &index, cfg.shortlist_k, false, vocab).unwrap();

    let mut hits = 0;
    for q in train_split.iter().take(planted) {
        let rec = manifest.get(&q.sample_id).unwrap();
        let scene = &scenes[&rec.match_id];
        if scene
            .specs
            .iter()
            .any(|s| s.kind == q.target.kind && s.color == q.target.color)
        {
            hits += 1;
        }
    }
    let rate = hits as f64 / planted as f64;
    assert!(rate >= 0.9, "only {hits}/{planted} queries found a planted relative");
}

#[test]
fn corrupt_metadata_names_the_offending_sample() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    build_corpus(&cfg, dir.path()).unwrap();
    let meta = dir.path().join("train").join("meta.jsonl");
    let text = std::fs::read_to_string(&meta).unwrap();
    // blow up the token list of the first record
    let bad = text.replacen("\"tokens\":[", "\"tokens\":[9999,", 1);
    assert_ne!(bad, text);
    std::fs::write(&meta, bad).unwrap();
    let err = load_split(&dir.path().join("train"), Vocab::standard(), cfg.max_tokens)
        .err()
        .expect("corrupt metadata must fail");
    assert!(err.to_string().contains("train_0000"), "{err}");
}
