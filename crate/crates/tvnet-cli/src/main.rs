//! Command-line driver: corpus generation, retrieval indexing, training,
//! evaluation, single-sample prediction, and plots. Every run is pinned to
//! a config snapshot written before any work happens, so artifacts stay
//! traceable.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use tvnet::checkpoint::{load_checkpoint, save_checkpoint};
use tvnet::config::Config;
use tvnet::data::{image_to_png, load_split, SceneSample, Vocab};
use tvnet::error::{Error, Result};
use tvnet::metrics::{evaluate, EvalReport, PREC_LEVELS};
use tvnet::model::{predict_mask, Model, Variant};
use tvnet::plot::{line_plot, PlotOptions, Series};
use tvnet::retrieval::{build_index, read_manifest, write_manifest, RetrievalManifest};
use tvnet::rng::{stream, Stream};
use tvnet::synth::build_corpus;
use tvnet::train::{read_loss_history, train, write_loss_history, TrainOptions};
use tvnet::Tensor;

#[derive(Parser)]
#[command(name = "tvnet", version, about = "Referring image segmentation on synthetic shape scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train/val/pool corpus.
    Synth {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Config TOML; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed (flag beats TVNET_SEED beats file).
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite an existing dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Build the retrieval manifest pairing every train/val sample with its
    /// best pool match.
    Index {
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Stage-one shortlist size; defaults to the dataset config value.
        #[arg(long)]
        k: Option<usize>,
        /// Manifest path; defaults to DATA/manifest.tsv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a variant and write checkpoint plus loss history into a run
    /// directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoint, loss history, and reports.
        #[arg(long)]
        run: PathBuf,
        /// One of: baseline, baseline-res, full.
        #[arg(long)]
        variant: String,
        /// Config TOML; defaults to the dataset's config snapshot.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite an existing checkpoint in the run directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a trained run on one split and write the report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Split to evaluate: train or val.
        #[arg(long, default_value = "val")]
        split: String,
        /// Report path; defaults to RUN/eval-SPLIT.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one sample and write input / prediction / reference side by
    /// side.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Sample id, e.g. val_0003.
        #[arg(long)]
        sample: String,
        /// Output raster; defaults to RUN/predict-SAMPLE.png.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the loss curve and the precision-threshold curve for a run.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

fn resolve_config(explicit: Option<&Path>, fallback: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match (explicit, fallback) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(p)) if p.exists() => Config::load(p)?,
        _ => Config::default(),
    };
    if let Ok(v) = std::env::var("TVNET_SEED") {
        cfg.seed = v.parse().map_err(|_| {
            Error::config(format!("TVNET_SEED={v:?} is not an unsigned integer"))
        })?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_config(data: &Path) -> Result<Config> {
    let snap = data.join("config.toml");
    if !snap.exists() {
        return Err(Error::config(format!(
            "{} has no config.toml; generate the dataset with `tvnet synth --out {}` first",
            data.display(),
            data.display()
        )));
    }
    Config::load(&snap)
}

fn load_all_splits(data: &Path, cfg: &Config) -> Result<[Vec<SceneSample>; 3]> {
    let vocab = Vocab::standard();
    Ok([
        load_split(&data.join("train"), vocab, cfg.max_tokens)?,
        load_split(&data.join("val"), vocab, cfg.max_tokens)?,
        load_split(&data.join("pool"), vocab, cfg.max_tokens)?,
    ])
}

fn manifest_for(data: &Path, variant: Variant) -> Result<Option<RetrievalManifest>> {
    if !variant.uses_retrieval() {
        return Ok(None);
    }
    let path = data.join("manifest.tsv");
    if !path.exists() {
        return Err(Error::Retrieval(format!(
            "variant {} needs {}; build it with `tvnet index --data {}`",
            variant.as_str(),
            path.display(),
            data.display()
        )));
    }
    Ok(Some(read_manifest(&path)?))
}

fn checkpoint_path(run: &Path) -> PathBuf {
    run.join("model.ckpt")
}

fn load_run_model(run: &Path) -> Result<Model<f32>> {
    let path = checkpoint_path(run);
    if !path.exists() {
        return Err(Error::checkpoint(format!(
            "checkpoint not found: {}; train the run first with `tvnet train --run {}`",
            path.display(),
            run.display()
        )));
    }
    load_checkpoint::<f32>(&path)
}

fn cmd_synth(out: &Path, config: Option<&Path>, seed: Option<u64>, force: bool) -> Result<()> {
    let cfg = resolve_config(config, None, seed)?;
    let occupied = ["train", "val", "pool", "config.toml"]
        .iter()
        .map(|n| out.join(n))
        .filter(|p| p.exists())
        .collect::<Vec<_>>();
    if !occupied.is_empty() {
        if !force {
            return Err(Error::config(format!(
                "{} already holds a dataset; pass --force to regenerate it",
                out.display()
            )));
        }
        for p in occupied {
            if p.is_dir() {
                std::fs::remove_dir_all(&p)?;
            } else {
                std::fs::remove_file(&p)?;
            }
        }
    }
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.toml"))?;
    let counts = build_corpus(&cfg, out)?;
    println!(
        "wrote {} train, {} val, {} pool samples ({} planted relatives) to {}",
        counts.train,
        counts.val,
        counts.pool,
        counts.planted,
        out.display()
    );
    Ok(())
}

fn cmd_index(data: &Path, k: Option<usize>, out: Option<&Path>) -> Result<()> {
    let cfg = dataset_config(data)?;
    let [train, val, pool] = load_all_splits(data, &cfg)?;
    let vocab = Vocab::standard();
    let mut k = k.unwrap_or(cfg.shortlist_k);
    if k > pool.len() {
        eprintln!("warning: shortlist {k} exceeds pool size {}; clamping", pool.len());
        k = pool.len();
    }
    let index = build_index(&pool, vocab)?;
    let queries: Vec<SceneSample> = train.into_iter().chain(val).collect();
    let manifest = RetrievalManifest::build(&queries, &index, k, false, vocab)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| data.join("manifest.tsv"));
    write_manifest(&manifest, &out)?;
    println!("wrote {} retrieval pairs to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn cmd_train(
    data: &Path,
    run: &Path,
    variant: &str,
    config: Option<&Path>,
    iterations: Option<usize>,
    seed: Option<u64>,
    force: bool,
) -> Result<()> {
    let variant = Variant::from_str(variant)?;
    let snap = data.join("config.toml");
    let mut cfg = resolve_config(config, Some(&snap), seed)?;
    if let Some(n) = iterations {
        cfg.max_iterations = n;
    }
    let ckpt = checkpoint_path(run);
    if ckpt.exists() && !force {
        return Err(Error::config(format!(
            "{} already exists; pass --force to retrain over it",
            ckpt.display()
        )));
    }
    let [corpus, _, pool] = load_all_splits(data, &cfg)?;
    if let Some(s) = corpus.first() {
        if s.image.shape()[0] != cfg.image_size {
            return Err(Error::config(format!(
                "dataset images are {}px but the config says {}px",
                s.image.shape()[0],
                cfg.image_size
            )));
        }
    }
    let manifest = manifest_for(data, variant)?;
    std::fs::create_dir_all(run)?;
    // snapshot before the first parameter moves
    cfg.save(&run.join("config.toml"))?;

    let mut model = Model::<f32>::new(&cfg, variant, Vocab::standard().len());
    model.init(&mut stream(cfg.seed, Stream::Init));
    let opts = TrainOptions::from_config(&cfg);
    let t0 = std::time::Instant::now();
    let total = opts.iterations;
    let history = train(&mut model, &corpus, &pool, manifest.as_ref(), &opts, |t, loss| {
        if t % 100 == 0 || t + 1 == total {
            println!("iter {t:>5}/{total}  loss {loss:.5}");
        }
    })?;
    write_loss_history(&run.join("loss.tsv"), &history)?;
    save_checkpoint(&mut model, &ckpt)?;
    println!(
        "trained {} for {} iterations in {:.1}s; checkpoint at {}",
        variant.as_str(),
        history.len(),
        t0.elapsed().as_secs_f64(),
        ckpt.display()
    );
    Ok(())
}

fn cmd_eval(data: &Path, run: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    if split != "train" && split != "val" {
        return Err(Error::config(format!("unknown split {split:?}; use train or val")));
    }
    let model = load_run_model(run)?;
    let cfg = &model.cfg;
    let [train, val, pool] = load_all_splits(data, cfg)?;
    let dataset = if split == "train" { &train } else { &val };
    let manifest = manifest_for(data, model.variant)?;
    let report = evaluate(&model, dataset, &pool, manifest.as_ref(), cfg.threshold)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join(format!("eval-{split}.txt")));
    report.save(&out)?;
    print!("{}", report.to_text());
    println!("report written to {}", out.display());
    Ok(())
}

/// Mask tensor to a gray raster, foreground white.
fn mask_to_rgb(mask: &Tensor<f32>) -> image::RgbImage {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = if mask.at3(y as usize, x as usize, 0) == 1.0 { 255 } else { 0 };
        image::Rgb([v, v, v])
    })
}

fn cmd_predict(data: &Path, run: &Path, sample_id: &str, out: Option<&Path>) -> Result<()> {
    let model = load_run_model(run)?;
    let cfg = &model.cfg;
    let [train, val, pool] = load_all_splits(data, cfg)?;
    let all: Vec<&SceneSample> = train.iter().chain(&val).chain(&pool).collect();
    let Some(sample) = all.iter().find(|s| s.sample_id == sample_id) else {
        let mut ids: Vec<&str> = all.iter().map(|s| s.sample_id.as_str()).collect();
        ids.sort();
        let shown = ids.iter().take(12).cloned().collect::<Vec<_>>().join(", ");
        let more = if ids.len() > 12 { format!(", ... ({} total)", ids.len()) } else { String::new() };
        return Err(Error::data(format!(
            "no sample named {sample_id:?}; available: {shown}{more}"
        )));
    };
    let retrieved = match manifest_for(data, model.variant)? {
        Some(m) => {
            let rec = m.get(sample_id).ok_or_else(|| {
                Error::Retrieval(format!(
                    "manifest has no entry for {sample_id}; rebuild it with `tvnet index`"
                ))
            })?;
            Some(
                *all.iter().find(|s| s.sample_id == rec.match_id).ok_or_else(|| {
                    Error::Retrieval(format!("manifest match {} not on disk", rec.match_id))
                })?,
            )
        }
        None => None,
    };
    let logits = model.predict_logits(sample, retrieved)?;
    let pred = predict_mask(&logits, cfg.threshold);

    let panels =
        [image_to_png(&sample.image), mask_to_rgb(&pred), mask_to_rgb(&sample.mask)];
    let (h, w) = (panels[0].height(), panels[0].width());
    let sep = 2u32;
    let mut canvas =
        image::RgbImage::from_pixel(3 * w + 2 * sep, h, image::Rgb([255, 255, 255]));
    for (i, p) in panels.iter().enumerate() {
        let x0 = i as u32 * (w + sep);
        for y in 0..h {
            for x in 0..w {
                canvas.put_pixel(x0 + x, y, *p.get_pixel(x, y));
            }
        }
    }
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join(format!("predict-{sample_id}.png")));
    canvas
        .save(&out)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", out.display())))?;
    println!("wrote {} ({})", out.display(), sample.expression);
    Ok(())
}

fn cmd_plot(run: &Path) -> Result<()> {
    let loss_path = run.join("loss.tsv");
    if !loss_path.exists() {
        return Err(Error::data(format!(
            "{} not found; train the run first with `tvnet train`",
            loss_path.display()
        )));
    }
    let history = read_loss_history(&loss_path)?;
    let pts: Vec<(f64, f64)> = history.iter().map(|&(t, l)| (t as f64, l)).collect();
    let positive = pts.iter().all(|&(_, l)| l > 0.0);
    let spread = match (
        pts.iter().map(|&(_, l)| l).fold(f64::INFINITY, f64::min),
        pts.iter().map(|&(_, l)| l).fold(0.0, f64::max),
    ) {
        (lo, hi) if lo > 0.0 => hi / lo,
        _ => 1.0,
    };
    let loss_png = run.join("loss.png");
    line_plot(
        &loss_png,
        &[Series { label: "train loss", points: &pts }],
        &PlotOptions { y_log: positive && spread > 20.0, ..PlotOptions::default() },
    )?;

    let report_path = ["eval-val.txt", "eval-train.txt"]
        .iter()
        .map(|n| run.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::data(format!(
                "no eval report in {}; run `tvnet eval` first",
                run.display()
            ))
        })?;
    let report = EvalReport::load(&report_path)?;
    let curves: Vec<(String, Vec<(f64, f64)>)> = [
        ("all", &report.all),
        ("small", &report.small),
        ("medium", &report.medium),
        ("big", &report.big),
    ]
    .iter()
    .filter(|(_, b)| b.count > 0)
    .map(|(name, b)| {
        let pts = PREC_LEVELS.iter().zip(b.prec).map(|(&x, p)| (x, p)).collect();
        (name.to_string(), pts)
    })
    .collect();
    let series: Vec<Series> =
        curves.iter().map(|(n, p)| Series { label: n, points: p }).collect();
    let prec_png = run.join("prec.png");
    line_plot(&prec_png, &series, &PlotOptions::default())?;
    let legend = curves.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(", ");
    println!("wrote {} and {} (curves: {legend})", loss_png.display(), prec_png.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { out, config, seed, force } => {
            cmd_synth(&out, config.as_deref(), seed, force)
        }
        Cmd::Index { data, k, out } => cmd_index(&data, k, out.as_deref()),
        Cmd::Train { data, run, variant, config, iterations, seed, force } => {
            cmd_train(&data, &run, &variant, config.as_deref(), iterations, seed, force)
        }
        Cmd::Eval { data, run, split, out } => cmd_eval(&data, &run, &split, out.as_deref()),
        Cmd::Predict { data, run, sample, out } => {
            cmd_predict(&data, &run, &sample, out.as_deref())
        }
        Cmd::Plot { run } => cmd_plot(&run),
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
