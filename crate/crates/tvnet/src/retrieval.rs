//! Offline two-stage retrieval: shortlist the pool by expression similarity,
//! then pick the visually closest shortlisted image. The pairing is persisted
//! as a tab-separated manifest that training consumes.
//!
//! Descriptors are fixed (no learned weights): a bag-of-words term-frequency
//! vector for text, and a color histogram concatenated with a 4x4 mean-color
//! grid for images. Both are L2-normalized so cosine is a dot product.

use crate::data::{SceneSample, Vocab, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

pub const HIST_BINS: usize = 16;
pub const GRID: usize = 4;

fn l2_normalize(v: &mut [f64]) {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Bag-of-words term frequencies over the vocabulary, unit length.
/// Token order does not matter; padding is ignored; all-padding is an error.
pub fn embed_text_fixed(tokens: &[usize], vocab: &Vocab) -> Result<Vec<f64>> {
    let mut v = vec![0.0f64; vocab.len()];
    let mut count = 0usize;
    for &t in tokens {
        if t == PAD {
            continue;
        }
        if t >= vocab.len() {
            return Err(Error::Retrieval(format!("token index {t} out of vocabulary")));
        }
        v[t] += 1.0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Retrieval(
            "cannot embed an empty or all-padding expression".to_string(),
        ));
    }
    l2_normalize(&mut v);
    Ok(v)
}

/// Fixed image descriptor: per-channel 16-bin histograms (fractions of the
/// pixel count) followed by a 4x4 grid of mean colors, unit length.
pub fn embed_image_fixed(image: &Tensor<f32>) -> Vec<f64> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    assert_eq!(c, 3, "descriptor expects rgb");
    let npix = (h * w) as f64;
    let mut v = vec![0.0f64; 3 * HIST_BINS + GRID * GRID * 3];
    for y in 0..h {
        for x in 0..w {
            let p = image.pixel(y, x);
            let gy = (y * GRID / h).min(GRID - 1);
            let gx = (x * GRID / w).min(GRID - 1);
            for ch in 0..3 {
                let val = p[ch] as f64;
                let bin = ((val * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
                v[ch * HIST_BINS + bin] += 1.0 / npix;
                v[3 * HIST_BINS + (gy * GRID + gx) * 3 + ch] += val;
            }
        }
    }
    // grid cells hold means so the two parts are on comparable scales
    let cell = npix / (GRID * GRID) as f64;
    for x in v[3 * HIST_BINS..].iter_mut() {
        *x /= cell;
    }
    l2_normalize(&mut v);
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One indexed pool sample: id plus both unit-norm embeddings.
#[derive(Clone, Debug)]
pub struct RetrievalEntry {
    pub sample_id: String,
    pub text_embedding: Vec<f64>,
    pub visual_embedding: Vec<f64>,
}

pub fn build_index(pool: &[SceneSample], vocab: &Vocab) -> Result<Vec<RetrievalEntry>> {
    if pool.is_empty() {
        return Err(Error::Retrieval("cannot index an empty pool".to_string()));
    }
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::with_capacity(pool.len());
    for s in pool {
        if !seen.insert(s.sample_id.clone()) {
            return Err(Error::Retrieval(format!(
                "duplicate sample_id {} in pool",
                s.sample_id
            )));
        }
        entries.push(RetrievalEntry {
            sample_id: s.sample_id.clone(),
            text_embedding: embed_text_fixed(&s.tokens, vocab)?,
            visual_embedding: embed_image_fixed(&s.image),
        });
    }
    Ok(entries)
}

/// Match for one query: the chosen pool id and both stage scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchRecord {
    pub match_id: String,
    pub text_score: f64,
    pub visual_score: f64,
}

/// Rounds through the manifest's 6-decimal text form so that stored scores
/// round-trip bit-exactly.
fn round6(x: f64) -> f64 {
    format!("{x:.6}").parse().expect("fixed-point format parses")
}

/// Two-stage lookup. Stage one takes the `k` entries with the highest text
/// cosine; stage two returns the best visual cosine among them. Ties at both
/// stages break toward the lexicographically smallest id; the query's own id
/// is excluded when `exclude_self` is set.
pub fn retrieve(
    query: &SceneSample,
    index: &[RetrievalEntry],
    k: usize,
    exclude_self: bool,
    vocab: &Vocab,
) -> Result<MatchRecord> {
    if k == 0 {
        return Err(Error::Retrieval("shortlist size must be at least 1".to_string()));
    }
    let qt = embed_text_fixed(&query.tokens, vocab)?;
    let qv = embed_image_fixed(&query.image);
    let mut scored: Vec<(&RetrievalEntry, f64)> = index
        .iter()
        .filter(|e| !(exclude_self && e.sample_id == query.sample_id))
        .map(|e| (e, cosine(&qt, &e.text_embedding)))
        .collect();
    if scored.is_empty() {
        return Err(Error::Retrieval(format!(
            "{}: pool is empty after self-exclusion",
            query.sample_id
        )));
    }
    scored.sort_by(|(ea, sa), (eb, sb)| {
        sb.partial_cmp(sa)
            .expect("text scores are finite")
            .then_with(|| ea.sample_id.cmp(&eb.sample_id))
    });
    let shortlist = &scored[..k.min(scored.len())];
    let mut best: Option<(&RetrievalEntry, f64, f64)> = None;
    for (e, ts) in shortlist {
        let vs = cosine(&qv, &e.visual_embedding);
        let better = match &best {
            None => true,
            Some((be, _, bvs)) => {
                vs > *bvs || (vs == *bvs && e.sample_id < be.sample_id)
            }
        };
        if better {
            best = Some((e, *ts, vs));
        }
    }
    let (e, ts, vs) = best.expect("shortlist is nonempty");
    Ok(MatchRecord {
        match_id: e.sample_id.clone(),
        text_score: round6(ts),
        visual_score: round6(vs),
    })
}

/// Query-to-match pairing, ordered by query id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalManifest {
    pub entries: BTreeMap<String, MatchRecord>,
}

impl RetrievalManifest {
    /// Runs retrieval for every query and records the result.
    pub fn build(
        queries: &[SceneSample],
        index: &[RetrievalEntry],
        k: usize,
        exclude_self: bool,
        vocab: &Vocab,
    ) -> Result<RetrievalManifest> {
        let mut entries = BTreeMap::new();
        for q in queries {
            let m = retrieve(q, index, k, exclude_self, vocab)?;
            if entries.insert(q.sample_id.clone(), m).is_some() {
                return Err(Error::Retrieval(format!(
                    "duplicate query id {}",
                    q.sample_id
                )));
            }
        }
        Ok(RetrievalManifest { entries })
    }

    pub fn get(&self, query_id: &str) -> Option<&MatchRecord> {
        self.entries.get(query_id)
    }

    /// Every match id must name a known pool sample.
    pub fn validate_against(&self, pool_ids: &std::collections::HashSet<String>) -> Result<()> {
        for (q, m) in &self.entries {
            if !pool_ids.contains(&m.match_id) {
                return Err(Error::Retrieval(format!(
                    "manifest entry {q} references unknown pool id {}",
                    m.match_id
                )));
            }
        }
        Ok(())
    }
}

pub fn write_manifest(manifest: &RetrievalManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (q, m) in &manifest.entries {
        out.push_str(&format!(
            "{q}\t{}\t{:.6}\t{:.6}\n",
            m.match_id, m.text_score, m.visual_score
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RetrievalManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Retrieval(format!("cannot read {}: {e}", path.display())))?;
    let mut entries = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::Retrieval(format!(
                "{} line {lineno}: expected 4 tab-separated fields, got {}",
                path.display(),
                parts.len()
            )));
        }
        let text_score: f64 = parts[2].parse().map_err(|_| {
            Error::Retrieval(format!(
                "{} line {lineno}: bad text score '{}'",
                path.display(),
                parts[2]
            ))
        })?;
        let visual_score: f64 = parts[3].parse().map_err(|_| {
            Error::Retrieval(format!(
                "{} line {lineno}: bad visual score '{}'",
                path.display(),
                parts[3]
            ))
        })?;
        if entries
            .insert(
                parts[0].to_string(),
                MatchRecord {
                    match_id: parts[1].to_string(),
                    text_score,
                    visual_score,
                },
            )
            .is_some()
        {
            return Err(Error::Retrieval(format!(
                "{} line {lineno}: duplicate query id {}",
                path.display(),
                parts[0]
            )));
        }
    }
    Ok(RetrievalManifest { entries })
}
