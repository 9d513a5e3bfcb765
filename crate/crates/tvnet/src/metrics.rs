//! Segmentation metrics: cumulative IoU, precision at IoU thresholds, and
//! the size-bucketed evaluation protocol.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{SceneSample, SizeClass};
use crate::error::{Error, Result};
use crate::model::{predict_mask, Model};
use crate::retrieval::RetrievalManifest;
use crate::tensor::{Real, Tensor};

pub const PREC_LEVELS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

fn require_binary(t: &Tensor<f32>, what: &str) -> Result<()> {
    for &v in t.data() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::data(format!("{what} mask holds {v}, not binary")));
        }
    }
    Ok(())
}

/// Pixel intersection and union counts plus their ratio. An empty union
/// cannot arise against dataset masks (they always have foreground), but an
/// all-background prediction against a nonempty mask scores 0.
pub fn sample_iou(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<(usize, usize, f64)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "mask shapes disagree: prediction {:?} vs reference {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    require_binary(pred, "predicted")?;
    require_binary(gt, "reference")?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == 1.0, g == 1.0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok((inter, union, iou))
}

/// Cumulative IoU: summed intersections over summed unions. This is not the
/// mean of per-sample IoUs; large objects weigh more.
pub fn overall_iou(pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::data("cumulative IoU over an empty sample list"));
    }
    let i: usize = pairs.iter().map(|&(i, _)| i).sum();
    let u: usize = pairs.iter().map(|&(_, u)| u).sum();
    if u == 0 {
        return Err(Error::data("cumulative IoU with zero total union"));
    }
    Ok(i as f64 / u as f64)
}

/// Fraction of samples whose IoU reaches `x`, boundary inclusive.
pub fn prec_at_x(ious: &[f64], x: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::data("precision over an empty sample list"));
    }
    if !(0.0..1.0).contains(&x) || x == 0.0 {
        return Err(Error::data(format!("precision threshold {x} outside (0,1)")));
    }
    let hits = ious.iter().filter(|&&v| v >= x).count();
    Ok(hits as f64 / ious.len() as f64)
}

/// Buckets a reference mask by its foreground fraction of the image area.
pub fn size_bucket(gt: &Tensor<f32>) -> Result<SizeClass> {
    require_binary(gt, "reference")?;
    let fg = gt.data().iter().filter(|&&v| v == 1.0).count();
    if fg == 0 {
        return Err(Error::data("size bucket of an empty mask"));
    }
    let area = gt.shape()[0] * gt.shape()[1];
    Ok(SizeClass::from_fraction(fg as f64 / area as f64))
}

/// Aggregates for one bucket. A bucket nobody fell into has `count` 0 and
/// zeroed metrics; the text renderer marks it empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BucketReport {
    pub count: usize,
    pub overall_iou: f64,
    /// Mean of per-sample IoUs; diagnostic only.
    pub mean_iou: f64,
    pub prec: [f64; 5],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub all: BucketReport,
    pub small: BucketReport,
    pub medium: BucketReport,
    pub big: BucketReport,
}

impl EvalReport {
    pub fn bucket(&self, s: SizeClass) -> &BucketReport {
        match s {
            SizeClass::Small => &self.small,
            SizeClass::Medium => &self.medium,
            SizeClass::Big => &self.big,
        }
    }
}

#[derive(Default)]
struct Accum {
    pairs: Vec<(usize, usize)>,
    ious: Vec<f64>,
}

impl Accum {
    fn push(&mut self, i: usize, u: usize, iou: f64) {
        self.pairs.push((i, u));
        self.ious.push(iou);
    }

    fn report(&self) -> Result<BucketReport> {
        if self.pairs.is_empty() {
            return Ok(BucketReport::default());
        }
        let mut prec = [0.0; 5];
        for (slot, &x) in PREC_LEVELS.iter().enumerate() {
            prec[slot] = prec_at_x(&self.ious, x)?;
        }
        Ok(BucketReport {
            count: self.pairs.len(),
            overall_iou: overall_iou(&self.pairs)?,
            mean_iou: self.ious.iter().sum::<f64>() / self.ious.len() as f64,
            prec,
        })
    }
}

/// Core aggregation over any per-sample mask predictor. The predictor
/// returns a binary mask at image resolution.
pub fn evaluate_with(
    dataset: &[SceneSample],
    mut predict: impl FnMut(&SceneSample) -> Result<Tensor<f32>>,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::data("evaluation over an empty dataset"));
    }
    let mut all = Accum::default();
    let mut per: BTreeMap<&'static str, Accum> = BTreeMap::new();
    for sample in dataset {
        let pred = predict(sample)?;
        let (i, u, iou) = sample_iou(&pred, &sample.mask)?;
        let bucket = size_bucket(&sample.mask)?;
        all.push(i, u, iou);
        per.entry(bucket.as_str()).or_default().push(i, u, iou);
    }
    let take = |per: &BTreeMap<&str, Accum>, k: &str| -> Result<BucketReport> {
        per.get(k).map_or_else(|| Ok(BucketReport::default()), |a| a.report())
    };
    Ok(EvalReport {
        all: all.report()?,
        small: take(&per, "small")?,
        medium: take(&per, "medium")?,
        big: take(&per, "big")?,
    })
}

/// Full evaluation pass: predicts every dataset sample with the model (and
/// its retrieved partner from `pool` when the variant uses one), thresholds,
/// and aggregates overall plus per size bucket.
pub fn evaluate<R: Real>(
    model: &Model<R>,
    dataset: &[SceneSample],
    pool: &[SceneSample],
    manifest: Option<&RetrievalManifest>,
    threshold: f64,
) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &SceneSample> =
        pool.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let uses_retrieval = model.variant.uses_retrieval();
    let manifest = if uses_retrieval {
        Some(manifest.ok_or_else(|| {
            Error::Retrieval(format!(
                "variant {} evaluates with retrieved images; pass a retrieval manifest",
                model.variant.as_str()
            ))
        })?)
    } else {
        None
    };
    evaluate_with(dataset, |sample| {
        let retrieved = match manifest {
            Some(m) => {
                let rec = m.get(&sample.sample_id).ok_or_else(|| {
                    Error::Retrieval(format!(
                        "no manifest entry for evaluation sample {}",
                        sample.sample_id
                    ))
                })?;
                Some(*by_id.get(rec.match_id.as_str()).ok_or_else(|| {
                    Error::Retrieval(format!(
                        "manifest pairs {} with {}, which is not in the pool",
                        sample.sample_id, rec.match_id
                    ))
                })?)
            }
            None => None,
        };
        let logits = model.predict_logits(sample, retrieved)?;
        Ok(predict_mask(&logits, threshold))
    })
}

fn render_bucket(out: &mut String, name: &str, b: &BucketReport) {
    if b.count == 0 {
        out.push_str(&format!("{name:<8} empty\n"));
        return;
    }
    out.push_str(&format!(
        "{name:<8} n={:<4} oIoU={:.4} mIoU={:.4}",
        b.count, b.overall_iou, b.mean_iou
    ));
    for (slot, x) in PREC_LEVELS.iter().enumerate() {
        out.push_str(&format!(" P@{x}={:.4}", b.prec[slot]));
    }
    out.push('\n');
}

fn kv_bucket(out: &mut String, name: &str, b: &BucketReport) {
    out.push_str(&format!("{name}.count={}\n", b.count));
    out.push_str(&format!("{name}.overall_iou={}\n", b.overall_iou));
    out.push_str(&format!("{name}.mean_iou={}\n", b.mean_iou));
    for (slot, x) in PREC_LEVELS.iter().enumerate() {
        out.push_str(&format!("{name}.prec@{x}={}\n", b.prec[slot]));
    }
}

impl EvalReport {
    /// Human-readable table followed by a `[values]` key-value block that
    /// `parse` and the plot command read back.
    pub fn to_text(&self) -> String {
        let mut out = String::from("segmentation evaluation\n");
        out.push_str("buckets by reference-mask area: small <5%, medium 5-10%, big >=10%\n\n");
        for (name, b) in
            [("all", &self.all), ("small", &self.small), ("medium", &self.medium), ("big", &self.big)]
        {
            render_bucket(&mut out, name, b);
        }
        out.push_str("\n[values]\n");
        for (name, b) in
            [("all", &self.all), ("small", &self.small), ("medium", &self.medium), ("big", &self.big)]
        {
            kv_bucket(&mut out, name, b);
        }
        out
    }

    pub fn parse(text: &str) -> Result<EvalReport> {
        let values = text
            .split("[values]\n")
            .nth(1)
            .ok_or_else(|| Error::data("report has no [values] block"))?;
        let mut map: BTreeMap<&str, f64> = BTreeMap::new();
        for line in values.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::data(format!("bad report line {line:?}")))?;
            map.insert(k, v.parse().map_err(|_| Error::data(format!("bad value in {line:?}")))?);
        }
        let get = |k: &str| -> Result<f64> {
            map.get(k).copied().ok_or_else(|| Error::data(format!("report missing key {k}")))
        };
        let bucket = |name: &str| -> Result<BucketReport> {
            let mut prec = [0.0; 5];
            for (slot, x) in PREC_LEVELS.iter().enumerate() {
                prec[slot] = get(&format!("{name}.prec@{x}"))?;
            }
            Ok(BucketReport {
                count: get(&format!("{name}.count"))? as usize,
                overall_iou: get(&format!("{name}.overall_iou"))?,
                mean_iou: get(&format!("{name}.mean_iou"))?,
                prec,
            })
        };
        Ok(EvalReport {
            all: bucket("all")?,
            small: bucket("small")?,
            medium: bucket("medium")?,
            big: bucket("big")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        EvalReport::parse(&std::fs::read_to_string(path)?)
    }
}
