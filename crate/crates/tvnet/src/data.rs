//! Domain types and dataset storage.
//!
//! A sample couples one RGB image with one referring expression and the
//! binary mask of the referred object. Splits live in one directory each:
//! `images/<id>.png`, `masks/<id>.png` (values {0,255}), and `meta.jsonl`
//! with one record per sample. Images are quantized to the 8-bit grid at
//! generation time, so a disk round-trip reproduces tensors exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Closed vocabulary covering every template word. Index 0 is padding,
/// index 1 the unknown marker.
#[derive(Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

const WORDS: &[&str] = &[
    "<pad>", "<unk>", "the", "small", "medium", "big", "red", "green", "blue", "yellow",
    "circle", "square", "triangle", "leftmost", "rightmost", "topmost", "bottommost",
    "left", "right", "above", "below", "of",
];

impl Vocab {
    pub fn standard() -> &'static Vocab {
        static V: OnceLock<Vocab> = OnceLock::new();
        V.get_or_init(|| {
            let words = WORDS.to_vec();
            let index = words.iter().enumerate().map(|(i, &w)| (w, i)).collect();
            Vocab { words, index }
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        *self.index.get(word).unwrap_or(&UNK)
    }

    pub fn word(&self, id: usize) -> &'static str {
        self.words.get(id).copied().unwrap_or("<unk>")
    }

    /// Whitespace tokenization; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn from_str(s: &str) -> Option<Self> {
                match s {
                    $($text => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

word_enum!(Kind {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
});

word_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
});

word_enum!(SizeClass {
    Small => "small",
    Medium => "medium",
    Big => "big",
});

impl SizeClass {
    /// Area-fraction buckets: small below 5%, medium in [5%, 10%), big from
    /// 10% up. The 5% boundary is medium and the 10% boundary is big.
    pub fn from_fraction(frac: f64) -> SizeClass {
        if frac < 0.05 {
            SizeClass::Small
        } else if frac < 0.10 {
            SizeClass::Medium
        } else {
            SizeClass::Big
        }
    }
}

/// One rendered object: category, color, visible-area size class, and the
/// center of its drawn geometry in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: Kind,
    pub color: Color,
    pub size_class: SizeClass,
    pub cx: f64,
    pub cy: f64,
}

/// One dataset sample held in memory.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub sample_id: String,
    /// `[H, W, 3]`, values on the 8-bit grid in [0, 1].
    pub image: Tensor<f32>,
    /// `[H, W, 1]`, values in {0, 1}, at least one foreground pixel.
    pub mask: Tensor<f32>,
    pub tokens: Vec<usize>,
    pub expression: String,
    pub target: ShapeSpec,
}

impl SceneSample {
    pub fn validate(&self, vocab: &Vocab, max_tokens: usize) -> Result<()> {
        let id = &self.sample_id;
        if self.tokens.is_empty() || self.tokens.len() > max_tokens {
            return Err(Error::data(format!(
                "{id}: token count {} outside 1..={max_tokens}",
                self.tokens.len()
            )));
        }
        if self.tokens.iter().any(|&t| t >= vocab.len()) {
            return Err(Error::data(format!("{id}: token index out of vocabulary")));
        }
        if self.image.shape().len() != 3 || self.image.shape()[2] != 3 {
            return Err(Error::data(format!("{id}: image is not [h, w, 3]")));
        }
        let mut fg = 0usize;
        for &v in self.mask.data() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::data(format!("{id}: mask value {v} not in {{0,1}}")));
            }
            if v == 1.0 {
                fg += 1;
            }
        }
        if fg == 0 {
            return Err(Error::data(format!("{id}: mask has no foreground pixel")));
        }
        Ok(())
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg: f64 = self.mask.data().iter().map(|&v| v as f64).sum();
        fg / self.mask.numel() as f64
    }
}

/// Multi-scale visual features, one tensor per backbone stage. Levels 3 to 5
/// share one resolution; level 2 is exactly twice that in each axis.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<R> {
    pub levels: Vec<Tensor<R>>,
}

impl<R: crate::tensor::Real> FeaturePyramid<R> {
    pub fn level(&self, l: usize) -> &Tensor<R> {
        assert!((1..=5).contains(&l), "levels are numbered 1..=5");
        &self.levels[l - 1]
    }

    pub fn validate(&self, cfg: &crate::config::Config) -> Result<()> {
        if self.levels.len() != 5 {
            return Err(Error::shape(format!(
                "pyramid has {} levels, expected 5",
                self.levels.len()
            )));
        }
        for (i, t) in self.levels.iter().enumerate() {
            let r = cfg.level_resolutions[i];
            let c = cfg.level_channels[i];
            if !t.is_3d(r, r, c) {
                return Err(Error::shape(format!(
                    "level {} is {:?}, expected [{r}, {r}, {c}]",
                    i + 1,
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One line of `meta.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaRecord {
    pub sample_id: String,
    pub expression: String,
    pub tokens: Vec<usize>,
    pub kind: Kind,
    pub color: Color,
    pub size_class: SizeClass,
    pub cx: f64,
    pub cy: f64,
}

pub fn image_to_png(t: &Tensor<f32>) -> image::RgbImage {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let p = t.pixel(y, x);
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (p[0] * 255.0).round() as u8,
                    (p[1] * 255.0).round() as u8,
                    (p[2] * 255.0).round() as u8,
                ]),
            );
        }
    }
    img
}

pub fn save_image_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    image_to_png(t).save(path)?;
    Ok(())
}

pub fn load_image_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                *t.at3_mut(y, x, c) = p.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(t)
}

pub fn save_mask_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = t.at3(y, x, 0);
            img.put_pixel(x as u32, y as u32, image::Luma([if v > 0.5 { 255 } else { 0 }]));
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[h, w, 1]);
    for y in 0..h {
        for x in 0..w {
            let v = img.get_pixel(x as u32, y as u32).0[0];
            *t.at3_mut(y, x, 0) = match v {
                0 => 0.0,
                255 => 1.0,
                other => {
                    return Err(Error::data(format!(
                        "{}: mask pixel value {other} not in {{0,255}}",
                        path.display()
                    )))
                }
            };
        }
    }
    Ok(t)
}

/// Writes one split directory: `images/`, `masks/`, `meta.jsonl`.
pub fn write_split(dir: &Path, samples: &[SceneSample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut meta = String::new();
    for s in samples {
        save_image_png(&dir.join("images").join(format!("{}.png", s.sample_id)), &s.image)?;
        save_mask_png(&dir.join("masks").join(format!("{}.png", s.sample_id)), &s.mask)?;
        let rec = MetaRecord {
            sample_id: s.sample_id.clone(),
            expression: s.expression.clone(),
            tokens: s.tokens.clone(),
            kind: s.target.kind,
            color: s.target.color,
            size_class: s.target.size_class,
            cx: s.target.cx,
            cy: s.target.cy,
        };
        meta.push_str(&serde_json::to_string(&rec).expect("meta record serializes"));
        meta.push('\n');
    }
    std::fs::write(dir.join("meta.jsonl"), meta)?;
    Ok(())
}

/// Loads one split and validates every sample.
pub fn load_split(dir: &Path, vocab: &Vocab, max_tokens: usize) -> Result<Vec<SceneSample>> {
    let meta_path = dir.join("meta.jsonl");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| {
        Error::data(format!("cannot read {}: {e}", meta_path.display()))
    })?;
    let mut samples = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetaRecord = serde_json::from_str(line).map_err(|e| {
            Error::data(format!(
                "{} line {}: bad metadata record: {e}",
                meta_path.display(),
                lineno + 1
            ))
        })?;
        if !seen.insert(rec.sample_id.clone()) {
            return Err(Error::data(format!(
                "duplicate sample_id {} in {}",
                rec.sample_id,
                meta_path.display()
            )));
        }
        let image = load_image_png(&dir.join("images").join(format!("{}.png", rec.sample_id)))?;
        let mask = load_mask_png(&dir.join("masks").join(format!("{}.png", rec.sample_id)))?;
        let sample = SceneSample {
            sample_id: rec.sample_id,
            image,
            mask,
            tokens: rec.tokens,
            expression: rec.expression,
            target: ShapeSpec {
                kind: rec.kind,
                color: rec.color,
                size_class: rec.size_class,
                cx: rec.cx,
                cy: rec.cy,
            },
        };
        sample.validate(vocab, max_tokens)?;
        samples.push(sample);
    }
    Ok(samples)
}
