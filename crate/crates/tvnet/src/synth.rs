//! Synthetic corpus: colored geometric shapes on a noisy gradient background,
//! each paired with a templated referring expression.
//!
//! Expressions come from a closed grammar with a rule-based resolver, so the
//! referent of every generated expression is recoverable exactly. Scenes are
//! drawn back to front; stored masks keep only the pixels that survive
//! occlusion, and size classes are computed from those visible pixels.

use crate::config::Config;
use crate::data::{
    write_split, Color, Kind, SceneSample, ShapeSpec, SizeClass, Vocab,
};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng, Stream};
use crate::tensor::Tensor;
use rand::Rng as _;
use std::fmt;
use std::path::Path;

/// Objects keep at least this many visible pixels and this share of their
/// full silhouette; scenes violating it are redrawn.
const MIN_VISIBLE_PX: usize = 25;
const MIN_VISIBLE_SHARE: f64 = 0.25;
const SCENE_TRIES: usize = 200;
const EXPR_TRIES: usize = 50;

fn base_color(c: Color) -> [f32; 3] {
    match c {
        Color::Red => [0.85, 0.12, 0.12],
        Color::Green => [0.12, 0.72, 0.18],
        Color::Blue => [0.15, 0.25, 0.85],
        Color::Yellow => [0.90, 0.82, 0.12],
    }
}

/// Area-fraction sampling ranges per intended bucket. They sit inside the
/// class boundaries, but the final class is whatever the visible area says.
const FRAC_RANGES: [(f64, f64); 3] = [(0.020, 0.045), (0.055, 0.095), (0.105, 0.160)];

#[derive(Clone, Debug)]
struct Geometry {
    kind: Kind,
    color: Color,
    cx: f64,
    cy: f64,
    /// circle: radius; square: half side; triangle: half base.
    a: f64,
}

impl Geometry {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        match self.kind {
            Kind::Circle => dx * dx + dy * dy <= self.a * self.a,
            Kind::Square => dx.abs() <= self.a && dy.abs() <= self.a,
            Kind::Triangle => {
                // up-pointing isoceles, height 1.8 * half-base
                let h = 1.8 * self.a;
                let top = self.cy - h / 2.0;
                if py < top || py > self.cy + h / 2.0 {
                    return false;
                }
                dx.abs() <= self.a * (py - top) / h
            }
        }
    }

    fn rasterize(&self, size: usize) -> Vec<bool> {
        let mut m = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                m[y * size + x] = self.contains(x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        m
    }
}

fn sample_geometry(rng: &mut Rng, size: usize, forced: Option<&ShapeSpec>) -> Geometry {
    let kind = Kind::ALL[rng.gen_range(0..Kind::ALL.len())];
    let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
    let (kind, color) = forced.map_or((kind, color), |f| (f.kind, f.color));
    let bucket = match forced {
        Some(f) => match f.size_class {
            SizeClass::Small => 0,
            SizeClass::Medium => 1,
            SizeClass::Big => 2,
        },
        None => rng.gen_range(0..3),
    };
    let (lo, hi) = FRAC_RANGES[bucket];
    let frac = rng.gen_range(lo..hi);
    let area = frac * (size * size) as f64;
    // `a` is the parameter above; (half_w, half_h) bound the silhouette.
    let (a, half_w, half_h) = match kind {
        Kind::Circle => {
            let r = (area / std::f64::consts::PI).sqrt();
            (r, r, r)
        }
        Kind::Square => {
            let half = area.sqrt() / 2.0;
            (half, half, half)
        }
        Kind::Triangle => {
            // area = half_base * height = hb * 1.8 hb
            let hb = (area / 1.8).sqrt();
            (hb, hb, 0.9 * hb)
        }
    };
    let s = size as f64;
    let (cx, cy) = match forced {
        // Keep the relative near the original's location, jittered so the
        // planted scene is a variation rather than a copy.
        Some(f) => {
            let j = s / 16.0;
            (
                (f.cx + rng.gen_range(-j..j)).clamp(half_w + 1.0, s - half_w - 1.0),
                (f.cy + rng.gen_range(-j..j)).clamp(half_h + 1.0, s - half_h - 1.0),
            )
        }
        None => (
            rng.gen_range(half_w + 1.0..s - half_w - 1.0),
            rng.gen_range(half_h + 1.0..s - half_h - 1.0),
        ),
    };
    Geometry { kind, color, cx, cy, a }
}

/// A generated scene: composed image plus per-object spec and visible mask.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Tensor<f32>,
    pub specs: Vec<ShapeSpec>,
    /// `[size, size, 1]` visible masks, same order as `specs`.
    pub masks: Vec<Tensor<f32>>,
}

pub fn generate_scene(rng: &mut Rng, size: usize, n_objects: usize) -> Result<Scene> {
    generate_scene_with(rng, size, n_objects, None)
}

/// Like `generate_scene`, but forces the last-drawn (fully visible) object
/// to resemble the given spec (same kind, color, and size class, nearby
/// position); used to plant retrieval relatives.
pub fn generate_scene_with(
    rng: &mut Rng,
    size: usize,
    n_objects: usize,
    plant: Option<&ShapeSpec>,
) -> Result<Scene> {
    assert!((2..=5).contains(&n_objects), "n_objects must be in 2..=5");
    'attempt: for _ in 0..SCENE_TRIES {
        // Fixed gradient palette: the background must stay low-amplitude
        // across the whole corpus, not just within one image, or global
        // color statistics are dominated by the backdrop and image
        // retrieval stops seeing the shapes. Direction and per-pixel noise
        // still vary, so backdrops remain cluttered without being salient.
        let bg0: [f64; 3] = [0.34, 0.38, 0.42];
        let bg1: [f64; 3] = [0.46, 0.42, 0.38];
        let dir = rng.gen_range(0..3);

        let geoms: Vec<Geometry> = (0..n_objects)
            .map(|i| {
                let forced = if i == n_objects - 1 { plant } else { None };
                sample_geometry(rng, size, forced)
            })
            .collect();

        let full: Vec<Vec<bool>> = geoms.iter().map(|g| g.rasterize(size)).collect();
        let mut visible = full.clone();
        for i in 0..n_objects {
            for later in full.iter().skip(i + 1) {
                for (v, &occ) in visible[i].iter_mut().zip(later) {
                    if occ {
                        *v = false;
                    }
                }
            }
        }
        for i in 0..n_objects {
            let full_n = full[i].iter().filter(|&&b| b).count();
            let vis_n = visible[i].iter().filter(|&&b| b).count();
            if full_n == 0
                || vis_n < MIN_VISIBLE_PX
                || (vis_n as f64) < MIN_VISIBLE_SHARE * full_n as f64
            {
                continue 'attempt;
            }
        }

        // Compose: gradient + noise background, shapes painted back to front.
        let mut image = Tensor::zeros(&[size, size, 3]);
        let denom = (size - 1) as f64;
        for y in 0..size {
            for x in 0..size {
                let t = match dir {
                    0 => x as f64 / denom,
                    1 => y as f64 / denom,
                    _ => (x + y) as f64 / (2.0 * denom),
                };
                for c in 0..3 {
                    let v = bg0[c] + (bg1[c] - bg0[c]) * t + rng.gen_range(-0.07..0.07);
                    *image.at3_mut(y, x, c) = v as f32;
                }
            }
        }
        for (g, f) in geoms.iter().zip(&full) {
            let base = base_color(g.color);
            let jitter: [f64; 3] = [
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
            ];
            for y in 0..size {
                for x in 0..size {
                    if f[y * size + x] {
                        for c in 0..3 {
                            let v = base[c] as f64 + jitter[c] + rng.gen_range(-0.03..0.03);
                            *image.at3_mut(y, x, c) = v as f32;
                        }
                    }
                }
            }
        }
        // clamp and snap to the 8-bit grid so disk round-trips are exact
        for v in image.data_mut() {
            *v = ((v.clamp(0.0, 1.0) * 255.0).round()) / 255.0;
        }

        let mut specs = Vec::with_capacity(n_objects);
        let mut masks = Vec::with_capacity(n_objects);
        for (g, vis) in geoms.iter().zip(&visible) {
            let vis_n = vis.iter().filter(|&&b| b).count();
            let frac = vis_n as f64 / (size * size) as f64;
            specs.push(ShapeSpec {
                kind: g.kind,
                color: g.color,
                size_class: SizeClass::from_fraction(frac),
                cx: g.cx,
                cy: g.cy,
            });
            let data = vis.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            masks.push(Tensor::from_vec(&[size, size, 1], data));
        }
        return Ok(Scene { image, specs, masks });
    }
    Err(Error::Synth(format!(
        "no valid {n_objects}-object scene after {SCENE_TRIES} attempts"
    )))
}

// --- expression grammar ---------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sup {
    Leftmost,
    Rightmost,
    Topmost,
    Bottommost,
}

impl Sup {
    pub const ALL: &'static [Sup] = &[Sup::Leftmost, Sup::Rightmost, Sup::Topmost, Sup::Bottommost];

    fn as_str(self) -> &'static str {
        match self {
            Sup::Leftmost => "leftmost",
            Sup::Rightmost => "rightmost",
            Sup::Topmost => "topmost",
            Sup::Bottommost => "bottommost",
        }
    }

    fn from_str(s: &str) -> Option<Sup> {
        Sup::ALL.iter().copied().find(|v| v.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rel {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Rel {
    pub const ALL: &'static [Rel] = &[Rel::LeftOf, Rel::RightOf, Rel::Above, Rel::Below];

    fn words(self) -> &'static [&'static str] {
        match self {
            Rel::LeftOf => &["left", "of"],
            Rel::RightOf => &["right", "of"],
            Rel::Above => &["above"],
            Rel::Below => &["below"],
        }
    }

    fn holds(self, s: &ShapeSpec, anchor: &ShapeSpec) -> bool {
        match self {
            Rel::LeftOf => s.cx < anchor.cx,
            Rel::RightOf => s.cx > anchor.cx,
            Rel::Above => s.cy < anchor.cy,
            Rel::Below => s.cy > anchor.cy,
        }
    }
}

/// "the [size] [color] kind" with optional attributes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttrPhrase {
    pub size: Option<SizeClass>,
    pub color: Option<Color>,
    pub kind: Kind,
}

impl AttrPhrase {
    fn matches(&self, s: &ShapeSpec) -> bool {
        s.kind == self.kind
            && self.size.map_or(true, |z| z == s.size_class)
            && self.color.map_or(true, |c| c == s.color)
    }

    fn push_words(&self, out: &mut Vec<&'static str>) {
        out.push("the");
        if let Some(z) = self.size {
            out.push(z.as_str());
        }
        if let Some(c) = self.color {
            out.push(c.as_str());
        }
        out.push(self.kind.as_str());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParsedExpr {
    Plain(AttrPhrase),
    Superlative(Sup, AttrPhrase),
    Relational(AttrPhrase, Rel, AttrPhrase),
}

impl ParsedExpr {
    pub fn words(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        match self {
            ParsedExpr::Plain(p) => p.push_words(&mut out),
            ParsedExpr::Superlative(sup, p) => {
                out.push("the");
                out.push(sup.as_str());
                if let Some(z) = p.size {
                    out.push(z.as_str());
                }
                if let Some(c) = p.color {
                    out.push(c.as_str());
                }
                out.push(p.kind.as_str());
            }
            ParsedExpr::Relational(p, rel, anchor) => {
                p.push_words(&mut out);
                out.extend_from_slice(rel.words());
                anchor.push_words(&mut out);
            }
        }
        out
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }

    pub fn tokens(&self, vocab: &Vocab) -> Vec<usize> {
        self.words().iter().map(|w| vocab.id(w)).collect()
    }
}

impl fmt::Display for ParsedExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

struct TokenCursor<'a> {
    words: Vec<&'static str>,
    pos: usize,
    text: &'a str,
}

impl<'a> TokenCursor<'a> {
    fn peek(&self) -> Option<&'static str> {
        self.words.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<&'static str> {
        let w = self.peek();
        if w.is_some() {
            self.pos += 1;
        }
        w
    }

    fn expect(&mut self, w: &str) -> Result<()> {
        match self.next() {
            Some(got) if got == w => Ok(()),
            got => Err(Error::Synth(format!(
                "cannot parse '{}': expected '{w}', got {:?}",
                self.text, got
            ))),
        }
    }

    fn attr_phrase(&mut self) -> Result<AttrPhrase> {
        self.expect("the")?;
        self.attr_tail()
    }

    fn attr_tail(&mut self) -> Result<AttrPhrase> {
        let mut size = None;
        if let Some(w) = self.peek() {
            if let Some(z) = SizeClass::from_str(w) {
                size = Some(z);
                self.pos += 1;
            }
        }
        let mut color = None;
        if let Some(w) = self.peek() {
            if let Some(c) = Color::from_str(w) {
                color = Some(c);
                self.pos += 1;
            }
        }
        match self.next().and_then(Kind::from_str) {
            Some(kind) => Ok(AttrPhrase { size, color, kind }),
            None => Err(Error::Synth(format!(
                "cannot parse '{}': expected a shape kind",
                self.text
            ))),
        }
    }
}

/// Parses a token sequence back into the grammar. Padding tokens are ignored.
pub fn parse_expression(tokens: &[usize], vocab: &Vocab) -> Result<ParsedExpr> {
    let words: Vec<&'static str> = tokens
        .iter()
        .filter(|&&t| t != crate::data::PAD)
        .map(|&t| vocab.word(t))
        .collect();
    let text = words.join(" ");
    let mut cur = TokenCursor {
        words,
        pos: 0,
        text: &text,
    };
    cur.expect("the")?;
    let sup = cur.peek().and_then(Sup::from_str);
    if sup.is_some() {
        cur.pos += 1;
    }
    let head = cur.attr_tail()?;
    if let Some(sup) = sup {
        return match cur.peek() {
            None => Ok(ParsedExpr::Superlative(sup, head)),
            Some(w) => Err(Error::Synth(format!(
                "cannot parse '{text}': unexpected '{w}' after superlative phrase"
            ))),
        };
    }
    let rel = match cur.next() {
        None => return Ok(ParsedExpr::Plain(head)),
        Some("left") => {
            cur.expect("of")?;
            Rel::LeftOf
        }
        Some("right") => {
            cur.expect("of")?;
            Rel::RightOf
        }
        Some("above") => Rel::Above,
        Some("below") => Rel::Below,
        Some(w) => {
            return Err(Error::Synth(format!(
                "cannot parse '{text}': unexpected '{w}' after head phrase"
            )))
        }
    };
    let anchor = cur.attr_phrase()?;
    match cur.peek() {
        None => Ok(ParsedExpr::Relational(head, rel, anchor)),
        Some(w) => Err(Error::Synth(format!(
            "cannot parse '{text}': trailing '{w}'"
        ))),
    }
}

/// Returns the index of the unique object the expression denotes, or None
/// when it matches zero or several objects.
pub fn resolve(expr: &ParsedExpr, shapes: &[ShapeSpec]) -> Option<usize> {
    match expr {
        ParsedExpr::Plain(p) => {
            let mut found = None;
            for (i, s) in shapes.iter().enumerate() {
                if p.matches(s) {
                    if found.is_some() {
                        return None;
                    }
                    found = Some(i);
                }
            }
            found
        }
        ParsedExpr::Superlative(sup, p) => {
            let key = |s: &ShapeSpec| match sup {
                Sup::Leftmost => s.cx,
                Sup::Rightmost => -s.cx,
                Sup::Topmost => s.cy,
                Sup::Bottommost => -s.cy,
            };
            let mut best: Option<(usize, f64)> = None;
            let mut tied = false;
            for (i, s) in shapes.iter().enumerate() {
                if !p.matches(s) {
                    continue;
                }
                let k = key(s);
                match best {
                    None => best = Some((i, k)),
                    Some((_, bk)) if k < bk => {
                        best = Some((i, k));
                        tied = false;
                    }
                    Some((_, bk)) if k == bk => tied = true,
                    _ => {}
                }
            }
            match (best, tied) {
                (Some((i, _)), false) => Some(i),
                _ => None,
            }
        }
        ParsedExpr::Relational(p, rel, pa) => {
            let mut anchor = None;
            for (i, s) in shapes.iter().enumerate() {
                if pa.matches(s) {
                    if anchor.is_some() {
                        return None;
                    }
                    anchor = Some(i);
                }
            }
            let ai = anchor?;
            let a = &shapes[ai];
            let mut found = None;
            for (i, s) in shapes.iter().enumerate() {
                if i == ai || !p.matches(s) || !rel.holds(s, a) {
                    continue;
                }
                if found.is_some() {
                    return None;
                }
                found = Some(i);
            }
            found
        }
    }
}

// Color is always spoken. Referring expressions over-specify in practice,
// and a color-blind expression starves text retrieval of its best signal.
fn attr_combos(s: &ShapeSpec) -> [AttrPhrase; 2] {
    let k = s.kind;
    [
        AttrPhrase { size: None, color: Some(s.color), kind: k },
        AttrPhrase { size: Some(s.size_class), color: Some(s.color), kind: k },
    ]
}

/// Picks an expression uniquely denoting `shapes[target]`, preferring the
/// simplest form that works: attributes alone, then a superlative, then a
/// relation to a uniquely-describable anchor. Within the winning form the
/// choice among valid candidates is uniform.
pub fn expression_for(
    shapes: &[ShapeSpec],
    target: usize,
    rng: &mut Rng,
) -> Result<ParsedExpr> {
    let t = &shapes[target];
    let tiers: [Vec<ParsedExpr>; 3] = [
        attr_combos(t).iter().map(|p| ParsedExpr::Plain(*p)).collect(),
        Sup::ALL
            .iter()
            .flat_map(|&sup| {
                attr_combos(t)
                    .into_iter()
                    .map(move |p| ParsedExpr::Superlative(sup, p))
            })
            .collect(),
        Rel::ALL
            .iter()
            .flat_map(|&rel| {
                shapes
                    .iter()
                    .enumerate()
                    .filter(move |&(j, _)| j != target)
                    .flat_map(move |(_, anchor)| {
                        attr_combos(anchor).into_iter().map(move |pa| (rel, pa))
                    })
            })
            .flat_map(|(rel, pa)| {
                attr_combos(t)
                    .into_iter()
                    .map(move |p| ParsedExpr::Relational(p, rel, pa))
            })
            .collect(),
    ];
    for tier in &tiers {
        let valid: Vec<&ParsedExpr> = tier
            .iter()
            .filter(|e| resolve(e, shapes) == Some(target))
            .collect();
        if !valid.is_empty() {
            return Ok(valid[rng.gen_range(0..valid.len())].clone());
        }
    }
    Err(Error::Synth(
        "no unambiguous expression exists for the target".to_string(),
    ))
}

/// Spec-facing wrapper: the target is listed first, distractors after.
pub fn generate_expression(
    target: &ShapeSpec,
    distractors: &[ShapeSpec],
    rng: &mut Rng,
) -> Result<ParsedExpr> {
    let mut shapes = Vec::with_capacity(1 + distractors.len());
    shapes.push(*target);
    shapes.extend_from_slice(distractors);
    expression_for(&shapes, 0, rng)
}

// --- corpus ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusCounts {
    pub train: usize,
    pub val: usize,
    pub pool: usize,
    pub planted: usize,
}

/// Stream indices keep the three splits on independent substreams. Sample
/// `i` of a split draws from `substream(seed, Corpus, split_base + i)`, so
/// any sample can be regenerated in isolation.
pub fn split_base(split: &str) -> u64 {
    match split {
        "train" => 0,
        "val" => 10_000,
        _ => 20_000,
    }
}

/// Draws scenes until one admits an unambiguous expression for the target.
/// The target is random, except in planted samples where it is the planted
/// object itself, so the sample's expression names the planted kind and
/// color and text retrieval can find the relative. Returns the sample
/// together with its full scene so callers can inspect the distractors.
pub fn make_sample(
    cfg: &Config,
    sample_id: String,
    rng: &mut Rng,
    plant: Option<&ShapeSpec>,
) -> Result<(SceneSample, Scene, usize)> {
    let vocab = Vocab::standard();
    for _ in 0..EXPR_TRIES {
        let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let scene = generate_scene_with(rng, cfg.image_size, n, plant)?;
        let target = if plant.is_some() { n - 1 } else { rng.gen_range(0..n) };
        let expr = match expression_for(&scene.specs, target, rng) {
            Ok(e) => e,
            Err(_) => continue,
        };
        let sample = SceneSample {
            sample_id,
            image: scene.image.clone(),
            mask: scene.masks[target].clone(),
            tokens: expr.tokens(vocab),
            expression: expr.text(),
            target: scene.specs[target],
        };
        sample.validate(vocab, cfg.max_tokens)?;
        return Ok((sample, scene, target));
    }
    Err(Error::Synth(format!(
        "{sample_id}: no describable scene after {EXPR_TRIES} attempts"
    )))
}

pub fn generate_split(cfg: &Config, split: &str, n: usize) -> Result<Vec<SceneSample>> {
    generate_split_planted(cfg, split, n, &[])
}

/// `plants[i]`, when present, forces sample `i` to contain a relative of the
/// given referent spec.
fn generate_split_planted(
    cfg: &Config,
    split: &str,
    n: usize,
    plants: &[Option<ShapeSpec>],
) -> Result<Vec<SceneSample>> {
    let base = split_base(split);
    (0..n)
        .map(|i| {
            let mut rng = substream(cfg.seed, Stream::Corpus, base + i as u64);
            let plant = plants.get(i).and_then(|p| p.as_ref());
            make_sample(cfg, format!("{split}_{i:04}"), &mut rng, plant).map(|(s, _, _)| s)
        })
        .collect()
}

/// How many pool samples carry a planted relative: the configured fraction
/// of the train split, capped by both split sizes. Pool sample `j` relates
/// to train sample `j` for `j < planted_count`.
pub fn planted_count(cfg: &Config) -> usize {
    ((cfg.planted_fraction * cfg.n_train as f64).round() as usize)
        .min(cfg.n_train)
        .min(cfg.n_pool)
}

/// Generates train/val/pool splits and writes them under `root`. For the
/// configured fraction of train samples, the same-index pool sample is
/// forced to contain a relative of the train referent: same kind, color,
/// and size class, at a nearby position.
pub fn build_corpus(cfg: &Config, root: &Path) -> Result<CorpusCounts> {
    if cfg.n_train < 1 || cfg.n_val < 1 || cfg.n_pool < 1 {
        return Err(Error::config("corpus split sizes must be at least 1"));
    }
    let train = generate_split(cfg, "train", cfg.n_train)?;
    let val = generate_split(cfg, "val", cfg.n_val)?;

    let planted = planted_count(cfg);
    let plants: Vec<Option<ShapeSpec>> = (0..cfg.n_pool)
        .map(|j| (j < planted).then(|| train[j].target))
        .collect();
    let pool = generate_split_planted(cfg, "pool", cfg.n_pool, &plants)?;

    write_split(&root.join("train"), &train)?;
    write_split(&root.join("val"), &val)?;
    write_split(&root.join("pool"), &pool)?;
    Ok(CorpusCounts {
        train: train.len(),
        val: val.len(),
        pool: pool.len(),
        planted,
    })
}
