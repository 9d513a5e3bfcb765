//! Run configuration.
//!
//! One `Config` drives the whole pipeline: corpus generation, retrieval,
//! model construction, training and evaluation. It round-trips through a
//! human-readable TOML file; the CLI layers `--flag` overrides on top.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Square input image size (H = W).
    pub image_size: usize,
    /// Spatial resolution of pyramid levels 1..5. Levels 3..5 share the
    /// low-resolution grid; level 2 sits at exactly twice that grid.
    pub level_resolutions: [usize; 5],
    /// Channel width of pyramid levels 1..5.
    pub level_channels: [usize; 5],
    /// Word embedding width inside the language encoder.
    pub lang_embed_width: usize,
    /// Language feature width d_s (recurrent hidden size and output width).
    pub lang_feature_width: usize,
    /// Multimodal feature width d_m.
    pub multimodal_width: usize,
    /// Maximum token sequence length.
    pub max_tokens: usize,
    /// Retrieval shortlist size (stage-1 candidates by text similarity).
    pub shortlist_k: usize,
    /// Base learning rate.
    pub learning_rate: f64,
    /// Polynomial learning-rate decay power.
    pub poly_power: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    /// Total training iterations T (batch size is 1 throughout).
    pub max_iterations: usize,
    /// Foreground probability threshold for mask binarization.
    pub threshold: f64,
    /// Seed for every stochastic component.
    pub seed: u64,

    // Synthetic corpus settings.
    pub n_train: usize,
    pub n_val: usize,
    pub n_pool: usize,
    /// Fraction of train samples that get a planted relative in the pool
    /// (a pool scene whose referent shares the train referent's kind+color).
    pub planted_fraction: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            image_size: 64,
            level_resolutions: [32, 16, 8, 8, 8],
            level_channels: [16, 32, 64, 64, 64],
            lang_embed_width: 32,
            lang_feature_width: 64,
            multimodal_width: 64,
            max_tokens: 12,
            shortlist_k: 20,
            learning_rate: 0.00025,
            poly_power: 0.9,
            weight_decay: 0.0005,
            max_iterations: 2000,
            threshold: 0.5,
            seed: 7,
            n_train: 20,
            n_val: 10,
            // With shortlist_k fixed at 20, the pool must be an order of
            // magnitude larger or the text stage barely filters and image
            // retrieval degenerates into background matching.
            n_pool: 200,
            planted_fraction: 1.0,
            min_objects: 2,
            max_objects: 3,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::config(format!(
                "image_size must be a multiple of 8, got {}",
                self.image_size
            )));
        }
        let r = &self.level_resolutions;
        if !(r[2] == r[3] && r[3] == r[4]) {
            return Err(Error::config(format!(
                "levels 3..5 must share one resolution, got {:?}",
                r
            )));
        }
        if r[1] != 2 * r[2] {
            return Err(Error::config(format!(
                "level 2 resolution must be exactly 2x the level-3 resolution, got {} vs {}",
                r[1], r[2]
            )));
        }
        if r[0] != 2 * r[1] {
            return Err(Error::config(format!(
                "level 1 resolution must be exactly 2x the level-2 resolution, got {} vs {}",
                r[0], r[1]
            )));
        }
        if r[0] * 2 != self.image_size {
            return Err(Error::config(format!(
                "level 1 resolution {} must be image_size/2 = {}",
                r[0],
                self.image_size / 2
            )));
        }
        if self.multimodal_width % 4 != 0 {
            return Err(Error::config(format!(
                "multimodal_width must be divisible by 4 (pixel shuffle by 2), got {}",
                self.multimodal_width
            )));
        }
        if self.multimodal_width == 0 || self.lang_feature_width == 0 || self.lang_embed_width == 0
        {
            return Err(Error::config("feature widths must be positive"));
        }
        if self.level_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("level channel widths must be positive"));
        }
        if self.shortlist_k < 1 {
            return Err(Error::config("shortlist_k must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::config("max_tokens must be positive"));
        }
        if self.min_objects < 2 || self.max_objects > 5 || self.min_objects > self.max_objects {
            return Err(Error::config(format!(
                "object count range [{}, {}] must satisfy 2 <= min <= max <= 5",
                self.min_objects, self.max_objects
            )));
        }
        if !(0.0..=1.0).contains(&self.planted_fraction) {
            return Err(Error::config("planted_fraction must lie in [0,1]"));
        }
        Ok(())
    }

    /// Low-resolution grid size shared by levels 3..5.
    pub fn lr_size(&self) -> usize {
        self.level_resolutions[2]
    }

    /// High-resolution grid size of level 2.
    pub fn hr_size(&self) -> usize {
        self.level_resolutions[1]
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Config> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::config(format!("bad config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Config::from_toml(&text)
    }
}
