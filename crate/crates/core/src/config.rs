//! Run configuration as a flat `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored; unknown keys are
//! errors. [`RunConfig::to_text`] writes every key in a fixed order, so a
//! parsed canonical file re-serializes byte for byte.
//!
//! ```
//! use geomattn::config::{Preset, RunConfig};
//!
//! let cfg = RunConfig::parse("preset = gb+gfb\nlr = 0.001\n").unwrap();
//! assert_eq!(cfg.preset, Preset::GbGfb);
//! assert_eq!(cfg.effective_weights().slb, 0.0);
//! let text = cfg.to_text();
//! assert_eq!(RunConfig::parse(&text).unwrap().to_text(), text);
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::heads::LossWeights;
use crate::model::{AttentionKind, ModelConfig};
use crate::params::{AdamConfig, StepSchedule};

/// Which branches train and feed the embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Global branch only.
    Gb,
    /// Global branch plus the attention branch, no rotation objective.
    GbGfb,
    /// All three branches.
    Full,
    /// Two plain branches: the second branch sees uniform attention.
    GbR18,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Gb => "gb",
            Preset::GbGfb => "gb+gfb",
            Preset::Full => "full",
            Preset::GbR18 => "gb+r18",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gb" => Ok(Preset::Gb),
            "gb+gfb" => Ok(Preset::GbGfb),
            "full" => Ok(Preset::Full),
            "gb+r18" => Ok(Preset::GbR18),
            _ => Err(Error::format("config", format!("unknown preset {s:?} (gb, gb+gfb, full, gb+r18)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationMode {
    /// One random rotation per image.
    Single,
    /// All four rotations of every image.
    AllFour,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: String,
    pub preset: Preset,
    pub side: usize,
    pub widths: [usize; 3],
    pub k: usize,
    pub weights: LossWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub milestones: Vec<usize>,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub p: usize,
    pub k_img: usize,
    pub rotation: RotationMode,
    pub pad: usize,
    pub flip_p: f64,
    pub erase_p: f64,
    pub erase_area_min: f64,
    pub erase_area_max: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            preset: Preset::Full,
            side: 64,
            widths: [16, 32, 64],
            k: 3,
            weights: LossWeights::default(),
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 5e-4,
            lr_decay: 0.1,
            milestones: vec![20, 40, 60],
            epochs: 80,
            max_steps: 0,
            p: 4,
            k_img: 4,
            rotation: RotationMode::Single,
            pad: 4,
            flip_p: 0.5,
            erase_p: 0.5,
            erase_area_min: 0.02,
            erase_area_max: 0.2,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

fn list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::format("config", format!("{key}: bad list entry {s:?}")))
        })
        .collect()
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::format("config", format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    /// `(key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w = &self.weights;
        vec![
            ("data", self.data.clone()),
            ("preset", self.preset.to_string()),
            ("seed", self.seed.to_string()),
            ("side", self.side.to_string()),
            ("widths", list(&self.widths)),
            ("k", self.k.to_string()),
            ("lambda_tri_gb", w.tri_gb.to_string()),
            ("lambda_sce_gb", w.sce_gb.to_string()),
            ("lambda_tri_gfb", w.tri_gfb.to_string()),
            ("lambda_sce_gfb", w.sce_gfb.to_string()),
            ("lambda_slb", w.slb.to_string()),
            ("margin", w.margin.to_string()),
            ("smoothing", w.smoothing_eps.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("milestones", list(&self.milestones)),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("p", self.p.to_string()),
            ("k_img", self.k_img.to_string()),
            (
                "rotation",
                match self.rotation {
                    RotationMode::Single => "single",
                    RotationMode::AllFour => "all-four",
                }
                .into(),
            ),
            ("pad", self.pad.to_string()),
            ("flip_p", self.flip_p.to_string()),
            ("erase_p", self.erase_p.to_string()),
            ("erase_area_min", self.erase_area_min.to_string()),
            ("erase_area_max", self.erase_area_max.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.weights;
        match key {
            "data" => self.data = v.to_string(),
            "preset" => self.preset = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "side" => self.side = num(key, v)?,
            "widths" => {
                let l = parse_list(key, v)?;
                self.widths = l
                    .try_into()
                    .map_err(|_| Error::format("config", "widths: expected three comma-separated values"))?;
            }
            "k" => self.k = num(key, v)?,
            "lambda_tri_gb" => w.tri_gb = num(key, v)?,
            "lambda_sce_gb" => w.sce_gb = num(key, v)?,
            "lambda_tri_gfb" => w.tri_gfb = num(key, v)?,
            "lambda_sce_gfb" => w.sce_gfb = num(key, v)?,
            "lambda_slb" => w.slb = num(key, v)?,
            "margin" => w.margin = num(key, v)?,
            "smoothing" => w.smoothing_eps = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "adam_eps" => self.adam_eps = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "lr_decay" => self.lr_decay = num(key, v)?,
            "milestones" => self.milestones = parse_list(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "max_steps" => self.max_steps = num(key, v)?,
            "p" => self.p = num(key, v)?,
            "k_img" => self.k_img = num(key, v)?,
            "rotation" => {
                self.rotation = match v {
                    "single" => RotationMode::Single,
                    "all-four" => RotationMode::AllFour,
                    _ => return Err(Error::format("config", format!("rotation: {v:?} is not single or all-four"))),
                }
            }
            "pad" => self.pad = num(key, v)?,
            "flip_p" => self.flip_p = num(key, v)?,
            "erase_p" => self.erase_p = num(key, v)?,
            "erase_area_min" => self.erase_area_min = num(key, v)?,
            "erase_area_max" => self.erase_area_max = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            _ => return Err(Error::format("config", format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.model_config(2).validate()?;
        let bad = |d: String| Err(Error::invalid("config", d));
        if !(self.lr > 0.0) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if self.p < 2 || self.k_img < 2 {
            return bad(format!("p = {} and k_img = {} must be at least 2", self.p, self.k_img));
        }
        for (name, v) in [("flip_p", self.flip_p), ("erase_p", self.erase_p)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(0.0 < self.erase_area_min && self.erase_area_min <= self.erase_area_max && self.erase_area_max < 1.0) {
            return bad(format!(
                "erase area range [{}, {}] must satisfy 0 < min <= max < 1",
                self.erase_area_min, self.erase_area_max
            ));
        }
        Ok(())
    }

    /// Loss weights after the preset switches branches off.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        match self.preset {
            Preset::Full => {}
            Preset::GbGfb | Preset::GbR18 => w.slb = 0.0,
            Preset::Gb => {
                w.slb = 0.0;
                w.tri_gfb = 0.0;
                w.sce_gfb = 0.0;
            }
        }
        w
    }

    pub fn model_config(&self, n_ids: usize) -> ModelConfig {
        ModelConfig {
            side: self.side,
            in_channels: 3,
            widths: self.widths,
            k: self.k,
            n_ids,
            attention: match self.preset {
                Preset::Gb | Preset::GbR18 => AttentionKind::Uniform,
                Preset::GbGfb | Preset::Full => AttentionKind::Iam,
            },
            gfb: self.preset != Preset::Gb,
            seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base: self.lr,
            factor: self.lr_decay,
            milestones: self.milestones.clone(),
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            pad: self.pad,
            crop_p: if self.pad > 0 { 1.0 } else { 0.0 },
            flip_p: self.flip_p,
            erase_p: self.erase_p,
            erase_area: (self.erase_area_min, self.erase_area_max),
            ..AugmentConfig::default()
        }
    }
}
