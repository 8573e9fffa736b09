//! `key = value` training configuration.
//!
//! Defaults are desk-scale choices. Learning-rate, warmup and weight-decay
//! values follow the usual self-distillation recipe since no exact values are
//! fixed elsewhere; every one of them can be overridden from the file.

use std::fmt::Write as _;
use std::path::Path;

use crate::augment::{AugmentConfig, PhotometricConfig};
use crate::error::{GtsaError, Result};
use crate::losses::{LossConfig, LossWeights};
use crate::model::ModelConfig;

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool);

/// `auto` or an explicit step count.
impl ConfigValue for Option<u64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            s.parse::<u64>().map(Some).map_err(|e| e.to_string())
        }
    }
    fn render(&self) -> String {
        match self {
            None => "auto".into(),
            Some(v) => v.to_string(),
        }
    }
}

macro_rules! train_config {
    ($( $(#[doc = $doc:literal])* $field:ident : $t:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq)]
        pub struct TrainConfig {
            $( $(#[doc = $doc])* pub $field: $t, )*
        }

        impl Default for TrainConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl TrainConfig {
            /// All keys in file order.
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$t as ConfigValue>::parse_value(value)
                            .map_err(|e| GtsaError::Config(format!("bad value {value:?} for {key}: {e}")))?;
                    } )*
                    _ => return Err(GtsaError::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in a fixed order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($field), ConfigValue::render(&self.$field)) ),*]
            }
        }
    };
}

train_config! {
    /// Global views per image.
    n_global: usize = 2,
    /// Local views per image.
    n_local: usize = 4,
    global_size: usize = 64,
    local_size: usize = 32,
    /// Side of the square the dataset images are standardized to.
    image_size: usize = 64,
    global_scale_min: f64 = 0.5,
    global_scale_max: f64 = 1.0,
    local_scale_min: f64 = 0.05,
    local_scale_max: f64 = 0.4,
    min_local_overlap: f64 = 0.25,
    rotate: bool = true,
    jitter_strength: f64 = 1.0,
    p_grayscale: f64 = 0.2,
    p_blur_global: f64 = 0.5,
    p_blur_local: f64 = 0.1,
    blur_sigma_min: f64 = 0.1,
    blur_sigma_max: f64 = 1.0,
    p_noise: f64 = 0.1,
    noise_sigma: f64 = 0.05,
    patch: usize = 8,
    dim: usize = 64,
    depth: usize = 2,
    heads: usize = 4,
    mlp_ratio: usize = 4,
    proj_blocks: usize = 2,
    pred_blocks: usize = 1,
    conv_kernel: usize = 3,
    encoder_norm: bool = true,
    /// Retained patch matches (clamped to the student patch count).
    top_k: usize = 16,
    /// Side of the pooled overlap grid.
    pooled_size: usize = 4,
    alpha: f64 = 0.5,
    beta: f64 = 0.5,
    use_pc: bool = true,
    use_rp: bool = true,
    /// Peak learning rate before batch scaling (`lr = base_lr * batch / 256`).
    base_lr: f64 = 5e-4,
    min_lr: f64 = 1e-6,
    weight_decay: f64 = 0.04,
    /// `auto` means 10% of the total steps.
    warmup_steps: Option<u64> = None,
    /// Global gradient norm cap; 0 disables clipping.
    max_grad_norm: f64 = 0.0,
    epochs: u64 = 100,
    /// Stops early after this many steps; 0 means no cap.
    max_steps: u64 = 0,
    batch_size: usize = 16,
    m0: f64 = 0.996,
    seed: u64 = 0,
    /// Write `epoch_NNNN.gtsa` every this many epochs; 0 only writes the final one.
    checkpoint_every: u64 = 0,
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| GtsaError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GtsaError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GtsaError::Config(m.to_string()));
        if self.n_global == 0 || self.n_local + self.n_global < 2 {
            return bad("need at least one global view and two views in total");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.top_k == 0 || self.pooled_size == 0 {
            return bad("top_k and pooled_size must be positive");
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.base_lr >= 0.0 && self.min_lr >= 0.0 && self.weight_decay >= 0.0 && self.max_grad_norm >= 0.0) {
            return bad("learning rates, weight decay and max_grad_norm must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.m0) {
            return bad("m0 must lie in [0, 1]");
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return bad("epochs and max_steps cannot both be 0");
        }
        let scale_ok = |lo: f64, hi: f64| 0.0 < lo && lo <= hi && hi <= 1.0;
        if !scale_ok(self.global_scale_min, self.global_scale_max) || !scale_ok(self.local_scale_min, self.local_scale_max) {
            return bad("crop scales must satisfy 0 < min <= max <= 1");
        }
        for size in [self.global_size, self.local_size] {
            if size == 0 || size % self.patch.max(1) != 0 {
                return bad(&format!("view size {size} is not a positive multiple of patch {}", self.patch));
            }
        }
        self.model().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            patch: self.patch,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            proj_blocks: self.proj_blocks,
            pred_blocks: self.pred_blocks,
            conv_kernel: self.conv_kernel,
            encoder_norm: self.encoder_norm,
        }
    }

    pub fn photometric(&self) -> PhotometricConfig {
        PhotometricConfig {
            jitter_strength: self.jitter_strength,
            p_grayscale: self.p_grayscale,
            p_blur_global: self.p_blur_global,
            p_blur_local: self.p_blur_local,
            blur_sigma_min: self.blur_sigma_min,
            blur_sigma_max: self.blur_sigma_max,
            p_noise: self.p_noise,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            n_global: self.n_global,
            n_local: self.n_local,
            global_size: self.global_size,
            local_size: self.local_size,
            global_scale: (self.global_scale_min, self.global_scale_max),
            local_scale: (self.local_scale_min, self.local_scale_max),
            min_local_overlap: self.min_local_overlap,
            rotate: self.rotate,
            photo: self.photometric(),
            ..AugmentConfig::default()
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
            },
            top_k: self.top_k,
            pooled: self.pooled_size,
            use_pc: self.use_pc,
            use_rp: self.use_rp,
        }
    }

    /// `base_lr * batch / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn steps_per_epoch(&self, n_images: usize) -> u64 {
        n_images.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n_images: usize) -> u64 {
        let full = self.epochs * self.steps_per_epoch(n_images);
        match (self.epochs, self.max_steps) {
            (0, cap) => cap,
            (_, 0) => full,
            (_, cap) => full.min(cap),
        }
    }

    pub fn warmup(&self, total_steps: u64) -> u64 {
        self.warmup_steps.unwrap_or(total_steps / 10).min(total_steps)
    }
}
