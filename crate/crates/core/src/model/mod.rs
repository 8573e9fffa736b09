//! Teacher/student networks: ViT encoder, convolutional projector and
//! predictor, rotation head, and EMA weight following.
//!
//! The student is `encoder → projector → predictor` plus a rotation head on
//! the pooled encoder output; the teacher is `encoder → projector` and is only
//! ever updated through [`ema_update`].

mod encoder;
mod heads;
pub mod layers;

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

pub use encoder::{sincos_positions, Block, Encoder, EncoderCache, Grid, Tokens};
pub use heads::{ConvBlock, ConvStack, ConvStackCache, RotHead, RotHeadCache, ROTATION_CLASSES};
pub use layers::{Array, LayerNorm, Linear, Params};

use crate::error::{GtsaError, Result};
use crate::geometry::FeatureMap;
use crate::numeric::{c, Real};
use crate::raster::FloatImage;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub proj_blocks: usize,
    pub pred_blocks: usize,
    pub conv_kernel: usize,
    /// Apply the final layer norm to encoder tokens.
    pub encoder_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            proj_blocks: 2,
            pred_blocks: 1,
            conv_kernel: 3,
            encoder_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GtsaError::InvalidArgument(m));
        if self.patch == 0 || self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("patch, dim, heads and mlp_ratio must be positive".into());
        }
        if !self.dim.is_multiple_of(4) {
            return bad(format!("dim {} must be divisible by 4 for 2-D sin-cos positions", self.dim));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        Ok(())
    }
}

/// Named network weights. Teachers carry no predictor and no rotation head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub projector: ConvStack<T>,
    pub predictor: Option<ConvStack<T>>,
    pub rot_head: Option<RotHead<T>>,
}

impl<T> Params<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array<T>)) {
        self.encoder.visit(&layers::join(prefix, "encoder"), f);
        self.projector.visit(&layers::join(prefix, "projector"), f);
        if let Some(p) = &self.predictor {
            p.visit(&layers::join(prefix, "predictor"), f);
        }
        if let Some(r) = &self.rot_head {
            r.visit(&layers::join(prefix, "rot_head"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array<T>)) {
        self.encoder.visit_mut(&layers::join(prefix, "encoder"), f);
        self.projector.visit_mut(&layers::join(prefix, "projector"), f);
        if let Some(p) = &mut self.predictor {
            p.visit_mut(&layers::join(prefix, "predictor"), f);
        }
        if let Some(r) = &mut self.rot_head {
            r.visit_mut(&layers::join(prefix, "rot_head"), f);
        }
    }
}

/// Unnormalized rotation class scores, `batch x 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationLogits<T> {
    pub batch: usize,
    pub data: Vec<T>,
}

impl<T: Real> RotationLogits<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * ROTATION_CLASSES..(i + 1) * ROTATION_CLASSES]
    }

    pub fn argmax(&self, i: usize) -> usize {
        let row = self.row(i);
        (0..ROTATION_CLASSES).fold(0, |best, j| if row[j] > row[best] { j } else { best })
    }
}

/// Student forward results with the caches its backward pass needs.
pub struct StudentPass<T> {
    pub encoded: Tokens<T>,
    pub projected: Tokens<T>,
    /// Predictor output (`z`).
    pub predicted: Tokens<T>,
    pub logits: RotationLogits<T>,
    enc_cache: EncoderCache<T>,
    proj_cache: ConvStackCache<T>,
    pred_cache: ConvStackCache<T>,
    rot_cache: RotHeadCache<T>,
}

/// Student and teacher parameters; the teacher is an exact copy of the
/// student's encoder and projector.
pub fn init_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(ModelParams<T>, ModelParams<T>)> {
    cfg.validate()?;
    let mut student = ModelParams {
        config: *cfg,
        encoder: Encoder::new(cfg),
        projector: ConvStack::new(cfg.dim, cfg.proj_blocks, cfg.conv_kernel),
        predictor: Some(ConvStack::new(cfg.dim, cfg.pred_blocks, cfg.conv_kernel)),
        rot_head: Some(RotHead::new(cfg.dim)),
    };
    let mut rng = seed::rng(seed::derive(&[seed, 0x494e_4954]));
    student.visit_mut("", &mut |name, arr| {
        // biases stay zero and norm gains stay one
        if arr.is_matrix() && name.ends_with(".w") {
            for v in &mut arr.data {
                *v = c(0.02 * truncated_normal(&mut rng));
            }
        }
    });
    let teacher = student.teacher_copy();
    Ok((student, teacher))
}

fn truncated_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

impl<T: Real> ModelParams<T> {
    /// The shared sub-network (encoder + projector) without student-only heads.
    pub fn teacher_copy(&self) -> Self {
        Self {
            config: self.config,
            encoder: self.encoder.clone(),
            projector: self.projector.clone(),
            predictor: None,
            rot_head: None,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, a| a.data.fill(T::zero()));
        z
    }

    pub fn named_arrays(&self) -> Vec<(String, &Array<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, a| out.push((n, a)));
        out
    }

    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut Array<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, a| out.push((n, a)));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named_arrays().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_arrays().iter().all(|(_, a)| a.data.iter().all(|v| v.is_finite()))
    }

    /// Encoder tokens for a list of square views (sizes may differ).
    pub fn encode_views(&self, images: &[&FloatImage]) -> Result<Tokens<T>> {
        Ok(self.encoder.forward(&self.config, images)?.0)
    }

    /// Teacher path: projector(encoder(x)).
    pub fn teacher_pass(&self, images: &[&FloatImage]) -> Result<Tokens<T>> {
        let enc = self.encode_views(images)?;
        Ok(self.projector.forward(&enc).0)
    }

    pub fn student_pass(&self, images: &[&FloatImage]) -> Result<StudentPass<T>> {
        let (Some(predictor), Some(rot_head)) = (&self.predictor, &self.rot_head) else {
            return Err(GtsaError::InvalidArgument("student pass needs predictor and rotation head".into()));
        };
        let (encoded, enc_cache) = self.encoder.forward(&self.config, images)?;
        let (projected, proj_cache) = self.projector.forward(&encoded);
        let (predicted, pred_cache) = predictor.forward(&projected);
        let (logits, rot_cache) = rot_head.forward(&encoded);
        Ok(StudentPass {
            logits: RotationLogits {
                batch: encoded.grids.len(),
                data: logits,
            },
            encoded,
            projected,
            predicted,
            enc_cache,
            proj_cache,
            pred_cache,
            rot_cache,
        })
    }

    /// Accumulates parameter gradients for upstream gradients on `z` and the logits.
    pub fn student_backward(&self, pass: &StudentPass<T>, dz: &Tokens<T>, dlogits: &[T], grad: &mut ModelParams<T>) {
        let predictor = self.predictor.as_ref().expect("student");
        let rot_head = self.rot_head.as_ref().expect("student");
        let dproj = predictor.backward(&pass.pred_cache, dz, grad.predictor.as_mut().expect("student grad"));
        let mut denc = self.projector.backward(&pass.proj_cache, &dproj, &mut grad.projector);
        rot_head.backward(&pass.rot_cache, dlogits, grad.rot_head.as_mut().expect("student grad"), &mut denc);
        self.encoder.backward(&self.config, &pass.enc_cache, &denc, &mut grad.encoder);
    }

    /// Encoder output for a batch of equally sized square images: `B x D x h x w`.
    pub fn encode(&self, images: &[FloatImage]) -> Result<FeatureMap<T>> {
        let first = images
            .first()
            .ok_or_else(|| GtsaError::Shape("empty image batch".into()))?;
        if images.iter().any(|im| im.h != first.h || im.w != first.w) {
            return Err(GtsaError::Shape("images in a batch must share a size".into()));
        }
        let refs: Vec<&FloatImage> = images.iter().collect();
        tokens_to_map(&self.encode_views(&refs)?)
    }

    pub fn project(&self, map: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check_channels(map)?;
        tokens_to_map(&self.projector.forward(&Tokens::from_maps(std::slice::from_ref(map))?).0)
    }

    pub fn predict(&self, map: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check_channels(map)?;
        let predictor = self
            .predictor
            .as_ref()
            .ok_or_else(|| GtsaError::InvalidArgument("teacher has no predictor".into()))?;
        tokens_to_map(&predictor.forward(&Tokens::from_maps(std::slice::from_ref(map))?).0)
    }

    pub fn rot_logits(&self, encoder_map: &FeatureMap<T>) -> Result<RotationLogits<T>> {
        self.check_channels(encoder_map)?;
        let head = self
            .rot_head
            .as_ref()
            .ok_or_else(|| GtsaError::InvalidArgument("teacher has no rotation head".into()))?;
        let toks = Tokens::from_maps(std::slice::from_ref(encoder_map))?;
        let (data, _) = head.forward(&toks);
        Ok(RotationLogits {
            batch: encoder_map.batch,
            data,
        })
    }

    fn check_channels(&self, map: &FeatureMap<T>) -> Result<()> {
        if map.dim != self.config.dim {
            return Err(GtsaError::Shape(format!(
                "map has {} channels, model expects {}",
                map.dim, self.config.dim
            )));
        }
        Ok(())
    }
}

/// Stacks equally sized segments into one `B x D x h x w` map.
fn tokens_to_map<T: Real>(toks: &Tokens<T>) -> Result<FeatureMap<T>> {
    let g0 = toks.grids[0];
    let n = g0.rows();
    let mut data = Vec::with_capacity(toks.data.len());
    for i in 0..toks.grids.len() {
        data.extend(toks.feature_map(i).data);
    }
    debug_assert_eq!(data.len(), toks.grids.len() * n * toks.dim);
    FeatureMap::from_vec(toks.grids.len(), toks.dim, g0.h, g0.w, data)
}

/// `teacher ← m * teacher + (1 - m) * student` over the teacher's arrays.
pub fn ema_update<T: Real>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(GtsaError::InvalidArgument(format!("momentum {m} outside [0, 1]")));
    }
    let src: BTreeMap<String, &Array<T>> = student.named_arrays().into_iter().collect();
    let mut targets = teacher.named_arrays_mut();
    for (name, t) in &targets {
        match src.get(name) {
            Some(s) if s.shape == t.shape => {}
            _ => return Err(GtsaError::Shape(format!("student has no array matching teacher {name}"))),
        }
    }
    let (mt, ms) = (c::<T>(m), c::<T>(1.0 - m));
    for (name, t) in targets.iter_mut() {
        let s = src[name];
        for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
            *tv = mt * *tv + ms * sv;
        }
    }
    Ok(())
}

/// Cosine ramp from `m0` at step 0 to 1 at `total_steps`.
pub fn momentum_at(step: u64, total_steps: u64, m0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(GtsaError::InvalidArgument(format!("step {step} beyond {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(1.0);
    }
    let t = step as f64 / total_steps as f64;
    Ok(1.0 - (1.0 - m0) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0)
}
