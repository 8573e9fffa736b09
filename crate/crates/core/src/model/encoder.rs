//! Vision transformer over patch tokens. Several views (of possibly different
//! sizes) are encoded in one pass: their token rows are concatenated and each
//! view is a [`Grid`] segment; attention never crosses segments.

use super::layers::{gelu_backward, gelu_vec, join, softmax_rows, Array, LayerNorm, LnCache, Linear, Params};
use super::ModelConfig;
use crate::error::{GtsaError, Result};
use crate::geometry::FeatureMap;
use crate::numeric::{c, gemm, MatRef, Real};
use crate::raster::FloatImage;

/// Pixel normalization applied before patch embedding.
const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;

/// One view's block of rows inside a [`Tokens`] matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub offset: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn rows(&self) -> usize {
        self.h * self.w
    }
}

/// Concatenated token rows of several views.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens<T> {
    pub data: Vec<T>,
    pub dim: usize,
    pub grids: Vec<Grid>,
}

impl<T: Real> Tokens<T> {
    pub fn rows(&self) -> usize {
        self.grids.iter().map(Grid::rows).sum()
    }

    pub fn segment(&self, i: usize) -> &[T] {
        let g = self.grids[i];
        &self.data[g.offset * self.dim..(g.offset + g.rows()) * self.dim]
    }

    pub fn segment_mut(&mut self, i: usize) -> &mut [T] {
        let g = self.grids[i];
        &mut self.data[g.offset * self.dim..(g.offset + g.rows()) * self.dim]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![T::zero(); self.data.len()],
            dim: self.dim,
            grids: self.grids.clone(),
        }
    }

    /// View `i` as a single-item `1 x dim x h x w` map.
    pub fn feature_map(&self, i: usize) -> FeatureMap<T> {
        let g = self.grids[i];
        FeatureMap::from_tokens(self.segment(i), self.dim, g.h, g.w).expect("consistent grid")
    }

    /// Writes a single-item map back into segment `i`.
    pub fn set_from_map(&mut self, i: usize, map: &FeatureMap<T>) {
        let tokens = map.tokens(0);
        self.segment_mut(i).copy_from_slice(&tokens);
    }

    pub fn from_maps(maps: &[FeatureMap<T>]) -> Result<Self> {
        let dim = maps.first().map(|m| m.dim).unwrap_or(0);
        let mut data = Vec::new();
        let mut grids = Vec::new();
        let mut offset = 0;
        for m in maps {
            if m.dim != dim {
                return Err(GtsaError::Shape(format!("channel mismatch {} vs {dim}", m.dim)));
            }
            for b in 0..m.batch {
                data.extend(m.tokens(b));
                grids.push(Grid { offset, h: m.h, w: m.w });
                offset += m.h * m.w;
            }
        }
        Ok(Self { data, dim, grids })
    }

    /// Spatial mean of each segment: `segments x dim`.
    pub fn gap(&self) -> Vec<T> {
        let d = self.dim;
        let mut out = vec![T::zero(); self.grids.len() * d];
        for (i, g) in self.grids.iter().enumerate() {
            let seg = self.segment(i);
            let n = c::<T>(g.rows() as f64);
            for row in seg.chunks(d) {
                for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
            out[i * d..(i + 1) * d].iter_mut().for_each(|v| *v /= n);
        }
        out
    }
}

/// Fixed 2-D sinusoidal position table for an `h x w` grid (`dim % 4 == 0`).
pub fn sincos_positions<T: Real>(h: usize, w: usize, dim: usize) -> Vec<T> {
    let quarter = dim / 4;
    let mut out = vec![T::zero(); h * w * dim];
    for r in 0..h {
        for cc in 0..w {
            let row = &mut out[(r * w + cc) * dim..(r * w + cc + 1) * dim];
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                let (y, x) = (r as f64 * omega, cc as f64 * omega);
                row[i] = c(y.sin());
                row[quarter + i] = c(y.cos());
                row[2 * quarter + i] = c(x.sin());
                row[3 * quarter + i] = c(x.cos());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    /// Query/key/value projection. Its own bias stays zero and is not a
    /// parameter: queries and values get `q_bias` / `v_bias`, and keys get no
    /// bias since a key offset only shifts each score row by a constant.
    pub qkv: Linear<T>,
    pub q_bias: Array<T>,
    pub v_bias: Array<T>,
    pub proj: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Real> Block<T> {
    fn new(dim: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            qkv: Linear::zeros(dim, 3 * dim),
            q_bias: Array::zeros(&[dim]),
            v_bias: Array::zeros(&[dim]),
            proj: Linear::zeros(dim, dim),
            ln2: LayerNorm::new(dim),
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }
}

impl<T> Params<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array<T>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        f(join(prefix, "attn.qkv.w"), &self.qkv.w);
        f(join(prefix, "attn.q_bias"), &self.q_bias);
        f(join(prefix, "attn.v_bias"), &self.v_bias);
        self.proj.visit(&join(prefix, "attn.proj"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array<T>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        f(join(prefix, "attn.qkv.w"), &mut self.qkv.w);
        f(join(prefix, "attn.q_bias"), &mut self.q_bias);
        f(join(prefix, "attn.v_bias"), &mut self.v_bias);
        self.proj.visit_mut(&join(prefix, "attn.proj"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}

struct BlockCache<T> {
    h1: Vec<T>,
    ln1: LnCache<T>,
    qkv: Vec<T>,
    /// Per grid: `heads x n x n` attention probabilities.
    probs: Vec<Vec<T>>,
    attn: Vec<T>,
    h2: Vec<T>,
    ln2: LnCache<T>,
    f1: Vec<T>,
    act: Vec<T>,
}

fn attention_forward<T: Real>(qkv: &[T], grids: &[Grid], dim: usize, heads: usize) -> (Vec<T>, Vec<Vec<T>>) {
    let rows: usize = grids.iter().map(Grid::rows).sum();
    let dh = dim / heads;
    let scale = c::<T>(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); rows * dim];
    let mut probs = Vec::with_capacity(grids.len());
    for g in grids {
        let n = g.rows();
        let base = g.offset * 3 * dim;
        let mut p_all = vec![T::zero(); heads * n * n];
        for h in 0..heads {
            let q = MatRef::strided(&qkv[base + h * dh..], n, dh, 3 * dim);
            let k = MatRef::strided(&qkv[base + dim + h * dh..], n, dh, 3 * dim);
            let v = MatRef::strided(&qkv[base + 2 * dim + h * dh..], n, dh, 3 * dim);
            let p = &mut p_all[h * n * n..(h + 1) * n * n];
            gemm(scale, q, k.t(), T::zero(), p, n);
            softmax_rows(p, n);
            gemm(
                T::one(),
                MatRef::new(p, n, n),
                v,
                T::zero(),
                &mut out[g.offset * dim + h * dh..],
                dim,
            );
        }
        probs.push(p_all);
    }
    (out, probs)
}

fn attention_backward<T: Real>(
    qkv: &[T],
    probs: &[Vec<T>],
    d_attn: &[T],
    grids: &[Grid],
    dim: usize,
    heads: usize,
) -> Vec<T> {
    let rows: usize = grids.iter().map(Grid::rows).sum();
    let dh = dim / heads;
    let scale = c::<T>(1.0 / (dh as f64).sqrt());
    let mut dqkv = vec![T::zero(); rows * 3 * dim];
    for (g, p_all) in grids.iter().zip(probs) {
        let n = g.rows();
        let base = g.offset * 3 * dim;
        let mut dp = vec![T::zero(); n * n];
        for h in 0..heads {
            let p = &p_all[h * n * n..(h + 1) * n * n];
            let q = MatRef::strided(&qkv[base + h * dh..], n, dh, 3 * dim);
            let k = MatRef::strided(&qkv[base + dim + h * dh..], n, dh, 3 * dim);
            let v = MatRef::strided(&qkv[base + 2 * dim + h * dh..], n, dh, 3 * dim);
            let dout = MatRef::strided(&d_attn[g.offset * dim + h * dh..], n, dh, dim);
            // dV = Pᵀ dO ; dP = dO Vᵀ
            gemm(T::one(), MatRef::new(p, n, n).t(), dout, T::zero(), &mut dqkv[base + 2 * dim + h * dh..], 3 * dim);
            gemm(T::one(), dout, v.t(), T::zero(), &mut dp, n);
            // softmax backward, folded with the score scale
            for r in 0..n {
                let prow = &p[r * n..(r + 1) * n];
                let drow = &mut dp[r * n..(r + 1) * n];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            // dQ = dS K ; dK = dSᵀ Q
            gemm(T::one(), MatRef::new(&dp, n, n), k, T::zero(), &mut dqkv[base + h * dh..], 3 * dim);
            gemm(T::one(), MatRef::new(&dp, n, n).t(), q, T::zero(), &mut dqkv[base + dim + h * dh..], 3 * dim);
        }
    }
    dqkv
}

impl<T: Real> Block<T> {
    fn forward(&self, x: &[T], grids: &[Grid], heads: usize) -> (Vec<T>, BlockCache<T>) {
        let dim = self.ln1.g.len();
        let rows = x.len() / dim;
        let (h1, ln1) = self.ln1.forward(x, rows);
        let mut qkv = self.qkv.forward(&h1, rows);
        for row in qkv.chunks_mut(3 * dim) {
            for j in 0..dim {
                row[j] += self.q_bias.data[j];
                row[2 * dim + j] += self.v_bias.data[j];
            }
        }
        let (attn, probs) = attention_forward(&qkv, grids, dim, heads);
        let a = self.proj.forward(&attn, rows);
        let x1: Vec<T> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();
        let (h2, ln2) = self.ln2.forward(&x1, rows);
        let f1 = self.fc1.forward(&h2, rows);
        let act = gelu_vec(&f1);
        let m = self.fc2.forward(&act, rows);
        let out = x1.iter().zip(&m).map(|(&u, &v)| u + v).collect();
        (
            out,
            BlockCache {
                h1,
                ln1,
                qkv,
                probs,
                attn,
                h2,
                ln2,
                f1,
                act,
            },
        )
    }

    fn backward(&self, cache: &BlockCache<T>, dy: &[T], grids: &[Grid], heads: usize, grad: &mut Block<T>) -> Vec<T> {
        let dim = self.ln1.g.len();
        let rows = dy.len() / dim;
        let dact = self.fc2.backward(&cache.act, rows, dy, &mut grad.fc2, true).unwrap();
        let df1 = gelu_backward(&cache.f1, &dact);
        let dh2 = self.fc1.backward(&cache.h2, rows, &df1, &mut grad.fc1, true).unwrap();
        let dln2 = self.ln2.backward(&cache.ln2, &dh2, rows, &mut grad.ln2);
        let dx1: Vec<T> = dy.iter().zip(&dln2).map(|(&a, &b)| a + b).collect();
        let dattn = self.proj.backward(&cache.attn, rows, &dx1, &mut grad.proj, true).unwrap();
        let dqkv = attention_backward(&cache.qkv, &cache.probs, &dattn, grids, dim, heads);
        for row in dqkv.chunks(3 * dim) {
            for j in 0..dim {
                grad.q_bias.data[j] += row[j];
                grad.v_bias.data[j] += row[2 * dim + j];
            }
        }
        let dh1 = self.qkv.backward(&cache.h1, rows, &dqkv, &mut grad.qkv, true).unwrap();
        let dln1 = self.ln1.backward(&cache.ln1, &dh1, rows, &mut grad.ln1);
        dx1.iter().zip(&dln1).map(|(&a, &b)| a + b).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub patch_embed: Linear<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

pub struct EncoderCache<T> {
    patches: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    norm: Option<LnCache<T>>,
}

impl<T> Params<T> for Encoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array<T>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array<T>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Splits normalized pixels into `patch x patch` rows ordered `(channel, dy, dx)`.
fn patchify<T: Real>(img: &FloatImage, patch: usize, out: &mut Vec<T>) -> Result<(usize, usize)> {
    if !img.h.is_multiple_of(patch) || !img.w.is_multiple_of(patch) {
        return Err(GtsaError::Shape(format!(
            "{}x{} image is not divisible into {patch}px patches",
            img.h, img.w
        )));
    }
    let (gh, gw) = (img.h / patch, img.w / patch);
    for r in 0..gh {
        for cc in 0..gw {
            for ch in 0..FloatImage::CHANNELS {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let v = (img.get(ch, r * patch + dy, cc * patch + dx) - PIXEL_MEAN) / PIXEL_STD;
                        out.push(T::from_f64_lossy(v as f64));
                    }
                }
            }
        }
    }
    Ok((gh, gw))
}

impl<T: Real> Encoder<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let dim = cfg.dim;
        Self {
            patch_embed: Linear::zeros(FloatImage::CHANNELS * cfg.patch * cfg.patch, dim),
            blocks: (0..cfg.depth).map(|_| Block::new(dim, dim * cfg.mlp_ratio)).collect(),
            norm: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, cfg: &ModelConfig, images: &[&FloatImage]) -> Result<(Tokens<T>, EncoderCache<T>)> {
        let dim = cfg.dim;
        let mut patches = Vec::new();
        let mut grids = Vec::with_capacity(images.len());
        let mut offset = 0;
        for img in images {
            let (h, w) = patchify(img, cfg.patch, &mut patches)?;
            grids.push(Grid { offset, h, w });
            offset += h * w;
        }
        let rows = offset;
        let mut x = self.patch_embed.forward(&patches, rows);
        for g in &grids {
            let pos = sincos_positions::<T>(g.h, g.w, dim);
            for (v, p) in x[g.offset * dim..(g.offset + g.rows()) * dim].iter_mut().zip(pos) {
                *v += p;
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, cache) = b.forward(&x, &grids, cfg.heads);
            caches.push(cache);
            x = y;
        }
        let norm = if cfg.encoder_norm {
            let (y, cache) = self.norm.forward(&x, rows);
            x = y;
            Some(cache)
        } else {
            None
        };
        Ok((
            Tokens { data: x, dim, grids },
            EncoderCache {
                patches,
                blocks: caches,
                norm,
            },
        ))
    }

    pub fn backward(&self, cfg: &ModelConfig, cache: &EncoderCache<T>, dy: &Tokens<T>, grad: &mut Encoder<T>) {
        let rows = dy.rows();
        let mut d = match &cache.norm {
            Some(ln) => self.norm.backward(ln, &dy.data, rows, &mut grad.norm),
            None => dy.data.clone(),
        };
        for (b, (bc, gb)) in self.blocks.iter().zip(cache.blocks.iter().zip(grad.blocks.iter_mut())).rev() {
            d = b.backward(bc, &d, &dy.grids, cfg.heads, gb);
        }
        self.patch_embed.backward(&cache.patches, rows, &d, &mut grad.patch_embed, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_are_distinct_per_cell() {
        let pos = sincos_positions::<f64>(4, 4, 8);
        for a in 0..16 {
            for b in (a + 1)..16 {
                assert_ne!(&pos[a * 8..(a + 1) * 8], &pos[b * 8..(b + 1) * 8]);
            }
        }
    }

    #[test]
    fn patchify_rejects_indivisible_sizes() {
        let img = FloatImage::zeros(10, 10);
        let mut out: Vec<f64> = Vec::new();
        assert!(patchify(&img, 4, &mut out).is_err());
        assert_eq!(patchify(&img, 5, &mut out).unwrap(), (2, 2));
        assert_eq!(out.len(), 4 * 3 * 25);
    }

    #[test]
    fn tokens_map_round_trip() {
        let data: Vec<f64> = (0..2 * 3 * 5).map(|v| v as f64).collect();
        let map = FeatureMap::from_vec(2, 3, 1, 5, data).unwrap();
        let toks = Tokens::from_maps(std::slice::from_ref(&map)).unwrap();
        assert_eq!(toks.grids.len(), 2);
        let back = toks.feature_map(1);
        for d in 0..3 {
            for cc in 0..5 {
                assert_eq!(back.get(0, d, 0, cc), map.get(1, d, 0, cc));
            }
        }
    }
}
