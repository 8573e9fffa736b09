use super::encoder::Tokens;
use super::layers::{col2im, gelu_backward, gelu_vec, im2col, join, Array, LayerNorm, LnCache, Linear, Params};
use crate::numeric::{c, Real};

/// `y = x + GELU(LN(conv(x)))` with a stride-1, same-padded square kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    /// Weights shaped `(k*k*dim) x dim`, rows ordered `(ky, kx, channel)`.
    pub conv: Linear<T>,
    pub norm: LayerNorm<T>,
}

struct ConvBlockCache<T> {
    col: Vec<T>,
    ln: LnCache<T>,
    pre: Vec<T>,
}

impl<T: Real> ConvBlock<T> {
    fn new(dim: usize, kernel: usize) -> Self {
        Self {
            conv: Linear::zeros(kernel * kernel * dim, dim),
            norm: LayerNorm::new(dim),
        }
    }

    fn kernel(&self) -> usize {
        let dim = self.norm.g.len();
        ((self.conv.input() / dim) as f64).sqrt().round() as usize
    }

    fn forward(&self, x: &Tokens<T>) -> (Tokens<T>, ConvBlockCache<T>) {
        let (dim, k) = (x.dim, self.kernel());
        let rows = x.rows();
        let row_len = k * k * dim;
        let mut col = vec![T::zero(); rows * row_len];
        for (i, g) in x.grids.iter().enumerate() {
            im2col(
                x.segment(i),
                g.h,
                g.w,
                dim,
                k,
                &mut col[g.offset * row_len..(g.offset + g.rows()) * row_len],
            );
        }
        let conv = self.conv.forward(&col, rows);
        let (pre, ln) = self.norm.forward(&conv, rows);
        let act = gelu_vec(&pre);
        let data = x.data.iter().zip(&act).map(|(&a, &b)| a + b).collect();
        (
            Tokens {
                data,
                dim,
                grids: x.grids.clone(),
            },
            ConvBlockCache { col, ln, pre },
        )
    }

    fn backward(&self, cache: &ConvBlockCache<T>, dy: &Tokens<T>, grad: &mut ConvBlock<T>) -> Tokens<T> {
        let (dim, k) = (dy.dim, self.kernel());
        let rows = dy.rows();
        let row_len = k * k * dim;
        let dpre = gelu_backward(&cache.pre, &dy.data);
        let dconv = self.norm.backward(&cache.ln, &dpre, rows, &mut grad.norm);
        let dcol = self.conv.backward(&cache.col, rows, &dconv, &mut grad.conv, true).unwrap();
        let mut dx = dy.clone();
        for (i, g) in dy.grids.iter().enumerate() {
            col2im(
                &dcol[g.offset * row_len..(g.offset + g.rows()) * row_len],
                g.h,
                g.w,
                dim,
                k,
                dx.segment_mut(i),
            );
        }
        dx
    }
}

impl<T> Params<T> for ConvBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Resolution-preserving stack of [`ConvBlock`]s (projector or predictor).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack<T> {
    pub blocks: Vec<ConvBlock<T>>,
}

pub struct ConvStackCache<T> {
    blocks: Vec<ConvBlockCache<T>>,
}

impl<T: Real> ConvStack<T> {
    pub fn new(dim: usize, depth: usize, kernel: usize) -> Self {
        Self {
            blocks: (0..depth).map(|_| ConvBlock::new(dim, kernel)).collect(),
        }
    }

    pub fn forward(&self, x: &Tokens<T>) -> (Tokens<T>, ConvStackCache<T>) {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, cache) = b.forward(&cur);
            caches.push(cache);
            cur = y;
        }
        (cur, ConvStackCache { blocks: caches })
    }

    pub fn backward(&self, cache: &ConvStackCache<T>, dy: &Tokens<T>, grad: &mut ConvStack<T>) -> Tokens<T> {
        let mut d = dy.clone();
        for ((b, bc), gb) in self.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
            d = b.backward(bc, &d, gb);
        }
        d
    }
}

impl<T> Params<T> for ConvStack<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

pub const ROTATION_CLASSES: usize = 4;

/// GAP vector → linear → GELU → layer norm → linear to 4 rotation classes.
#[derive(Debug, Clone, PartialEq)]
pub struct RotHead<T> {
    pub fc1: Linear<T>,
    pub norm: LayerNorm<T>,
    pub fc2: Linear<T>,
}

pub struct RotHeadCache<T> {
    gap: Vec<T>,
    pre: Vec<T>,
    ln: LnCache<T>,
    normed: Vec<T>,
}

impl<T: Real> RotHead<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            fc1: Linear::zeros(dim, dim),
            norm: LayerNorm::new(dim),
            fc2: Linear::zeros(dim, ROTATION_CLASSES),
        }
    }

    /// Logits (`segments x 4`) from encoder tokens.
    pub fn forward(&self, enc: &Tokens<T>) -> (Vec<T>, RotHeadCache<T>) {
        let gap = enc.gap();
        let n = enc.grids.len();
        let pre = self.fc1.forward(&gap, n);
        let (normed, ln) = self.norm.forward(&gelu_vec(&pre), n);
        let logits = self.fc2.forward(&normed, n);
        (logits, RotHeadCache { gap, pre, ln, normed })
    }

    /// Adds the gradient w.r.t. the encoder tokens into `denc`.
    pub fn backward(&self, cache: &RotHeadCache<T>, dlogits: &[T], grad: &mut RotHead<T>, denc: &mut Tokens<T>) {
        let n = denc.grids.len();
        let dnormed = self.fc2.backward(&cache.normed, n, dlogits, &mut grad.fc2, true).unwrap();
        let dact = self.norm.backward(&cache.ln, &dnormed, n, &mut grad.norm);
        let dpre = gelu_backward(&cache.pre, &dact);
        let dgap = self.fc1.backward(&cache.gap, n, &dpre, &mut grad.fc1, true).unwrap();
        let d = denc.dim;
        for i in 0..n {
            let inv = c::<T>(1.0 / denc.grids[i].rows() as f64);
            let g = dgap[i * d..(i + 1) * d].to_vec();
            for row in denc.segment_mut(i).chunks_mut(d) {
                for (r, &gv) in row.iter_mut().zip(&g) {
                    *r += gv * inv;
                }
            }
        }
    }
}

impl<T> Params<T> for RotHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
