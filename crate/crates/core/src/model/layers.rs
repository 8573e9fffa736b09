//! Row-wise building blocks with explicit backward passes. Activations are
//! token matrices: `rows x features`, row-major.

use crate::numeric::{c, gemm, MatRef, Real};

/// A named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Array<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Weight matrices get weight decay; vectors (biases, norm gains) do not.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() >= 2
    }
}

/// Visitor over named parameter arrays, used for EMA, optimizer state,
/// checkpoints and gradient checks.
pub trait Params<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array<T>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in x out`
    pub w: Array<T>,
    pub b: Array<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array::zeros(&[input, output]),
            b: Array::zeros(&[output]),
        }
    }

    pub fn input(&self) -> usize {
        self.w.shape[0]
    }

    pub fn output(&self) -> usize {
        self.w.shape[1]
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let (i, o) = (self.input(), self.output());
        debug_assert_eq!(x.len(), rows * i);
        let mut y = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(&self.b.data);
        }
        gemm(T::one(), MatRef::new(x, rows, i), MatRef::new(&self.w.data, i, o), T::one(), &mut y, o);
        y
    }

    /// Accumulates parameter gradients into `grad`; returns `dx` when asked.
    pub fn backward(&self, x: &[T], rows: usize, dy: &[T], grad: &mut Linear<T>, want_dx: bool) -> Option<Vec<T>> {
        let (i, o) = (self.input(), self.output());
        gemm(
            T::one(),
            MatRef::new(x, rows, i).t(),
            MatRef::new(dy, rows, o),
            T::one(),
            &mut grad.w.data,
            o,
        );
        for r in 0..rows {
            for (gb, &d) in grad.b.data.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                *gb += d;
            }
        }
        want_dx.then(|| {
            let mut dx = vec![T::zero(); rows * i];
            gemm(T::one(), MatRef::new(dy, rows, o), MatRef::new(&self.w.data, i, o).t(), T::zero(), &mut dx, i);
            dx
        })
    }
}

impl<T> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array<T>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array<T>)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub g: Array<T>,
    pub b: Array<T>,
}

pub struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            g: Array::filled(&[dim], T::one()),
            b: Array::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, LnCache<T>) {
        let d = self.g.len();
        let dn = c::<T>(d as f64);
        let eps = c::<T>(LN_EPS);
        let mut y = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                y[r * d + j] = xh * self.g.data[j] + self.b.data[j];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache<T>, dy: &[T], rows: usize, grad: &mut LayerNorm<T>) -> Vec<T> {
        let d = self.g.len();
        let dn = c::<T>(d as f64);
        let mut dx = vec![T::zero(); rows * d];
        let mut dxhat = vec![T::zero(); d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for j in 0..d {
                grad.g.data[j] += dyr[j] * xh[j];
                grad.b.data[j] += dyr[j];
                dxhat[j] = dyr[j] * self.g.data[j];
                sum_dxh += dxhat[j];
                sum_dxh_xh += dxhat[j] * xh[j];
            }
            let rs = cache.rstd[r];
            for j in 0..d {
                dx[r * d + j] = rs * (dxhat[j] - sum_dxh / dn - xh[j] * sum_dxh_xh / dn);
            }
        }
        dx
    }
}

impl<T> Params<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array<T>)) {
        f(join(prefix, "g"), &self.g);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array<T>)) {
        f(join(prefix, "g"), &mut self.g);
        f(join(prefix, "b"), &mut self.b);
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let k = c::<T>(GELU_K);
    let a = c::<T>(GELU_A);
    c::<T>(0.5) * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = c::<T>(GELU_K);
    let a = c::<T>(GELU_A);
    let t = (k * (x + a * x * x * x)).tanh();
    let half = c::<T>(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * a * x * x)
}

pub fn gelu_vec<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| gelu(v)).collect()
}

/// `dy * gelu'(pre)` elementwise.
pub fn gelu_backward<T: Real>(pre: &[T], dy: &[T]) -> Vec<T> {
    pre.iter().zip(dy).map(|(&p, &d)| d * gelu_grad(p)).collect()
}

/// Gathers `k x k` neighbourhoods (zero padded) of an `h x w x dim` grid into
/// rows of length `k*k*dim`, ordered `(ky, kx, channel)`.
pub fn im2col<T: Real>(x: &[T], h: usize, w: usize, dim: usize, k: usize, out: &mut [T]) {
    let pad = (k / 2) as isize;
    let row_len = k * k * dim;
    for r in 0..h {
        for cc in 0..w {
            let dst = &mut out[(r * w + cc) * row_len..(r * w + cc + 1) * row_len];
            for ky in 0..k {
                for kx in 0..k {
                    let sr = r as isize + ky as isize - pad;
                    let sc = cc as isize + kx as isize - pad;
                    let seg = &mut dst[(ky * k + kx) * dim..(ky * k + kx + 1) * dim];
                    if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                        seg.fill(T::zero());
                    } else {
                        let s = (sr as usize * w + sc as usize) * dim;
                        seg.copy_from_slice(&x[s..s + dim]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `dx`.
pub fn col2im<T: Real>(dcol: &[T], h: usize, w: usize, dim: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let row_len = k * k * dim;
    for r in 0..h {
        for cc in 0..w {
            let src = &dcol[(r * w + cc) * row_len..(r * w + cc + 1) * row_len];
            for ky in 0..k {
                for kx in 0..k {
                    let sr = r as isize + ky as isize - pad;
                    let sc = cc as isize + kx as isize - pad;
                    if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                        continue;
                    }
                    let s = (sr as usize * w + sc as usize) * dim;
                    for (d, &g) in dx[s..s + dim].iter_mut().zip(&src[(ky * k + kx) * dim..(ky * k + kx + 1) * dim]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// In-place row softmax of an `n x n` score block.
pub fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((num - analytic[i]).abs() < 1e-6, "i={i}: {num} vs {}", analytic[i]);
        }
    }

    #[test]
    fn gelu_derivative_matches_fd() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.4, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        let mut ln = LayerNorm::<f64>::new(5);
        ln.g.data = vec![1.0, 0.5, -0.3, 2.0, 1.2];
        ln.b.data = vec![0.1, 0.0, -0.2, 0.3, 0.0];
        let x: Vec<f64> = (0..10).map(|v| ((v * 37 % 11) as f64) * 0.3 - 1.0).collect();
        let dy: Vec<f64> = (0..10).map(|v| (v as f64 * 0.7).sin()).collect();
        let loss = |x: &[f64]| ln.forward(x, 2).0.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = ln.forward(&x, 2);
        let mut grad = LayerNorm::new(5);
        grad.g.data.fill(0.0);
        let dx = ln.backward(&cache, &dy, 2, &mut grad);
        fd_check(loss, &x, &dx);
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut lin = Linear::<f64>::zeros(3, 2);
        lin.w.data = vec![0.3, -0.2, 0.5, 0.9, -1.1, 0.4];
        lin.b.data = vec![0.05, -0.3];
        let x = vec![1.0, 2.0, -0.5, 0.3, 0.0, 1.5];
        let dy = vec![0.2, -0.7, 1.1, 0.4];
        let loss = |x: &[f64]| lin.forward(x, 2).iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>();
        let mut grad = Linear::zeros(3, 2);
        let dx = lin.backward(&x, 2, &dy, &mut grad, true).unwrap();
        fd_check(loss, &x, &dx);
        // dW = xᵀ dy
        assert!((grad.w.data[0] - (1.0 * 0.2 + 0.3 * 1.1)).abs() < 1e-12);
        assert_eq!(grad.b.data, vec![0.2 + 1.1, -0.7 + 0.4]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (h, w, d, k) = (3, 4, 2, 3);
        let x: Vec<f64> = (0..h * w * d).map(|v| v as f64 * 0.1 - 1.0).collect();
        let mut col = vec![0.0; h * w * k * k * d];
        im2col(&x, h, w, d, k, &mut col);
        let g: Vec<f64> = (0..col.len()).map(|v| ((v * 13 % 7) as f64) - 3.0).collect();
        let mut back = vec![0.0; x.len()];
        col2im(&g, h, w, d, k, &mut back);
        let lhs: f64 = col.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut s = vec![1.0f64, 2.0, 3.0, -1.0, -1.0, -1.0];
        softmax_rows(&mut s, 3);
        assert!((s[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((s[3] - 1.0 / 3.0).abs() < 1e-12);
    }
}
