//! Python bindings for the `gtsa` crate.
//!
//! Images cross the boundary as raw `bytes` in row-major RGB order (`h*w*3`
//! values); feature maps as a [`FeatureMap`] object holding a flat list of
//! `dim*h*w` floats in channel-major order.

use std::path::PathBuf;

use gtsa::geometry::{self as geo, Rect as CoreRect, RotIndex};
use gtsa::model::{ModelParams, RotationLogits};
use gtsa::probe::{self, Family, ProbeConfig};
use gtsa::trainer::{self, TrainConfig as CoreConfig};
use gtsa::{losses, FloatImage, GtsaError};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn to_py(e: GtsaError) -> PyErr {
    match e {
        GtsaError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rot(k: u8) -> PyResult<RotIndex> {
    RotIndex::new(k).map_err(to_py)
}

fn image_from_bytes(data: &[u8], size: usize) -> PyResult<FloatImage> {
    if data.len() != size * size * 3 {
        return Err(PyValueError::new_err(format!(
            "expected {} bytes for a {size}x{size} RGB image, got {}",
            size * size * 3,
            data.len()
        )));
    }
    Ok(FloatImage::from_fn(size, size, |ch, r, c| data[(r * size + c) * 3 + ch] as f32 / 255.0))
}

#[pyclass(name = "Rect", from_py_object)]
#[derive(Clone, Copy)]
struct Rect {
    #[pyo3(get)]
    x0: f64,
    #[pyo3(get)]
    y0: f64,
    #[pyo3(get)]
    x1: f64,
    #[pyo3(get)]
    y1: f64,
}

impl Rect {
    fn core(&self) -> CoreRect {
        CoreRect::new(self.x0, self.y0, self.x1, self.y1)
    }
}

impl From<CoreRect> for Rect {
    fn from(r: CoreRect) -> Self {
        Rect { x0: r.x0, y0: r.y0, x1: r.x1, y1: r.y1 }
    }
}

#[pymethods]
impl Rect {
    #[new]
    fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> PyResult<Self> {
        CoreRect::checked(x0, y0, x1, y1).map(Rect::from).map_err(to_py)
    }

    fn area(&self) -> f64 {
        self.core().area()
    }

    fn intersect(&self, other: &Rect) -> Option<Rect> {
        geo::intersect(&self.core(), &other.core()).map(Rect::from)
    }

    fn __repr__(&self) -> String {
        format!("Rect({}, {}, {}, {})", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Single-image feature map, `dim x h x w`.
#[pyclass(name = "FeatureMap", from_py_object)]
#[derive(Clone)]
struct FeatureMap {
    inner: geo::FeatureMap<f64>,
}

#[pymethods]
impl FeatureMap {
    #[new]
    fn new(data: Vec<f64>, dim: usize, h: usize, w: usize) -> PyResult<Self> {
        Ok(Self {
            inner: geo::FeatureMap::from_vec(1, dim, h, w, data).map_err(to_py)?,
        })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.dim, self.inner.h, self.inner.w)
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn get(&self, d: usize, r: usize, c: usize) -> PyResult<f64> {
        let m = &self.inner;
        if d >= m.dim || r >= m.h || c >= m.w {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(m.get(0, d, r, c))
    }
}

#[pyfunction]
fn rotate_point(x: f64, y: f64, size: f64, k: u8) -> PyResult<(f64, f64)> {
    Ok(geo::rotate_point(x, y, size, rot(k)?))
}

#[pyfunction]
fn roi_align(map: &FeatureMap, rect: &Rect, out_h: usize, out_w: usize) -> PyResult<FeatureMap> {
    let inner = geo::roi_align(&map.inner, &rect.core(), out_h, out_w).map_err(to_py)?;
    Ok(FeatureMap { inner })
}

#[pyfunction]
fn rotate_map(map: &FeatureMap, k: u8) -> PyResult<FeatureMap> {
    let inner = geo::rotate_map(&map.inner, rot(k)?).map_err(to_py)?;
    Ok(FeatureMap { inner })
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("vectors differ in length"));
    }
    Ok(losses::cosine(&a, &b))
}

/// Overlap loss between a student and teacher map given each side's overlap
/// rectangle in feature cells and the student's rotation index.
#[pyfunction]
#[pyo3(signature = (z, zt, student_rect, teacher_rect, k, pooled=4))]
fn overlap_loss(z: &FeatureMap, zt: &FeatureMap, student_rect: &Rect, teacher_rect: &Rect, k: u8, pooled: usize) -> PyResult<f64> {
    let region = geo::OverlapRegion {
        student_rect: student_rect.core(),
        teacher_rect: teacher_rect.core(),
        rel_rot: rot(k)?,
        valid: true,
    };
    losses::overlap_loss(&z.inner, &zt.inner, &region, pooled).map_err(to_py)
}

/// Top-K `(student_cell, teacher_cell, similarity)` matches, cells row-major.
#[pyfunction]
fn match_topk(z: &FeatureMap, zt: &FeatureMap, k: usize) -> PyResult<Vec<(usize, usize, f64)>> {
    let sets = losses::match_topk(&z.inner, &zt.inner, k).map_err(to_py)?;
    Ok(sets[0].pairs.iter().map(|p| (p.student, p.teacher, p.similarity)).collect())
}

#[pyfunction]
fn patch_corr_loss(z: &FeatureMap, zt: &FeatureMap, k: usize) -> PyResult<f64> {
    losses::patch_corr_loss(&z.inner, &zt.inner, k).map_err(to_py)
}

#[pyfunction]
fn rotation_loss(logits: Vec<[f64; 4]>, labels: Vec<usize>) -> PyResult<f64> {
    let batch = logits.len();
    let logits = RotationLogits {
        batch,
        data: logits.into_iter().flatten().collect(),
    };
    losses::rotation_loss(&logits, &labels).map_err(to_py)
}

#[pyfunction]
fn synth_image<'py>(py: Python<'py>, seed: u64, size: usize) -> PyResult<Bound<'py, PyBytes>> {
    let img = gtsa::data::synth_image(seed, size).map_err(to_py)?;
    Ok(PyBytes::new(py, img.as_raw()))
}

/// Training configuration; keys match the `key = value` config file format.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: CoreConfig,
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (text=""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::parse(text).map_err(to_py)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key {key:?}")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }
}

/// Student/teacher pair loaded from a checkpoint or freshly initialized.
#[pyclass(name = "Model")]
struct Model {
    student: ModelParams<f32>,
    teacher: ModelParams<f32>,
    config: CoreConfig,
    #[pyo3(get)]
    step: u64,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn init(config: &TrainConfig) -> PyResult<Self> {
        let state = trainer::TrainState::new(&config.inner).map_err(to_py)?;
        Ok(Self {
            student: state.student,
            teacher: state.teacher,
            config: config.inner,
            step: 0,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (state, config) = trainer::load_checkpoint(&path).map_err(to_py)?;
        Ok(Self {
            student: state.student,
            teacher: state.teacher,
            config,
            step: state.step,
        })
    }

    #[getter]
    fn config(&self) -> TrainConfig {
        TrainConfig { inner: self.config }
    }

    fn num_parameters(&self) -> usize {
        self.student.num_scalars()
    }

    /// Encoder feature map of one square RGB image.
    #[pyo3(signature = (image, size, teacher=false))]
    fn encode(&self, image: &[u8], size: usize, teacher: bool) -> PyResult<FeatureMap> {
        let img = image_from_bytes(image, size)?;
        let net = if teacher { &self.teacher } else { &self.student };
        let map = net.encode(std::slice::from_ref(&img)).map_err(to_py)?;
        let data = map.data.iter().map(|&v| v as f64).collect();
        FeatureMap::new(data, map.dim, map.h, map.w)
    }

    /// Four rotation-class scores for one image.
    fn rotation_logits(&self, image: &[u8], size: usize) -> PyResult<[f64; 4]> {
        let img = image_from_bytes(image, size)?;
        let map = self.student.encode(std::slice::from_ref(&img)).map_err(to_py)?;
        let logits = self.student.rot_logits(&map).map_err(to_py)?;
        let r = logits.row(0);
        Ok([r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64])
    }

    /// Mean GAP-variance of the student encoder under one transform family
    /// over `n_images` synthetic scenes starting at `data_seed`.
    #[pyo3(signature = (family, n_images=8, n_views=10, seed=0, data_seed=0, disabled=false))]
    fn probe(&self, family: &str, n_images: usize, n_views: usize, seed: u64, data_seed: u64, disabled: bool) -> PyResult<f64> {
        let family: Family = family.parse().map_err(to_py)?;
        let data = gtsa::data::Dataset::synthetic(n_images, self.config.image_size, data_seed).map_err(to_py)?;
        let images: Vec<FloatImage> = (0..data.len()).map(|i| data.float_image(i)).collect();
        let cfg = ProbeConfig {
            n_views,
            disabled,
            ..ProbeConfig::from_train(&self.config)
        };
        Ok(probe::sensitivity(&self.student, &images, family, &cfg, seed).map_err(to_py)?.mean_variance)
    }
}

/// Trains on `n_synthetic` generated scenes and writes checkpoints and
/// metrics into `out_dir`. Returns the path of the final checkpoint.
#[pyfunction]
#[pyo3(signature = (config, n_synthetic, out_dir, data_seed=0))]
fn pretrain(py: Python<'_>, config: &TrainConfig, n_synthetic: usize, out_dir: PathBuf, data_seed: u64) -> PyResult<PathBuf> {
    let cfg = config.inner;
    py.detach(move || {
        let data = gtsa::data::Dataset::synthetic(n_synthetic, cfg.image_size, data_seed)?;
        trainer::run_pretrain(&cfg, &data, &out_dir, None).map(|r| r.final_checkpoint)
    })
    .map_err(to_py)
}

/// Largest relative error of the finite-difference gradient check.
#[pyfunction]
fn gradcheck(py: Python<'_>) -> PyResult<f64> {
    py.detach(|| trainer::gradcheck(&trainer::gradcheck_config(), trainer::GradcheckOptions::default()))
        .map(|r| r.max_error())
        .map_err(to_py)
}

#[pymodule]
fn gtsa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Rect>()?;
    m.add_class::<FeatureMap>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(rotate_point, m)?)?;
    m.add_function(wrap_pyfunction!(roi_align, m)?)?;
    m.add_function(wrap_pyfunction!(rotate_map, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_loss, m)?)?;
    m.add_function(wrap_pyfunction!(match_topk, m)?)?;
    m.add_function(wrap_pyfunction!(patch_corr_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth_image, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_bytes_are_row_major_rgb() {
        let bytes: Vec<u8> = (0..2 * 2 * 3).map(|i| (i * 20) as u8).collect();
        let img = image_from_bytes(&bytes, 2).unwrap();
        assert_eq!(img.get(0, 0, 1), 60.0 / 255.0);
        assert_eq!(img.get(2, 1, 0), 160.0 / 255.0);
        assert!(image_from_bytes(&bytes, 3).is_err());
    }
}
