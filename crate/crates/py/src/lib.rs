//! Python bindings: phantoms, the topology operations, the two networks,
//! end-to-end inference and the evaluation statistics. Images and maps
//! cross the boundary as nested lists (`[row][column]`, channel first for
//! probability maps).

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use laminet_core::config::ExperimentConfig;
use laminet_core::error::Error;
use laminet_core::gradcheck::{check_all, GradCheckConfig};
use laminet_core::metrics;
use laminet_core::nets::{build_rnet, build_snet, NetKind, Network};
use laminet_core::phantom::generate_item;
use laminet_core::pipeline::{self, InferOptions, WeightStore};
use laminet_core::tensor::Tensor;
use laminet_core::topology::{self, BoundarySet, LabelMask, ThicknessMap};

fn py_err(e: Error) -> PyErr {
    let msg = format!("[{}] {e}", e.kind());
    match e {
        Error::Io { .. } => PyOSError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for laminet_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn config(toml: Option<&str>) -> PyResult<ExperimentConfig> {
    match toml {
        Some(text) => ExperimentConfig::from_toml_str(text).py(),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Row-major flattening of a rectangular nested list.
fn flatten<T: Copy>(rows: &[Vec<T>], what: &str) -> PyResult<(usize, usize, Vec<T>)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err(format!("{what} must be a non-empty rectangular list of rows")));
    }
    Ok((h, w, rows.concat()))
}

fn rows<T: Copy>(data: &[T], w: usize) -> Vec<Vec<T>> {
    data.chunks(w).map(<[T]>::to_vec).collect()
}

fn image_tensor(image: &[Vec<f32>]) -> PyResult<Tensor<f32>> {
    let (h, w, data) = flatten(image, "image")?;
    Tensor::new(&[1, h, w], data).py()
}

fn channels(t: &Tensor<f32>) -> PyResult<Vec<Vec<Vec<f32>>>> {
    let (c, _, w) = t.chw().py()?;
    Ok((0..c).map(|k| rows(t.channel(k), w)).collect())
}

#[pyclass(name = "Network", module = "pylaminet")]
struct PyNetwork {
    inner: Network<f32>,
}

#[pymethods]
impl PyNetwork {
    /// Freshly initialized S-Net for the `[net]` section of `config`.
    #[staticmethod]
    #[pyo3(signature = (seed = 0, config = None))]
    fn snet(seed: u64, config: Option<&str>) -> PyResult<Self> {
        Ok(PyNetwork { inner: build_snet(&self::config(config)?.net, seed).py()? })
    }

    #[staticmethod]
    #[pyo3(signature = (seed = 0, config = None))]
    fn rnet(seed: u64, config: Option<&str>) -> PyResult<Self> {
        Ok(PyNetwork { inner: build_rnet(&self::config(config)?.net, seed).py()? })
    }

    /// Weights written by `save` or the `train-*` commands.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyNetwork { inner: WeightStore::load(path).py()?.into_network().py()? })
    }

    #[pyo3(signature = (path, seed = 0, steps = 0))]
    fn save(&self, path: &str, seed: u64, steps: u64) -> PyResult<()> {
        WeightStore::from_network(&self.inner, seed, steps).save(path).py()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.kind() {
            NetKind::SNet => "snet",
            NetKind::RNet => "rnet",
        }
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params.iter().map(|p| p.value.len()).sum()
    }

    #[getter]
    fn conv_count(&self) -> usize {
        self.inner.conv_count()
    }

    #[getter]
    fn input_shape(&self) -> [usize; 3] {
        self.inner.input_shape()
    }

    /// Class probabilities `[C][H][W]` of one `[H][W]` patch.
    fn snet_forward(&self, patch: Vec<Vec<f32>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        channels(&self.inner.snet_forward(&image_tensor(&patch)?).py()?)
    }

    /// Thicknesses `[B][W]` of one `[C][H][W]` probability map.
    fn rnet_forward(&self, probs: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<Vec<f64>>> {
        let c = probs.len();
        let mut data = Vec::new();
        let (mut h, mut w) = (0, 0);
        for ch in &probs {
            let (hh, ww, d) = flatten(ch, "probability channel")?;
            (h, w) = (hh, ww);
            data.extend(d);
        }
        let t = self.inner.rnet_forward(&Tensor::new(&[c, h, w], data).py()?).py()?;
        Ok(rows(t.data(), t.width()))
    }

    fn __repr__(&self) -> String {
        format!("Network(kind={:?}, params={})", self.kind(), self.param_count())
    }
}

/// The default experiment configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml_string()
}

/// Phantom `index` of the dataset with master seed `seed`: a dict with
/// `image` `[H][W]`, `mask` `[H][W]` and `pinch_columns`.
#[pyfunction]
#[pyo3(signature = (seed, index = 0, config = None))]
fn generate_phantom<'py>(py: Python<'py>, seed: u64, index: u64, config: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = self::config(config)?;
    let p = generate_item(&cfg.phantom, seed, index).py()?;
    let w = p.mask.width();
    let d = PyDict::new(py);
    d.set_item("image", rows(p.image.data(), w))?;
    d.set_item("mask", rows(p.mask.labels(), w))?;
    d.set_item("pinch_columns", p.pinch_columns)?;
    Ok(d)
}

/// Per-column class counts `[C-1][W]` of a stacked label mask.
#[pyfunction]
fn mask_to_thickness(mask: Vec<Vec<u8>>, num_classes: usize) -> PyResult<Vec<Vec<f64>>> {
    let (h, w, labels) = flatten(&mask, "mask")?;
    let t = topology::mask_to_thickness(&LabelMask::new(h, w, num_classes, labels).py()?).py()?;
    Ok(rows(t.data(), w))
}

/// Per-column prefix sums of non-negative thicknesses `[B][W]`.
#[pyfunction]
fn thickness_to_boundaries(thickness: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let (b, w, data) = flatten(&thickness, "thickness")?;
    let out = topology::thickness_to_boundaries(&ThicknessMap::new(b, w, data).py()?).py()?;
    Ok(rows(out.data(), w))
}

#[pyfunction]
fn boundaries_to_mask(boundaries: Vec<Vec<f64>>, height: usize) -> PyResult<Vec<Vec<u8>>> {
    let (b, w, data) = flatten(&boundaries, "boundaries")?;
    let mask = topology::boundaries_to_mask(&BoundarySet::new(b, w, data).py()?, height).py()?;
    Ok(rows(mask.labels(), w))
}

/// Boundaries `[B][W]` (rows of the input image) for one B-scan.
#[pyfunction]
#[pyo3(signature = (image, snet, rnet, patch_count = 20, target_row = 100))]
fn infer_scan(image: Vec<Vec<f32>>, snet: &PyNetwork, rnet: &PyNetwork, patch_count: usize, target_row: usize) -> PyResult<Vec<Vec<f64>>> {
    let opts = InferOptions { patch_count, target_row };
    let (pred, _) = pipeline::infer_scan(&image_tensor(&image)?, &snet.inner, &rnet.inner, &opts).py()?;
    Ok(rows(pred.boundaries.data(), pred.boundaries.width()))
}

/// MAD, RMSE, MSD and the 2.5/97.5 percentiles of signed differences.
#[pyfunction]
fn aggregate<'py>(py: Python<'py>, values: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let a = metrics::aggregate(&values).py()?;
    let d = PyDict::new(py);
    d.set_item("count", a.count)?;
    d.set_item("mad", a.mad)?;
    d.set_item("rmse", a.rmse)?;
    d.set_item("msd", a.msd)?;
    d.set_item("q025", a.q025)?;
    d.set_item("q975", a.q975)?;
    Ok(d)
}

/// Two-sided Wilcoxon signed-rank p-value for paired samples.
#[pyfunction]
fn wilcoxon_signed(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::wilcoxon_signed(&x, &y).py()
}

/// Finite-difference audit: `(name, max_relative_error, passed)` per subject.
#[pyfunction]
#[pyo3(signature = (instances = 3, seed = 0))]
fn gradcheck(py: Python<'_>, instances: usize, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let cfg = GradCheckConfig { instances, seed, ..Default::default() };
    let results = py.detach(|| check_all(&cfg)).py()?;
    Ok(results.into_iter().map(|r| { let ok = r.passed(); (r.name, r.max_rel_error, ok) }).collect())
}

#[pymodule]
fn pylaminet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(mask_to_thickness, m)?)?;
    m.add_function(wrap_pyfunction!(thickness_to_boundaries, m)?)?;
    m.add_function(wrap_pyfunction!(boundaries_to_mask, m)?)?;
    m.add_function(wrap_pyfunction!(infer_scan, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon_signed, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
