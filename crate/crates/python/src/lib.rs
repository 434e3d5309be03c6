//! Python bindings. Arrays cross the boundary as nested lists: a field is
//! `list[H][W]`, an image is `list[3][H][W]`, a flow is a `(u, v)` pair of
//! fields, labels are `list[H][W]` of category ids and masks are
//! `list[H][W]` of bools.

use std::path::PathBuf;

use flowattack::attack::{self, AttackConfig, AttackSetting};
use flowattack::diffcore::Field2D;
use flowattack::flowmodel::FlowModelParams;
use flowattack::types::{Category, FlowField, Image, LabelMap, Mask};
use flowattack::{flowio, metrics, scenegen, ttc, Error};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

type Grid = Vec<Vec<f64>>;
type PyFlow = (Grid, Grid);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn grid_shape<T>(rows: &[Vec<T>]) -> PyResult<(usize, usize)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular 2-D list"));
    }
    Ok((h, w))
}

fn field_in(rows: &Grid) -> PyResult<Field2D> {
    let (h, w) = grid_shape(rows)?;
    Field2D::new(h, w, rows.concat()).map_err(to_py)
}

fn field_out(f: &Field2D) -> Grid {
    f.data().chunks(f.width()).map(<[f64]>::to_vec).collect()
}

fn image_in(channels: &[Grid]) -> PyResult<Image> {
    let [r, g, b] = channels else {
        return Err(PyValueError::new_err("an image needs exactly 3 channels"));
    };
    Image::new([field_in(r)?, field_in(g)?, field_in(b)?]).map_err(to_py)
}

fn image_out(img: &Image) -> Vec<Grid> {
    img.channels().iter().map(field_out).collect()
}

fn flow_in(flow: &PyFlow) -> PyResult<FlowField> {
    FlowField::new(field_in(&flow.0)?, field_in(&flow.1)?).map_err(to_py)
}

fn flow_out(flow: &FlowField) -> PyFlow {
    let (h, w) = flow.shape();
    let mut u = vec![vec![0.0; w]; h];
    let mut v = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            (u[y][x], v[y][x]) = flow.get(y, x);
        }
    }
    (u, v)
}

fn mask_in(rows: &Vec<Vec<bool>>) -> PyResult<Mask> {
    let (h, w) = grid_shape(rows)?;
    Mask::new(h, w, rows.concat()).map_err(to_py)
}

fn mask_out(m: &Mask) -> Vec<Vec<bool>> {
    m.bits().chunks(m.width()).map(<[bool]>::to_vec).collect()
}

fn labels_in(rows: &Vec<Vec<u8>>) -> PyResult<LabelMap> {
    let (h, w) = grid_shape(rows)?;
    let cats = rows
        .iter()
        .flatten()
        .map(|&id| Category::from_id(id).ok_or_else(|| PyValueError::new_err(format!("unknown category id {id}"))))
        .collect::<PyResult<Vec<_>>>()?;
    LabelMap::new(h, w, cats).map_err(to_py)
}

fn labels_out(l: &LabelMap) -> Vec<Vec<u8>> {
    l.labels().chunks(l.width()).map(|r| r.iter().map(|c| c.id()).collect()).collect()
}

fn category(name: &str) -> PyResult<Category> {
    name.parse().map_err(|_| PyValueError::new_err(format!("unknown category {name:?}")))
}

/// Horn–Schunck estimator settings.
#[pyclass(name = "FlowModelParams", skip_from_py_object)]
#[derive(Clone)]
struct PyParams {
    #[pyo3(get, set)]
    smoothness_weight: f64,
    #[pyo3(get, set)]
    pyramid_levels: usize,
    #[pyo3(get, set)]
    jacobi_iters_per_level: usize,
    #[pyo3(get, set)]
    warps_per_level: usize,
    #[pyo3(get, set)]
    pyramid_scale: f64,
}

impl From<FlowModelParams> for PyParams {
    fn from(p: FlowModelParams) -> Self {
        Self {
            smoothness_weight: p.smoothness_weight,
            pyramid_levels: p.pyramid_levels,
            jacobi_iters_per_level: p.jacobi_iters_per_level,
            warps_per_level: p.warps_per_level,
            pyramid_scale: p.pyramid_scale,
        }
    }
}

impl PyParams {
    fn core(&self) -> FlowModelParams {
        FlowModelParams {
            smoothness_weight: self.smoothness_weight,
            pyramid_levels: self.pyramid_levels,
            jacobi_iters_per_level: self.jacobi_iters_per_level,
            warps_per_level: self.warps_per_level,
            pyramid_scale: self.pyramid_scale,
        }
    }
}

#[pymethods]
impl PyParams {
    #[new]
    fn new() -> Self {
        FlowModelParams::default().into()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.core())
    }
}

fn params_or_default(p: Option<PyRef<'_, PyParams>>) -> FlowModelParams {
    p.map_or_else(FlowModelParams::default, |p| p.core())
}

/// A rendered synthetic scene.
#[pyclass(name = "Scene", frozen)]
struct PyScene {
    inner: scenegen::SceneInstance,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.i1.shape()
    }
    #[getter]
    fn i1(&self) -> Vec<Grid> {
        image_out(&self.inner.i1)
    }
    #[getter]
    fn i2(&self) -> Vec<Grid> {
        image_out(&self.inner.i2)
    }
    #[getter]
    fn gt_flow(&self) -> PyFlow {
        flow_out(&self.inner.gt_flow)
    }
    #[getter]
    fn labels(&self) -> Vec<Vec<u8>> {
        labels_out(&self.inner.labels)
    }
}

/// Outcome of one attack run.
#[pyclass(name = "AttackResult", frozen, get_all)]
struct PyAttackResult {
    perturbed_image: Vec<Grid>,
    attacked_flow: PyFlow,
    original_flow: PyFlow,
    target_mask: Vec<Vec<bool>>,
    perturb_mask: Vec<Vec<bool>>,
    iterations: usize,
    final_mean_abs_perturbation: f64,
    converged: bool,
    trace_csv: String,
}

/// Renders `count` scenes of the default suite.
#[pyfunction]
#[pyo3(signature = (count, base_seed=0))]
fn scene_suite(count: usize, base_seed: u64) -> PyResult<Vec<PyScene>> {
    scenegen::scene_suite(count, base_seed)
        .and_then(|specs| specs.iter().map(scenegen::render).collect::<Result<Vec<_>, _>>())
        .map(|v| v.into_iter().map(|inner| PyScene { inner }).collect())
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (i1, i2, params=None))]
fn estimate_flow(i1: Vec<Grid>, i2: Vec<Grid>, params: Option<PyRef<'_, PyParams>>) -> PyResult<PyFlow> {
    let p = params_or_default(params);
    flowattack::flowmodel::estimate_flow(&image_in(&i1)?, &image_in(&i2)?, &p)
        .map(|f| flow_out(&f))
        .map_err(to_py)
}

/// Runs the masked attack. `setting` is one of `local`, `global`,
/// `cross_category`; categories are given by name.
#[pyfunction]
#[pyo3(signature = (
    i1, i2, labels, alpha=0.0, setting="global", budget=4e-3, target="vehicle",
    perturb="nature", seed=0, max_iters=20, params=None
))]
#[allow(clippy::too_many_arguments)]
fn run_attack(
    i1: Vec<Grid>,
    i2: Vec<Grid>,
    labels: Vec<Vec<u8>>,
    alpha: f64,
    setting: &str,
    budget: f64,
    target: &str,
    perturb: &str,
    seed: u64,
    max_iters: usize,
    params: Option<PyRef<'_, PyParams>>,
) -> PyResult<PyAttackResult> {
    let setting = match setting {
        "local" => AttackSetting::Local,
        "global" => AttackSetting::Global,
        "cross_category" => AttackSetting::CrossCategory,
        s => return Err(PyValueError::new_err(format!("unknown attack setting {s:?}"))),
    };
    let config = AttackConfig {
        alpha,
        budget,
        setting,
        target_category: category(target)?,
        perturb_category: category(perturb)?,
        rng_seed: seed,
        max_iters,
        ..AttackConfig::default()
    };
    let p = params_or_default(params);
    let r = attack::run_attack(&image_in(&i1)?, &image_in(&i2)?, &labels_in(&labels)?, &config, &p).map_err(to_py)?;
    Ok(PyAttackResult {
        perturbed_image: image_out(&r.perturbed_image),
        attacked_flow: flow_out(&r.attacked_flow),
        original_flow: flow_out(&r.original_flow),
        target_mask: mask_out(&r.masks.target),
        perturb_mask: mask_out(&r.masks.perturb),
        iterations: r.iterations.len(),
        final_mean_abs_perturbation: r.final_mean_abs_perturbation,
        converged: r.converged,
        trace_csv: r.trace_csv(),
    })
}

#[pyfunction]
fn loss_attack(attacked: PyFlow, original: PyFlow, target: Vec<Vec<bool>>) -> PyResult<f64> {
    attack::loss_attack(&flow_in(&attacked)?, &flow_in(&original)?, &mask_in(&target)?).map_err(to_py)
}

#[pyfunction]
fn loss_consistency(attacked: PyFlow, original: PyFlow, target: Vec<Vec<bool>>) -> PyResult<f64> {
    attack::loss_consistency(&flow_in(&attacked)?, &flow_in(&original)?, &mask_in(&target)?).map_err(to_py)
}

#[pyfunction]
fn loss_total(attacked: PyFlow, original: PyFlow, target: Vec<Vec<bool>>, alpha: f64) -> PyResult<f64> {
    attack::loss_total(&flow_in(&attacked)?, &flow_in(&original)?, &mask_in(&target)?, alpha).map_err(to_py)
}

/// Mean endpoint error over the pixels of `mask`.
#[pyfunction]
fn epe_masked(a: PyFlow, b: PyFlow, mask: Vec<Vec<bool>>) -> PyResult<f64> {
    metrics::epe_masked(&flow_in(&a)?, &flow_in(&b)?, &mask_in(&mask)?).map_err(to_py)
}

/// Returns `(ttc, valid)`; invalid entries of `ttc` are meaningless.
#[pyfunction]
#[pyo3(signature = (flow, window=5))]
fn ttc_from_flow(flow: PyFlow, window: usize) -> PyResult<(Grid, Vec<Vec<bool>>)> {
    let m = ttc::ttc_from_flow(&flow_in(&flow)?, window).map_err(to_py)?;
    let w = m.shape().1;
    Ok((field_out(m.ttc()), m.valid().chunks(w).map(<[bool]>::to_vec).collect()))
}

#[pyfunction]
fn read_flo(path: PathBuf) -> PyResult<PyFlow> {
    flowio::read_flo(&path).map(|f| flow_out(&f)).map_err(to_py)
}

#[pyfunction]
fn write_flo(path: PathBuf, flow: PyFlow) -> PyResult<()> {
    flowio::write_flo(&path, &flow_in(&flow)?).map_err(to_py)
}

/// Middlebury color coding; normalizes by the 99th percentile magnitude
/// when `max_magnitude` is omitted.
#[pyfunction]
#[pyo3(signature = (flow, max_magnitude=None))]
fn flow_to_color(flow: PyFlow, max_magnitude: Option<f64>) -> PyResult<Vec<Grid>> {
    flowio::flow_to_color(&flow_in(&flow)?, max_magnitude)
        .map(|img| image_out(&img))
        .map_err(to_py)
}

#[pymodule]
fn pyflowattack(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyAttackResult>()?;
    m.add_function(wrap_pyfunction!(scene_suite, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_flow, m)?)?;
    m.add_function(wrap_pyfunction!(run_attack, m)?)?;
    m.add_function(wrap_pyfunction!(loss_attack, m)?)?;
    m.add_function(wrap_pyfunction!(loss_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(loss_total, m)?)?;
    m.add_function(wrap_pyfunction!(epe_masked, m)?)?;
    m.add_function(wrap_pyfunction!(ttc_from_flow, m)?)?;
    m.add_function(wrap_pyfunction!(read_flo, m)?)?;
    m.add_function(wrap_pyfunction!(write_flo, m)?)?;
    m.add_function(wrap_pyfunction!(flow_to_color, m)?)?;
    Ok(())
}
