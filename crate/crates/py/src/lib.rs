//! Python bindings. Depth maps are nested lists `[row][col]`, feature maps
//! nested lists `[channel][row][col]`.

use amde::losses::{self, LossConfig};
use amde::metrics::{self, LagProfile};
use amde::modulator::ModulatorConfig;
use amde::runtime::{self, cache, Clock, FrameResult, Mode, PipelineConfig, RunConfig, WorldSource};
use amde::synthworld;
use amde::tensor::{DepthMap, FeatureMap};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: amde::Error) -> PyErr {
    match e {
        amde::Error::Io(_) | amde::Error::Format(_) | amde::Error::Truncated { .. } => PyOSError::new_err(e.to_string()),
        amde::Error::State(_) | amde::Error::Invariant(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn depth_from(rows: Vec<Vec<f64>>) -> PyResult<DepthMap> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged depth map"));
    }
    DepthMap::new(h, w, rows.concat()).map_err(to_py)
}

fn depth_to(d: &DepthMap) -> Vec<Vec<f64>> {
    d.data().chunks(d.width()).map(<[f64]>::to_vec).collect()
}

fn feature_from(level: u8, planes: Vec<Vec<Vec<f64>>>) -> PyResult<FeatureMap> {
    let c = planes.len();
    let h = planes.first().map_or(0, Vec::len);
    let w = planes.first().and_then(|p| p.first()).map_or(0, Vec::len);
    if planes.iter().any(|p| p.len() != h || p.iter().any(|r| r.len() != w)) {
        return Err(PyValueError::new_err("ragged feature map"));
    }
    FeatureMap::new(level, c, h, w, planes.concat().concat()).map_err(to_py)
}

fn feature_to(f: &FeatureMap) -> Vec<Vec<Vec<f64>>> {
    (0..f.channels()).map(|c| f.plane(c).chunks(f.width()).map(<[f64]>::to_vec).collect()).collect()
}

#[pyclass(name = "SceneConfig", from_py_object)]
#[derive(Clone)]
struct PySceneConfig {
    inner: synthworld::SceneConfig,
}

#[pymethods]
impl PySceneConfig {
    #[new]
    #[pyo3(signature = (height=128, width=128, seed=0, drift=(0.0, 0.45), objects=3, object_size=24, object_speed=1.0, object_depth=0.5, sigma_b=0.02, sigma_s=0.1, channels=8))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        height: usize,
        width: usize,
        seed: u64,
        drift: (f64, f64),
        objects: usize,
        object_size: usize,
        object_speed: f64,
        object_depth: f64,
        sigma_b: f64,
        sigma_s: f64,
        channels: usize,
    ) -> PyResult<Self> {
        let inner = synthworld::SceneConfig {
            height,
            width,
            seed,
            drift,
            objects,
            object_size,
            object_speed,
            object_depth,
            sigma_b,
            sigma_s,
            channels,
            ..synthworld::SceneConfig::default()
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    /// No drift, objects or noise.
    #[staticmethod]
    fn static_world() -> Self {
        Self { inner: synthworld::SceneConfig::static_world() }
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "World", skip_from_py_object)]
struct PyWorld {
    inner: synthworld::World,
}

#[pymethods]
impl PyWorld {
    #[new]
    fn new(config: PySceneConfig) -> PyResult<Self> {
        Ok(Self { inner: synthworld::World::new(config.inner).map_err(to_py)? })
    }

    /// Ground-truth inverse depth at frame `t`.
    fn depth(&self, t: usize) -> Vec<Vec<f64>> {
        depth_to(&self.inner.depth(t))
    }

    /// Foundation and encoder features of frame `t`, finest level first.
    fn features(&self, t: usize) -> PyResult<(Vec<Vec<Vec<Vec<f64>>>>, Vec<Vec<Vec<Vec<f64>>>>)> {
        let f = self.inner.frame(t).map_err(to_py)?;
        Ok((f.foundation.iter().map(feature_to).collect(), f.encoder.iter().map(feature_to).collect()))
    }

    /// Memory sizes `(h, w)` per level.
    fn sizes(&self) -> Vec<(usize, usize)> {
        self.inner.sizes().to_vec()
    }

    /// Writes `frames` frames in the tensor file format to `path`.
    fn export(&self, path: &str, frames: usize) -> PyResult<()> {
        let seq = synthworld::generate_sequence(self.inner.config(), frames).map_err(to_py)?;
        synthworld::export_sequence(path, self.inner.config(), &seq).map_err(to_py)
    }
}

#[pyclass(name = "FrameResult", skip_from_py_object)]
#[derive(Clone)]
struct PyFrameResult {
    inner: FrameResult,
}

#[pymethods]
impl PyFrameResult {
    #[getter]
    fn frame(&self) -> usize {
        self.inner.frame
    }

    #[getter]
    fn lag(&self) -> usize {
        self.inner.lag
    }

    #[getter]
    fn mean_t(&self) -> f64 {
        self.inner.mean_t
    }

    #[getter]
    fn fastpath_pct(&self) -> f64 {
        self.inner.fastpath_pct
    }

    #[getter]
    fn cache_version(&self) -> u64 {
        self.inner.cache_version
    }

    #[getter]
    fn refreshed_from(&self) -> Option<usize> {
        self.inner.refreshed_from
    }

    #[getter]
    fn start_us(&self) -> u64 {
        self.inner.start_us
    }

    #[getter]
    fn end_us(&self) -> u64 {
        self.inner.end_us
    }

    #[getter]
    fn prediction(&self) -> Vec<Vec<f64>> {
        depth_to(&self.inner.prediction)
    }

    fn __repr__(&self) -> String {
        format!(
            "FrameResult(frame={}, lag={}, mean_t={:.4}, cache_version={})",
            self.inner.frame, self.inner.lag, self.inner.mean_t, self.inner.cache_version
        )
    }
}

#[pyclass(name = "Pipeline", skip_from_py_object)]
struct PyPipeline {
    inner: runtime::Pipeline,
    world: synthworld::World,
}

impl PyPipeline {
    fn source(&self, frames: usize) -> WorldSource {
        WorldSource { world: self.world.clone(), frames }
    }
}

fn results_of(v: Vec<FrameResult>) -> Vec<PyFrameResult> {
    v.into_iter().map(|inner| PyFrameResult { inner }).collect()
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (world, k=4.0, beta=0.5, trust_override=None))]
    fn new(world: &PyWorld, k: f64, beta: f64, trust_override: Option<f64>) -> PyResult<Self> {
        let cfg = PipelineConfig {
            modulator: ModulatorConfig { k, beta, ..ModulatorConfig::default() },
            trust_override,
            ..PipelineConfig::default()
        };
        let inner = runtime::Pipeline::for_world(&world.inner, cfg).map_err(to_py)?;
        Ok(Self { inner, world: world.inner.clone() })
    }

    /// Refresh every `n` frames over the first `frames` frames of the world.
    fn run_sync(&self, py: Python<'_>, frames: usize, n: usize) -> PyResult<Vec<PyFrameResult>> {
        let src = self.source(frames);
        py.detach(|| runtime::run_sync(&self.inner, &src, n)).map(results_of).map_err(to_py)
    }

    /// Concurrent slow and fast paths.
    #[pyo3(signature = (frames, l_slow_ms=16.6, l_fast_ms=4.2, virtual_clock=true, stall_frames=0, single_refresh=false))]
    fn run_async(
        &self,
        py: Python<'_>,
        frames: usize,
        l_slow_ms: f64,
        l_fast_ms: f64,
        virtual_clock: bool,
        stall_frames: usize,
        single_refresh: bool,
    ) -> PyResult<Vec<PyFrameResult>> {
        let cfg = RunConfig {
            mode: Mode::Async,
            l_slow_ms,
            l_fast_ms,
            clock: if virtual_clock { Clock::Virtual } else { Clock::Wall },
            stall_frames,
            single_refresh,
            ..RunConfig::default()
        };
        let src = self.source(frames);
        py.detach(|| runtime::run_async(&self.inner, &src, &cfg)).map(|r| results_of(r.results)).map_err(to_py)
    }

    /// Replays results with the refresh schedule they recorded.
    fn replay(&self, results: Vec<PyRef<'_, PyFrameResult>>) -> PyResult<Vec<PyFrameResult>> {
        let schedule: Vec<Option<usize>> = results.iter().map(|r| r.inner.refreshed_from).collect();
        runtime::run_schedule(&self.inner, &self.source(schedule.len()), &schedule).map(results_of).map_err(to_py)
    }

    /// Lag profile CSV (per-lag rows plus `cycle_avg`) against the world's ground truth.
    fn lag_profile_csv(&self, results: Vec<PyRef<'_, PyFrameResult>>, bins: usize) -> PyResult<String> {
        let mut profile = LagProfile::new(bins).map_err(to_py)?;
        for r in results.iter().map(|r| &r.inner).filter(|r| r.lag < bins) {
            profile
                .accumulate(r.lag, &r.prediction, &self.world.depth(r.frame), r.mean_t, r.fastpath_pct)
                .map_err(to_py)?;
        }
        Ok(profile.cycle_average().map(|s| s.to_csv()).unwrap_or_default())
    }
}

/// Double-buffered feature cache with one writer and any number of reads.
#[pyclass(name = "FeatureCache", unsendable, skip_from_py_object)]
struct PyFeatureCache {
    writer: cache::CacheWriter,
    reader: cache::CacheReader,
}

type Levels = Vec<Vec<Vec<Vec<f64>>>>;

fn levels_from(levels: Levels) -> PyResult<Vec<FeatureMap>> {
    levels.into_iter().enumerate().map(|(i, l)| feature_from(i as u8 + 1, l)).collect()
}

#[pymethods]
impl PyFeatureCache {
    /// Layout is taken from an example pyramid.
    #[new]
    fn new(example: Levels) -> PyResult<Self> {
        let (writer, reader) = cache::feature_cache(cache::layout_of(&levels_from(example)?)).map_err(to_py)?;
        Ok(Self { writer, reader })
    }

    fn publish(&mut self, levels: Levels, source_frame: usize) -> PyResult<u64> {
        self.writer.publish(&levels_from(levels)?, source_frame).map_err(to_py)
    }

    /// `(version, source_frame, levels)` or `None` before the first publish.
    fn read_latest(&self) -> Option<(u64, usize, Levels)> {
        self.reader.read_latest().map(|s| (s.version, s.source_frame, s.levels.iter().map(feature_to).collect()))
    }

    #[getter]
    fn version(&self) -> u64 {
        self.reader.latest_version()
    }
}

#[pyfunction]
#[pyo3(signature = (p, g, eps=1e-8))]
fn ssi_loss(p: Vec<Vec<f64>>, g: Vec<Vec<f64>>, eps: f64) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let r = losses::ssi_loss(&depth_from(p)?, &depth_from(g)?, eps).map_err(to_py)?;
    Ok((r.value, depth_to(&r.grad)))
}

#[pyfunction]
#[pyo3(signature = (p, g, scales=4))]
fn grad_loss(p: Vec<Vec<f64>>, g: Vec<Vec<f64>>, scales: usize) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let r = losses::grad_loss(&depth_from(p)?, &depth_from(g)?, scales).map_err(to_py)?;
    Ok((r.value, depth_to(&r.grad)))
}

/// Hinge on the mean of a single-channel layer-1 trust map.
#[pyfunction]
#[pyo3(signature = (t, tau=0.4))]
fn mem_loss(t: Vec<Vec<f64>>, tau: f64) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let f = feature_from(1, vec![t])?;
    let (v, g) = losses::mem_loss(&f, tau);
    Ok((v, feature_to(&g).swap_remove(0)))
}

/// Returns `(value, grad_p, grad_t)`.
#[pyfunction]
fn total_loss(p: Vec<Vec<f64>>, g: Vec<Vec<f64>>, t: Vec<Vec<f64>>) -> PyResult<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let r = losses::total_loss(&depth_from(p)?, &depth_from(g)?, &feature_from(1, vec![t])?, &LossConfig::default())
        .map_err(to_py)?;
    Ok((r.value, depth_to(&r.grad_p), feature_to(&r.grad_t).swap_remove(0)))
}

/// Least-squares `(scale, shift)` mapping `pred` onto `gt`.
#[pyfunction]
fn fit_lsq(pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let a = metrics::fit_lsq(&depth_from(pred)?, &depth_from(gt)?).map_err(to_py)?;
    Ok((a.scale, a.shift))
}

/// Aligned `(absrel, rmse, delta1)`.
#[pyfunction]
fn evaluate(pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
    let m = metrics::evaluate(&depth_from(pred)?, &depth_from(gt)?).map_err(to_py)?;
    Ok((m.absrel, m.rmse, m.delta1))
}

#[pyfunction]
fn effective_interval(fast_rate: f64, slow_rate: f64) -> PyResult<f64> {
    runtime::effective_interval(fast_rate, slow_rate).map_err(to_py)
}

#[pymodule]
fn amde_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySceneConfig>()?;
    m.add_class::<PyWorld>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyFrameResult>()?;
    m.add_class::<PyFeatureCache>()?;
    m.add_function(wrap_pyfunction!(ssi_loss, m)?)?;
    m.add_function(wrap_pyfunction!(grad_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mem_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(fit_lsq, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(effective_interval, m)?)?;
    Ok(())
}
