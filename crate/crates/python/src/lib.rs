//! Python bindings: scenes, cameras, rendering, trace counters, pruning and fitting.

use std::collections::HashMap;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use hybridsplat::fit::{fit as fit_scene, mean_psnr, FitConfig};
use hybridsplat::io;
use hybridsplat::math::Vec3;
use hybridsplat::prune::{prune_schedule, score_all, ScheduleConfig, ScoreOptions};
use hybridsplat::synth::{self, Bounds, MirrorProbeConfig};
use hybridsplat::{CameraView, ChannelImage, OutputMode, RenderOptions};

fn py_err(e: hybridsplat::Error) -> PyErr {
    match e {
        hybridsplat::Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(format!("{}: {other}", other.category())),
    }
}

fn vec3(v: [f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

#[pyclass(name = "Scene", module = "hybridsplat_py", from_py_object)]
#[derive(Clone)]
pub struct PyScene {
    inner: hybridsplat::Scene,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    #[pyo3(signature = (sh_degree = 1))]
    fn empty(sh_degree: usize) -> Self {
        Self {
            inner: hybridsplat::Scene::empty(sh_degree),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_scene(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_scene(&self.inner, path).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (seed = 0, base = 100, reflective = 20, half = 1.0))]
    fn random(seed: u64, base: usize, reflective: usize, half: f64) -> Self {
        Self {
            inner: synth::gen_random(seed, base, reflective, &Bounds::cube(half)),
        }
    }

    /// Returns the scene together with `n_views` cameras aimed at the mirror.
    #[staticmethod]
    #[pyo3(signature = (seed = 0, dust = 0, n_views = 4, width = 128, height = 128))]
    fn mirror_probe(
        seed: u64,
        dust: usize,
        n_views: usize,
        width: usize,
        height: usize,
    ) -> PyResult<(Self, Vec<PyCamera>)> {
        let cfg = MirrorProbeConfig {
            dust,
            ..MirrorProbeConfig::default()
        };
        let (scene, desc) = synth::gen_mirror_probe_with(seed, &cfg);
        let views = synth::mirror_views(&desc, n_views, width, height).map_err(py_err)?;
        Ok((
            Self { inner: scene },
            views.into_iter().map(|inner| PyCamera { inner }).collect(),
        ))
    }

    #[getter]
    fn n_base(&self) -> usize {
        self.inner.base.len()
    }

    #[getter]
    fn n_reflective(&self) -> usize {
        self.inner.reflective.len()
    }

    #[getter]
    fn sh_degree(&self) -> usize {
        self.inner.sh_degree
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(base={}, reflective={})",
            self.inner.base.len(),
            self.inner.reflective.len()
        )
    }
}

#[pyclass(name = "Camera", module = "hybridsplat_py", from_py_object)]
#[derive(Clone)]
pub struct PyCamera {
    inner: CameraView,
}

#[pymethods]
impl PyCamera {
    #[new]
    #[pyo3(signature = (eye, target, up, focal, width, height))]
    fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> PyResult<Self> {
        let inner = CameraView::look_at(vec3(eye), vec3(target), vec3(up), focal, width, height)
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        [
            self.inner.center.x,
            self.inner.center.y,
            self.inner.center.z,
        ]
    }
}

#[pyclass(name = "Image", module = "hybridsplat_py", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: ChannelImage,
}

#[pymethods]
impl PyImage {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    /// Row-major `(height, width, channels)` shape.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.height, self.inner.width, self.inner.channels)
    }

    /// Little-endian f64 samples in row-major order, e.g. for `numpy.frombuffer`.
    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        let bytes: Vec<u8> = self
            .inner
            .data
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        PyBytes::new(py, &bytes)
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn pixel(&self, x: usize, y: usize) -> PyResult<Vec<f64>> {
        if x >= self.inner.width || y >= self.inner.height {
            return Err(PyValueError::new_err("pixel out of range"));
        }
        Ok(self.inner.pixel(x, y).to_vec())
    }

    fn max_abs_diff(&self, other: &PyImage) -> PyResult<f64> {
        self.inner.max_abs_diff(&other.inner).map_err(py_err)
    }

    fn psnr(&self, reference: &PyImage) -> PyResult<f64> {
        self.inner.psnr(&reference.inner).map_err(py_err)
    }

    #[pyo3(signature = (path, srgb = true))]
    fn save(&self, path: &str, srgb: bool) -> PyResult<()> {
        io::write_image(&self.inner, path, srgb).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, srgb = true))]
    fn load(path: &str, srgb: bool) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_image(path, srgb).map_err(py_err)?,
        })
    }
}

#[pyclass(name = "Renderer", module = "hybridsplat_py")]
pub struct PyRenderer {
    inner: hybridsplat::Renderer,
}

fn parse_mode(mode: &str) -> PyResult<OutputMode> {
    mode.parse().map_err(py_err)
}

#[pymethods]
impl PyRenderer {
    #[new]
    #[pyo3(signature = (threads = 0, tile_size = 16, pipelined = true))]
    fn new(threads: usize, tile_size: usize, pipelined: bool) -> PyResult<Self> {
        let inner = hybridsplat::Renderer::new(RenderOptions {
            threads,
            tile_size,
            pipelined,
            ..RenderOptions::default()
        })
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    /// One output image: `final`, `base`, `ref`, `beta` or `normal`.
    #[pyo3(signature = (scene, camera, mode = "final"))]
    fn render(
        &self,
        py: Python<'_>,
        scene: &PyScene,
        camera: &PyCamera,
        mode: &str,
    ) -> PyResult<PyImage> {
        let mode = parse_mode(mode)?;
        let out = py
            .detach(|| hybridsplat::render(&self.inner, &scene.inner, &camera.inner))
            .map_err(py_err)?;
        Ok(PyImage {
            inner: out.image(mode).clone(),
        })
    }

    fn render_all(
        &self,
        py: Python<'_>,
        scene: &PyScene,
        camera: &PyCamera,
    ) -> PyResult<HashMap<String, PyImage>> {
        let out = py
            .detach(|| hybridsplat::render(&self.inner, &scene.inner, &camera.inner))
            .map_err(py_err)?;
        let mut map = HashMap::new();
        for (name, img) in [
            ("final", &out.final_color),
            ("base", &out.base_color),
            ("ref", &out.ref_color),
            ("beta", &out.beta_map),
            ("normal", &out.normal_map),
            ("depth", &out.depth_map),
        ] {
            map.insert(name.to_string(), PyImage { inner: img.clone() });
        }
        Ok(map)
    }

    /// Reflection tracing counters for one render.
    fn trace_stats(
        &self,
        py: Python<'_>,
        scene: &PyScene,
        camera: &PyCamera,
    ) -> PyResult<HashMap<String, u64>> {
        let out = py
            .detach(|| hybridsplat::render(&self.inner, &scene.inner, &camera.inner))
            .map_err(py_err)?;
        let s = out.stats;
        Ok(HashMap::from([
            ("rays_traced".to_string(), s.rays_traced),
            ("bvh_nodes_visited".to_string(), s.bvh_nodes_visited),
            ("hits_blended".to_string(), s.hits_blended),
            ("pixel_count".to_string(), camera.inner.pixel_count() as u64),
        ]))
    }

    /// Per-Gaussian pruning scores as `(base, reflective)` lists.
    fn prune_scores(
        &self,
        py: Python<'_>,
        scene: &PyScene,
        views: Vec<PyCamera>,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let views: Vec<CameraView> = views.into_iter().map(|c| c.inner).collect();
        let s = py
            .detach(|| {
                score_all(
                    &self.inner,
                    &scene.inner,
                    &views,
                    None,
                    &ScoreOptions::default(),
                )
            })
            .map_err(py_err)?;
        Ok((s.base, s.reflective))
    }

    /// Pruning rounds measured against renders of the input scene.
    /// Returns the pruned scene and one `(round, removed_base, removed_reflective, psnr)` tuple per round.
    #[pyo3(signature = (scene, views, rounds = 4, ratio = 0.05, refit_steps = 0))]
    fn prune(
        &self,
        py: Python<'_>,
        scene: &PyScene,
        views: Vec<PyCamera>,
        rounds: usize,
        ratio: f64,
        refit_steps: usize,
    ) -> PyResult<(PyScene, Vec<(usize, usize, usize, f64)>)> {
        let views: Vec<CameraView> = views.into_iter().map(|c| c.inner).collect();
        let (pruned, log) = py
            .detach(|| {
                let targets = views
                    .iter()
                    .map(|v| {
                        hybridsplat::render(&self.inner, &scene.inner, v).map(|o| o.final_color)
                    })
                    .collect::<hybridsplat::Result<Vec<_>>>()?;
                let mut cfg = ScheduleConfig {
                    rounds,
                    ratio,
                    ..ScheduleConfig::default()
                };
                cfg.refit.iterations = refit_steps;
                prune_schedule(&self.inner, &scene.inner, &views, &targets, &cfg)
            })
            .map_err(py_err)?;
        let rows = log
            .iter()
            .map(|r| (r.round, r.removed_base, r.removed_reflective, r.psnr))
            .collect();
        Ok((PyScene { inner: pruned }, rows))
    }

    /// Gradient-descent fit; returns the fitted scene and the loss per iteration.
    #[pyo3(signature = (scene, views, targets, iterations = 100, lambda_norm = 0.0, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &self,
        py: Python<'_>,
        scene: &PyScene,
        views: Vec<PyCamera>,
        targets: Vec<PyImage>,
        iterations: usize,
        lambda_norm: f64,
        seed: u64,
    ) -> PyResult<(PyScene, Vec<f64>)> {
        let views: Vec<CameraView> = views.into_iter().map(|c| c.inner).collect();
        let targets: Vec<ChannelImage> = targets.into_iter().map(|t| t.inner).collect();
        let cfg = FitConfig {
            iterations,
            lambda_norm,
            seed,
            ..FitConfig::default()
        };
        let res = py
            .detach(|| fit_scene(&self.inner, &scene.inner, &views, &targets, &cfg))
            .map_err(py_err)?;
        Ok((
            PyScene { inner: res.scene },
            res.curve.iter().map(|r| r.loss).collect(),
        ))
    }

    fn mean_psnr(
        &self,
        py: Python<'_>,
        scene: &PyScene,
        views: Vec<PyCamera>,
        targets: Vec<PyImage>,
    ) -> PyResult<f64> {
        let views: Vec<CameraView> = views.into_iter().map(|c| c.inner).collect();
        let targets: Vec<ChannelImage> = targets.into_iter().map(|t| t.inner).collect();
        py.detach(|| mean_psnr(&self.inner, &scene.inner, &views, &targets))
            .map_err(py_err)
    }
}

#[pyfunction]
fn load_views(path: &str) -> PyResult<Vec<PyCamera>> {
    Ok(io::load_views(path)
        .map_err(py_err)?
        .into_iter()
        .map(|inner| PyCamera { inner })
        .collect())
}

#[pyfunction]
fn save_views(views: Vec<PyCamera>, path: &str) -> PyResult<()> {
    let views: Vec<CameraView> = views.into_iter().map(|c| c.inner).collect();
    io::save_views(&views, path).map_err(py_err)
}

#[pymodule]
fn hybridsplat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyRenderer>()?;
    m.add_function(wrap_pyfunction!(load_views, m)?)?;
    m.add_function(wrap_pyfunction!(save_views, m)?)?;
    Ok(())
}
