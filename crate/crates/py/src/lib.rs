//! Python bindings: configs, the trained system, data rendering and metrics.
//!
//! Arrays cross the boundary as [`Array`] (a shape plus flat row-major
//! `float` data), which converts cheaply to numpy with
//! `np.array(a.data()).reshape(a.shape)`.

use std::path::PathBuf;

use arlon_core::eval;
use arlon_core::latent_vqvae::IndexGrid;
use arlon_core::pipeline::{self, GenOptions, GenerationOutput, RunConfig, System, Trainer};
use arlon_core::synth_data::{self, Corpus, SceneSpec};
use arlon_core::{Error, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

type Res<T> = PyResult<T>;

#[pyclass(name = "Array", module = "arlon", from_py_object)]
#[derive(Clone)]
pub struct Array {
    pub inner: Tensor,
}

#[pymethods]
impl Array {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> Res<Self> {
        Ok(Array {
            inner: Tensor::new(&shape, data).map_err(py_err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    /// Writes the array in the ARLV binary format.
    fn save(&self, path: PathBuf) -> Res<()> {
        arlon_core::io::write_video(&path, &self.inner).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> Res<Self> {
        Ok(Array {
            inner: arlon_core::io::read_video(&path).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Array(shape={:?})", self.inner.shape())
    }
}

fn arr(t: Tensor) -> Array {
    Array { inner: t }
}

#[pyclass(name = "RunConfig", module = "arlon", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    pub inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        PyRunConfig {
            inner: RunConfig::default(),
        }
    }

    /// Reads a TOML config; relative paths resolve against its directory.
    #[staticmethod]
    fn load(path: PathBuf) -> Res<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::load(&path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> Res<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::from_toml(text).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> Res<String> {
        self.inner.to_toml().map_err(py_err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, p: PathBuf) {
        self.inner.out_dir = p;
    }

    #[getter]
    fn dataset_root(&self) -> PathBuf {
        self.inner.dataset_root.clone()
    }

    #[setter]
    fn set_dataset_root(&mut self, p: PathBuf) {
        self.inner.dataset_root = p;
    }
}

#[pyclass(name = "Generation", module = "arlon")]
pub struct Generation {
    #[pyo3(get)]
    video: Array,
    #[pyo3(get)]
    coarse: Array,
    #[pyo3(get)]
    latents: Array,
    #[pyo3(get)]
    features: Array,
    /// Fine code grid `(t, h, w)` and its flat indices.
    #[pyo3(get)]
    grid_dims: (usize, usize, usize),
    #[pyo3(get)]
    grid_indices: Vec<usize>,
    /// `(start, end)` latent frames of each DiT segment.
    #[pyo3(get)]
    segments: Vec<(usize, usize)>,
    #[pyo3(get)]
    dit_calls: usize,
    #[pyo3(get)]
    denoiser_evals: usize,
}

impl From<GenerationOutput> for Generation {
    fn from(g: GenerationOutput) -> Self {
        let d = g.grid.dims;
        Generation {
            segments: g.plan.segments.iter().map(|s| (s.frames.start, s.frames.end)).collect(),
            video: arr(g.video),
            coarse: arr(g.coarse),
            latents: arr(g.latents),
            features: arr(g.features),
            grid_dims: (d[0], d[1], d[2]),
            grid_indices: g.grid.indices,
            dit_calls: g.dit_calls,
            denoiser_evals: g.denoiser_evals,
        }
    }
}

#[pyclass(name = "System", module = "arlon")]
pub struct PySystem {
    inner: System,
}

impl PySystem {
    fn opts(&self, seed: Option<u64>, steps: Option<usize>, injected: bool) -> GenOptions {
        let base = GenOptions::from_config(&self.inner.cfg.generation);
        GenOptions {
            seed: seed.unwrap_or(base.seed),
            steps: steps.unwrap_or(base.steps),
            injected,
            ..base
        }
    }
}

#[pymethods]
impl PySystem {
    /// Loads every stage checkpoint from the config's `out_dir`.
    #[staticmethod]
    fn load(config: &PyRunConfig) -> Res<Self> {
        Ok(PySystem {
            inner: System::load(config.inner.clone()).map_err(py_err)?,
        })
    }

    /// Freshly initialized components, for plumbing checks.
    #[staticmethod]
    fn untrained(config: &PyRunConfig) -> Res<Self> {
        Ok(PySystem {
            inner: System::untrained(config.inner.clone()).map_err(py_err)?,
        })
    }

    #[pyo3(signature = (prompt, seed=None, steps=None, injected=true))]
    fn generate(&self, prompt: &str, seed: Option<u64>, steps: Option<usize>, injected: bool) -> Res<Generation> {
        let o = self.opts(seed, steps, injected);
        Ok(self.inner.generate_short(prompt, &o).map_err(py_err)?.into())
    }

    /// `frames` latent frames in overlapping segments.
    #[pyo3(signature = (prompt, frames, seed=None, steps=None, injected=true))]
    fn generate_long(&self, prompt: &str, frames: usize, seed: Option<u64>, steps: Option<usize>, injected: bool) -> Res<Generation> {
        let o = self.opts(seed, steps, injected);
        Ok(self.inner.generate_long(prompt, frames, &o).map_err(py_err)?.into())
    }

    #[pyo3(signature = (prompts, frames_per_prompt, seed=None, steps=None, injected=true))]
    fn generate_progressive(
        &self,
        prompts: Vec<String>,
        frames_per_prompt: usize,
        seed: Option<u64>,
        steps: Option<usize>,
        injected: bool,
    ) -> Res<Generation> {
        let o = self.opts(seed, steps, injected);
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        Ok(self.inner.generate_progressive(&refs, frames_per_prompt, &o).map_err(py_err)?.into())
    }

    /// `(T, H, W, 3)` video to `((t, h, w), indices)` on the fine code grid.
    fn tokenize(&self, video: &Array) -> Res<((usize, usize, usize), Vec<usize>)> {
        let g = self.inner.tokenize_video(&video.inner).map_err(py_err)?;
        Ok(((g.dims[0], g.dims[1], g.dims[2]), g.indices))
    }

    fn detokenize(&self, dims: (usize, usize, usize), indices: Vec<usize>) -> Res<Array> {
        let c = &self.inner.cfg.vq_fine;
        let g = IndexGrid::new([dims.0, dims.1, dims.2], c.compression, c.codebook_size, indices).map_err(py_err)?;
        Ok(arr(self.inner.detokenize(&g).map_err(py_err)?))
    }

    fn reconstruct(&self, video: &Array) -> Res<Array> {
        Ok(arr(self.inner.vae_reconstruct(&video.inner).map_err(py_err)?))
    }
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Res<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {s:?}")))
}

/// Renders one synthetic scene as a `(frames, size, size, 3)` array.
#[pyfunction]
#[pyo3(signature = (shape, color, motion, frames=16, size=32, speed=1, seed=0))]
fn render_scene(shape: &str, color: &str, motion: &str, frames: usize, size: usize, speed: u32, seed: u64) -> Res<Array> {
    let spec = SceneSpec {
        shape: parse("shape", shape)?,
        color: parse("color", color)?,
        motion: parse("motion", motion)?,
        speed,
        seed,
    };
    Ok(arr(synth_data::render_scene(&spec, frames, size).map_err(py_err)?))
}

/// Writes the corpus to `dataset_root`; returns the number of videos.
#[pyfunction]
#[pyo3(signature = (config, overwrite=false))]
fn build_corpus(config: &PyRunConfig, overwrite: bool) -> Res<usize> {
    let c = &config.inner;
    Ok(synth_data::build_corpus(&c.data, &c.dataset_root, overwrite).map_err(py_err)?.entries.len())
}

/// Runs every training stage; returns `(stage, skipped, final_loss)` rows.
#[pyfunction]
#[pyo3(signature = (config, resume=true))]
fn train_all(config: &PyRunConfig, resume: bool) -> Res<Vec<(String, bool, f64)>> {
    let corpus = Corpus::load(&config.inner.dataset_root).map_err(py_err)?;
    let reports = Trainer::new(&config.inner, &corpus).train_all(resume).map_err(py_err)?;
    Ok(reports.into_iter().map(|r| (r.stage, r.skipped, r.final_loss)).collect())
}

/// `(start, end)` latent frames per segment.
#[pyfunction]
#[pyo3(signature = (total, segment_len, overlap, truncate=false))]
fn plan_segments(total: usize, segment_len: usize, overlap: usize, truncate: bool) -> Res<Vec<(usize, usize)>> {
    let p = pipeline::plan_segments(total, segment_len, overlap, truncate).map_err(py_err)?;
    Ok(p.segments.iter().map(|s| (s.frames.start, s.frames.end)).collect())
}

/// Nearest codebook entry per row, lowest index on ties.
#[pyfunction]
fn quantize(vectors: &Array, codebook: &Array) -> Res<Vec<usize>> {
    arlon_core::latent_vqvae::quantize(&vectors.inner, &codebook.inner).map_err(py_err)
}

#[pyfunction]
fn tokenize_text(text: &str) -> Res<Vec<usize>> {
    synth_data::tokenize(text).map_err(py_err)
}

#[pyfunction]
fn psnr(a: &Array, b: &Array) -> Res<f64> {
    eval::psnr(&a.inner, &b.inner).map_err(py_err)
}

#[pyfunction]
fn temporal_consistency(video: &Array) -> Res<f64> {
    eval::temporal_consistency(&video.inner).map_err(py_err)
}

#[pyfunction]
fn dynamic_degree(video: &Array) -> Res<f64> {
    eval::dynamic_degree(&video.inner).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (coarse, generated, threshold=eval::DEFAULT_IOU_THRESHOLD))]
fn layout_iou(coarse: &Array, generated: &Array, threshold: f64) -> Res<f64> {
    eval::layout_iou(&coarse.inner, &generated.inner, threshold).map_err(py_err)
}

#[pymodule]
fn arlon(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Array>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PySystem>()?;
    m.add_class::<Generation>()?;
    m.add_function(wrap_pyfunction!(render_scene, m)?)?;
    m.add_function(wrap_pyfunction!(build_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train_all, m)?)?;
    m.add_function(wrap_pyfunction!(plan_segments, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize_text, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_degree, m)?)?;
    m.add_function(wrap_pyfunction!(layout_iou, m)?)?;
    Ok(())
}
