use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError};
use pyo3::prelude::*;

use gesturegen::audio::{compute_mfcc, extract_audio_beats, AudioClip};
use gesturegen::checkpoint::Checkpoint;
use gesturegen::eval::{beat_consistency, fgd_features, BeatSet};
use gesturegen::harness::{run_pipeline_with, ExperimentConfig, RunOptions};
use gesturegen::numerics::Tensor;
use gesturegen::pose::synth::{generate as synth, SynthConfig};
use gesturegen::pose::{load_sequence, save_sequence, GestureSequence, PoseFormat, SequenceMeta, StyleClip};
use gesturegen::predictor::{generate, GenerationRequest, PredictorModel, SamplingConfig, SamplingMode};
use gesturegen::quantizer::{train_vqvae, IndexSequence, VqVaeModel};
use gesturegen::style::encode_style;

create_exception!(gesturegen_py, GestureGenError, PyRuntimeError);

fn err(e: gesturegen::Error) -> PyErr {
    match e {
        gesturegen::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => GestureGenError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(GestureGenError::new_err("rows differ in length"));
    }
    let n = rows.len();
    Tensor::new(vec![n, cols], rows.into_iter().flatten().collect()).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// `N` frames of 156 pose parameters.
#[pyclass(name = "GestureSequence", module = "gesturegen_py", from_py_object)]
#[derive(Clone)]
struct PySequence {
    inner: GestureSequence,
}

#[pymethods]
impl PySequence {
    #[new]
    #[pyo3(signature = (frames, fps=30.0, style=None, speaker=None))]
    fn new(frames: Vec<Vec<f64>>, fps: f64, style: Option<String>, speaker: Option<String>) -> PyResult<Self> {
        let data: Vec<f64> = frames.into_iter().flatten().collect();
        let inner = GestureSequence::new(data, fps).map_err(err)?.with_meta(SequenceMeta { style, speaker });
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_sequence(&path, PoseFormat::Auto).map_err(err)?,
        })
    }

    /// Text unless the extension is `.poseb` or `.bin`.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_sequence(&self.inner, &path, PoseFormat::Auto).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn fps(&self) -> f64 {
        self.inner.fps()
    }

    #[getter]
    fn style(&self) -> Option<String> {
        self.inner.meta.style.clone()
    }

    #[getter]
    fn speaker(&self) -> Option<String> {
        self.inner.meta.speaker.clone()
    }

    fn frames(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.to_tensor())
    }

    fn __repr__(&self) -> String {
        format!(
            "GestureSequence(frames={}, fps={}, style={:?})",
            self.inner.len(),
            self.inner.fps(),
            self.inner.meta.style
        )
    }
}

#[pyclass(name = "AudioClip", module = "gesturegen_py", from_py_object)]
#[derive(Clone)]
struct PyAudio {
    inner: AudioClip,
}

#[pymethods]
impl PyAudio {
    #[new]
    fn new(samples: Vec<f64>, sample_rate: u32) -> PyResult<Self> {
        Ok(Self {
            inner: AudioClip::new(samples, sample_rate).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: AudioClip::load_wav(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_wav(&path).map_err(err)
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate()
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.inner.duration()
    }

    fn samples(&self) -> Vec<f64> {
        self.inner.samples().to_vec()
    }

    /// `N×64` MFCC frames.
    #[pyo3(signature = (fps=30.0))]
    fn mfcc(&self, fps: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&compute_mfcc(&self.inner, fps).map_err(err)?.frame_major()))
    }

    /// Onset times in seconds.
    fn beats(&self) -> Vec<f64> {
        extract_audio_beats(&self.inner).times().to_vec()
    }
}

/// Synthetic pose clips with style and speaker tags.
#[pyfunction]
#[pyo3(signature = (seed=0, count=8, frames=88, styles=4, speakers=2))]
fn synthesize(seed: u64, count: usize, frames: usize, styles: usize, speakers: usize) -> PyResult<Vec<PySequence>> {
    let cfg = SynthConfig {
        seed,
        num_sequences: count,
        frames,
        style_count: styles,
        speaker_count: speakers,
        ..SynthConfig::default()
    };
    Ok(synth(&cfg)
        .map_err(err)?
        .into_iter()
        .map(|c| PySequence { inner: c.sequence })
        .collect())
}

/// Speech-like audio whose rhythm follows the motion of `sequence`.
#[pyfunction]
#[pyo3(signature = (sequence, sample_rate=22000, seed=0))]
fn synthesize_speech(sequence: &PySequence, sample_rate: u32, seed: u64) -> PyResult<PyAudio> {
    Ok(PyAudio {
        inner: gesturegen::audio::synthesize_speech_for(&sequence.inner, sample_rate, seed).map_err(err)?,
    })
}

#[pyclass(name = "ExperimentConfig", module = "gesturegen_py", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// `desk`, `tiny` or `full`.
    #[staticmethod]
    #[pyo3(signature = (name="desk"))]
    fn preset(name: &str) -> PyResult<Self> {
        let inner = match name {
            "desk" => ExperimentConfig::desk(),
            "tiny" => ExperimentConfig::tiny(),
            "full" => ExperimentConfig::full(),
            other => return Err(GestureGenError::new_err(format!("unknown preset `{other}`"))),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_toml_str(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }
}

/// Runs every stage into `out` and returns the manifest as a dict.
#[pyfunction]
#[pyo3(signature = (config, out, resume=true))]
fn run_pipeline<'py>(py: Python<'py>, config: &PyConfig, out: PathBuf, resume: bool) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let manifest = py
        .detach(|| run_pipeline_with(&cfg, &out, RunOptions { resume }))
        .map_err(err)?;
    let text = serde_json::to_string(&manifest).map_err(|e| GestureGenError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

#[pyclass(name = "VqVae", module = "gesturegen_py")]
struct PyVq {
    inner: VqVaeModel,
}

#[pymethods]
impl PyVq {
    /// Trains with the `vq` and `vq_train` sections of `config`.
    #[staticmethod]
    #[pyo3(signature = (sequences, config, seed=0))]
    fn train(py: Python<'_>, sequences: Vec<PySequence>, config: &PyConfig, seed: u64) -> PyResult<Self> {
        let seqs: Vec<GestureSequence> = sequences.into_iter().map(|s| s.inner).collect();
        let cfg = config.inner.clone();
        let (inner, _) = py
            .detach(|| train_vqvae(&seqs, &cfg.vq, &cfg.vq_train, seed))
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            inner: VqVaeModel::from_checkpoint(&ck).map_err(err)?,
        })
    }

    /// Returns the file's SHA-256.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        self.inner.to_checkpoint().save(&path).map_err(err)
    }

    #[getter]
    fn codebook_size(&self) -> usize {
        self.inner.codebook_size()
    }

    /// `(hand, body)` index lists.
    fn tokenize(&self, sequence: &PySequence) -> PyResult<(Vec<usize>, Vec<usize>)> {
        let (h, b) = self.inner.tokenize(&sequence.inner).map_err(err)?;
        Ok((h.indices, b.indices))
    }

    #[pyo3(signature = (hand, body, frames, fps=30.0))]
    fn detokenize(&self, hand: Vec<usize>, body: Vec<usize>, frames: usize, fps: f64) -> PyResult<PySequence> {
        let m = self.inner.codebook_size();
        let h = IndexSequence::new(hand, m).map_err(err)?;
        let b = IndexSequence::new(body, m).map_err(err)?;
        Ok(PySequence {
            inner: self.inner.detokenize(&h, &b, frames, fps).map_err(err)?,
        })
    }

    fn reconstruction_rmse(&self, sequence: &PySequence) -> PyResult<f64> {
        self.inner.reconstruction_rmse(&sequence.inner).map_err(err)
    }
}

#[pyclass(name = "Predictor", module = "gesturegen_py")]
struct PyPredictor {
    inner: PredictorModel,
}

fn style_clip(seq: &PySequence) -> PyResult<StyleClip> {
    let id = seq.inner.meta.style.clone().unwrap_or_else(|| "reference".into());
    StyleClip::new(id, seq.inner.clone()).map_err(err)
}

#[pymethods]
impl PyPredictor {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            inner: PredictorModel::from_checkpoint(&ck).map_err(err)?,
        })
    }

    #[getter]
    fn identities(&self) -> Vec<String> {
        self.inner.identities.clone()
    }

    /// Style code of a reference clip.
    fn style_code(&self, clip: &PySequence) -> PyResult<Vec<f64>> {
        let c = style_clip(clip)?;
        Ok(encode_style(&self.inner.style, &self.inner.store, &c).map_err(err)?.vector)
    }

    /// `mode` is `greedy`, `temperature` or `topk`.
    #[pyo3(signature = (vq, audio, style, identity, mode="greedy", seed=0, temperature=1.0, k=8))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        py: Python<'_>,
        vq: &PyVq,
        audio: &PyAudio,
        style: &PySequence,
        identity: String,
        mode: &str,
        seed: u64,
        temperature: f64,
        k: usize,
    ) -> PyResult<PySequence> {
        let mode = match mode {
            "greedy" => SamplingMode::Greedy,
            "temperature" | "temp" => SamplingMode::Temperature { temperature },
            "topk" | "top-k" => SamplingMode::TopK { k, temperature },
            other => return Err(GestureGenError::new_err(format!("unknown sampling mode `{other}`"))),
        };
        let req = GenerationRequest {
            audio: audio.inner.clone(),
            style: style_clip(style)?,
            identity,
            sampling: SamplingConfig { mode, seed },
            initial_pose: None,
        };
        let g = py.detach(|| generate(&vq.inner, &self.inner, &req)).map_err(err)?;
        Ok(PySequence { inner: g.sequence })
    }
}

/// Variation across samples of one request (same shape each).
#[pyfunction]
fn variation(samples: Vec<PySequence>) -> PyResult<f64> {
    let seqs: Vec<GestureSequence> = samples.into_iter().map(|s| s.inner).collect();
    gesturegen::eval::variation(&seqs).map_err(err)
}

/// Fréchet distance between two feature sets, one row per sample.
#[pyfunction]
fn frechet_distance(real: Vec<Vec<f64>>, generated: Vec<Vec<f64>>) -> PyResult<f64> {
    fgd_features(&matrix(real)?, &matrix(generated)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (motion_beats, audio_beats, sigma=0.1))]
fn beat_consistency_score(motion_beats: Vec<f64>, audio_beats: Vec<f64>, sigma: f64) -> PyResult<f64> {
    let m = BeatSet::new(motion_beats).map_err(err)?;
    let a = BeatSet::new(audio_beats).map_err(err)?;
    Ok(beat_consistency(&m, &a, sigma))
}

#[pymodule]
pub fn gesturegen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GestureGenError", m.py().get_type::<GestureGenError>())?;
    m.add_class::<PySequence>()?;
    m.add_class::<PyAudio>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyVq>()?;
    m.add_class::<PyPredictor>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_speech, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(variation, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(beat_consistency_score, m)?)?;
    Ok(())
}
