use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig};
use crate::audio::{synthesize_speech_for, AudioClip};
use crate::checkpoint::{canonical_digest, file_digest, sha256_hex, Checkpoint};
use crate::error::{Error, Result};
use crate::eval::feature::dataset_digest;
use crate::eval::{fgd, mean_beat_consistency, train_feature_encoder, variation, GestureFeatureEncoder, MetricReport};
use crate::numerics::derive_seed;
use crate::pose::synth::{generate as synth_clips, SynthConfig};
use crate::pose::{load_sequence, save_sequence, GestureSequence, PoseFormat, StyleClip};
use crate::predictor::{
    generate_many, train_predictor, GenerationRequest, PredictorEpochLog, PredictorModel, SamplingConfig, TrainingPair,
};
use crate::quantizer::{train_vqvae, VqEpochLog, VqVaeModel};
use crate::style::{
    cosine_distance, embed_style_codes_tsne, encode_style, intra_inter_distance, render_scatter_svg, silhouette_score,
    LabelledCode, StyleCodeTable,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
const STAGES_FILE: &str = "stages.json";

/// A gesture sequence with its audio and tags.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub sequence: GestureSequence,
    pub audio: AudioClip,
}

impl Sample {
    pub fn style(&self) -> &str {
        self.sequence.meta.style.as_deref().unwrap_or("unknown")
    }

    pub fn speaker(&self) -> &str {
        self.sequence.meta.speaker.as_deref().unwrap_or("default")
    }

    fn style_clip(&self) -> Result<StyleClip> {
        StyleClip::new(self.style().to_string(), self.sequence.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle followed by consecutive train/val/test blocks.
pub fn split_indices(n: usize, cfg: &super::SplitConfig, seed: u64) -> Split {
    let (tr, va, _) = cfg.counts(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 2)));
    let part = |r: std::ops::Range<usize>| {
        let mut v = idx[r].to_vec();
        v.sort_unstable();
        v
    };
    Split {
        train: part(0..tr),
        val: part(tr..tr + va),
        test: part(tr + va..n),
    }
}

fn synthetic_config(cfg: &ExperimentConfig, count: usize) -> SynthConfig {
    SynthConfig {
        seed: cfg.seed,
        num_sequences: count,
        frames: cfg.data.frames,
        style_count: cfg.data.styles,
        speaker_count: cfg.data.speakers,
        fps: cfg.data.fps,
        ..SynthConfig::default()
    }
}

/// Loads or synthesizes the dataset described by `cfg.data`.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => synth_clips(&synthetic_config(cfg, d.sequences))?
            .into_iter()
            .enumerate()
            .map(|(k, clip)| {
                let audio = synthesize_speech_for(&clip.sequence, d.sample_rate, derive_seed(cfg.seed, 5000 + k as u64))?;
                Ok(Sample {
                    name: format!("seq{k:03}"),
                    sequence: clip.sequence,
                    audio,
                })
            })
            .collect(),
        DataSource::Directory => {
            let dir = d.path.as_ref().expect("validated");
            let files = super::files::pose_files(dir)?;
            files
                .iter()
                .map(|p| {
                    let sequence = load_sequence(p, PoseFormat::Auto)?;
                    if sequence.meta.style.is_none() {
                        return Err(Error::format(p, "pose file has no style tag"));
                    }
                    let audio = AudioClip::load_wav(&p.with_extension("wav"))?;
                    if audio.sample_rate() != d.sample_rate {
                        return Err(Error::format(p, format!("audio at {} Hz, config expects {}", audio.sample_rate(), d.sample_rate)));
                    }
                    let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("seq").to_string();
                    Ok(Sample { name, sequence, audio })
                })
                .collect()
        }
    }
}

/// Another training sample of the same style, or `i` itself when alone.
fn reference_index(data: &[Sample], pool: &[usize], i: usize) -> usize {
    let same: Vec<usize> = pool.iter().copied().filter(|&j| data[j].style() == data[i].style()).collect();
    match same.iter().position(|&j| j == i) {
        Some(p) if same.len() > 1 => same[(p + 1) % same.len()],
        Some(_) => i,
        None => same.first().copied().unwrap_or(i),
    }
}

pub fn training_pairs(data: &[Sample], train: &[usize]) -> Result<Vec<TrainingPair>> {
    train
        .iter()
        .map(|&i| {
            let r = reference_index(data, train, i);
            Ok(TrainingPair {
                audio: data[i].audio.clone(),
                gesture: data[i].sequence.clone(),
                style: data[r].style_clip()?,
                identity: data[i].speaker().to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSeparation {
    pub codes: usize,
    pub intra: f64,
    pub inter: f64,
    pub silhouette: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub split: [usize; 3],
    pub metrics: MetricReport,
    pub style: StyleSeparation,
    pub vq_final: Option<VqEpochLog>,
    pub predictor_final: Option<PredictorEpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digest of the inputs that determine this stage's outputs.
    pub key: String,
    /// Output file (relative to the run directory) to sha256.
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
    pub resumed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub input_digests: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
    pub report_digest: String,
    pub report: PipelineReport,
    pub total_seconds: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Output files whose digests differ between two runs.
    pub fn differences(&self, other: &RunManifest) -> Vec<String> {
        let mut diff = Vec::new();
        if self.config_digest != other.config_digest {
            diff.push("config".to_string());
        }
        for (stage, rec) in &self.stages {
            for (file, digest) in &rec.outputs {
                let theirs = other.stages.get(stage).and_then(|r| r.outputs.get(file));
                if theirs != Some(digest) {
                    diff.push(format!("{stage}/{file}"));
                }
            }
        }
        if self.report_digest != other.report_digest {
            diff.push(REPORT_FILE.to_string());
        }
        diff
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Reuse stage outputs whose key and file digests still match.
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { resume: true }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

struct Runner {
    dir: PathBuf,
    options: RunOptions,
    stages: BTreeMap<String, StageRecord>,
}

impl Runner {
    fn new(dir: &Path, options: RunOptions) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(STAGES_FILE);
        let stages = if options.resume && path.exists() {
            read_json(&path).unwrap_or_default()
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            options,
            stages,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn reusable(&self, stage: &str, key: &str) -> bool {
        if !self.options.resume {
            return false;
        }
        let Some(rec) = self.stages.get(stage) else { return false };
        rec.key == key
            && rec
                .outputs
                .iter()
                .all(|(f, d)| file_digest(&self.path(f)).map(|x| &x == d).unwrap_or(false))
    }

    /// Runs `body` unless a matching record exists; `body` returns the
    /// relative paths it wrote.
    fn stage(&mut self, stage: &str, key: &str, body: impl FnOnce(&Path) -> Result<Vec<String>>) -> Result<()> {
        if self.reusable(stage, key) {
            log::info!("stage {stage}: reusing outputs");
            if let Some(r) = self.stages.get_mut(stage) {
                r.resumed = true;
            }
            return Ok(());
        }
        log::info!("stage {stage}: running");
        let start = Instant::now();
        let wrap = |e: Error| Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        };
        let files = body(&self.dir).map_err(wrap)?;
        let mut outputs = BTreeMap::new();
        for f in files {
            let d = file_digest(&self.path(&f)).map_err(wrap)?;
            outputs.insert(f, d);
        }
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                key: key.to_string(),
                outputs,
                seconds: start.elapsed().as_secs_f64(),
                resumed: false,
            },
        );
        write_json(&self.path(STAGES_FILE), &self.stages).map_err(wrap)?;
        Ok(())
    }
}

fn load_checkpoint<T>(dir: &Path, rel: &str, f: impl FnOnce(&Checkpoint) -> Result<T>) -> Result<T> {
    f(&Checkpoint::load(&dir.join(rel))?)
}

/// Style clips for the separation check: fresh synthetic instances of the
/// training styles, or every dataset sequence for directory data.
fn separation_clips(cfg: &ExperimentConfig, data: &[Sample]) -> Result<Vec<StyleClip>> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let all = synth_clips(&synthetic_config(cfg, cfg.data.sequences + cfg.eval.style_clips))?;
            Ok(all.into_iter().skip(cfg.data.sequences).collect())
        }
        DataSource::Directory => data.iter().map(Sample::style_clip).collect(),
    }
}

/// Sampling seeds for test request `j`; identical across configs sharing
/// a seed.
pub fn eval_seeds(seed: u64, request: usize, samples: usize) -> Vec<u64> {
    let base = derive_seed(seed, 70);
    (0..samples).map(|s| derive_seed(base, (request * samples + s) as u64)).collect()
}

/// Data prep, VQ-VAE, feature encoder, predictor, generation on the test
/// split, style separation, metric report. Every stage is checkpointed in
/// `out` and skipped on rerun when its inputs are unchanged.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    run_pipeline_with(cfg, out, RunOptions::default())
}

pub fn run_pipeline_with(cfg: &ExperimentConfig, out: &Path, options: RunOptions) -> Result<RunManifest> {
    cfg.validate()?;
    let start = Instant::now();
    let mut run = Runner::new(out, options)?;
    let stage_err = |stage: &str| {
        let stage = stage.to_string();
        move |e: Error| Error::Stage {
            stage,
            source: Box::new(e),
        }
    };

    let data = load_dataset(cfg).map_err(stage_err("data"))?;
    let split = split_indices(data.len(), &cfg.split, cfg.seed);
    if split.train.is_empty() || split.test.len() < 2 {
        return Err(Error::Config(format!(
            "split of {} sequences leaves {} train / {} test",
            data.len(),
            split.train.len(),
            split.test.len()
        )));
    }
    let seqs = |idx: &[usize]| idx.iter().map(|&i| data[i].sequence.clone()).collect::<Vec<_>>();
    let (train_seqs, test_seqs) = (seqs(&split.train), seqs(&split.test));
    let data_digest = canonical_digest(&(
        dataset_digest(&data.iter().map(|s| s.sequence.clone()).collect::<Vec<_>>()),
        data.iter().map(|s| sha256_hex(&f64_bytes(s.audio.samples()))).collect::<Vec<_>>(),
        &split,
    ));
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset".to_string(), data_digest.clone());
    if let (DataSource::Directory, Some(dir)) = (cfg.data.source, &cfg.data.path) {
        for s in &data {
            for ext in ["pose", "poseb", "bin", "wav"] {
                let p = dir.join(format!("{}.{ext}", s.name));
                if p.exists() {
                    inputs.insert(format!("{}.{ext}", s.name), file_digest(&p)?);
                }
            }
        }
    }
    run.stage("data", &data_digest, |dir| {
        write_json(&dir.join("split.json"), &split)?;
        Ok(vec!["split.json".into()])
    })?;

    let vq_key = canonical_digest(&("vq", &data_digest, &cfg.vq, &cfg.vq_train, cfg.seed));
    run.stage("vq", &vq_key, |dir| {
        let (model, log) = train_vqvae(&train_seqs, &cfg.vq, &cfg.vq_train, derive_seed(cfg.seed, 1))?;
        model.to_checkpoint().save(&dir.join("vq.ckpt"))?;
        write_json(&dir.join("vq_log.json"), &log)?;
        Ok(vec!["vq.ckpt".into(), "vq_log.json".into()])
    })?;
    let vq = load_checkpoint(out, "vq.ckpt", VqVaeModel::from_checkpoint).map_err(stage_err("vq"))?;

    let fe_key = canonical_digest(&("feature", &data_digest, &cfg.feature_encoder, cfg.seed));
    run.stage("feature_encoder", &fe_key, |dir| {
        let (enc, _) = train_feature_encoder(&train_seqs, &cfg.feature_encoder, derive_seed(cfg.seed, 3))?;
        enc.to_checkpoint().save(&dir.join("feature_encoder.ckpt"))?;
        Ok(vec!["feature_encoder.ckpt".into()])
    })?;
    let encoder = load_checkpoint(out, "feature_encoder.ckpt", GestureFeatureEncoder::from_checkpoint)
        .map_err(stage_err("feature_encoder"))?;

    let pred_key = canonical_digest(&("predictor", &vq_key, &cfg.predictor, &cfg.predictor_train));
    run.stage("predictor", &pred_key, |dir| {
        let pairs = training_pairs(&data, &split.train)?;
        let (model, log) = train_predictor(&pairs, &vq, &cfg.predictor, &cfg.predictor_train, derive_seed(cfg.seed, 4))?;
        model.to_checkpoint().save(&dir.join("predictor.ckpt"))?;
        write_json(&dir.join("predictor_log.json"), &log)?;
        Ok(vec!["predictor.ckpt".into(), "predictor_log.json".into()])
    })?;
    let predictor = load_checkpoint(out, "predictor.ckpt", PredictorModel::from_checkpoint).map_err(stage_err("predictor"))?;

    let gen_key = canonical_digest(&("generate", &pred_key, cfg.eval.samples, &cfg.eval.sampling));
    run.stage("generate", &gen_key, |dir| {
        let gdir = dir.join("generated");
        fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
        let mut files = Vec::new();
        for (j, &i) in split.test.iter().enumerate() {
            let r = reference_index(&data, &split.train, i);
            let identity = if predictor.identities.iter().any(|t| t == data[i].speaker()) {
                data[i].speaker().to_string()
            } else {
                predictor.identities[0].clone()
            };
            let req = GenerationRequest {
                audio: data[i].audio.clone(),
                style: data[r].style_clip()?,
                identity,
                sampling: SamplingConfig {
                    mode: cfg.eval.sampling,
                    seed: 0,
                },
                initial_pose: None,
            };
            for (s, g) in generate_many(&vq, &predictor, &req, &eval_seeds(cfg.seed, j, cfg.eval.samples))?
                .into_iter()
                .enumerate()
            {
                let rel = format!("generated/{}_s{s:02}.poseb", data[i].name);
                save_sequence(&g.sequence, &dir.join(&rel), PoseFormat::Binary)?;
                files.push(rel);
            }
        }
        Ok(files)
    })?;

    let style_key = canonical_digest(&("style", &pred_key, cfg.eval.style_clips, &cfg.eval.tsne));
    run.stage("style", &style_key, |dir| {
        let clips = separation_clips(cfg, &data)?;
        let rows = clips
            .iter()
            .map(|c| {
                Ok(LabelledCode {
                    label: c.style_id.clone(),
                    code: encode_style(&predictor.style, &predictor.store, c)?.vector,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let table = StyleCodeTable::new(rows)?;
        table.save(&dir.join("style_codes.json"))?;
        let codes: Vec<Vec<f64>> = table.rows.iter().map(|r| r.code.clone()).collect();
        let labels: Vec<String> = table.rows.iter().map(|r| r.label.clone()).collect();
        let points = embed_style_codes_tsne(&codes, &cfg.eval.tsne)?;
        write_json(&dir.join("tsne.json"), &(&labels, &points))?;
        let svg = render_scatter_svg(&points, &labels);
        fs::write(dir.join("tsne.svg"), svg).map_err(|e| Error::io(dir.join("tsne.svg"), e))?;
        Ok(vec!["style_codes.json".into(), "tsne.json".into(), "tsne.svg".into()])
    })?;

    let report_key = canonical_digest(&("report", &gen_key, &style_key, &fe_key));
    let mut report_out = None;
    run.stage("report", &report_key, |dir| {
        let mut generated = Vec::new();
        let mut var_sum = 0.0;
        let mut bc_inputs = Vec::new();
        for &i in &split.test {
            let samples = (0..cfg.eval.samples)
                .map(|s| load_sequence(&dir.join(format!("generated/{}_s{s:02}.poseb", data[i].name)), PoseFormat::Binary))
                .collect::<Result<Vec<_>>>()?;
            var_sum += variation(&samples)?;
            for (s, g) in samples.iter().enumerate() {
                bc_inputs.push((format!("{}_s{s:02}", data[i].name), g.clone(), i));
            }
            generated.extend(samples);
        }
        let pairs: Vec<(String, &GestureSequence, &AudioClip)> =
            bc_inputs.iter().map(|(n, g, i)| (n.clone(), g, &data[*i].audio)).collect();
        let (bc, per_sequence) = mean_beat_consistency(&pairs);
        let mut digests = BTreeMap::new();
        digests.insert("experiment".to_string(), cfg.digest());
        digests.insert("vq_config".to_string(), vq.config_digest());
        digests.insert("vq_training".to_string(), vq.training_digest.clone());
        digests.insert("predictor_config".to_string(), predictor.config_digest());
        digests.insert("feature_encoder".to_string(), encoder.to_checkpoint().digest());
        let metrics = MetricReport {
            variation: var_sum / split.test.len() as f64,
            fgd: fgd(&test_seqs, &generated, &encoder)?,
            bc,
            real_count: test_seqs.len(),
            generated_count: generated.len(),
            variation_samples: cfg.eval.samples,
            digests,
            per_sequence,
        };
        let table = StyleCodeTable::load(&dir.join("style_codes.json"))?;
        let codes: Vec<Vec<f64>> = table.rows.iter().map(|r| r.code.clone()).collect();
        let labels: Vec<String> = table.rows.iter().map(|r| r.label.clone()).collect();
        let (intra, inter) = intra_inter_distance(&codes, &labels, cosine_distance);
        let (_, points): (Vec<String>, Vec<[f64; 2]>) = read_json(&dir.join("tsne.json"))?;
        let vq_log: crate::quantizer::VqTrainLog = read_json(&dir.join("vq_log.json"))?;
        let p_log: crate::predictor::PredictorTrainLog = read_json(&dir.join("predictor_log.json"))?;
        let report = PipelineReport {
            split: [split.train.len(), split.val.len(), split.test.len()],
            metrics,
            style: StyleSeparation {
                codes: codes.len(),
                intra,
                inter,
                silhouette: silhouette_score(&points, &labels)?,
            },
            vq_final: vq_log.epochs.last().cloned(),
            predictor_final: p_log.epochs.last().cloned(),
        };
        write_json(&dir.join(REPORT_FILE), &report)?;
        report_out = Some(report);
        Ok(vec![REPORT_FILE.into()])
    })?;
    let report: PipelineReport = match report_out {
        Some(r) => r,
        None => read_json(&out.join(REPORT_FILE)).map_err(stage_err("report"))?,
    };

    let manifest = RunManifest {
        name: cfg.name.clone(),
        config_digest: cfg.digest(),
        config: cfg.clone(),
        input_digests: inputs,
        stages: run.stages.clone(),
        report_digest: file_digest(&out.join(REPORT_FILE))?,
        report,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()).map_err(|e| Error::io(out.join("config.toml"), e))?;
    Ok(manifest)
}

/// Reruns the manifest's config from scratch into `out`.
pub fn rerun_manifest(manifest: &RunManifest, out: &Path) -> Result<RunManifest> {
    if manifest.config.digest() != manifest.config_digest {
        return Err(Error::Config("manifest config does not match its digest".into()));
    }
    run_pipeline_with(&manifest.config, out, RunOptions { resume: false })
}

fn f64_bytes(xs: &[f64]) -> Vec<u8> {
    xs.iter().flat_map(|v| v.to_le_bytes()).collect()
}
