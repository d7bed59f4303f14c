use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use gesturegen::audio::{compute_mfcc, extract_audio_beats, AudioClip};
use gesturegen::checkpoint::{file_digest, Checkpoint};
use gesturegen::eval::{train_feature_encoder, GestureFeatureEncoder};
use gesturegen::harness::{
    ablation_sweep, evaluate_dirs, load_pose_dir, pose_files, rerun_manifest, run_pipeline_with, training_pairs, write_dataset,
    DataSource, ExperimentConfig, RunManifest, RunOptions, Sample, SweepAxis, OUT_ENV,
};
use gesturegen::pose::io::FrameFile;
use gesturegen::pose::{load_sequence, save_sequence, GestureSequence, PoseFormat, StyleClip};
use gesturegen::predictor::{generate, train_predictor, GenerationRequest, PredictorModel, SamplingConfig, SamplingMode};
use gesturegen::quantizer::{train_vqvae, IndexSequence, VqVaeModel};
use gesturegen::style::{embed_style_codes_tsne, encode_style, render_scatter_svg, LabelledCode, StyleCodeTable, TsneConfig};
use gesturegen::Error;

use super::{AudioCmd, Command, DataCmd, EvalArgs, GenerateArgs, Mode, Preset, RunArgs, StyleCmd, SweepArgs, TrainCmd, VqCmd};

/// 2 for configuration and lineage problems, 3 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<Error>(),
            Some(Error::Config(_) | Error::Lineage(_))
        )
    });
    let stage = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Stage { .. })));
    if config && !stage {
        2
    } else {
        3
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Data(c) => data(c),
        Command::Audio(c) => audio(c),
        Command::Vq(c) => vq(c),
        Command::Style(c) => style(c),
        Command::Train(c) => train(c),
        Command::Generate(a) => generate_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Desk => ExperimentConfig::desk(),
                Preset::Tiny => ExperimentConfig::tiny(),
                Preset::Full => ExperimentConfig::full(),
            };
            print!("{}", cfg.to_toml_string());
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::desk()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn data(cmd: DataCmd) -> Result<()> {
    match cmd {
        DataCmd::Validate { path } => {
            let files = if path.is_dir() { pose_files(&path)? } else { vec![path] };
            for f in &files {
                let file = FrameFile::load(f, PoseFormat::Auto)?;
                let (frames, width, fps) = (file.frames(), file.width(), file.fps);
                if file.channels.iter().any(|c| c.0 == "jaw") {
                    let seq = file.into_sequence(f)?;
                    println!(
                        "{}: ok, {frames} frames at {fps} fps, style {}, speaker {}",
                        f.display(),
                        seq.meta.style.as_deref().unwrap_or("-"),
                        seq.meta.speaker.as_deref().unwrap_or("-")
                    );
                } else {
                    println!("{}: ok, {frames} frames of width {width} at {fps} fps", f.display());
                }
            }
            Ok(())
        }
        DataCmd::Synth {
            seed,
            count,
            frames,
            styles,
            speakers,
            binary,
            no_audio,
            out,
        } => {
            let mut cfg = ExperimentConfig::desk();
            cfg.seed = seed;
            cfg.data.source = DataSource::Synthetic;
            cfg.data.sequences = count;
            cfg.data.frames = frames;
            cfg.data.styles = styles;
            cfg.data.speakers = speakers;
            if count == 0 || frames == 0 || styles == 0 || speakers == 0 {
                return Err(Error::Config("count, frames, styles and speakers must be >= 1".into()).into());
            }
            let samples = gesturegen::harness::load_dataset(&cfg)?;
            let format = if binary { PoseFormat::Binary } else { PoseFormat::Text };
            let written = write_dataset(&out, &samples, format, !no_audio)?;
            println!("wrote {} files to {}", written.len(), out.display());
            Ok(())
        }
    }
}

fn audio(cmd: AudioCmd) -> Result<()> {
    match cmd {
        AudioCmd::Mfcc { wav, fps, out } => {
            let clip = AudioClip::load_wav(&wav)?;
            let m = compute_mfcc(&clip, fps)?;
            FrameFile::from_matrix("mfcc", &m.frame_major(), fps).save(&out, PoseFormat::Auto)?;
            println!("{} frames x 64 -> {}", m.frames(), out.display());
            Ok(())
        }
        AudioCmd::Beats { wav, out } => {
            let clip = AudioClip::load_wav(&wav)?;
            let beats = extract_audio_beats(&clip);
            write_json(&out, &beats)?;
            println!("{} beats -> {}", beats.len(), out.display());
            Ok(())
        }
        AudioCmd::Embed { wav, predictor, out } => {
            let clip = AudioClip::load_wav(&wav)?;
            let model = PredictorModel::from_checkpoint(&Checkpoint::load(&predictor)?)?;
            let emb = model.speech.embed(&model.store, &clip)?;
            FrameFile::from_matrix("speech", &emb.features, model.fps).save(&out, PoseFormat::Binary)?;
            println!("{} frames x {} -> {}", emb.features.rows(), emb.features.cols(), out.display());
            Ok(())
        }
    }
}

/// Indices of both streams plus what is needed to decode them.
#[derive(Debug, Serialize, Deserialize)]
struct TokenFile {
    frames: usize,
    fps: f64,
    vq_config_digest: String,
    vq_training_digest: String,
    hand: IndexSequence,
    body: IndexSequence,
}

fn load_vq(path: &Path) -> Result<VqVaeModel> {
    Ok(VqVaeModel::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn vq(cmd: VqCmd) -> Result<()> {
    match cmd {
        VqCmd::Train { data, config, seed, out } => {
            let cfg = load_config(config.as_deref())?;
            let seqs: Vec<GestureSequence> = load_pose_dir(&data)?.into_iter().map(|(_, s)| s).collect();
            let (model, log) = train_vqvae(&seqs, &cfg.vq, &cfg.vq_train, seed)?;
            let sha = model.to_checkpoint().save(&out)?;
            write_json(&out.with_extension("log.json"), &log)?;
            if let Some(last) = log.epochs.last() {
                println!("epoch {}: {}", last.epoch, serde_json::to_string(last)?);
            }
            println!("{} sha256 {sha}", out.display());
            Ok(())
        }
        VqCmd::Encode { model, input, out } => {
            let vq = load_vq(&model)?;
            let seq = load_sequence(&input, PoseFormat::Auto)?;
            let (hand, body) = vq.tokenize(&seq)?;
            let tokens = TokenFile {
                frames: seq.len(),
                fps: seq.fps(),
                vq_config_digest: vq.config_digest(),
                vq_training_digest: vq.training_digest.clone(),
                hand,
                body,
            };
            write_json(&out, &tokens)?;
            println!("{} steps -> {}", tokens.hand.len(), out.display());
            Ok(())
        }
        VqCmd::Decode { model, input, out } => {
            let vq = load_vq(&model)?;
            let tokens: TokenFile = read_json(&input)?;
            if tokens.vq_config_digest != vq.config_digest() || tokens.vq_training_digest != vq.training_digest {
                return Err(Error::Lineage(format!("{} was encoded with a different quantizer", input.display())).into());
            }
            let seq = vq.detokenize(&tokens.hand, &tokens.body, tokens.frames, tokens.fps)?;
            save_sequence(&seq, &out, PoseFormat::Auto)?;
            println!("{} frames -> {}", seq.len(), out.display());
            Ok(())
        }
    }
}

fn load_clips(paths: &[PathBuf]) -> Result<Vec<StyleClip>> {
    let mut clips = Vec::new();
    for p in paths {
        let files = if p.is_dir() { pose_files(p)? } else { vec![p.clone()] };
        for f in files {
            let seq = load_sequence(&f, PoseFormat::Auto)?;
            clips.push(StyleClip::from_sequence(seq).with_context(|| f.display().to_string())?);
        }
    }
    Ok(clips)
}

fn style(cmd: StyleCmd) -> Result<()> {
    match cmd {
        StyleCmd::Encode { model, clip, out } => {
            let m = PredictorModel::from_checkpoint(&Checkpoint::load(&model)?)?;
            let rows = load_clips(&clip)?
                .iter()
                .map(|c| {
                    Ok(LabelledCode {
                        label: c.style_id.clone(),
                        code: encode_style(&m.style, &m.store, c)?.vector,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let table = StyleCodeTable::new(rows)?;
            if out.extension().is_some_and(|e| e == "csv") {
                let mut text = String::new();
                for r in &table.rows {
                    text.push_str(&r.label);
                    for v in &r.code {
                        text.push_str(&format!(",{v:?}"));
                    }
                    text.push('\n');
                }
                fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            } else {
                table.save(&out)?;
            }
            println!("{} codes -> {}", table.rows.len(), out.display());
            Ok(())
        }
        StyleCmd::Tsne {
            codes,
            perplexity,
            lr,
            seed,
            out,
        } => {
            let table = StyleCodeTable::load(&codes)?;
            let vectors: Vec<Vec<f64>> = table.rows.iter().map(|r| r.code.clone()).collect();
            let labels: Vec<String> = table.rows.iter().map(|r| r.label.clone()).collect();
            let cfg = TsneConfig {
                perplexity,
                learning_rate: lr,
                seed,
                ..TsneConfig::default()
            };
            let points = embed_style_codes_tsne(&vectors, &cfg)?;
            #[derive(Serialize)]
            struct Points<'a> {
                labels: &'a [String],
                points: &'a [[f64; 2]],
            }
            write_json(&out, &Points { labels: &labels, points: &points })?;
            let svg = out.with_extension("svg");
            fs::write(&svg, render_scatter_svg(&points, &labels)).with_context(|| format!("writing {}", svg.display()))?;
            println!("{} points -> {}, {}", points.len(), out.display(), svg.display());
            Ok(())
        }
    }
}

/// Pose files of `dir` with their same-stem `.wav` audio.
fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    pose_files(dir)?
        .into_iter()
        .map(|p| {
            let sequence = load_sequence(&p, PoseFormat::Auto)?;
            if sequence.meta.style.is_none() {
                bail!("{}: no style tag", p.display());
            }
            let audio = AudioClip::load_wav(&p.with_extension("wav"))?;
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("seq").to_string();
            Ok(Sample { name, sequence, audio })
        })
        .collect()
}

fn train(cmd: TrainCmd) -> Result<()> {
    match cmd {
        TrainCmd::Predictor {
            data,
            vq,
            config,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let vq = load_vq(&vq)?;
            let samples = load_samples(&data)?;
            let all: Vec<usize> = (0..samples.len()).collect();
            let pairs = training_pairs(&samples, &all)?;
            let (model, log) = train_predictor(&pairs, &vq, &cfg.predictor, &cfg.predictor_train, seed)?;
            let sha = model.to_checkpoint().save(&out)?;
            write_json(&out.with_extension("log.json"), &log)?;
            if let Some(last) = log.epochs.last() {
                println!("epoch {}: {}", last.epoch, serde_json::to_string(last)?);
            }
            println!("{} sha256 {sha}", out.display());
            Ok(())
        }
        TrainCmd::Encoder { data, config, seed, out } => {
            let cfg = load_config(config.as_deref())?;
            let seqs: Vec<GestureSequence> = load_pose_dir(&data)?.into_iter().map(|(_, s)| s).collect();
            let (enc, log) = train_feature_encoder(&seqs, &cfg.feature_encoder, seed)?;
            let sha = enc.to_checkpoint().save(&out)?;
            write_json(&out.with_extension("log.json"), &log)?;
            println!("{} sha256 {sha}", out.display());
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct GenerationManifest {
    output: PathBuf,
    output_sha256: String,
    inputs: BTreeMap<String, (PathBuf, String)>,
    identity: String,
    sampling: SamplingConfig,
    digests: BTreeMap<String, String>,
    hand: Vec<usize>,
    body: Vec<usize>,
}

/// `out.poseb` gets `out.poseb.manifest.json`.
fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let vq = load_vq(&a.vq)?;
    let model = PredictorModel::from_checkpoint(&Checkpoint::load(&a.predictor)?)?;
    let mode = match a.mode {
        Mode::Greedy => SamplingMode::Greedy,
        Mode::Temp => SamplingMode::Temperature {
            temperature: a.temperature,
        },
        Mode::Topk => SamplingMode::TopK {
            k: a.k,
            temperature: a.temperature,
        },
    };
    let sampling = SamplingConfig { mode, seed: a.seed };
    sampling.validate().map_err(|e| Error::Config(e.to_string()))?;
    let style_seq = load_sequence(&a.style_clip, PoseFormat::Auto)?;
    let style = match style_seq.meta.style.clone() {
        Some(id) => StyleClip::new(id, style_seq)?,
        None => StyleClip::new("reference", style_seq)?,
    };
    let req = GenerationRequest {
        audio: AudioClip::load_wav(&a.audio)?,
        style,
        identity: a.identity.clone(),
        sampling,
        initial_pose: a.initial_pose.as_deref().map(|p| load_sequence(p, PoseFormat::Auto)).transpose()?,
    };
    let g = generate(&vq, &model, &req)?;
    save_sequence(&g.sequence, &a.out, PoseFormat::Auto)?;

    let mut inputs = BTreeMap::new();
    let mut add = |k: &str, p: &Path| -> Result<()> {
        inputs.insert(k.to_string(), (p.to_path_buf(), file_digest(p)?));
        Ok(())
    };
    add("audio", &a.audio)?;
    add("style_clip", &a.style_clip)?;
    add("vq", &a.vq)?;
    add("predictor", &a.predictor)?;
    if let Some(p) = &a.initial_pose {
        add("initial_pose", p)?;
    }
    let mut digests = BTreeMap::new();
    digests.insert("vq_config".to_string(), vq.config_digest());
    digests.insert("vq_training".to_string(), vq.training_digest.clone());
    digests.insert("predictor_config".to_string(), model.config_digest());
    let manifest = GenerationManifest {
        output: a.out.clone(),
        output_sha256: file_digest(&a.out)?,
        inputs,
        identity: a.identity,
        sampling,
        digests,
        hand: g.hand.indices,
        body: g.body.indices,
    };
    write_json(&manifest_path(&a.out), &manifest)?;
    println!("{} frames -> {}", g.sequence.len(), a.out.display());
    Ok(())
}

/// Model digests recorded by generation manifests in `dir`.
fn generation_digests(dir: &Path) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = entry?.path();
        if !p.to_string_lossy().ends_with(".manifest.json") {
            continue;
        }
        let v: serde_json::Value = read_json(&p)?;
        if let Some(map) = v.get("digests").and_then(|d| d.as_object()) {
            for (k, d) in map {
                if let Some(s) = d.as_str() {
                    out.entry(k.clone()).or_default().insert(s.to_string());
                }
            }
        }
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let encoder = GestureFeatureEncoder::from_checkpoint(&Checkpoint::load(&a.encoder)?)?;
    let mut report = evaluate_dirs(&a.real, &a.generated, &a.audio, &encoder)?;
    for (k, values) in generation_digests(&a.generated)? {
        if values.len() == 1 {
            report.digests.insert(k, values.into_iter().next().expect("one value"));
        } else {
            for (i, v) in values.into_iter().enumerate() {
                report.digests.insert(format!("{k}.{i}"), v);
            }
        }
    }
    write_json(&a.out, &report)?;
    println!(
        "variation {:.6}  fgd {:.6}  bc {:.6}  ({} real, {} generated) -> {}",
        report.variation,
        report.fgd,
        report.bc,
        report.real_count,
        report.generated_count,
        a.out.display()
    );
    Ok(())
}

fn print_manifest(m: &RunManifest, out: &Path) {
    let r = &m.report;
    println!("run {} ({:.1}s) -> {}", m.name, m.total_seconds, out.display());
    for (stage, rec) in &m.stages {
        let how = if rec.resumed { "reused" } else { "ran" };
        println!("  {stage:<16} {how:<6} {:>8.2}s", rec.seconds);
    }
    println!(
        "  variation {:.6}  fgd {:.6}  bc {:.6}  silhouette {:.4}",
        r.metrics.variation, r.metrics.fgd, r.metrics.bc, r.style.silhouette
    );
}

fn run(a: RunArgs) -> Result<()> {
    if let Some(path) = &a.manifest {
        let old = RunManifest::load(path)?;
        let out = a.out.unwrap_or_else(|| output_root().join(format!("{}-rerun", old.name)));
        let new = rerun_manifest(&old, &out)?;
        print_manifest(&new, &out);
        let diff = old.differences(&new);
        if diff.is_empty() {
            println!("rerun matches the manifest");
            return Ok(());
        }
        for d in &diff {
            println!("  differs: {d}");
        }
        bail!("rerun differs from {} in {} place(s)", path.display(), diff.len());
    }
    let cfg = load_config(a.config.as_deref())?;
    let out = a.out.unwrap_or_else(|| output_root().join(&cfg.name));
    let m = run_pipeline_with(&cfg, &out, RunOptions { resume: !a.no_resume })?;
    print_manifest(&m, &out);
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let axis = SweepAxis::parse(&a.axis)?;
    let out = a
        .out
        .unwrap_or_else(|| output_root().join(format!("{}-sweep-{}", cfg.name, axis.name)));
    let table = ablation_sweep(&cfg, &axis, &out, a.jobs.max(1))?;
    print!("{}", table.to_markdown());
    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} rows failed; see {}", table.rows.len(), out.join("sweep.json").display());
    }
    Ok(())
}
