use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::pipeline::Sample;
use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::eval::{fgd, mean_beat_consistency, variation, GestureFeatureEncoder, MetricReport};
use crate::pose::{load_sequence, save_sequence, GestureSequence, PoseFormat};

pub(crate) fn is_pose_file(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("pose" | "poseb" | "bin"))
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("seq").to_string()
}

/// Pose files of `dir` in name order.
pub fn pose_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_pose_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no pose files in {}", dir.display())));
    }
    Ok(files)
}

/// Every pose file of `dir` as `(stem, sequence)`.
pub fn load_pose_dir(dir: &Path) -> Result<Vec<(String, GestureSequence)>> {
    pose_files(dir)?
        .iter()
        .map(|p| Ok((stem(p), load_sequence(p, PoseFormat::Auto)?)))
        .collect()
}

/// Writes each sample as `<name>.pose` (or `.poseb`) plus `<name>.wav`.
pub fn write_dataset(dir: &Path, samples: &[Sample], format: PoseFormat, with_audio: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = if format == PoseFormat::Binary { "poseb" } else { "pose" };
    let mut written = Vec::new();
    for s in samples {
        let path = dir.join(format!("{}.{ext}", s.name));
        save_sequence(&s.sequence, &path, format)?;
        written.push(path);
        if with_audio {
            let wav = dir.join(format!("{}.wav", s.name));
            s.audio.save_wav(&wav)?;
            written.push(wav);
        }
    }
    Ok(written)
}

/// Source name of a generated file: `clip_s03` comes from `clip`.
pub fn source_stem(name: &str) -> &str {
    match name.rsplit_once("_s") {
        Some((base, n)) if !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) => base,
        _ => name,
    }
}

fn find_audio(dir: &Path, name: &str) -> Result<AudioClip> {
    for candidate in [name, source_stem(name)] {
        let p = dir.join(format!("{candidate}.wav"));
        if p.exists() {
            return AudioClip::load_wav(&p);
        }
    }
    Err(Error::invalid(format!("no audio for `{name}` in {}", dir.display())))
}

/// Metrics for a directory of generated sequences against real ones.
///
/// Generated files named `<clip>_sNN` are grouped by `<clip>`; Variation is
/// the mean over groups with at least two samples. Audio is looked up as
/// `<name>.wav`, then `<clip>.wav`.
pub fn evaluate_dirs(real: &Path, generated: &Path, audio: &Path, encoder: &GestureFeatureEncoder) -> Result<MetricReport> {
    let real: Vec<GestureSequence> = load_pose_dir(real)?.into_iter().map(|(_, s)| s).collect();
    let gen = load_pose_dir(generated)?;
    let clips = gen
        .iter()
        .map(|(n, _)| find_audio(audio, n))
        .collect::<Result<Vec<_>>>()?;

    let mut groups: BTreeMap<&str, Vec<GestureSequence>> = BTreeMap::new();
    for (n, s) in &gen {
        groups.entry(source_stem(n)).or_default().push(s.clone());
    }
    let (mut var_sum, mut var_groups, mut var_samples) = (0.0, 0, 0);
    for samples in groups.values().filter(|g| g.len() >= 2) {
        var_sum += variation(samples)?;
        var_groups += 1;
        var_samples = var_samples.max(samples.len());
    }
    if var_groups == 0 {
        log::warn!("no clip has two or more generated samples; Variation reported as 0");
    }

    let pairs: Vec<(String, &GestureSequence, &AudioClip)> =
        gen.iter().zip(&clips).map(|((n, s), a)| (n.clone(), s, a)).collect();
    let (bc, per_sequence) = mean_beat_consistency(&pairs);
    let gen_seqs: Vec<GestureSequence> = gen.into_iter().map(|(_, s)| s).collect();
    let mut digests = BTreeMap::new();
    digests.insert("feature_encoder".to_string(), encoder.to_checkpoint().digest());
    Ok(MetricReport {
        variation: if var_groups == 0 { 0.0 } else { var_sum / var_groups as f64 },
        fgd: fgd(&real, &gen_seqs, encoder)?,
        bc,
        real_count: real.len(),
        generated_count: gen_seqs.len(),
        variation_samples: var_samples,
        digests,
        per_sequence,
    })
}
