//! Evaluation metrics: Variation, Fréchet gesture distance, beat
//! consistency, and the feature encoder FGD relies on.

pub mod beats;
pub mod feature;
pub mod metrics;

use serde::{Deserialize, Serialize};

pub use crate::audio::BeatSet;
pub use beats::{beat_consistency, extract_motion_beats, DEFAULT_BC_SIGMA};
pub use feature::{train_feature_encoder, FeatureEncoderConfig, GestureFeatureEncoder};
pub use metrics::{fgd_features, frechet_distance, variation, GaussianStats};

use crate::audio::{extract_audio_beats, AudioClip};
use crate::error::{Error, Result};
use crate::pose::GestureSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub name: String,
    pub bc: f64,
    pub motion_beats: usize,
    pub audio_beats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variation: f64,
    pub fgd: f64,
    pub bc: f64,
    pub real_count: usize,
    pub generated_count: usize,
    pub variation_samples: usize,
    /// Digests of the models and configs involved.
    pub digests: std::collections::BTreeMap<String, String>,
    pub per_sequence: Vec<SequenceScore>,
}

/// FGD between two sequence sets through `encoder`.
pub fn fgd(real: &[GestureSequence], generated: &[GestureSequence], encoder: &GestureFeatureEncoder) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::invalid("fgd needs >= 2 sequences per side"));
    }
    fgd_features(&encoder.encode_all(real)?, &encoder.encode_all(generated)?)
}

/// Mean beat consistency of generated sequences against their audio.
pub fn mean_beat_consistency(pairs: &[(String, &GestureSequence, &AudioClip)]) -> (f64, Vec<SequenceScore>) {
    let scores: Vec<SequenceScore> = pairs
        .iter()
        .map(|(name, seq, audio)| {
            let m = extract_motion_beats(seq);
            let a = extract_audio_beats(audio);
            SequenceScore {
                name: name.clone(),
                bc: beat_consistency(&m, &a, DEFAULT_BC_SIGMA),
                motion_beats: m.len(),
                audio_beats: a.len(),
            }
        })
        .collect();
    let mean = if scores.is_empty() {
        0.0
    } else {
        scores.iter().map(|s| s.bc).sum::<f64>() / scores.len() as f64
    };
    (mean, scores)
}
