use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::hop_for;
use crate::checkpoint::canonical_digest;
use crate::error::{Error, Result};
use crate::eval::FeatureEncoderConfig;
use crate::predictor::{PredictorConfig, PredictorTrainConfig, SamplingMode};
use crate::quantizer::{VqTrainConfig, VqVaeConfig};
use crate::style::{StyleEncoderConfig, TsneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    /// A directory of pose files, each with a same-stem `.wav`.
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub sequences: usize,
    pub frames: usize,
    pub styles: usize,
    pub speakers: usize,
    pub sample_rate: u32,
    pub fps: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            sequences: 64,
            frames: 88,
            styles: 4,
            speakers: 2,
            sample_rate: crate::audio::DEFAULT_SAMPLE_RATE,
            fps: crate::pose::DEFAULT_FPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitConfig {
    /// `(train, val, test)` counts for `n` items; val and test round down.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let val = (n as f64 * self.val + 1e-9).floor() as usize;
        let test = (n as f64 * self.test + 1e-9).floor() as usize;
        (n - val - test, val, test)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || self.train <= 0.0 {
            return Err(Error::Config(format!("split ratios must be >= 0 with train > 0, got {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated samples per test request (Variation needs >= 2).
    pub samples: usize,
    pub sampling: SamplingMode,
    /// Synthetic reference clips encoded for the style-separation check.
    pub style_clips: usize,
    pub tsne: TsneConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            sampling: SamplingMode::Temperature { temperature: 1.0 },
            style_clips: 128,
            tsne: TsneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub vq: VqVaeConfig,
    pub vq_train: VqTrainConfig,
    pub predictor: PredictorConfig,
    pub predictor_train: PredictorTrainConfig,
    pub feature_encoder: FeatureEncoderConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Small synthetic setup that runs end to end in minutes on one core.
    pub fn desk() -> Self {
        let mut predictor = PredictorConfig {
            model_dim: 64,
            attn_dim: 32,
            max_steps: 64,
            style: StyleEncoderConfig {
                dim: 64,
                layers: 4,
                max_len: 256,
                ..StyleEncoderConfig::default()
            },
            ..PredictorConfig::default()
        };
        predictor.speech.hidden = 32;
        predictor.speech.latent = 128;
        Self {
            name: "desk".into(),
            seed: 0,
            data: DataConfig::default(),
            split: SplitConfig::default(),
            vq: VqVaeConfig {
                channels: 64,
                codebook_size: 64,
                ..VqVaeConfig::default()
            },
            vq_train: VqTrainConfig {
                epochs: 50,
                batch_size: 16,
                learning_rate: 1e-3,
                ..VqTrainConfig::default()
            },
            predictor,
            predictor_train: PredictorTrainConfig {
                epochs: 50,
                batch_size: 16,
                learning_rate: 1e-3,
            },
            feature_encoder: FeatureEncoderConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Seconds-scale configuration for tests and smoke runs.
    pub fn tiny() -> Self {
        let mut predictor = PredictorConfig {
            model_dim: 16,
            layers: 1,
            heads: 2,
            ff_mult: 2,
            kv_tokens: 2,
            attn_dim: 8,
            max_steps: 32,
            style: StyleEncoderConfig {
                dim: 8,
                layers: 1,
                heads: 2,
                ff_mult: 2,
                max_len: 64,
                ..StyleEncoderConfig::default()
            },
            ..PredictorConfig::default()
        };
        predictor.speech.hidden = 8;
        predictor.speech.latent = 16;
        Self {
            name: "tiny".into(),
            seed: 0,
            data: DataConfig {
                sequences: 20,
                frames: 16,
                styles: 2,
                ..DataConfig::default()
            },
            split: SplitConfig::default(),
            vq: VqVaeConfig {
                downsample: 2,
                channels: 8,
                codebook_size: 8,
                ..VqVaeConfig::default()
            },
            vq_train: VqTrainConfig {
                epochs: 3,
                batch_size: 8,
                learning_rate: 3e-3,
                ..VqTrainConfig::default()
            },
            predictor,
            predictor_train: PredictorTrainConfig {
                epochs: 3,
                batch_size: 8,
                learning_rate: 3e-3,
            },
            feature_encoder: FeatureEncoderConfig {
                channels: 8,
                epochs: 2,
                batch_size: 8,
                ..FeatureEncoderConfig::default()
            },
            eval: EvalConfig {
                samples: 4,
                style_clips: 16,
                tsne: TsneConfig {
                    perplexity: 4.0,
                    iterations: 300,
                    ..TsneConfig::default()
                },
                ..EvalConfig::default()
            },
        }
    }

    /// Full-scale training constants, for use with a real dataset directory.
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            seed: 0,
            data: DataConfig {
                source: DataSource::Directory,
                path: Some(PathBuf::from("data/show")),
                ..DataConfig::default()
            },
            split: SplitConfig::default(),
            vq: VqVaeConfig::default(),
            vq_train: VqTrainConfig {
                epochs: 100,
                batch_size: 128,
                ..VqTrainConfig::default()
            },
            predictor: PredictorConfig::default(),
            predictor_train: PredictorTrainConfig::default(),
            feature_encoder: FeatureEncoderConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of the canonical JSON form, independent of file formatting
    /// and of the cosmetic `name`.
    pub fn digest(&self) -> String {
        canonical_digest(&Self {
            name: String::new(),
            ..self.clone()
        })
    }

    /// Checks every constraint later stages would otherwise hit mid-run.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.split.validate()?;
        self.vq.validate()?;
        self.vq_train.validate()?;
        self.predictor.validate()?;
        self.predictor_train.validate()?;
        let d = &self.data;
        if !(d.fps > 0.0 && d.fps.is_finite()) {
            return bad(format!("data.fps must be > 0, got {}", d.fps));
        }
        hop_for(d.sample_rate, d.fps).map_err(|e| Error::Config(e.to_string()))?;
        if self.predictor.speech.sample_rate != d.sample_rate {
            return bad(format!(
                "predictor.speech.sample_rate {} differs from data.sample_rate {}",
                self.predictor.speech.sample_rate, d.sample_rate
            ));
        }
        match d.source {
            DataSource::Synthetic => {
                if d.styles == 0 || d.speakers == 0 {
                    return bad("data.styles and data.speakers must be >= 1".into());
                }
                if d.frames < 8 {
                    return bad(format!("data.frames must be >= 8, got {}", d.frames));
                }
                let (train, _, test) = self.split.counts(d.sequences);
                if train < 8 {
                    return bad(format!("{train} training sequences; the feature encoder needs >= 8"));
                }
                if test < 2 {
                    return bad(format!("{test} test sequences; FGD needs >= 2"));
                }
                let steps = d.frames.div_ceil(self.vq.downsample);
                if steps > self.predictor.max_steps {
                    return bad(format!("{steps} steps exceed predictor.max_steps {}", self.predictor.max_steps));
                }
                if d.frames > self.predictor.style.max_len {
                    return bad(format!("{} frames exceed predictor.style.max_len", d.frames));
                }
            }
            DataSource::Directory => {
                if d.path.is_none() {
                    return bad("data.path is required for a directory source".into());
                }
            }
        }
        if self.eval.samples < 2 {
            return bad("eval.samples must be >= 2".into());
        }
        crate::predictor::SamplingConfig {
            mode: self.eval.sampling,
            seed: 0,
        }
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.eval.tsne.perplexity > 0.0) || self.eval.tsne.perplexity >= self.eval.style_clips as f64 {
            return bad(format!(
                "eval.tsne.perplexity {} must be in (0, eval.style_clips = {})",
                self.eval.tsne.perplexity, self.eval.style_clips
            ));
        }
        Ok(())
    }
}

/// Sets `key` (dotted path) in a config's TOML form to `value`.
pub fn apply_override(base: &ExperimentConfig, key: &str, value: toml::Value) -> Result<ExperimentConfig> {
    let mut root = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    let mut node = &mut root;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not inside a table")))?;
        if k + 1 == parts.len() {
            if !table.contains_key(*part) && !key.ends_with(".path") {
                return Err(Error::Config(format!("override `{key}`: unknown field `{part}`")));
            }
            table.insert(part.to_string(), value.clone());
            break;
        }
        node = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("override `{key}`: unknown section `{part}`")))?;
    }
    let cfg: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("override `{key}`: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
