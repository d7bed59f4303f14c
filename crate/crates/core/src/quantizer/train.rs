use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{nearest_codes, Stream, VqLossParts, VqVaeConfig, VqVaeModel};
use crate::checkpoint::canonical_digest;
use crate::error::{Error, Result};
use crate::eval::feature::dataset_digest;
use crate::numerics::params::accumulate;
use crate::numerics::train::epoch_batches;
use crate::numerics::{derive_seed, AdamConfig, AdamState, Tape, Tensor};
use crate::pose::{split_channels, GestureSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Reset codes unused for a whole epoch to a random encoder output.
    pub revive_dead_codes: bool,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-4,
            revive_dead_codes: true,
        }
    }
}

impl VqTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("vq batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("vq learning_rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqEpochLog {
    pub epoch: usize,
    /// Mean over training sequences.
    pub loss: VqLossParts,
    pub used_hand: usize,
    pub used_body: usize,
    pub revived: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VqTrainLog {
    pub epochs: Vec<VqEpochLog>,
    /// Code usage counts of the final model over the training set.
    pub usage_hand: Vec<usize>,
    pub usage_body: Vec<usize>,
}

impl VqTrainLog {
    pub fn distinct_codes(&self, stream: Stream) -> usize {
        let u = match stream {
            Stream::Hand => &self.usage_hand,
            Stream::Body => &self.usage_body,
        };
        u.iter().filter(|&&c| c > 0).count()
    }
}

struct Pair {
    hand: Tensor,
    body: Tensor,
}

/// Code usage per stream plus every latent row seen (revival candidates).
fn usage(model: &VqVaeModel, data: &[Pair]) -> Result<[(Vec<usize>, Vec<Vec<f64>>); 2]> {
    let mut out: [(Vec<usize>, Vec<Vec<f64>>); 2] = Default::default();
    for (slot, stream) in Stream::BOTH.into_iter().enumerate() {
        let mut counts = vec![0; model.codebook_size()];
        let mut rows = Vec::new();
        for p in data {
            let x = if stream == Stream::Hand { &p.hand } else { &p.body };
            let z = model.encode(stream, x)?;
            for i in nearest_codes(model.codebook(stream), &z)? {
                counts[i] += 1;
            }
            rows.extend(z.to_rows());
        }
        out[slot] = (counts, rows);
    }
    Ok(out)
}

/// Adam training of the dual-stream objective. Deterministic per seed.
pub fn train_vqvae(
    dataset: &[GestureSequence],
    config: &VqVaeConfig,
    train: &VqTrainConfig,
    seed: u64,
) -> Result<(VqVaeModel, VqTrainLog)> {
    train.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("vq training needs at least one sequence"));
    }
    let mut model = VqVaeModel::new(config.clone(), derive_seed(seed, 11))?;
    if let Some(s) = dataset.iter().find(|s| s.len() < config.downsample) {
        return Err(Error::invalid(format!(
            "sequence of {} frames is shorter than the downsampling factor {}",
            s.len(),
            config.downsample
        )));
    }
    let data: Vec<Pair> = dataset
        .iter()
        .map(|s| {
            let c = split_channels(s);
            Pair { hand: c.hand, body: c.body }
        })
        .collect();
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: train.learning_rate,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 12));
    let mut log = VqTrainLog::default();

    for epoch in 1..=train.epochs {
        let mut sum = VqLossParts::default();
        for batch in epoch_batches(data.len(), train.batch_size, &mut rng) {
            let mut grads = Vec::new();
            for &i in &batch {
                let mut t = Tape::new();
                let p = model.store.bind(&mut t, true);
                let v = model.loss_vars(&mut t, &p, &data[i].hand, &data[i].body)?;
                let parts = VqLossParts::from_vars(&t, &v);
                if !parts.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        details: format!(
                            "rec {} codebook {} commitment {} total {}",
                            parts.reconstruction, parts.codebook, parts.commitment, parts.total
                        ),
                    });
                }
                sum.reconstruction += parts.reconstruction;
                sum.codebook += parts.codebook;
                sum.commitment += parts.commitment;
                sum.total += parts.total;
                let g = t.backward(v.total)?;
                accumulate(&mut grads, model.store.collect_grads(&g, &p));
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    details: "non-finite gradient".into(),
                });
            }
            adam.step(&mut model.store, &grads);
        }
        let n = data.len() as f64;
        let loss = VqLossParts {
            reconstruction: sum.reconstruction / n,
            codebook: sum.codebook / n,
            commitment: sum.commitment / n,
            total: sum.total / n,
        };

        let stats = usage(&model, &data)?;
        let used = |s: usize| stats[s].0.iter().filter(|&&c| c > 0).count();
        let (used_hand, used_body) = (used(0), used(1));
        let mut revived = 0;
        if train.revive_dead_codes && epoch < train.epochs {
            for (slot, stream) in Stream::BOTH.into_iter().enumerate() {
                let (counts, rows) = &stats[slot];
                let id = model.codebook_param(stream);
                let cb = model.store.get_mut(id);
                let c = cb.cols();
                for (k, &count) in counts.iter().enumerate() {
                    if count == 0 && !rows.is_empty() {
                        let src = &rows[rng.random_range(0..rows.len())];
                        cb.data_mut()[k * c..(k + 1) * c].copy_from_slice(src);
                        revived += 1;
                    }
                }
            }
        }
        log::debug!(
            "vq epoch {epoch}: rec {:.6} cb {:.6} commit {:.6} used {used_hand}/{used_body} revived {revived}",
            loss.reconstruction,
            loss.codebook,
            loss.commitment
        );
        log.epochs.push(VqEpochLog {
            epoch,
            loss,
            used_hand,
            used_body,
            revived,
        });
    }

    let [hand, body] = usage(&model, &data)?;
    log.usage_hand = hand.0;
    log.usage_body = body.0;
    model.training_digest = canonical_digest(&(config, train, seed, dataset_digest(dataset)));
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::make_synthetic_dataset;

    fn seqs(n: usize, frames: usize) -> Vec<GestureSequence> {
        make_synthetic_dataset(0, n, frames, 2).unwrap().into_iter().map(|c| c.sequence).collect()
    }

    fn small() -> VqVaeConfig {
        VqVaeConfig {
            downsample: 2,
            channels: 8,
            codebook_size: 8,
            ..VqVaeConfig::default()
        }
    }

    #[test]
    fn deterministic_and_learns() {
        let d = seqs(2, 16);
        let tc = VqTrainConfig {
            epochs: 15,
            batch_size: 2,
            learning_rate: 3e-3,
            revive_dead_codes: true,
        };
        let (a, log) = train_vqvae(&d, &small(), &tc, 3).unwrap();
        let (b, _) = train_vqvae(&d, &small(), &tc, 3).unwrap();
        assert_eq!(a.store, b.store);
        let first = log.epochs[0].loss.reconstruction;
        let last = log.epochs.last().unwrap().loss.reconstruction;
        assert!(last < first, "{first} -> {last}");
        assert_eq!(log.usage_hand.iter().sum::<usize>(), 16);
        assert!(!a.training_digest.is_empty());
    }

    #[test]
    fn rejects_short_sequences_and_bad_config() {
        let d = seqs(1, 8);
        let cfg = VqVaeConfig { downsample: 16, ..small() };
        assert!(train_vqvae(&d, &cfg, &VqTrainConfig::default(), 0).is_err());
        let tc = VqTrainConfig { batch_size: 0, ..VqTrainConfig::default() };
        assert!(train_vqvae(&d, &small(), &tc, 0).is_err());
        assert!(train_vqvae(&[], &small(), &VqTrainConfig::default(), 0).is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        let d = seqs(1, 8);
        let tc = VqTrainConfig {
            epochs: 3,
            batch_size: 1,
            learning_rate: 1e300,
            revive_dead_codes: false,
        };
        match train_vqvae(&d, &small(), &tc, 0) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
