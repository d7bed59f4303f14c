//! Temporal convolutional autoencoder whose encoder half embeds a pose
//! sequence for FGD. Operates on the body and hand channels (153 dims);
//! jaw is not generated, so it is left out of the comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{canonical_digest, Checkpoint};
use crate::error::{Error, Result};
use crate::numerics::nn::{Conv1d, ConvTranspose1d};
use crate::numerics::train::{batch_step, epoch_batches};
use crate::numerics::{derive_seed, AdamConfig, AdamState, Bound, ParamStore, Tape, Tensor, Var};
use crate::pose::{GestureSequence, JAW_DIM, POSE_DIM};

pub const FEATURE_INPUT_DIM: usize = POSE_DIM - JAW_DIM;
pub const CHECKPOINT_KIND: &str = "feature-encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureEncoderConfig {
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for FeatureEncoderConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
struct Net {
    enc1: Conv1d,
    enc2: Conv1d,
    dec1: ConvTranspose1d,
    dec2: ConvTranspose1d,
}

impl Net {
    fn new(store: &mut ParamStore, c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            enc1: Conv1d::new(store, "fe.enc1", FEATURE_INPUT_DIM, c, 3, 2, 1, &mut rng),
            enc2: Conv1d::new(store, "fe.enc2", c, c, 3, 2, 1, &mut rng),
            dec1: ConvTranspose1d::new(store, "fe.dec1", c, c, 4, 2, 1, &mut rng),
            dec2: ConvTranspose1d::new(store, "fe.dec2", c, FEATURE_INPUT_DIM, 4, 2, 1, &mut rng),
        }
    }

    fn latents(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.enc1.forward(t, p, x)?;
        let h = t.gelu(h);
        let h = self.enc2.forward(t, p, h)?;
        Ok(t.gelu(h))
    }

    fn reconstruction_loss(&self, t: &mut Tape, p: &Bound, x: &Tensor) -> Result<Var> {
        let n = x.rows();
        let xv = t.constant(x.clone());
        let z = self.latents(t, p, xv)?;
        let h = self.dec1.forward(t, p, z)?;
        let h = t.gelu(h);
        let y = self.dec2.forward(t, p, h)?;
        let y = t.slice_rows(y, 0, n)?;
        t.mse(y, xv)
    }
}

fn body_hand(seq: &GestureSequence) -> Tensor {
    let n = seq.len();
    let mut data = Vec::with_capacity(n * FEATURE_INPUT_DIM);
    for i in 0..n {
        data.extend_from_slice(&seq.frame(i)[JAW_DIM..]);
    }
    Tensor::matrix(n, FEATURE_INPUT_DIM, data).expect("feature input shape")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Hyper {
    config: FeatureEncoderConfig,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct GestureFeatureEncoder {
    pub config: FeatureEncoderConfig,
    pub seed: u64,
    pub store: ParamStore,
    /// Digest of the training sequences.
    pub dataset_digest: String,
    net: Net,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrainLog {
    pub epoch_loss: Vec<f64>,
}

pub fn dataset_digest(seqs: &[GestureSequence]) -> String {
    let all: Vec<(f64, &[f64])> = seqs.iter().map(|s| (s.fps(), s.data())).collect();
    canonical_digest(&all)
}

impl GestureFeatureEncoder {
    pub fn feature_dim(&self) -> usize {
        self.config.channels
    }

    /// Time-averaged encoder latents.
    pub fn encode(&self, seq: &GestureSequence) -> Result<Vec<f64>> {
        if seq.len() < 4 {
            return Err(Error::invalid("feature encoder needs >= 4 frames"));
        }
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, false);
        let x = t.constant(body_hand(seq));
        let z = self.net.latents(&mut t, &p, x)?;
        let z = t.value(z);
        let mut mean = vec![0.0; z.cols()];
        for i in 0..z.rows() {
            for (m, v) in mean.iter_mut().zip(z.row(i)) {
                *m += v / z.rows() as f64;
            }
        }
        Ok(mean)
    }

    /// `n×channels` feature matrix for a set of sequences.
    pub fn encode_all(&self, seqs: &[GestureSequence]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(seqs.len() * self.feature_dim());
        for s in seqs {
            data.extend(self.encode(s)?);
        }
        Tensor::matrix(seqs.len(), self.feature_dim(), data)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let hyper = Hyper {
            config: self.config.clone(),
            seed: self.seed,
        };
        Checkpoint::new(CHECKPOINT_KIND, &hyper, self.store.clone())
            .with_digest("dataset", self.dataset_digest.clone())
            .with_digest("config", canonical_digest(&hyper))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let hyper: Hyper = ck.hyper_as()?;
        let mut store = ParamStore::new();
        let net = Net::new(&mut store, hyper.config.channels, hyper.seed);
        store.load_from(&ck.params)?;
        Ok(Self {
            config: hyper.config,
            seed: hyper.seed,
            store,
            dataset_digest: ck.digests.get("dataset").cloned().unwrap_or_default(),
            net,
        })
    }
}

pub fn train_feature_encoder(
    dataset: &[GestureSequence],
    config: &FeatureEncoderConfig,
    seed: u64,
) -> Result<(GestureFeatureEncoder, FeatureTrainLog)> {
    if dataset.len() < 8 {
        return Err(Error::invalid(format!("feature encoder needs >= 8 sequences, got {}", dataset.len())));
    }
    if config.channels == 0 || config.batch_size == 0 {
        return Err(Error::Config("feature encoder channels and batch size must be positive".into()));
    }
    let mut store = ParamStore::new();
    let net = Net::new(&mut store, config.channels, derive_seed(seed, 1));
    let inputs: Vec<Tensor> = dataset.iter().map(body_hand).collect();
    if inputs.iter().any(|x| x.rows() < 4) {
        return Err(Error::invalid("feature encoder needs >= 4 frames per sequence"));
    }
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut log = FeatureTrainLog::default();
    let loss_fn = |t: &mut Tape, p: &Bound, x: &Tensor| net.reconstruction_loss(t, p, x);
    for epoch in 1..=config.epochs {
        let mut sum = 0.0;
        for batch in epoch_batches(inputs.len(), config.batch_size, &mut rng) {
            let items: Vec<&Tensor> = batch.iter().map(|&i| &inputs[i]).collect();
            sum += batch_step(&mut store, &mut adam, &items, epoch, &loss_fn)? * items.len() as f64;
        }
        let mean = sum / inputs.len() as f64;
        log::debug!("feature encoder epoch {epoch}: loss {mean:.6}");
        log.epoch_loss.push(mean);
    }
    let enc = GestureFeatureEncoder {
        config: config.clone(),
        seed: derive_seed(seed, 1),
        store,
        dataset_digest: dataset_digest(dataset),
        net,
    };
    Ok((enc, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::make_synthetic_dataset;

    fn data() -> Vec<GestureSequence> {
        make_synthetic_dataset(0, 8, 24, 2).unwrap().into_iter().map(|c| c.sequence).collect()
    }

    fn cfg() -> FeatureEncoderConfig {
        FeatureEncoderConfig {
            channels: 8,
            epochs: 6,
            batch_size: 4,
            learning_rate: 3e-3,
        }
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let d = data();
        let (a, log) = train_feature_encoder(&d, &cfg(), 7).unwrap();
        assert!(log.epoch_loss.last().unwrap() < &log.epoch_loss[0], "{:?}", log.epoch_loss);
        let (b, _) = train_feature_encoder(&d, &cfg(), 7).unwrap();
        assert_eq!(a.store, b.store);
        let fa = a.encode(&d[0]).unwrap();
        assert_eq!(fa.len(), 8);
        assert_eq!(fa, a.encode(&d[0].clone()).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let d = data();
        let (a, _) = train_feature_encoder(&d, &cfg(), 1).unwrap();
        let b = GestureFeatureEncoder::from_checkpoint(&a.to_checkpoint()).unwrap();
        assert_eq!(a.encode(&d[3]).unwrap(), b.encode(&d[3]).unwrap());
        assert_eq!(b.dataset_digest, dataset_digest(&d));
    }

    #[test]
    fn needs_eight_sequences() {
        assert!(train_feature_encoder(&data()[..7], &cfg(), 0).is_err());
    }
}
