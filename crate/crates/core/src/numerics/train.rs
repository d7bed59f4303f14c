//! Mini-batch gradient accumulation shared by the training loops.

use rand::seq::SliceRandom;
use rand::Rng;

use super::adam::AdamState;
use super::params::{accumulate, Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Loss and gradients of one sample; a fresh tape per sample.
pub fn sample_gradients<T, F>(store: &ParamStore, item: &T, f: &F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &Bound, &T) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let loss = f(&mut tape, &bound, item)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, store.collect_grads(&grads, &bound)))
}

/// One Adam step on the mean loss over `batch`; returns that mean loss.
pub fn batch_step<T, F>(store: &mut ParamStore, adam: &mut AdamState, batch: &[&T], epoch: usize, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound, &T) -> Result<Var>,
{
    let mut total = Vec::new();
    let mut loss = 0.0;
    for item in batch {
        let (l, g) = sample_gradients(store, *item, f)?;
        if !l.is_finite() {
            return Err(Error::Divergence {
                epoch,
                details: format!("non-finite sample loss {l}"),
            });
        }
        loss += l;
        accumulate(&mut total, g);
    }
    let scale = 1.0 / batch.len() as f64;
    for t in &mut total {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    if total.iter().any(|t| !t.is_finite()) {
        return Err(Error::Divergence {
            epoch,
            details: "non-finite gradient".into(),
        });
    }
    adam.step(store, &total);
    Ok(loss * scale)
}

/// Shuffled mini-batches of indices for one epoch.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}
