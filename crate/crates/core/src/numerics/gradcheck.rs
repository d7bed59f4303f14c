//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub epsilon: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged by absolute error.
    pub abs_floor: f64,
    /// Check at most this many entries per parameter (seeded subsample).
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
    /// Use the fourth-order stencil
    /// `(8(f(p+ε) - f(p-ε)) - (f(p+2ε) - f(p-2ε))) / 12ε`.
    pub fourth_order: bool,
    /// Hold every `stop_gradient` output at its unperturbed value, so the
    /// numeric derivative treats stopped quantities as constants.
    pub freeze_stop_gradients: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
            fourth_order: false,
            freeze_stop_gradients: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub autodiff: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub worst: Option<EntryCheck>,
    pub max_rel_error: f64,
    pub entries_checked: usize,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares autodiff gradients of the scalar built by `f` against central
/// differences `(f(p+ε) - f(p-ε)) / 2ε` for every (or a sampled subset of)
/// parameter entries.
pub fn finite_difference_check<F>(params: &ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = f(&mut tape, &bound)?;
    let base = tape.value(loss).item();
    if !base.is_finite() {
        return Err(Error::GradCheck(format!("non-finite objective {base} at unperturbed parameters")));
    }
    let grads = tape.backward(loss)?;
    let analytic = params.collect_grads(&grads, &bound);
    let stops = tape.stop_gradient_values();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = if opts.freeze_stop_gradients {
            Tape::with_stop_gradient_replay(stops.clone())
        } else {
            Tape::new()
        };
        let b = store.bind(&mut tape, false);
        let l = f(&mut tape, &b)?;
        Ok(tape.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut per_param = Vec::new();
    let mut worst: Option<EntryCheck> = None;
    let mut checked = 0;
    for (pi, id) in params.ids().enumerate() {
        let len = params.get(id).len();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut param_max = 0.0f64;
        for j in entries {
            let orig = params.get(id).data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[j] = orig + offset;
                let v = eval(&work)?;
                work.get_mut(id).data_mut()[j] = orig;
                if !v.is_finite() {
                    return Err(Error::GradCheck(format!(
                        "non-finite objective {v} perturbing `{}`[{j}] by {offset:e}",
                        params.name(id)
                    )));
                }
                Ok(v)
            };
            let h = opts.epsilon;
            let numeric = if opts.fourth_order {
                let near = at(h)? - at(-h)?;
                let far = at(2.0 * h)? - at(-2.0 * h)?;
                (8.0 * near - far) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            let a = analytic[pi].data()[j];
            let rel = relative_error(a, numeric, opts.abs_floor);
            checked += 1;
            param_max = param_max.max(rel);
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(EntryCheck {
                    param: params.name(id).to_string(),
                    index: j,
                    autodiff: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        per_param.push((params.name(id).to_string(), param_max));
    }
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradCheckReport {
        per_param,
        worst,
        max_rel_error,
        entries_checked: checked,
        passed: max_rel_error <= opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let opts = GradCheckOptions {
            tolerance: 1e-6,
            ..Default::default()
        };
        let report = finite_difference_check(&store, |t, b| Ok(t.square(b[x])), opts).unwrap();
        assert!(report.passed, "{report:?}");
        let w = report.worst.unwrap();
        assert!((w.autodiff - 6.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_objective_reports_location() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(0.0));
        let err = finite_difference_check(&store, |t, b| Ok(t.ln(b[x])), GradCheckOptions::default()).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    /// `y = x + sg(x² - x)` has value `x²` but derivative 1 in `x`.
    fn straight_through(t: &mut Tape, x: Var) -> Result<Var> {
        let sq = t.mul(x, x)?;
        let d = t.sub(sq, x)?;
        let d = t.stop_gradient(d);
        let y = t.add(x, d)?;
        Ok(t.square(y))
    }

    #[test]
    fn frozen_stop_gradients_match_the_surrogate() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.3));
        let report = finite_difference_check(&store, |t, b| straight_through(t, b[x]), GradCheckOptions::default()).unwrap();
        assert!(report.passed, "{report:?}");
        // d/dx (x + c)² at the frozen c = x² - x is 2x² = 3.38
        assert!((report.worst.unwrap().autodiff - 3.38).abs() < 1e-12);

        let live = GradCheckOptions {
            freeze_stop_gradients: false,
            ..Default::default()
        };
        let report = finite_difference_check(&store, |t, b| straight_through(t, b[x]), live).unwrap();
        // the live objective is x⁴ with derivative 4x³ = 8.788
        assert!(!report.passed);
        assert!((report.worst.unwrap().numeric - 8.788).abs() < 1e-6);
    }

    #[test]
    fn fourth_order_stencil_is_exact_on_cubics() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(2.0));
        let cube = |t: &mut Tape, b: &Bound| {
            let sq = t.mul(b[x], b[x])?;
            t.mul(sq, b[x])
        };
        let coarse = |fourth_order| GradCheckOptions {
            epsilon: 0.1,
            tolerance: 1e-12,
            fourth_order,
            ..Default::default()
        };
        let second = finite_difference_check(&store, cube, coarse(false)).unwrap();
        assert!((second.worst.unwrap().numeric - 12.01).abs() < 1e-9);
        let fourth = finite_difference_check(&store, cube, coarse(true)).unwrap();
        assert!(fourth.passed, "{fourth:?}");
    }
}
