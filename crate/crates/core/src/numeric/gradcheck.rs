//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation applied to each entry in both directions.
    pub step: f64,
    /// Largest tolerated error per entry.
    pub tol: f64,
    /// Gradients smaller than this are compared in absolute terms:
    /// `err = |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            tol: 1e-5,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures == 0)
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_error).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.failures > 0)
    }
}

fn evaluate<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::inference(store);
    let out = f(&mut tape)?;
    let value: f64 = tape.value(out).iter().sum();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {value}")));
    }
    Ok(value)
}

/// Compares the tape gradient of the scalar objective `f` against central
/// differences for every parameter in `store`.
///
/// A non-scalar output is reduced by summation on both routes.
pub fn finite_diff_check<F>(
    f: F,
    store: &ParamStore<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(Error::Precondition(format!(
            "finite-difference step must be positive, got {}",
            opts.step
        )));
    }
    let analytic = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        let total = tape.sum(out);
        if !tape.scalar(total).is_finite() {
            return Err(Error::NonFinite("objective at the base point".into()));
        }
        let grads = tape.backward(total);
        store
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; store.get(id).tensor.numel()])
            })
            .collect::<Vec<_>>()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let numel = store.get(id).tensor.numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < numel => {
                let mut e = sample(&mut rng, numel, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..numel).collect(),
        };
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            entries_checked: entries.len(),
            max_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
            failures: 0,
        };
        for &e in &entries {
            let original = work.get(id).tensor.data()[e];
            work.get_mut(id).tensor.data_mut()[e] = original + opts.step;
            let plus = evaluate(&f, &work)?;
            work.get_mut(id).tensor.data_mut()[e] = original - opts.step;
            let minus = evaluate(&f, &work)?;
            work.get_mut(id).tensor.data_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[id.index()][e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if err > opts.tol {
                check.failures += 1;
            }
            if err > check.max_error || e == entries[0] {
                check.max_error = err;
                check.worst_entry = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        params,
    })
}
