//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Maximum over checked coordinates of `|a - n| / max(1, |a|, |n|)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Configuration for [`GradCheck::run`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Check at most this many coordinates per parameter (sampled), all if `None`.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-3,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

fn eval(f: &impl Fn(&Tape, &ParamStore) -> Result<Var>, store: &ParamStore) -> Result<f64> {
    let tape = Tape::new();
    let v = f(&tape, store)?.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

impl GradCheck {
    pub fn run(
        &self,
        store: &mut ParamStore,
        f: impl Fn(&Tape, &ParamStore) -> Result<Var>,
    ) -> Result<GradCheckReport> {
        if !(self.eps > 0.0 && self.eps <= 1e-2) {
            return Err(Error::invalid("grad_check", "eps must lie in (0, 1e-2]"));
        }
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        if !loss.item().is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let analytic = tape.gradients(&loss)?;
        drop(loss);
        drop(tape);

        let mut rng = Rng::seed(self.seed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            coords_checked: 0,
        };
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let n = store.get(id).value.len();
            let all: Vec<usize> = (0..n).collect();
            let coords = match self.max_coords_per_param {
                Some(k) => rng.sample(&all, k),
                None => all,
            };
            for j in coords {
                let orig = store.get(id).value.data()[j];
                store.get_mut(id).value.data_mut()[j] = orig + self.eps;
                let plus = eval(&f, store);
                store.get_mut(id).value.data_mut()[j] = orig - self.eps;
                let minus = eval(&f, store);
                store.get_mut(id).value.data_mut()[j] = orig;
                let numeric = (plus? - minus?) / (2.0 * self.eps);
                let a = analytic.get(id).map_or(0.0, |g| g.data()[j]);
                let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
                report.coords_checked += 1;
                if report.worst.is_none() || rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((store.get(id).name.clone(), j));
                }
            }
        }
        Ok(report)
    }
}

/// Check every coordinate of every parameter; returns the max relative error.
pub fn grad_check(
    store: &mut ParamStore,
    eps: f64,
    f: impl Fn(&Tape, &ParamStore) -> Result<Var>,
) -> Result<f64> {
    GradCheck {
        eps,
        ..GradCheck::default()
    }
    .run(store, f)
    .map(|r| r.max_rel_error)
}
