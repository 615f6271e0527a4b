use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|)` seen.
    pub max_rel_err: f64,
    /// `(parameter index, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Checks the gradient of the scalar function `f` at `params`.
///
/// At most `max_coords` coordinates per parameter are probed (all of them
/// when the parameter is smaller); the sample is drawn from a fixed seed.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, max_coords: usize) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.var(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    if !loss.item().is_finite() {
        return Err(Error::Numeric("grad_check: non-finite value at the base point".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |shifted: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = shifted.iter().map(|p| t.var(p.clone())).collect();
        let v = f(&t, &vs)?.item();
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() <= max_coords {
            (0..p.len()).collect()
        } else {
            let mut c = sample(&mut rng, p.len(), max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite value perturbing parameter {pi} coordinate {k}"
                )));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[k];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (pi, k);
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
