//! Central-difference gradient oracle for anything built on the tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{MohdError, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over every checked coordinate.
    pub max_rel_err: f64,
    /// Worst relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    pub coords_checked: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(MohdError::NonFinite("grad_check loss"));
    }
    Ok(v)
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// At most `coords_per_param` coordinates of each tensor are perturbed
/// (all of them when the tensor is smaller). Relative error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, coords_per_param: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(MohdError::Config(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.scalar(loss).is_finite() {
        return Err(MohdError::NonFinite("grad_check loss"));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0x6d6f6864);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut checked = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        let n = params[pi].numel();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, coords_per_param).into_vec()
        };
        let mut worst: f64 = 0.0;
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + h;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig - h;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
        per_param.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_err: per_param.iter().copied().fold(0.0, f64::max),
        per_param,
        coords_checked: checked,
    })
}
