//! Central-difference verification of reverse-mode gradients.

use rand::Rng;

use super::rng::rng_from_seed;
use super::{NumericsError, Result, Tape, Tensor, Var};

/// Worst relative disagreement found by [`grad_check`], with its location.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub probes: usize,
}

fn eval_loss<F>(loss_fn: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(NumericsError::NonFinite { op: "loss" });
    }
    Ok(v)
}

/// Reverse-mode gradients of `loss_fn` at `params`.
pub fn analytic_gradients<F>(loss_fn: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.variable(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    if !tape.value(loss).item().is_finite() {
        return Err(NumericsError::NonFinite { op: "loss" });
    }
    let mut grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

/// Compares `analytic` against central differences of `loss_fn` on
/// `probe_count` randomly chosen coordinates (all of them when there are
/// fewer). Relative error uses the denominator `max(|a|, |b|, 1e-8)`.
pub fn compare_gradients<F>(
    loss_fn: &F,
    params: &[Tensor],
    analytic: &[Tensor],
    probe_count: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let total: usize = params.iter().map(Tensor::len).sum();
    let coords: Vec<(usize, usize)> = if total <= probe_count {
        params
            .iter()
            .enumerate()
            .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
            .collect()
    } else {
        let mut rng = rng_from_seed(seed);
        (0..probe_count)
            .map(|_| {
                let mut flat = rng.random_range(0..total);
                let mut p = 0;
                while flat >= params[p].len() {
                    flat -= params[p].len();
                    p += 1;
                }
                (p, flat)
            })
            .collect()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
        probes: coords.len(),
    };
    let mut work = params.to_vec();
    for (p, i) in coords {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + step;
        let plus = eval_loss(loss_fn, &work)?;
        work[p].data_mut()[i] = orig - step;
        let minus = eval_loss(loss_fn, &work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[p].data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = p;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Maximum relative error between reverse-mode and central-difference
/// derivatives of `loss_fn` over randomly probed coordinates.
pub fn grad_check<F>(
    loss_fn: F,
    params: &[Tensor],
    probe_count: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&loss_fn, params)?;
    compare_gradients(&loss_fn, params, &analytic, probe_count, step, seed)
}
