//! Central-difference verification of tape gradients.

use super::tape::Tape;
use super::tensor::Tensor;
use super::DiffError;

type Result<T> = std::result::Result<T, DiffError>;

/// One coordinate whose analytic and numeric gradients disagree beyond tol.
#[derive(Debug, Clone)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Per-parameter summary of the comparison.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub flagged: Vec<CoordError>,
}

/// Outcome of [`finite_diff_check`] over one loss function.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub params: Vec<ParamCheck>,
    pub h: f64,
    pub tol: f64,
}

impl FiniteDiffReport {
    /// Largest relative error over every coordinate of every parameter.
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }

    /// All flagged coordinates across parameters, worst first.
    pub fn flagged(&self) -> Vec<&CoordError> {
        let mut all: Vec<&CoordError> = self
            .params
            .iter()
            .flat_map(|p| p.flagged.iter())
            .collect();
        all.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        all
    }
}

/// Compare tape gradients of `loss_fn` against central finite differences.
///
/// `loss_fn` is called with a fresh tape and leaf handles for `params` (in
/// order) and must return a scalar loss; it is evaluated twice at the base
/// point to reject non-deterministic losses before any comparison happens.
/// The relative error of a coordinate uses `max(|analytic|, |numeric|, 1e-8)`
/// as denominator, and any coordinate above `tol` is flagged in the report.
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &[(&str, Tensor)],
    h: f64,
    tol: f64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(DiffError::InvalidStep { h });
    }

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.detach()).collect();

    let first = eval_loss(&loss_fn, &base)?;
    let second = eval_loss(&loss_fn, &base)?;
    if first.to_bits() != second.to_bits() {
        return Err(DiffError::NonDeterministicLoss { first, second });
    }

    // Analytic gradients from one recorded pass.
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = base.iter().map(|t| tape.leaf(t)).collect();
    let loss = loss_fn(&mut tape, &leaves)?;
    if !loss.is_scalar() {
        return Err(DiffError::NonScalarRoot {
            shape: loss.shape().to_vec(),
        });
    }
    let grads = tape.backward(&loss)?;

    let mut checks = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let analytic = grads.wrt(&leaves[pi])?;
        let mut max_rel = 0.0f64;
        let mut flagged = Vec::new();
        for k in 0..analytic.numel() {
            let mut plus = base.to_vec();
            plus[pi] = perturb(&base[pi], k, h);
            let lp = eval_loss(&loss_fn, &plus)?;

            let mut minus = base.to_vec();
            minus[pi] = perturb(&base[pi], k, -h);
            let lm = eval_loss(&loss_fn, &minus)?;

            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            max_rel = max_rel.max(rel);
            if rel > tol {
                flagged.push(CoordError {
                    param: name.to_string(),
                    index: k,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        checks.push(ParamCheck {
            name: name.to_string(),
            max_rel_error: max_rel,
            flagged,
        });
    }

    Ok(FiniteDiffReport {
        params: checks,
        h,
        tol,
    })
}

fn eval_loss<F>(loss_fn: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = params.iter().map(|t| tape.leaf(t)).collect();
    let out = loss_fn(&mut tape, &leaves)?;
    if !out.is_scalar() {
        return Err(DiffError::NonScalarRoot {
            shape: out.shape().to_vec(),
        });
    }
    Ok(out.item())
}

fn perturb(t: &Tensor, index: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[index] += delta;
    Tensor::new(t.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_checks_to_rounding_error() {
        let x = Tensor::vector(vec![0.5, -1.25, 2.0]);
        let report = finite_diff_check(
            |tape, ps| {
                let sq = tape.mul(&ps[0], &ps[0])?;
                tape.sum_all(&sq)
            },
            &[("x", x)],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error());
        assert!(report.max_rel_error() < 1e-8);
    }

    #[test]
    fn tanh_chain_of_depth_three_passes_at_1e4() {
        let x = Tensor::vector(vec![0.3, -0.9, 1.7, 0.05]);
        let report = finite_diff_check(
            |tape, ps| {
                let a = tape.tanh(&ps[0])?;
                let b = tape.tanh(&a)?;
                let c = tape.tanh(&b)?;
                tape.sum_all(&c)
            },
            &[("x", x)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error());
    }

    #[test]
    fn softmax_cross_entropy_toy_passes_at_1e4() {
        let logits = Tensor::vector(vec![0.2, -1.1, 0.8, 0.4]);
        // -log softmax(logits)[2]
        let report = finite_diff_check(
            |tape, ps| {
                let z = tape.logsumexp_vec(&ps[0])?;
                let target = tape.index_elem(&ps[0], &[2])?;
                tape.sub(&z, &target)
            },
            &[("logits", logits)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error());
    }

    #[test]
    fn step_outside_valid_range_is_rejected() {
        let x = Tensor::scalar(1.0);
        let err = finite_diff_check(
            |tape, ps| tape.sum_all(&ps[0]),
            &[("x", x)],
            1e-2,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, DiffError::InvalidStep { .. }));
    }

    #[test]
    fn non_deterministic_loss_is_rejected() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let x = Tensor::scalar(1.0);
        let err = finite_diff_check(
            |tape, ps| {
                let n = calls.fetch_add(1, Ordering::SeqCst) as f64;
                let noise = tape.leaf(&Tensor::scalar(n));
                let shifted = tape.add(&ps[0], &noise)?;
                tape.sum_all(&shifted)
            },
            &[("x", x)],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, DiffError::NonDeterministicLoss { .. }));
    }

    #[test]
    fn report_flags_a_wrong_gradient() {
        // Loss reads x through a detached copy on the numeric path only:
        // the analytic gradient sees a constant, finite differences see the
        // dependence, so every coordinate disagrees.
        let x = Tensor::vector(vec![0.4, -0.2]);
        let report = finite_diff_check(
            |tape, ps| {
                let frozen = tape.leaf(&ps[0].detach());
                let prod = tape.mul(&ps[0], &frozen)?;
                tape.sum_all(&prod)
            },
            &[("x", x)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.params[0].flagged.len(), 2);
    }
}
