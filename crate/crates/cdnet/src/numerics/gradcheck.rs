//! Finite-difference gradient checking.
//!
//! Central differences `(f(theta+eps) - f(theta-eps)) / (2 eps)` per
//! coordinate, compared against the tape's analytic gradients. The loss
//! program must be a deterministic function of the parameter store.

use super::tape::{NodeId, Tape};
use super::Real;
use crate::error::{Error, Result};
use crate::params::{ParamBinding, ParamStore};

/// Worst disagreement for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: Real,
    pub worst_index: usize,
    pub analytic: Real,
    pub numeric: Real,
}

/// Outcome of a full gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: Real,
    pub eps: Real,
    pub tol: Real,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    /// Entries whose worst relative error exceeds the tolerance.
    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_err >= self.tol).collect()
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{:<28} max_rel_err {:>12.3e}  (coord {} analytic {:.6e} numeric {:.6e})\n",
                e.name, e.max_rel_err, e.worst_index, e.analytic, e.numeric
            ));
        }
        out.push_str(&format!(
            "overall max_rel_err {:.3e} (eps {:.1e}, tol {:.1e}) -> {}\n",
            self.max_rel_err,
            self.eps,
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Relative error with an absolute floor: small gradients are compared
/// absolutely, large ones relatively.
fn rel_err(a: Real, n: Real) -> Real {
    (a - n).abs() / (1.0 as Real).max(a.abs()).max(n.abs())
}

/// Check the tape gradients of `program` against central finite differences.
///
/// `program` rebuilds the scalar loss from a parameter store and must be
/// deterministic; it is re-invoked twice per parameter coordinate. A loss or
/// gradient that is not finite is a diagnostic failure.
pub fn grad_check<F>(store: &ParamStore, mut program: F, eps: Real, tol: Real) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<(NodeId, ParamBinding)>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }

    let mut tape = Tape::new();
    let (loss, binding) = program(store, &mut tape)?;
    let base = tape.value(loss).as_scalar();
    if !base.is_finite() {
        return Err(Error::NonFinite { context: "grad_check loss".into() });
    }
    tape.backward(loss)?;
    let analytic = binding.extract_grads(&tape)?;

    let mut perturbed = store.clone();
    let mut entries = Vec::with_capacity(store.len());
    let mut overall: Real = 0.0;

    for id in store.ids() {
        let dim = store.get(id).len();
        let mut entry = GradCheckEntry {
            name: store.name(id).to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..dim {
            let orig = store.get(id).data()[j];
            let fd = {
                perturbed.get_mut(id).data_mut()[j] = orig + eps;
                let plus = eval_loss(&perturbed, &mut program)?;
                perturbed.get_mut(id).data_mut()[j] = orig - eps;
                let minus = eval_loss(&perturbed, &mut program)?;
                perturbed.get_mut(id).data_mut()[j] = orig;
                (plus - minus) / (2.0 * eps)
            };
            let a = analytic.get(id)[j];
            let err = rel_err(a, fd);
            if err > entry.max_rel_err {
                entry.max_rel_err = err;
                entry.worst_index = j;
                entry.analytic = a;
                entry.numeric = fd;
            }
        }
        overall = overall.max(entry.max_rel_err);
        entries.push(entry);
    }

    Ok(GradCheckReport { entries, max_rel_err: overall, eps, tol })
}

fn eval_loss<F>(store: &ParamStore, program: &mut F) -> Result<Real>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<(NodeId, ParamBinding)>,
{
    let mut tape = Tape::new();
    let (loss, _) = program(store, &mut tape)?;
    let v = tape.value(loss).as_scalar();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { context: "grad_check loss".into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_matches_finite_differences() {
        // loss = sum(theta^2), theta = [1, 2] -> analytic [2, 4].
        let mut store = ParamStore::new();
        let theta = store.register("theta", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let report = grad_check(
            &store,
            |s, tape| {
                let b = ParamBinding::bind_all(s, tape);
                let zero = tape.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap());
                let loss = tape.squared_l2(b.node(theta), zero)?;
                Ok((loss, b))
            },
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.render_text());
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut store = ParamStore::new();
        store.register("theta", Tensor::vector(vec![3.0, -1.0]).unwrap());
        let report = grad_check(
            &store,
            |s, tape| {
                let b = ParamBinding::bind_all(s, tape);
                let c = tape.leaf(Tensor::scalar(5.0).unwrap());
                let loss = tape.affine_scalars(&[(1.0, c)])?;
                Ok((loss, b))
            },
            1e-6,
            1e-10,
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.entries[0].max_rel_err, 0.0);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let store = ParamStore::new();
        let r = grad_check(
            &store,
            |s, tape| {
                let b = ParamBinding::bind_all(s, tape);
                let c = tape.leaf(Tensor::scalar(0.0).unwrap());
                Ok((c, b))
            },
            0.0,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
