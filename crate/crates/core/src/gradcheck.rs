//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::params::ParamSet;
use crate::tape::{NodeId, Tape};

/// Compares the tape gradient of a scalar function against central finite
/// differences, coordinate by coordinate, over every parameter in `params`.
///
/// `build` must be a deterministic function of the parameter set: any noise
/// it uses has to be frozen (passed in as constants), otherwise the two
/// evaluations at `x +- eps` sample different randomness and the comparison
/// is meaningless.
///
/// Returns the maximum over coordinates of
/// `|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(params: &ParamSet, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<NodeId>,
{
    debug_assert!((1e-7..=1e-3).contains(&eps), "eps out of sensible range");

    let analytic = {
        let mut tape = Tape::new(params);
        let loss = build(params, &mut tape)?;
        tape.backward(loss)?
    };

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new(p);
        let loss = build(p, &mut tape)?;
        Ok(tape.value(loss).item())
    };

    let mut max_rel: f64 = 0.0;
    for (pid, _, tensor) in params.iter() {
        for coord in 0..tensor.len() {
            let mut plus = params.clone();
            plus.nudge(pid, coord, eps);
            let mut minus = params.clone();
            minus.nudge(pid, coord, -eps);
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let ad = analytic.get(pid).map_or(0.0, |g| g.data()[coord]);
            let rel = (ad - fd).abs() / f64::max(1e-12, ad.abs() + fd.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_form_is_exact() {
        // f(w) = sum(w^2) + 3*sum(w); analytic gradient 2w + 3.
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::vector(vec![1.5, -2.0, 0.25]));
        let err = grad_check(&ps, 1e-5, |_, tape| {
            let w = tape.param(crate::params::ParamId(0));
            let sq = tape.mul(w, w)?;
            let s1 = tape.sum(sq);
            let s2 = tape.sum(w);
            let s2 = tape.scale(s2, 3.0);
            tape.add(s1, s2)
        })
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn constant_function_reports_zero() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::vector(vec![1.0, 2.0]));
        let err = grad_check(&ps, 1e-5, |_, tape| Ok(tape.constant_scalar(7.0))).unwrap();
        assert_eq!(err, 0.0);
    }
}
