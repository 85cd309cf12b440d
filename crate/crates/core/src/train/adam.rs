//! Adam with bias correction and optional decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::Gradients;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates mirroring a [`ParamSet`], plus the step
/// counter driving bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn moments_mut(&mut self) -> (&mut Vec<Tensor>, &mut Vec<Tensor>) {
        (&mut self.m, &mut self.v)
    }

    /// One bias-corrected update. Weight decay, when nonzero, is decoupled:
    /// applied directly to the pre-update parameter value, not through the
    /// moments.
    pub fn apply(
        &mut self,
        params: &mut ParamSet,
        grads: &Gradients,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for i in 0..params.len() {
            let id = crate::params::ParamId(i);
            let g = grads.get_or_zeros(params, id);
            if g.shape() != params.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: crate::tensor::shape_str(params.get(id).shape()),
                    rhs: crate::tensor::shape_str(g.shape()),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                let old = p[k];
                p[k] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
                if weight_decay > 0.0 {
                    p[k] -= lr * weight_decay * old;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use crate::rng::RngState;
    use crate::tape::Tape;

    #[test]
    fn first_step_is_bias_corrected_unit_direction() {
        // With g = 1 everywhere, m_hat = v_hat = 1, so the update is
        // -lr / (1 + eps) per coordinate.
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::zeros(&[3]));
        let mut adam = AdamState::new(&ps);
        let grads = {
            let mut tape = Tape::new(&ps);
            let wn = tape.param(w);
            let s = tape.sum(wn);
            tape.backward(s).unwrap()
        };
        adam.apply(&mut ps, &grads, 1e-3, 0.0).unwrap();
        let expect = -1e-3 / (1.0 + EPSILON);
        for &v in ps.get(w).data() {
            assert!((v - expect).abs() < 1e-18, "{v} vs {expect}");
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_without_decay() {
        let mut rng = RngState::new(1);
        let mut ps = ParamSet::new();
        let w = ps.add("w", rng.normal_tensor(&[4]));
        let before = ps.get(w).clone();
        let mut adam = AdamState::new(&ps);
        for _ in 0..10 {
            let grads = {
                let mut tape = Tape::new(&ps);
                let _ = tape.param(w);
                let c = tape.constant_scalar(1.0);
                tape.backward(c).unwrap()
            };
            adam.apply(&mut ps, &grads, 1e-2, 0.0).unwrap();
        }
        assert_eq!(ps.get(w), &before);
    }

    #[test]
    fn trajectories_are_bit_identical() {
        let run = || {
            let mut rng = RngState::new(7);
            let mut ps = ParamSet::new();
            let w = ps.add("w", rng.normal_tensor(&[5]));
            let mut adam = AdamState::new(&ps);
            for _ in 0..20 {
                let grads = {
                    let mut tape = Tape::new(&ps);
                    let wn = tape.param(w);
                    let sq = tape.mul(wn, wn).unwrap();
                    let s = tape.sum(sq);
                    tape.backward(s).unwrap()
                };
                adam.apply(&mut ps, &grads, 1e-2, 1e-4).unwrap();
            }
            ps.get(w).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decay_shrinks_unused_parameters() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::filled(&[2], 1.0));
        let mut adam = AdamState::new(&ps);
        let grads = {
            let mut tape = Tape::new(&ps);
            let _ = tape.param(w);
            let c = tape.constant_scalar(0.0);
            tape.backward(c).unwrap()
        };
        adam.apply(&mut ps, &grads, 0.1, 0.5).unwrap();
        for &v in ps.get(w).data() {
            assert!((v - 0.95).abs() < 1e-15);
        }
        let _ = ParamId(0);
    }
}
