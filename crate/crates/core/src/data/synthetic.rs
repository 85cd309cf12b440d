//! Synthetic Gaussian sequence generator with closed-form mutual
//! information between patch groups.
//!
//! Each sequence draws a class `y ~ Uniform(M)` and a shared factor
//! `u ~ N(0, I)`; every patch is `A [onehot(y); u] + sigma * eps` with fresh
//! per-patch noise. Conditioned on `y`, the patches are jointly Gaussian
//! with a shared low-rank component, so the mutual information between any
//! two disjoint patch groups has the closed form
//! `0.5 (logdet S_X + logdet S_Y - logdet S_XY)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::{Patch, SequenceSample};

/// Generator description. `sigma_grid` optionally names several noise levels
/// for emitting a family of datasets with one emission map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub m_classes: usize,
    pub d_latent: usize,
    pub patch_dim: usize,
    pub seq_len: usize,
    pub noise_sigma: f64,
    #[serde(default)]
    pub sigma_grid: Option<Vec<f64>>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::InvalidConfig {
            what: "SyntheticSpec",
            detail,
        };
        if self.m_classes == 0 {
            return Err(bad("m_classes must be >= 1".into()));
        }
        if self.patch_dim == 0 || self.seq_len == 0 {
            return Err(bad("patch_dim and seq_len must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(bad("noise_sigma must be >= 0".into()));
        }
        if let Some(grid) = &self.sigma_grid {
            if grid.iter().any(|&s| s < 0.0) {
                return Err(bad("sigma_grid entries must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// The noise levels this spec names: the grid when present, otherwise
    /// the single `noise_sigma`.
    pub fn sigmas(&self) -> Vec<f64> {
        self.sigma_grid
            .clone()
            .unwrap_or_else(|| vec![self.noise_sigma])
    }
}

/// A spec plus its frozen emission map. The emission is drawn once from the
/// seed, so train/test splits and every sigma on the grid share it.
#[derive(Clone, Debug)]
pub struct SyntheticSampler {
    pub spec: SyntheticSpec,
    /// `[patch_dim, m_classes + d_latent]`, row-major.
    pub emission: Tensor,
}

impl SyntheticSampler {
    pub fn new(spec: SyntheticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngState::new(seed).derive("synthetic.emission");
        let cols = spec.m_classes + spec.d_latent;
        let emission = rng.normal_tensor(&[spec.patch_dim, cols]);
        Ok(Self { spec, emission })
    }

    /// Generates `count` sequences at noise level `sigma`. Ids are
    /// `start_id..start_id + count`, one group per sequence.
    pub fn generate(
        &self,
        count: usize,
        sigma: f64,
        start_id: u64,
        rng: &mut RngState,
    ) -> Vec<SequenceSample> {
        let spec = &self.spec;
        let cols = spec.m_classes + spec.d_latent;
        let a = self.emission.data();
        (0..count)
            .map(|i| {
                let id = start_id + i as u64;
                let y = rng.below(spec.m_classes as u64) as usize;
                let u = rng.normal_vec(spec.d_latent);
                // base = A [onehot(y); u]
                let mut base = vec![0.0; spec.patch_dim];
                for (r, b) in base.iter_mut().enumerate() {
                    let row = &a[r * cols..(r + 1) * cols];
                    let mut acc = row[y];
                    for (d, uv) in u.iter().enumerate() {
                        acc += row[spec.m_classes + d] * uv;
                    }
                    *b = acc;
                }
                let patches = (0..spec.seq_len)
                    .map(|_| {
                        let noisy: Vec<f64> = base
                            .iter()
                            .map(|&b| b + sigma * rng.normal())
                            .collect();
                        Patch::Image(Tensor::vector(noisy))
                    })
                    .collect();
                SequenceSample {
                    id,
                    group: id,
                    label: Some(y),
                    patches,
                }
            })
            .collect()
    }

    /// Closed-form mutual information, given the class, between the first
    /// `t` patches and patch `t+1` at noise level `sigma`. Returns infinity
    /// at `sigma = 0` where the joint covariance is singular.
    pub fn mi_prefix_vs_next(&self, t: usize, sigma: f64) -> Result<f64> {
        if t == 0 || t + 1 > self.spec.seq_len {
            return Err(Error::InvalidConfig {
                what: "mi_prefix_vs_next",
                detail: format!("prefix {t} out of range for seq_len {}", self.spec.seq_len),
            });
        }
        if sigma == 0.0 {
            return Ok(f64::INFINITY);
        }
        let p = self.spec.patch_dim;
        let cols = self.spec.m_classes + self.spec.d_latent;
        let a = self.emission.data();
        // Shared covariance S = B B^T where B is the shared-factor part.
        let shared = DMatrix::from_fn(p, p, |r, c| {
            let mut acc = 0.0;
            for d in 0..self.spec.d_latent {
                acc += a[r * cols + self.spec.m_classes + d] * a[c * cols + self.spec.m_classes + d];
            }
            acc
        });
        let block = |groups: usize| -> DMatrix<f64> {
            let n = groups * p;
            DMatrix::from_fn(n, n, |r, c| {
                let (gi, gr) = (r / p, r % p);
                let (gj, gc) = (c / p, c % p);
                let mut v = shared[(gr, gc)];
                if gi == gj && gr == gc {
                    v += sigma * sigma;
                }
                v
            })
        };
        let logdet = |m: DMatrix<f64>| -> Result<f64> {
            let chol = m.cholesky().ok_or(Error::InvalidConfig {
                what: "mi_prefix_vs_next",
                detail: "covariance not positive definite".into(),
            })?;
            Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
        };
        let ld_x = logdet(block(t))?;
        let ld_y = logdet(block(1))?;
        let ld_xy = logdet(block(t + 1))?;
        Ok(0.5 * (ld_x + ld_y - ld_xy))
    }
}

/// Serialized dataset file: the generating spec, the noise level actually
/// used, and the sequences.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub sigma: f64,
    pub samples: Vec<SequenceSample>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(m: usize, dl: usize, sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            m_classes: m,
            d_latent: dl,
            patch_dim: 4,
            seq_len: 3,
            noise_sigma: sigma,
            sigma_grid: None,
        }
    }

    #[test]
    fn labels_are_balanced() {
        let sampler = SyntheticSampler::new(spec(10, 2, 1.0), 7).unwrap();
        let mut rng = RngState::new(7).derive("data");
        let data = sampler.generate(1000, 1.0, 0, &mut rng);
        let mut counts = [0u32; 10];
        for s in &data {
            counts[s.label.unwrap()] += 1;
        }
        let expect = 100.0;
        let sigma = (1000.0 * 0.1 * 0.9f64).sqrt();
        for c in counts {
            assert!((f64::from(c) - expect).abs() < 4.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let sampler = SyntheticSampler::new(spec(3, 2, 0.5), 11).unwrap();
        let a = sampler.generate(5, 0.5, 0, &mut RngState::new(11).derive("d"));
        let b = sampler.generate(5, 0.5, 0, &mut RngState::new(11).derive("d"));
        assert_eq!(a, b);
    }

    #[test]
    fn mi_decreases_monotonically_in_sigma() {
        let sampler = SyntheticSampler::new(spec(1, 2, 1.0), 3).unwrap();
        let grid = [0.25, 0.5, 1.0, 2.0, 4.0];
        let mis: Vec<f64> = grid
            .iter()
            .map(|&s| sampler.mi_prefix_vs_next(2, s).unwrap())
            .collect();
        for w in mis.windows(2) {
            assert!(w[0] > w[1], "{mis:?}");
        }
        for &mi in &mis {
            assert!(mi >= 0.0);
        }
    }

    #[test]
    fn mi_is_zero_without_shared_factor() {
        // d_latent = 0: patches are independent given the class, so the
        // conditional MI between disjoint groups vanishes.
        let sampler = SyntheticSampler::new(spec(3, 0, 1.0), 5).unwrap();
        let mi = sampler.mi_prefix_vs_next(2, 1.0).unwrap();
        assert!(mi.abs() < 1e-9, "{mi}");
    }

    #[test]
    fn mi_vanishes_in_the_large_noise_limit() {
        let sampler = SyntheticSampler::new(spec(1, 2, 1.0), 9).unwrap();
        let mi = sampler.mi_prefix_vs_next(2, 1e4).unwrap();
        assert!(mi < 1e-6, "{mi}");
    }

    #[test]
    fn mi_at_zero_noise_is_infinite() {
        let sampler = SyntheticSampler::new(spec(1, 1, 0.0), 9).unwrap();
        assert!(sampler.mi_prefix_vs_next(1, 0.0).unwrap().is_infinite());
    }

    #[test]
    fn mi_against_scalar_closed_form() {
        // patch_dim = 1, d_latent = 1, t = 1: correlation between two
        // scalar patches is rho = b^2 / (b^2 + sigma^2) and
        // MI = -0.5 ln(1 - rho^2).
        let spec = SyntheticSpec {
            m_classes: 1,
            d_latent: 1,
            patch_dim: 1,
            seq_len: 2,
            noise_sigma: 0.7,
            sigma_grid: None,
        };
        let sampler = SyntheticSampler::new(spec, 21).unwrap();
        let b = sampler.emission.data()[1];
        let s2 = 0.7f64 * 0.7;
        let rho = b * b / (b * b + s2);
        let expect = -0.5 * (1.0 - rho * rho).ln();
        let got = sampler.mi_prefix_vs_next(1, 0.7).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }
}
