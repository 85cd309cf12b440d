//! Overlapping patch grids over square images, and the column sequences
//! built from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Patch, SequenceSample};

/// Square grid of overlapping crops: patches of side `patch` every `stride`
/// pixels over an `image_size` x `image_size` image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGridSpec {
    pub image_size: usize,
    pub patch: usize,
    pub stride: usize,
}

impl PatchGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.stride == 0 || self.patch > self.image_size {
            return Err(Error::InvalidConfig {
                what: "PatchGridSpec",
                detail: format!(
                    "patch {} / stride {} invalid for image {}",
                    self.patch, self.stride, self.image_size
                ),
            });
        }
        if self.stride > self.patch {
            // overlap = patch - stride must be >= 0
            return Err(Error::InvalidConfig {
                what: "PatchGridSpec",
                detail: format!("stride {} exceeds patch {}", self.stride, self.patch),
            });
        }
        if (self.image_size - self.patch) % self.stride != 0 {
            return Err(Error::GridDivisibility {
                image: self.image_size,
                patch: self.patch,
                stride: self.stride,
            });
        }
        Ok(())
    }

    /// Grid side `G = (H - p) / s + 1`.
    pub fn grid_side(&self) -> usize {
        (self.image_size - self.patch) / self.stride + 1
    }

    pub fn overlap(&self) -> usize {
        self.patch - self.stride
    }
}

/// Cuts a `[C,H,W]` image into a `G x G` grid. Patch `(i, j)` covers rows
/// `[i*s, i*s+p)` and columns `[j*s, j*s+p)`.
pub fn extract_patch_grid(image: &Tensor, spec: &PatchGridSpec) -> Result<Vec<Vec<Tensor>>> {
    spec.validate()?;
    let s = image.shape();
    if s.len() != 3 || s[1] != spec.image_size || s[2] != spec.image_size {
        return Err(Error::PatchShape {
            expected: format!("Cx{}x{}", spec.image_size, spec.image_size),
            got: crate::tensor::shape_str(s),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let g = spec.grid_side();
    let p = spec.patch;
    let data = image.data();
    let mut grid = Vec::with_capacity(g);
    for i in 0..g {
        let mut row = Vec::with_capacity(g);
        for j in 0..g {
            let mut buf = Vec::with_capacity(c * p * p);
            for ci in 0..c {
                for y in 0..p {
                    let src = (ci * h + i * spec.stride + y) * w + j * spec.stride;
                    buf.extend_from_slice(&data[src..src + p]);
                }
            }
            row.push(Tensor::new(vec![c, p, p], buf)?);
        }
        grid.push(row);
    }
    Ok(grid)
}

/// Turns a square grid into `G` column sequences, each read top to bottom.
/// All sequences share the image's label and group. Sequence ids are
/// `base_id + column`.
pub fn grid_to_sequences(
    grid: &[Vec<Tensor>],
    label: Option<usize>,
    base_id: u64,
    group: u64,
) -> Vec<SequenceSample> {
    let g = grid.len();
    (0..g)
        .map(|col| SequenceSample {
            id: base_id + col as u64,
            group,
            label,
            patches: (0..g).map(|row| Patch::Image(grid[row][col].clone())).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn paper_scale_grid_is_seven() {
        let spec = PatchGridSpec {
            image_size: 256,
            patch: 64,
            stride: 32,
        };
        spec.validate().unwrap();
        assert_eq!(spec.grid_side(), 7);
        assert_eq!(spec.overlap(), 32);
    }

    #[test]
    fn desk_scale_grid_is_three() {
        let spec = PatchGridSpec {
            image_size: 28,
            patch: 12,
            stride: 8,
        };
        spec.validate().unwrap();
        assert_eq!(spec.grid_side(), 3);
    }

    #[test]
    fn divisibility_violation_is_reported() {
        let spec = PatchGridSpec {
            image_size: 28,
            patch: 12,
            stride: 7,
        };
        assert!(matches!(
            spec.validate(),
            Err(Error::GridDivisibility { .. })
        ));
    }

    #[test]
    fn every_pixel_is_covered() {
        let spec = PatchGridSpec {
            image_size: 28,
            patch: 12,
            stride: 8,
        };
        let img = Tensor::zeros(&[1, 28, 28]);
        let _ = extract_patch_grid(&img, &spec).unwrap();
        let g = spec.grid_side();
        let mut cover = vec![0u32; 28 * 28];
        for i in 0..g {
            for j in 0..g {
                for y in 0..spec.patch {
                    for x in 0..spec.patch {
                        cover[(i * spec.stride + y) * 28 + j * spec.stride + x] += 1;
                    }
                }
            }
        }
        assert!(cover.iter().all(|&c| c >= 1));
    }

    #[test]
    fn patches_are_exact_slices() {
        // Writing patches back at their offsets reproduces the image, and
        // overlapping regions agree between patches.
        let mut rng = RngState::new(42);
        let spec = PatchGridSpec {
            image_size: 20,
            patch: 8,
            stride: 4,
        };
        let img = rng.normal_tensor(&[2, 20, 20]);
        let grid = extract_patch_grid(&img, &spec).unwrap();
        let mut rebuilt = vec![f64::NAN; 2 * 20 * 20];
        for (i, row) in grid.iter().enumerate() {
            for (j, patch) in row.iter().enumerate() {
                let pd = patch.data();
                for ci in 0..2 {
                    for y in 0..8 {
                        for x in 0..8 {
                            let dst = (ci * 20 + i * 4 + y) * 20 + j * 4 + x;
                            let v = pd[(ci * 8 + y) * 8 + x];
                            if rebuilt[dst].is_nan() {
                                rebuilt[dst] = v;
                            } else {
                                assert_eq!(rebuilt[dst], v, "overlap disagrees");
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(rebuilt, img.data());
    }

    #[test]
    fn three_by_three_grid_gives_three_sequences_of_three() {
        let spec = PatchGridSpec {
            image_size: 28,
            patch: 12,
            stride: 8,
        };
        let img = Tensor::zeros(&[1, 28, 28]);
        let grid = extract_patch_grid(&img, &spec).unwrap();
        let seqs = grid_to_sequences(&grid, Some(4), 100, 7);
        assert_eq!(seqs.len(), 3);
        for (c, s) in seqs.iter().enumerate() {
            assert_eq!(s.len(), 3);
            assert_eq!(s.label, Some(4));
            assert_eq!(s.group, 7);
            assert_eq!(s.id, 100 + c as u64);
        }
    }

    #[test]
    fn column_order_is_top_to_bottom() {
        // Mark each patch with its (row, col) in the first pixel and check
        // that sequence j reads column j from row 0 downward; with the
        // default context of 2 the first two rows condition the rest.
        let mut data = vec![0.0; 28 * 28];
        let spec = PatchGridSpec {
            image_size: 28,
            patch: 12,
            stride: 8,
        };
        for i in 0..3 {
            for j in 0..3 {
                data[(i * 8) * 28 + j * 8] = (10 * i + j) as f64;
            }
        }
        let img = Tensor::new(vec![1, 28, 28], data).unwrap();
        let grid = extract_patch_grid(&img, &spec).unwrap();
        let seqs = grid_to_sequences(&grid, None, 0, 0);
        for (j, seq) in seqs.iter().enumerate() {
            for (i, patch) in seq.patches.iter().enumerate() {
                let Patch::Image(t) = patch else { panic!() };
                assert_eq!(t.data()[0], (10 * i + j) as f64);
            }
        }
    }

    #[test]
    fn sequences_survive_serialization() {
        let spec = PatchGridSpec {
            image_size: 20,
            patch: 8,
            stride: 4,
        };
        let mut rng = RngState::new(5);
        let img = rng.normal_tensor(&[1, 20, 20]);
        let grid = extract_patch_grid(&img, &spec).unwrap();
        let seqs = grid_to_sequences(&grid, Some(1), 0, 0);
        let json = serde_json::to_string(&seqs).unwrap();
        let back: Vec<SequenceSample> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, seqs);
    }
}
