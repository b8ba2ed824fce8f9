use crate::error::{MohdError, Result};
use crate::numerics::Tensor;

/// Grouped fusion map: stride permutation, `d/r` diagonal `r×r` blocks, inverse permutation.
///
/// Output element `i·(d/r) + b` reads inputs `j·(d/r) + b` through block `b`,
/// so each block mixes one residue class of positions spread across the
/// whole width.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub r: usize,
    /// `[d/r, r, r]`.
    pub blocks: Tensor,
}

impl FusionParams {
    pub fn identity(d: usize, r: usize) -> Result<Self> {
        if r == 0 || d % r != 0 {
            return Err(MohdError::Config(format!("fusion block size {r} must divide width {d}")));
        }
        let nb = d / r;
        let mut data = vec![0.0; nb * r * r];
        for b in 0..nb {
            for i in 0..r {
                data[b * r * r + i * r + i] = 1.0;
            }
        }
        Ok(Self {
            r,
            blocks: Tensor::new(&[nb, r, r], data)?,
        })
    }

    pub fn from_blocks(blocks: Tensor) -> Result<Self> {
        match *blocks.shape() {
            [_, r, r2] if r == r2 && r > 0 => Ok(Self { r, blocks }),
            _ => Err(MohdError::shape("fusion", format!("blocks {:?} are not [d/r, r, r]", blocks.shape()))),
        }
    }

    pub fn width(&self) -> usize {
        self.blocks.shape()[0] * self.r
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.width();
        if x.len() != d {
            return Err(MohdError::shape("fusion", format!("vector of {} for width {d}", x.len())));
        }
        let (r, nb) = (self.r, d / self.r);
        let bv = self.blocks.data();
        let mut y = vec![0.0; d];
        for b in 0..nb {
            for i in 0..r {
                y[i * nb + b] = (0..r).map(|j| bv[b * r * r + i * r + j] * x[j * nb + b]).sum();
            }
        }
        Ok(y)
    }

    /// The equivalent dense `d×d` matrix `Pᵀ · blockdiag · P` (acts on column vectors).
    pub fn materialize(&self) -> Tensor {
        let d = self.width();
        let (r, nb) = (self.r, d / self.r);
        // P maps position j·nb + b to b·r + j
        let perm = |p: usize| (p % nb) * r + p / nb;
        let mut bd = vec![0.0; d * d];
        for b in 0..nb {
            for i in 0..r {
                for j in 0..r {
                    bd[(b * r + i) * d + b * r + j] = self.blocks.data()[b * r * r + i * r + j];
                }
            }
        }
        let mut out = vec![0.0; d * d];
        for row in 0..d {
            for col in 0..d {
                out[row * d + col] = bd[perm(row) * d + perm(col)];
            }
        }
        Tensor::new(&[d, d], out).expect("square")
    }
}
