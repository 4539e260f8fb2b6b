//! Deformation regularizer: smoothness over valid 4-neighbor texel pairs
//! plus an L2 term, equally weighted.

use crate::error::{Result, SurfmapError};
use crate::geometry::Grid;

pub fn deformation_reg(residual: &Grid<3>, validity: &[bool]) -> Result<f64> {
    let mut d = Grid::<3>::zeros(residual.h(), residual.w());
    deformation_reg_grad(residual, validity, 0.0, &mut d)
}

/// `mean_pairs ||d_i - d_j||^2 + mean_valid ||d_i||^2`; each unordered
/// adjacent pair (right and down neighbors) counted once.
pub fn deformation_reg_grad(
    residual: &Grid<3>,
    validity: &[bool],
    scale: f64,
    d_residual: &mut Grid<3>,
) -> Result<f64> {
    let (h, w) = (residual.h(), residual.w());
    if validity.len() != h * w {
        return Err(SurfmapError::Shape("validity does not match residual".into()));
    }
    // count pairs first so gradients can be scaled in one pass
    let mut n_pairs = 0usize;
    let mut n_valid = 0usize;
    for row in 0..h {
        for col in 0..w {
            if !validity[row * w + col] {
                continue;
            }
            n_valid += 1;
            if col + 1 < w && validity[row * w + col + 1] {
                n_pairs += 1;
            }
            if row + 1 < h && validity[(row + 1) * w + col] {
                n_pairs += 1;
            }
        }
    }
    if n_valid == 0 {
        return Ok(0.0);
    }
    let pair_coef = if n_pairs > 0 { 1.0 / n_pairs as f64 } else { 0.0 };
    let valid_coef = 1.0 / n_valid as f64;

    let mut smooth = 0.0;
    let mut l2 = 0.0;
    for row in 0..h {
        for col in 0..w {
            if !validity[row * w + col] {
                continue;
            }
            let a = residual.get(row, col);
            l2 += a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
            if scale != 0.0 {
                let g = d_residual.get_mut(row, col);
                for c in 0..3 {
                    g[c] += scale * valid_coef * 2.0 * a[c];
                }
            }
            let mut neighbor = |nrow: usize, ncol: usize, smooth: &mut f64| {
                let b = residual.get(nrow, ncol);
                let diff = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                *smooth += diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2];
                if scale != 0.0 {
                    for c in 0..3 {
                        let g = scale * pair_coef * 2.0 * diff[c];
                        d_residual.get_mut(row, col)[c] += g;
                        d_residual.get_mut(nrow, ncol)[c] -= g;
                    }
                }
            };
            if col + 1 < w && validity[row * w + col + 1] {
                neighbor(row, col + 1, &mut smooth);
            }
            if row + 1 < h && validity[(row + 1) * w + col] {
                neighbor(row + 1, col, &mut smooth);
            }
        }
    }
    Ok(smooth * pair_coef + l2 * valid_coef)
}
