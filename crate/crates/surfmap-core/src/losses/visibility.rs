//! Visibility hinge: the predicted surface point must not sit behind the
//! average-mesh surface point at the same UV under the view's camera.

use crate::error::{Result, SurfmapError};
use crate::geometry::{bilinear_tap, CameraPose, Grid, Mask, PositionMap};
use nalgebra::Vector3;

pub fn visibility_loss(
    uv: &Grid<2>,
    posmap: &PositionMap,
    avg: &PositionMap,
    cam: &CameraPose,
    mask: &Mask,
) -> Result<f64> {
    let mut d_uv = Grid::<2>::zeros(uv.h(), uv.w());
    let mut d_posmap = Grid::<3>::zeros(posmap.resolution(), posmap.resolution());
    visibility_loss_grad(uv, posmap, avg, cam, mask, 0.0, &mut d_uv, &mut d_posmap)
}

/// Mean over foreground of `max(0, z - z_avg)`, depths in frontalized
/// units. Subgradient 0 at the kink. Behind-camera pixels contribute 0.
pub fn visibility_loss_grad(
    uv: &Grid<2>,
    posmap: &PositionMap,
    avg: &PositionMap,
    cam: &CameraPose,
    mask: &Mask,
    scale: f64,
    d_uv: &mut Grid<2>,
    d_posmap: &mut Grid<3>,
) -> Result<f64> {
    if uv.h() != mask.h() || uv.w() != mask.w() {
        return Err(SurfmapError::Shape("uv map and mask disagree".into()));
    }
    if posmap.resolution() != avg.resolution() {
        return Err(SurfmapError::Shape("posmap and average resolution disagree".into()));
    }
    let n_fg = mask.count_foreground();
    if n_fg == 0 {
        return Err(SurfmapError::EmptyMask);
    }
    let coef = scale / n_fg as f64;
    let mut acc = 0.0;
    for (row, col) in mask.foreground() {
        let uvp = uv.get(row, col);
        let (point, tap) = bilinear_tap(posmap.grid(), uvp[0], uvp[1]);
        let (point_avg, tap_avg) = bilinear_tap(avg.grid(), uvp[0], uvp[1]);
        let Some(pg) = cam.project_grad(&Vector3::new(point[0], point[1], point[2])) else {
            continue;
        };
        let Some(pg_avg) = cam.project_grad(&Vector3::new(point_avg[0], point_avg[1], point_avg[2]))
        else {
            continue;
        };
        let gap = pg.depth - pg_avg.depth;
        if gap > 0.0 {
            acc += gap;
            if scale != 0.0 {
                // d(loss)/d(posmap texels) through z of the predicted point
                let dz = [coef * pg.d_depth[0], coef * pg.d_depth[1], coef * pg.d_depth[2]];
                tap.accumulate_grid_grad(&dz, d_posmap);
                // d(loss)/d(uv) has two routes: predicted map and average map
                let jac = tap.coord_jacobian(posmap.grid());
                let jac_avg = tap_avg.coord_jacobian(avg.grid());
                let duv = d_uv.get_mut(row, col);
                for c in 0..3 {
                    duv[0] += coef * (pg.d_depth[c] * jac[c][0] - pg_avg.d_depth[c] * jac_avg[c][0]);
                    duv[1] += coef * (pg.d_depth[c] * jac[c][1] - pg_avg.d_depth[c] * jac_avg[c][1]);
                }
            }
        }
    }
    Ok(acc / n_fg as f64)
}
