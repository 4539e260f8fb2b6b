//! Reprojection cycle loss: pixel -> UV -> 3D -> pixel must close.

use crate::error::{Result, SurfmapError};
use crate::geometry::{bilinear_tap, CameraPose, Grid, Mask, PositionMap};
use nalgebra::Vector3;

/// Squared reprojection error, pixel displacements normalized by image
/// width, averaged over foreground pixels.
///
/// Pixels whose predicted 3D point falls behind the camera contribute a
/// fixed penalty of the squared normalized image diagonal and no gradient,
/// which keeps early training finite.
pub fn reprojection_loss(
    uv: &Grid<2>,
    posmap: &PositionMap,
    cam: &CameraPose,
    mask: &Mask,
) -> Result<f64> {
    let mut d_uv = Grid::<2>::zeros(uv.h(), uv.w());
    let mut d_posmap = Grid::<3>::zeros(posmap.resolution(), posmap.resolution());
    reprojection_loss_grad(uv, posmap, cam, mask, 0.0, &mut d_uv, &mut d_posmap)
}

/// Loss plus gradient accumulation: adds `scale * dL/d(uv)` into `d_uv`
/// and `scale * dL/d(posmap)` into `d_posmap`.
pub fn reprojection_loss_grad(
    uv: &Grid<2>,
    posmap: &PositionMap,
    cam: &CameraPose,
    mask: &Mask,
    scale: f64,
    d_uv: &mut Grid<2>,
    d_posmap: &mut Grid<3>,
) -> Result<f64> {
    if uv.h() != mask.h() || uv.w() != mask.w() {
        return Err(SurfmapError::Shape("uv map and mask disagree".into()));
    }
    let n_fg = mask.count_foreground();
    if n_fg == 0 {
        return Err(SurfmapError::EmptyMask);
    }
    let (w_img, h_img) = (cam.image_size.0 as f64, cam.image_size.1 as f64);
    let inv_w = 1.0 / w_img;
    let behind_penalty = 1.0 + (h_img / w_img) * (h_img / w_img);
    let coef = scale / n_fg as f64;

    let mut acc = 0.0;
    for (row, col) in mask.foreground() {
        let uvp = uv.get(row, col);
        let (point, tap) = bilinear_tap(posmap.grid(), uvp[0], uvp[1]);
        let p3 = Vector3::new(point[0], point[1], point[2]);
        let Some(pg) = cam.project_grad(&p3) else {
            acc += behind_penalty;
            continue;
        };
        let dx = (pg.pixel.x - (col as f64 + 0.5)) * inv_w;
        let dy = (pg.pixel.y - (row as f64 + 0.5)) * inv_w;
        acc += dx * dx + dy * dy;
        if scale != 0.0 {
            // dL/d(point), through the projection jacobian
            let gu = 2.0 * dx * inv_w;
            let gv = 2.0 * dy * inv_w;
            let d_point = [
                gu * pg.d_pixel[0][0] + gv * pg.d_pixel[1][0],
                gu * pg.d_pixel[0][1] + gv * pg.d_pixel[1][1],
                gu * pg.d_pixel[0][2] + gv * pg.d_pixel[1][2],
            ];
            let scaled = [d_point[0] * coef, d_point[1] * coef, d_point[2] * coef];
            tap.accumulate_grid_grad(&scaled, d_posmap);
            let jac = tap.coord_jacobian(posmap.grid());
            let duv = d_uv.get_mut(row, col);
            for c in 0..3 {
                duv[0] += coef * d_point[c] * jac[c][0];
                duv[1] += coef * d_point[c] * jac[c][1];
            }
        }
    }
    Ok(acc / n_fg as f64)
}
