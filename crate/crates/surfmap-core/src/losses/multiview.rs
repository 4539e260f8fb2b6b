//! Multi-view UV consistency: transport a pixel from one view through its
//! predicted 3D point into the other view and require both views' UV
//! predictions to agree. Differentiable through both UV maps and the
//! transport itself.

use crate::error::{Result, SurfmapError};
use crate::geometry::{bilinear_tap, BilinearTap, CameraPose, Grid, Mask, PositionMap};
use nalgebra::Vector3;

/// Bilinear sample of a UV map whose u channel lives on the unit circle.
///
/// Each corner's u is unwrapped to the branch nearest `ref_u` before
/// interpolation, so footprints that straddle the azimuth seam do not
/// average wrapped values into garbage. Returns the sampled value, the
/// tap (corner weights are unchanged by unwrapping) and the jacobian of
/// the value w.r.t. the normalized sample coordinates.
fn seam_aware_uv_tap(
    grid: &Grid<2>,
    gx: f64,
    gy: f64,
    ref_u: f64,
) -> ([f64; 2], BilinearTap, [[f64; 2]; 2]) {
    let (_, tap) = bilinear_tap(grid, gx, gy);
    let c1 = (tap.col0 + 1).min(grid.w() - 1);
    let r1 = (tap.row0 + 1).min(grid.h() - 1);
    let unwrap = |t: [f64; 2]| [t[0] - (t[0] - ref_u).round(), t[1]];
    let t00 = unwrap(grid.get(tap.row0, tap.col0));
    let t01 = unwrap(grid.get(tap.row0, c1));
    let t10 = unwrap(grid.get(r1, tap.col0));
    let t11 = unwrap(grid.get(r1, c1));
    let (fx, fy) = (tap.fx, tap.fy);
    let mut value = [0.0; 2];
    let mut jac = [[0.0; 2]; 2];
    for c in 0..2 {
        let top = t00[c] * (1.0 - fx) + t01[c] * fx;
        let bot = t10[c] * (1.0 - fx) + t11[c] * fx;
        value[c] = top * (1.0 - fy) + bot * fy;
        let d_dx = (t01[c] - t00[c]) * (1.0 - fy) + (t11[c] - t10[c]) * fy;
        let d_dy = (t10[c] - t00[c]) * (1.0 - fx) + (t11[c] - t01[c]) * fx;
        jac[c] = [d_dx * tap.dx_du, d_dy * tap.dy_dv];
    }
    (value, tap, jac)
}

/// Both views of one instance plus the transport policy.
pub struct MultiviewArgs<'a> {
    pub uv1: &'a Grid<2>,
    pub posmap1: &'a PositionMap,
    pub cam1: &'a CameraPose,
    pub mask1: &'a Mask,
    pub uv2: &'a Grid<2>,
    pub posmap2: &'a PositionMap,
    pub cam2: &'a CameraPose,
    pub mask2: &'a Mask,
    pub avg: &'a PositionMap,
    /// When true (default), transported points that land outside the other
    /// image, off its foreground, or behind the average mesh are dropped.
    /// When false this is the literal two-sum consistency loss with
    /// clamped sampling.
    pub transport_masking: bool,
    /// Slack for the average-mesh occlusion test, frontalized units.
    pub occlusion_margin: f64,
}

pub fn multiview_uv_loss(args: &MultiviewArgs) -> Result<f64> {
    let s = args.avg.resolution();
    let mut d_uv1 = Grid::<2>::zeros(args.uv1.h(), args.uv1.w());
    let mut d_uv2 = Grid::<2>::zeros(args.uv2.h(), args.uv2.w());
    let mut d_pos1 = Grid::<3>::zeros(s, s);
    let mut d_pos2 = Grid::<3>::zeros(s, s);
    multiview_uv_loss_grad(args, 0.0, &mut d_uv1, &mut d_pos1, &mut d_uv2, &mut d_pos2)
}

/// Sum of the two directional means. Gradients are accumulated into the
/// per-view sinks scaled by `scale`.
#[allow(clippy::too_many_arguments)]
pub fn multiview_uv_loss_grad(
    args: &MultiviewArgs,
    scale: f64,
    d_uv1: &mut Grid<2>,
    d_pos1: &mut Grid<3>,
    d_uv2: &mut Grid<2>,
    d_pos2: &mut Grid<3>,
) -> Result<f64> {
    if args.posmap1.resolution() != args.avg.resolution()
        || args.posmap2.resolution() != args.avg.resolution()
    {
        return Err(SurfmapError::Shape("position map resolutions disagree".into()));
    }
    let fwd = direction(
        args.uv1,
        args.posmap1,
        args.mask1,
        args.uv2,
        args.mask2,
        args.cam2,
        args,
        scale,
        d_uv1,
        d_pos1,
        d_uv2,
    )?;
    let bwd = direction(
        args.uv2,
        args.posmap2,
        args.mask2,
        args.uv1,
        args.mask1,
        args.cam1,
        args,
        scale,
        d_uv2,
        d_pos2,
        d_uv1,
    )?;
    if fwd.is_none() && bwd.is_none() {
        log::warn!("multiview_uv_loss: no transported pixel survived masking in either direction");
        return Ok(0.0);
    }
    Ok(fwd.unwrap_or(0.0) + bwd.unwrap_or(0.0))
}

/// One direction: source view a transported into target view b under the
/// target camera. Returns `None` when no pixel survives masking.
#[allow(clippy::too_many_arguments)]
fn direction(
    uv_a: &Grid<2>,
    posmap_a: &PositionMap,
    mask_a: &Mask,
    uv_b: &Grid<2>,
    mask_b: &Mask,
    cam_b: &CameraPose,
    args: &MultiviewArgs,
    scale: f64,
    d_uv_a: &mut Grid<2>,
    d_pos_a: &mut Grid<3>,
    d_uv_b: &mut Grid<2>,
) -> Result<Option<f64>> {
    if mask_a.count_foreground() == 0 {
        return Err(SurfmapError::EmptyMask);
    }
    let (w_img, h_img) = (uv_b.w() as f64, uv_b.h() as f64);
    // unnormalized gradients land in scratch, scaled once the count is known
    let mut s_uv_a = Grid::<2>::zeros(uv_a.h(), uv_a.w());
    let mut s_uv_b = Grid::<2>::zeros(uv_b.h(), uv_b.w());
    let mut s_pos_a = Grid::<3>::zeros(posmap_a.resolution(), posmap_a.resolution());
    let mut acc = 0.0;
    let mut kept = 0usize;

    for (row, col) in mask_a.foreground() {
        let a = uv_a.get(row, col);
        let (point, tap_d) = bilinear_tap(posmap_a.grid(), a[0], a[1]);
        let Some(pg) = cam_b.project_grad(&Vector3::new(point[0], point[1], point[2])) else {
            continue; // behind camera: no landing pixel exists
        };
        if args.transport_masking {
            // occlusion under the average-mesh depth test at the same uv
            let (avg_point, _) = bilinear_tap(args.avg.grid(), a[0], a[1]);
            let Some(pg_avg) =
                cam_b.project(&Vector3::new(avg_point[0], avg_point[1], avg_point[2]))
            else {
                continue;
            };
            if pg.depth - pg_avg.depth > args.occlusion_margin {
                continue;
            }
        }
        // continuous landing position in map coordinates of view b
        let gx = (pg.pixel.x - 0.5) / (w_img - 1.0);
        let gy = (pg.pixel.y - 0.5) / (h_img - 1.0);
        if args.transport_masking {
            if !(0.0..=1.0).contains(&gx) || !(0.0..=1.0).contains(&gy) {
                continue;
            }
        }
        let (b, tap_b, jac_b) = seam_aware_uv_tap(uv_b, gx, gy, a[0]);
        if args.transport_masking {
            // all four sampled pixels must be foreground in view b
            let r1 = (tap_b.row0 + 1).min(mask_b.h() - 1);
            let c1 = (tap_b.col0 + 1).min(mask_b.w() - 1);
            if !(mask_b.get(tap_b.row0, tap_b.col0)
                && mask_b.get(tap_b.row0, c1)
                && mask_b.get(r1, tap_b.col0)
                && mask_b.get(r1, c1))
            {
                continue;
            }
        }
        // u lives on a circle (equirect seam at u=0): compare via the
        // shorter arc so seam pixels with u near 0 and near 1 agree.
        let du_raw = a[0] - b[0];
        let diff = [du_raw - du_raw.round(), a[1] - b[1]];
        acc += diff[0] * diff[0] + diff[1] * diff[1];
        kept += 1;
        if scale != 0.0 {
            // direct route into view a's prediction
            let g_a = s_uv_a.get_mut(row, col);
            g_a[0] += 2.0 * diff[0];
            g_a[1] += 2.0 * diff[1];
            // sampled route into view b's map (unwrapping shifts corners by
            // constants, so the scatter weights are the plain bilinear ones)
            let d_b = [-2.0 * diff[0], -2.0 * diff[1]];
            tap_b.accumulate_grid_grad(&d_b, &mut s_uv_b);
            // transport route: landing position moves with posmap_a and uv_a
            let d_gx = d_b[0] * jac_b[0][0] + d_b[1] * jac_b[1][0];
            let d_gy = d_b[0] * jac_b[0][1] + d_b[1] * jac_b[1][1];
            let d_px = d_gx / (w_img - 1.0);
            let d_py = d_gy / (h_img - 1.0);
            let d_point = [
                d_px * pg.d_pixel[0][0] + d_py * pg.d_pixel[1][0],
                d_px * pg.d_pixel[0][1] + d_py * pg.d_pixel[1][1],
                d_px * pg.d_pixel[0][2] + d_py * pg.d_pixel[1][2],
            ];
            tap_d.accumulate_grid_grad(&d_point, &mut s_pos_a);
            let jac_d = tap_d.coord_jacobian(posmap_a.grid());
            let g_a = s_uv_a.get_mut(row, col);
            for c in 0..3 {
                g_a[0] += d_point[c] * jac_d[c][0];
                g_a[1] += d_point[c] * jac_d[c][1];
            }
        }
    }
    if kept == 0 {
        return Ok(None);
    }
    let coef = scale / kept as f64;
    if scale != 0.0 {
        for (dst, src) in d_uv_a.data_mut().iter_mut().zip(s_uv_a.data()) {
            dst[0] += coef * src[0];
            dst[1] += coef * src[1];
        }
        for (dst, src) in d_uv_b.data_mut().iter_mut().zip(s_uv_b.data()) {
            dst[0] += coef * src[0];
            dst[1] += coef * src[1];
        }
        for (dst, src) in d_pos_a.data_mut().iter_mut().zip(s_pos_a.data()) {
            for c in 0..3 {
                dst[c] += coef * src[c];
            }
        }
    }
    Ok(Some(acc / kept as f64))
}
