//! Loss tests: closed-form cases, independent brute-force oracles,
//! finite-difference gradient checks, masking invariance and the
//! breakdown-combination contract.

mod common;

use common::{rng, uniform};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use surfmap_core::geometry::{
    compose_posmap, generate_orbit_camera, sample_bilinear, CameraPose, Grid, Mask, PositionMap,
};
use surfmap_core::losses::{
    deformation_reg, deformation_reg_grad, multiview_uv_loss, multiview_uv_loss_grad,
    reprojection_loss, reprojection_loss_grad, visibility_loss, visibility_loss_grad,
    MultiviewArgs,
};

// ---------------------------------------------------------------- helpers

fn small_camera(index: usize, n: usize) -> CameraPose {
    generate_orbit_camera(index, n, 2.0, 15.0, (8, 8), 10.0).unwrap()
}

fn random_posmap(g: &mut ChaCha8Rng, s: usize) -> PositionMap {
    let grid = Grid::<3>::from_fn(s, s, |_, _| {
        [uniform(g, -0.3, 0.3), uniform(g, -0.3, 0.3), uniform(g, -0.3, 0.3)]
    });
    PositionMap::new(grid, vec![true; s * s]).unwrap()
}

/// Random uv map with values kept away from texel boundaries of an
/// `s`-resolution grid so finite differences stay well posed.
fn random_uv_map(g: &mut ChaCha8Rng, h: usize, w: usize, s: usize) -> Grid<2> {
    Grid::<2>::from_fn(h, w, |_, _| {
        let u = (g.gen_range(0..s - 1) as f64 + uniform(g, 0.2, 0.8)) / (s - 1) as f64;
        let v = (g.gen_range(0..s - 1) as f64 + uniform(g, 0.2, 0.8)) / (s - 1) as f64;
        [u, v]
    })
}

fn random_mask(g: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    loop {
        let data: Vec<bool> = (0..h * w).map(|_| g.gen_bool(0.6)).collect();
        if data.iter().any(|&b| b) {
            return Mask::new(h, w, data).unwrap();
        }
    }
}

// ------------------------------------------------------------ reprojection

/// Independent oracle: plain-array bilinear + matrix projection, written
/// without the library's geometry helpers.
fn oracle_reprojection(uv: &Grid<2>, posmap: &PositionMap, cam: &CameraPose, mask: &Mask) -> f64 {
    let s = posmap.resolution();
    let sample = |u: f64, v: f64| -> [f64; 3] {
        let x = (u.clamp(0.0, 1.0)) * (s - 1) as f64;
        let y = (v.clamp(0.0, 1.0)) * (s - 1) as f64;
        let x0 = (x.floor() as usize).min(s - 2);
        let y0 = (y.floor() as usize).min(s - 2);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let t00 = posmap.grid().get(y0, x0)[c];
            let t01 = posmap.grid().get(y0, x0 + 1)[c];
            let t10 = posmap.grid().get(y0 + 1, x0)[c];
            let t11 = posmap.grid().get(y0 + 1, x0 + 1)[c];
            out[c] = (t00 * (1.0 - fx) + t01 * fx) * (1.0 - fy) + (t10 * (1.0 - fx) + t11 * fx) * fy;
        }
        out
    };
    let w_img = cam.image_size.0 as f64;
    let h_img = cam.image_size.1 as f64;
    let mut acc = 0.0;
    let mut n = 0usize;
    for row in 0..mask.h() {
        for col in 0..mask.w() {
            if !mask.get(row, col) {
                continue;
            }
            n += 1;
            let t = uv.get(row, col);
            let p = sample(t[0], t[1]);
            let mut camp = [0.0; 3];
            for i in 0..3 {
                camp[i] = cam.rotation[(i, 0)] * p[0]
                    + cam.rotation[(i, 1)] * p[1]
                    + cam.rotation[(i, 2)] * p[2]
                    + cam.translation[i];
            }
            if camp[2] <= 1e-6 {
                acc += 1.0 + (h_img / w_img) * (h_img / w_img);
                continue;
            }
            let px = cam.focal.0 * camp[0] / camp[2] + cam.principal.0;
            let py = cam.focal.1 * camp[1] / camp[2] + cam.principal.1;
            let dx = (px - (col as f64 + 0.5)) / w_img;
            let dy = (py - (row as f64 + 0.5)) / w_img;
            acc += dx * dx + dy * dy;
        }
    }
    acc / n as f64
}

#[test]
fn reprojection_matches_brute_force_oracle() {
    let mut g = rng(100);
    for case in 0..10 {
        let posmap = random_posmap(&mut g, 8);
        let uv = random_uv_map(&mut g, 8, 8, 8);
        let mask = random_mask(&mut g, 8, 8);
        let cam = small_camera(case % 6, 6);
        let got = reprojection_loss(&uv, &posmap, &cam, &mask).unwrap();
        let expect = oracle_reprojection(&uv, &posmap, &cam, &mask);
        assert!((got - expect).abs() < 1e-12, "case {case}: {got} vs {expect}");
    }
}

#[test]
fn reprojection_translated_posmap_matches_oracle() {
    // uv == gt but posmap shifted by (0.01, 0, 0)
    let mut g = rng(101);
    let base = random_posmap(&mut g, 8);
    let shifted = PositionMap::new(
        base.grid().map(|t| [t[0] + 0.01, t[1], t[2]]),
        base.validity().to_vec(),
    )
    .unwrap();
    let uv = random_uv_map(&mut g, 8, 8, 8);
    let mask = random_mask(&mut g, 8, 8);
    let cam = small_camera(1, 6);
    let got = reprojection_loss(&uv, &shifted, &cam, &mask).unwrap();
    let expect = oracle_reprojection(&uv, &shifted, &cam, &mask);
    assert!((got - expect).abs() < 1e-12);
    assert!(got > 0.0);
}

#[test]
fn reprojection_single_exact_pixel_is_zero() {
    // constant posmap at the origin; camera principal point on a pixel center
    let grid = Grid::<3>::from_fn(8, 8, |_, _| [0.0, 0.0, 0.0]);
    let posmap = PositionMap::new(grid, vec![true; 64]).unwrap();
    let cam = CameraPose {
        rotation: Matrix3::identity(),
        translation: Vector3::new(0.0, 0.0, 2.0),
        focal: (10.0, 10.0),
        principal: (3.5, 2.5),
        image_size: (8, 8),
    };
    let mut mask = Mask::filled(8, 8, false);
    mask.set(2, 3, true); // center (3.5, 2.5)
    let uv = Grid::<2>::from_fn(8, 8, |_, _| [0.4, 0.6]);
    let loss = reprojection_loss(&uv, &posmap, &cam, &mask).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn reprojection_empty_mask_errors() {
    let mut g = rng(102);
    let posmap = random_posmap(&mut g, 8);
    let uv = random_uv_map(&mut g, 8, 8, 8);
    let mask = Mask::filled(8, 8, false);
    assert!(reprojection_loss(&uv, &posmap, &small_camera(0, 6), &mask).is_err());
}

#[test]
fn reprojection_behind_camera_pays_fixed_penalty() {
    // all texels 0.5 behind the camera center
    let cam = small_camera(0, 6);
    let behind = cam.center() + cam.forward() * -0.5;
    let grid = Grid::<3>::from_fn(8, 8, |_, _| [behind.x, behind.y, behind.z]);
    let posmap = PositionMap::new(grid, vec![true; 64]).unwrap();
    let uv = Grid::<2>::from_fn(8, 8, |_, _| [0.5, 0.5]);
    let mask = Mask::filled(8, 8, true);
    let loss = reprojection_loss(&uv, &posmap, &cam, &mask).unwrap();
    assert!((loss - 2.0).abs() < 1e-12, "penalty is the squared normalized diagonal");
}

// -------------------------------------------------------------- visibility

fn oracle_visibility(
    uv: &Grid<2>,
    posmap: &PositionMap,
    avg: &PositionMap,
    cam: &CameraPose,
    mask: &Mask,
) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for row in 0..mask.h() {
        for col in 0..mask.w() {
            if !mask.get(row, col) {
                continue;
            }
            n += 1;
            let t = uv.get(row, col);
            let p = sample_bilinear(posmap.grid(), t[0], t[1]);
            let q = sample_bilinear(avg.grid(), t[0], t[1]);
            let z = |v: [f64; 3]| {
                cam.rotation[(2, 0)] * v[0]
                    + cam.rotation[(2, 1)] * v[1]
                    + cam.rotation[(2, 2)] * v[2]
                    + cam.translation[2]
            };
            let (zp, zq) = (z(p), z(q));
            if zp > 1e-6 && zq > 1e-6 {
                acc += (zp - zq).max(0.0);
            }
        }
    }
    acc / n as f64
}

#[test]
fn visibility_zero_when_posmap_equals_avg() {
    let mut g = rng(110);
    let avg = random_posmap(&mut g, 8);
    let uv = random_uv_map(&mut g, 8, 8, 8);
    let mask = random_mask(&mut g, 8, 8);
    let loss = visibility_loss(&uv, &avg, &avg, &small_camera(2, 6), &mask).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn visibility_uniform_axial_shift() {
    let mut g = rng(111);
    let avg = random_posmap(&mut g, 8);
    let cam = small_camera(3, 6);
    let axis = cam.forward();
    let shifted = PositionMap::new(
        avg.grid().map(|t| [t[0] + 0.1 * axis.x, t[1] + 0.1 * axis.y, t[2] + 0.1 * axis.z]),
        avg.validity().to_vec(),
    )
    .unwrap();
    let uv = random_uv_map(&mut g, 8, 8, 8);
    let mask = random_mask(&mut g, 8, 8);
    let loss = visibility_loss(&uv, &shifted, &avg, &cam, &mask).unwrap();
    assert!((loss - 0.1).abs() < 1e-6, "uniform depth offset: {loss}");
}

#[test]
fn visibility_matches_hinge_sum_oracle() {
    let mut g = rng(112);
    for case in 0..10 {
        let avg = random_posmap(&mut g, 8);
        let residual = Grid::<3>::from_fn(8, 8, |_, _| {
            [uniform(&mut g, -0.1, 0.1), uniform(&mut g, -0.1, 0.1), uniform(&mut g, -0.1, 0.1)]
        });
        let posmap = compose_posmap(&residual, &avg).unwrap();
        let uv = random_uv_map(&mut g, 8, 8, 8);
        let mask = random_mask(&mut g, 8, 8);
        let cam = small_camera(case % 6, 6);
        let got = visibility_loss(&uv, &posmap, &avg, &cam, &mask).unwrap();
        let expect = oracle_visibility(&uv, &posmap, &avg, &cam, &mask);
        assert!((got - expect).abs() < 1e-12, "case {case}");
    }
}

// -------------------------------------------------------------- deformation

#[test]
fn deformation_zero_residual() {
    let residual = Grid::<3>::zeros(8, 8);
    assert_eq!(deformation_reg(&residual, &vec![true; 64]).unwrap(), 0.0);
}

#[test]
fn deformation_constant_residual() {
    let c = 0.07;
    let residual = Grid::<3>::from_fn(8, 8, |_, _| [c, 0.0, 0.0]);
    let loss = deformation_reg(&residual, &vec![true; 64]).unwrap();
    assert!((loss - c * c).abs() < 1e-15, "smoothness 0 plus L2 c^2");
}

#[test]
fn deformation_checkerboard_closed_form() {
    let c = 0.05;
    let residual = Grid::<3>::from_fn(8, 8, |row, col| {
        let sign = if (row + col) % 2 == 0 { 1.0 } else { -1.0 };
        [sign * c, 0.0, 0.0]
    });
    let validity = vec![true; 64];
    let loss = deformation_reg(&residual, &validity).unwrap();
    // every adjacent pair differs by 2c -> smoothness 4c^2; L2 = c^2
    let expect = 4.0 * c * c + c * c;
    assert!((loss - expect).abs() < 1e-15, "{loss} vs {expect}");

    // independent neighborhood-sum loop oracle
    let mut smooth = 0.0;
    let mut pairs = 0usize;
    for row in 0..8 {
        for col in 0..8 {
            let a = residual.get(row, col);
            if col + 1 < 8 {
                let b = residual.get(row, col + 1);
                smooth += (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>();
                pairs += 1;
            }
            if row + 1 < 8 {
                let b = residual.get(row + 1, col);
                smooth += (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>();
                pairs += 1;
            }
        }
    }
    let mut l2 = 0.0;
    for t in residual.data() {
        l2 += t[0] * t[0] + t[1] * t[1] + t[2] * t[2];
    }
    let oracle = smooth / pairs as f64 + l2 / 64.0;
    assert!((loss - oracle).abs() < 1e-15);
}

#[test]
fn deformation_respects_validity() {
    let mut g = rng(120);
    let residual = Grid::<3>::from_fn(8, 8, |_, _| {
        [uniform(&mut g, -0.2, 0.2), uniform(&mut g, -0.2, 0.2), uniform(&mut g, -0.2, 0.2)]
    });
    // invalidate the two pole rows, as the chart does
    let mut validity = vec![true; 64];
    for col in 0..8 {
        validity[col] = false;
        validity[56 + col] = false;
    }
    let loss = deformation_reg(&residual, &validity).unwrap();
    // oracle over valid texels only
    let valid = |row: usize, col: usize| validity[row * 8 + col];
    let mut smooth = 0.0;
    let mut pairs = 0usize;
    let mut l2 = 0.0;
    let mut n_valid = 0usize;
    for row in 0..8 {
        for col in 0..8 {
            if !valid(row, col) {
                continue;
            }
            n_valid += 1;
            let a = residual.get(row, col);
            l2 += a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
            if col + 1 < 8 && valid(row, col + 1) {
                let b = residual.get(row, col + 1);
                smooth += (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>();
                pairs += 1;
            }
            if row + 1 < 8 && valid(row + 1, col) {
                let b = residual.get(row + 1, col);
                smooth += (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>();
                pairs += 1;
            }
        }
    }
    let oracle = smooth / pairs as f64 + l2 / n_valid as f64;
    assert!((loss - oracle).abs() < 1e-15);
}

// --------------------------------------------------------------- multiview

/// Independent transport-and-compare oracle implementing the same masking
/// policy with its own bilinear and projection arithmetic. Also reports
/// how many source pixels landed inside `region` (for the perturbation
/// test).
#[allow(clippy::too_many_arguments)]
fn oracle_multiview_direction(
    uv_a: &Grid<2>,
    posmap_a: &PositionMap,
    mask_a: &Mask,
    uv_b: &Grid<2>,
    mask_b: &Mask,
    cam_b: &CameraPose,
    avg: &PositionMap,
    occlusion_margin: f64,
    region: Option<(usize, usize, usize, usize)>,
) -> (f64, usize, usize) {
    let bil2 = |grid: &Grid<2>, x: f64, y: f64| -> ([f64; 2], (usize, usize, f64, f64)) {
        let w = grid.w();
        let h = grid.h();
        let xx = x.clamp(0.0, 1.0) * (w - 1) as f64;
        let yy = y.clamp(0.0, 1.0) * (h - 1) as f64;
        let x0 = (xx.floor() as usize).min(w - 2);
        let y0 = (yy.floor() as usize).min(h - 2);
        let (fx, fy) = (xx - x0 as f64, yy - y0 as f64);
        let mut out = [0.0; 2];
        for c in 0..2 {
            let t00 = grid.get(y0, x0)[c];
            let t01 = grid.get(y0, x0 + 1)[c];
            let t10 = grid.get(y0 + 1, x0)[c];
            let t11 = grid.get(y0 + 1, x0 + 1)[c];
            out[c] = (t00 * (1.0 - fx) + t01 * fx) * (1.0 - fy) + (t10 * (1.0 - fx) + t11 * fx) * fy;
        }
        (out, (y0, x0, fx, fy))
    };
    let bil3 = |pm: &PositionMap, u: f64, v: f64| -> [f64; 3] {
        let s = pm.resolution();
        let xx = u.clamp(0.0, 1.0) * (s - 1) as f64;
        let yy = v.clamp(0.0, 1.0) * (s - 1) as f64;
        let x0 = (xx.floor() as usize).min(s - 2);
        let y0 = (yy.floor() as usize).min(s - 2);
        let (fx, fy) = (xx - x0 as f64, yy - y0 as f64);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let t00 = pm.grid().get(y0, x0)[c];
            let t01 = pm.grid().get(y0, x0 + 1)[c];
            let t10 = pm.grid().get(y0 + 1, x0)[c];
            let t11 = pm.grid().get(y0 + 1, x0 + 1)[c];
            out[c] = (t00 * (1.0 - fx) + t01 * fx) * (1.0 - fy) + (t10 * (1.0 - fx) + t11 * fx) * fy;
        }
        out
    };
    let project = |p: [f64; 3]| -> Option<([f64; 2], f64)> {
        let mut c = [0.0; 3];
        for i in 0..3 {
            c[i] = cam_b.rotation[(i, 0)] * p[0]
                + cam_b.rotation[(i, 1)] * p[1]
                + cam_b.rotation[(i, 2)] * p[2]
                + cam_b.translation[i];
        }
        if c[2] <= 1e-6 {
            return None;
        }
        Some((
            [
                cam_b.focal.0 * c[0] / c[2] + cam_b.principal.0,
                cam_b.focal.1 * c[1] / c[2] + cam_b.principal.1,
            ],
            c[2],
        ))
    };
    let (w_img, h_img) = (uv_b.w() as f64, uv_b.h() as f64);
    let mut acc = 0.0;
    let mut kept = 0usize;
    let mut in_region = 0usize;
    for row in 0..mask_a.h() {
        for col in 0..mask_a.w() {
            if !mask_a.get(row, col) {
                continue;
            }
            let a = uv_a.get(row, col);
            let p3 = bil3(posmap_a, a[0], a[1]);
            let Some((pix, depth)) = project(p3) else { continue };
            let q3 = bil3(avg, a[0], a[1]);
            let Some((_, depth_avg)) = project(q3) else { continue };
            if depth - depth_avg > occlusion_margin {
                continue;
            }
            let gx = (pix[0] - 0.5) / (w_img - 1.0);
            let gy = (pix[1] - 0.5) / (h_img - 1.0);
            if !(0.0..=1.0).contains(&gx) || !(0.0..=1.0).contains(&gy) {
                continue;
            }
            let (b, (y0, x0, _, _)) = bil2(uv_b, gx, gy);
            let corners_fg = mask_b.get(y0, x0)
                && mask_b.get(y0, (x0 + 1).min(mask_b.w() - 1))
                && mask_b.get((y0 + 1).min(mask_b.h() - 1), x0)
                && mask_b.get((y0 + 1).min(mask_b.h() - 1), (x0 + 1).min(mask_b.w() - 1));
            if !corners_fg {
                continue;
            }
            kept += 1;
            if let Some((r0, c0, r1, c1)) = region {
                if y0 >= r0 && y0 < r1 && x0 >= c0 && x0 < c1 {
                    in_region += 1;
                }
            }
            let du = a[0] - b[0];
            let d = [du - du.round(), a[1] - b[1]];
            acc += d[0] * d[0] + d[1] * d[1];
        }
    }
    (if kept > 0 { acc / kept as f64 } else { 0.0 }, kept, in_region)
}

struct GtPair {
    uv1: Grid<2>,
    uv2: Grid<2>,
    res1: Grid<3>,
    res2: Grid<3>,
    mask1: Mask,
    mask2: Mask,
    cam1: CameraPose,
    cam2: CameraPose,
    avg: PositionMap,
}

/// Adjacent orbit views of one generated instance with oracle-perfect
/// outputs (uv = gt uv, residual = gt posmap - avg).
fn gt_pair() -> GtPair {
    use surfmap_core::synthgen::{make_instance, rasterize, InstanceSpec, SynthConfig};
    let config = SynthConfig { n_instances: 2, n_views: 24, ..SynthConfig::default() };
    let spec = config.instance_spec(0);
    let (mesh, gt_posmap) =
        make_instance(&spec, config.sphere_resolution, config.posmap_resolution).unwrap();
    let sphere = InstanceSpec { amplitude: 0.0, ..spec.clone() };
    let (_, avg) = make_instance(&sphere, 16, config.posmap_resolution).unwrap();
    let cam1 = config.camera(0).unwrap();
    let cam2 = config.camera(1).unwrap();
    let out1 = rasterize(&mesh, &cam1, &cam1.forward()).unwrap();
    let out2 = rasterize(&mesh, &cam2, &cam2.forward()).unwrap();
    let mut res = Grid::<3>::zeros(64, 64);
    for (r, (a, b)) in res.data_mut().iter_mut().zip(gt_posmap.grid().data().iter().zip(avg.grid().data())) {
        for c in 0..3 {
            r[c] = a[c] - b[c];
        }
    }
    GtPair {
        uv1: out1.gt_uv.clone(),
        uv2: out2.gt_uv.clone(),
        res1: res.clone(),
        res2: res,
        mask1: out1.mask.clone(),
        mask2: out2.mask.clone(),
        cam1,
        cam2,
        avg,
    }
}

fn pair_args<'a>(p: &'a GtPair, pm1: &'a PositionMap, pm2: &'a PositionMap) -> MultiviewArgs<'a> {
    MultiviewArgs {
        uv1: &p.uv1,
        posmap1: pm1,
        cam1: &p.cam1,
        mask1: &p.mask1,
        uv2: &p.uv2,
        posmap2: pm2,
        cam2: &p.cam2,
        mask2: &p.mask2,
        avg: &p.avg,
        transport_masking: true,
        occlusion_margin: 0.05,
    }
}

#[test]
fn multiview_ground_truth_is_consistent() {
    let p = gt_pair();
    let pm1 = compose_posmap(&p.res1, &p.avg).unwrap();
    let pm2 = compose_posmap(&p.res2, &p.avg).unwrap();
    let loss = multiview_uv_loss(&pair_args(&p, &pm1, &pm2)).unwrap();
    let bound = (2.0 / 64.0f64).powi(2);
    assert!(loss < bound, "gt multiview loss {loss} >= {bound}");
}

#[test]
fn multiview_same_view_twice_is_self_consistency() {
    let p = gt_pair();
    let pm1 = compose_posmap(&p.res1, &p.avg).unwrap();
    let args = MultiviewArgs {
        uv1: &p.uv1,
        posmap1: &pm1,
        cam1: &p.cam1,
        mask1: &p.mask1,
        uv2: &p.uv1,
        posmap2: &pm1,
        cam2: &p.cam1,
        mask2: &p.mask1,
        avg: &p.avg,
        transport_masking: true,
        occlusion_margin: 0.05,
    };
    let loss = multiview_uv_loss(&args).unwrap();
    assert!(loss < 1e-6, "same view twice: {loss}");
}

#[test]
fn multiview_matches_transport_oracle() {
    let p = gt_pair();
    let pm1 = compose_posmap(&p.res1, &p.avg).unwrap();
    let pm2 = compose_posmap(&p.res2, &p.avg).unwrap();
    let got = multiview_uv_loss(&pair_args(&p, &pm1, &pm2)).unwrap();
    let (fwd, k1, _) = oracle_multiview_direction(
        &p.uv1, &pm1, &p.mask1, &p.uv2, &p.mask2, &p.cam2, &p.avg, 0.05, None,
    );
    let (bwd, k2, _) = oracle_multiview_direction(
        &p.uv2, &pm2, &p.mask2, &p.uv1, &p.mask1, &p.cam1, &p.avg, 0.05, None,
    );
    assert!(k1 > 100 && k2 > 100);
    assert!((got - (fwd + bwd)).abs() < 1e-12, "{got} vs {}", fwd + bwd);
}

#[test]
fn multiview_perturbation_scales_with_region_fraction() {
    let p = gt_pair();
    let pm1 = compose_posmap(&p.res1, &p.avg).unwrap();
    let pm2 = compose_posmap(&p.res2, &p.avg).unwrap();
    let base = multiview_uv_loss(&pair_args(&p, &pm1, &pm2)).unwrap();
    // perturb view 2's uv inside a central region by +delta in v
    let delta = 0.05;
    let region = (24usize, 24usize, 40usize, 40usize);
    let mut uv2p = p.uv2.clone();
    for row in region.0..region.2 {
        for col in region.1..region.3 {
            uv2p.get_mut(row, col)[1] += delta;
        }
    }
    let args = MultiviewArgs { uv2: &uv2p, ..pair_args(&p, &pm1, &pm2) };
    let got = multiview_uv_loss(&args).unwrap();
    // oracle recomputation with the perturbed map agrees exactly
    let (fwd, k1, hits) = oracle_multiview_direction(
        &p.uv1, &pm1, &p.mask1, &uv2p, &p.mask2, &p.cam2, &p.avg, 0.05, Some(region),
    );
    let (bwd, k2, _) = oracle_multiview_direction(
        &uv2p, &pm2, &p.mask2, &p.uv1, &p.mask1, &p.cam1, &p.avg, 0.05, None,
    );
    assert!((got - (fwd + bwd)).abs() < 1e-12);
    // and the 1->2 direction grew by about delta^2 * (fraction landing in region)
    let expect_fwd_increase = delta * delta * hits as f64 / k1 as f64;
    assert!(hits > 50, "need a meaningful transported fraction, got {hits}");
    let fwd_increase = fwd
        - oracle_multiview_direction(
            &p.uv1, &pm1, &p.mask1, &p.uv2, &p.mask2, &p.cam2, &p.avg, 0.05, None,
        )
        .0;
    assert!(
        (fwd_increase - expect_fwd_increase).abs() < 0.35 * expect_fwd_increase,
        "increase {fwd_increase} vs delta^2 fraction {expect_fwd_increase}"
    );
    assert!(got > base);
    let _ = k2;
}

#[test]
fn multiview_is_symmetric_under_swap() {
    let p = gt_pair();
    let pm1 = compose_posmap(&p.res1, &p.avg).unwrap();
    let pm2 = compose_posmap(&p.res2, &p.avg).unwrap();
    let fwd = multiview_uv_loss(&pair_args(&p, &pm1, &pm2)).unwrap();
    let swapped = MultiviewArgs {
        uv1: &p.uv2,
        posmap1: &pm2,
        cam1: &p.cam2,
        mask1: &p.mask2,
        uv2: &p.uv1,
        posmap2: &pm1,
        cam2: &p.cam1,
        mask2: &p.mask1,
        avg: &p.avg,
        transport_masking: true,
        occlusion_margin: 0.05,
    };
    let bwd = multiview_uv_loss(&swapped).unwrap();
    assert!((fwd - bwd).abs() < 1e-12);
}

#[test]
fn multiview_empty_effective_mask_returns_zero() {
    // every transported point lands far outside the other image
    let cam = CameraPose {
        rotation: Matrix3::identity(),
        translation: Vector3::new(0.0, 0.0, 2.0),
        focal: (100.0, 100.0),
        principal: (4.0, 4.0),
        image_size: (8, 8),
    };
    let point = [1.5, 0.0, 0.0]; // projects to x ~ 79, far off an 8px image
    let grid = Grid::<3>::from_fn(8, 8, |_, _| point);
    let pm = PositionMap::new(grid, vec![true; 64]).unwrap();
    let uv = Grid::<2>::from_fn(8, 8, |_, _| [0.5, 0.5]);
    let mask = Mask::filled(8, 8, true);
    let args = MultiviewArgs {
        uv1: &uv,
        posmap1: &pm,
        cam1: &cam,
        mask1: &mask,
        uv2: &uv,
        posmap2: &pm,
        cam2: &cam,
        mask2: &mask,
        avg: &pm,
        transport_masking: true,
        occlusion_margin: 0.05,
    };
    assert_eq!(multiview_uv_loss(&args).unwrap(), 0.0);
}

// ---------------------------------------------------------- gradient suite

#[test]
fn reprojection_gradients_match_finite_differences() {
    let mut g = rng(130);
    for case in 0..20 {
        let posmap = random_posmap(&mut g, 8);
        let uv = random_uv_map(&mut g, 8, 8, 8);
        let mask = random_mask(&mut g, 8, 8);
        let cam = small_camera(case % 6, 6);
        let mut d_uv = Grid::<2>::zeros(8, 8);
        let mut d_pos = Grid::<3>::zeros(8, 8);
        reprojection_loss_grad(&uv, &posmap, &cam, &mask, 1.0, &mut d_uv, &mut d_pos).unwrap();
        let h = 1e-6;
        // uv gradients at three foreground pixels
        let fg: Vec<(usize, usize)> = mask.foreground().collect();
        for &(row, col) in fg.iter().take(3) {
            for k in 0..2 {
                let eval = |x: f64| {
                    let mut u = uv.clone();
                    u.get_mut(row, col)[k] = x;
                    reprojection_loss(&u, &posmap, &cam, &mask).unwrap()
                };
                let x0 = uv.get(row, col)[k];
                let numeric = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
                let analytic = d_uv.get(row, col)[k];
                assert!(
                    common::rel_err(analytic, numeric) < 1e-3,
                    "case {case} uv ({row},{col})[{k}]: {analytic} vs {numeric}"
                );
            }
        }
        // posmap gradients at three texels
        for &(row, col) in &[(2usize, 3usize), (4, 4), (6, 1)] {
            for c in 0..3 {
                let eval = |x: f64| {
                    let mut pm = posmap.clone();
                    pm.grid_mut().get_mut(row, col)[c] = x;
                    reprojection_loss(&uv, &pm, &cam, &mask).unwrap()
                };
                let x0 = posmap.grid().get(row, col)[c];
                let numeric = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
                let analytic = d_pos.get(row, col)[c];
                if analytic == 0.0 && numeric.abs() < 1e-9 {
                    continue; // texel untouched by any sample
                }
                assert!(
                    common::rel_err(analytic, numeric) < 1e-3,
                    "case {case} posmap ({row},{col})[{c}]: {analytic} vs {numeric}"
                );
            }
        }
    }
}

#[test]
fn visibility_gradients_match_finite_differences() {
    let mut g = rng(131);
    for case in 0..20 {
        let avg = random_posmap(&mut g, 8);
        let residual = Grid::<3>::from_fn(8, 8, |_, _| {
            [uniform(&mut g, -0.08, 0.08), uniform(&mut g, -0.08, 0.08), uniform(&mut g, -0.08, 0.08)]
        });
        let posmap = compose_posmap(&residual, &avg).unwrap();
        let uv = random_uv_map(&mut g, 8, 8, 8);
        let mask = random_mask(&mut g, 8, 8);
        let cam = small_camera(case % 6, 6);
        let mut d_uv = Grid::<2>::zeros(8, 8);
        let mut d_pos = Grid::<3>::zeros(8, 8);
        visibility_loss_grad(&uv, &posmap, &avg, &cam, &mask, 1.0, &mut d_uv, &mut d_pos).unwrap();
        let h = 1e-6;
        let fg: Vec<(usize, usize)> = mask.foreground().collect();
        for &(row, col) in fg.iter().take(3) {
            for k in 0..2 {
                let eval = |x: f64| {
                    let mut u = uv.clone();
                    u.get_mut(row, col)[k] = x;
                    visibility_loss(&u, &posmap, &avg, &cam, &mask).unwrap()
                };
                let x0 = uv.get(row, col)[k];
                let numeric = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
                let analytic = d_uv.get(row, col)[k];
                if analytic == 0.0 && numeric.abs() < 1e-9 {
                    continue;
                }
                assert!(
                    common::rel_err(analytic, numeric) < 1e-3,
                    "case {case} uv ({row},{col})[{k}]: {analytic} vs {numeric}"
                );
            }
        }
        for &(row, col) in &[(1usize, 1usize), (3, 5), (6, 6)] {
            for c in 0..3 {
                let eval = |x: f64| {
                    let mut pm = posmap.clone();
                    pm.grid_mut().get_mut(row, col)[c] = x;
                    visibility_loss(&uv, &pm, &avg, &cam, &mask).unwrap()
                };
                let x0 = posmap.grid().get(row, col)[c];
                let numeric = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
                let analytic = d_pos.get(row, col)[c];
                if analytic == 0.0 && numeric.abs() < 1e-9 {
                    continue;
                }
                assert!(
                    common::rel_err(analytic, numeric) < 1e-3,
                    "case {case} posmap ({row},{col})[{c}]: {analytic} vs {numeric}"
                );
            }
        }
    }
}

#[test]
fn deformation_gradients_match_finite_differences() {
    let mut g = rng(132);
    for case in 0..20 {
        let residual = Grid::<3>::from_fn(8, 8, |_, _| {
            [uniform(&mut g, -0.2, 0.2), uniform(&mut g, -0.2, 0.2), uniform(&mut g, -0.2, 0.2)]
        });
        let validity: Vec<bool> = (0..64).map(|_| g.gen_bool(0.9)).collect();
        let mut d_res = Grid::<3>::zeros(8, 8);
        deformation_reg_grad(&residual, &validity, 1.0, &mut d_res).unwrap();
        let h = 1e-6;
        for &(row, col) in &[(0usize, 0usize), (3, 4), (7, 7)] {
            for c in 0..3 {
                let eval = |x: f64| {
                    let mut r = residual.clone();
                    r.get_mut(row, col)[c] = x;
                    deformation_reg(&r, &validity).unwrap()
                };
                let x0 = residual.get(row, col)[c];
                let numeric = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
                let analytic = d_res.get(row, col)[c];
                if analytic == 0.0 && numeric.abs() < 1e-9 {
                    continue;
                }
                assert!(
                    common::rel_err(analytic, numeric) < 1e-3,
                    "case {case} residual ({row},{col})[{c}]: {analytic} vs {numeric}"
                );
            }
        }
    }
}

#[test]
fn multiview_gradients_match_finite_differences() {
    let mut g = rng(133);
    for case in 0..20 {
        let avg = random_posmap(&mut g, 8);
        let res1 = Grid::<3>::from_fn(8, 8, |_, _| {
            [uniform(&mut g, -0.05, 0.05), uniform(&mut g, -0.05, 0.05), uniform(&mut g, -0.05, 0.05)]
        });
        let res2 = Grid::<3>::from_fn(8, 8, |_, _| {
            [uniform(&mut g, -0.05, 0.05), uniform(&mut g, -0.05, 0.05), uniform(&mut g, -0.05, 0.05)]
        });
        let pm1 = compose_posmap(&res1, &avg).unwrap();
        let pm2 = compose_posmap(&res2, &avg).unwrap();
        let uv1 = random_uv_map(&mut g, 8, 8, 8);
        let uv2 = random_uv_map(&mut g, 8, 8, 8);
        let mask = Mask::filled(8, 8, true);
        let cam1 = small_camera(case % 6, 6);
        let cam2 = small_camera((case + 1) % 6, 6);
        // unmasked variant keeps the objective smooth for FD (no keep-set
        // flips when inputs move)
        let args = MultiviewArgs {
            uv1: &uv1,
            posmap1: &pm1,
            cam1: &cam1,
            mask1: &mask,
            uv2: &uv2,
            posmap2: &pm2,
            cam2: &cam2,
            mask2: &mask,
            avg: &avg,
            transport_masking: false,
            occlusion_margin: 0.05,
        };
        let mut d_uv1 = Grid::<2>::zeros(8, 8);
        let mut d_uv2 = Grid::<2>::zeros(8, 8);
        let mut d_pos1 = Grid::<3>::zeros(8, 8);
        let mut d_pos2 = Grid::<3>::zeros(8, 8);
        multiview_uv_loss_grad(&args, 1.0, &mut d_uv1, &mut d_pos1, &mut d_uv2, &mut d_pos2)
            .unwrap();
        let h = 1e-6;
        let eval = |uv1: &Grid<2>, uv2: &Grid<2>, r1: &Grid<3>, r2: &Grid<3>| {
            let pm1 = compose_posmap(r1, &avg).unwrap();
            let pm2 = compose_posmap(r2, &avg).unwrap();
            let args = MultiviewArgs {
                uv1,
                posmap1: &pm1,
                cam1: &cam1,
                mask1: &mask,
                uv2,
                posmap2: &pm2,
                cam2: &cam2,
                mask2: &mask,
                avg: &avg,
                transport_masking: false,
                occlusion_margin: 0.05,
            };
            multiview_uv_loss(&args).unwrap()
        };
        for &(row, col) in &[(2usize, 2usize), (5, 6)] {
            for k in 0..2 {
                let x0 = uv1.get(row, col)[k];
                let mut up = uv1.clone();
                up.get_mut(row, col)[k] = x0 + h;
                let mut down = uv1.clone();
                down.get_mut(row, col)[k] = x0 - h;
                let numeric =
                    (eval(&up, &uv2, &res1, &res2) - eval(&down, &uv2, &res1, &res2)) / (2.0 * h);
                let analytic = d_uv1.get(row, col)[k];
                if analytic == 0.0 && numeric.abs() < 1e-9 {
                    continue;
                }
                assert!(
                    common::rel_err(analytic, numeric) < 1e-3,
                    "case {case} uv1 ({row},{col})[{k}]: {analytic} vs {numeric}"
                );
            }
        }
        for &(row, col) in &[(3usize, 3usize), (6, 2)] {
            for c in 0..3 {
                let x0 = res1.get(row, col)[c];
                let mut up = res1.clone();
                up.get_mut(row, col)[c] = x0 + h;
                let mut down = res1.clone();
                down.get_mut(row, col)[c] = x0 - h;
                let numeric =
                    (eval(&uv1, &uv2, &up, &res2) - eval(&uv1, &uv2, &down, &res2)) / (2.0 * h);
                let analytic = d_pos1.get(row, col)[c];
                if analytic == 0.0 && numeric.abs() < 1e-9 {
                    continue;
                }
                assert!(
                    common::rel_err(analytic, numeric) < 1e-3,
                    "case {case} res1 ({row},{col})[{c}]: {analytic} vs {numeric}"
                );
            }
        }
        // gradients into the sampled-side uv map
        let (mut best, mut best_val) = ((0usize, 0usize, 0usize), 0.0f64);
        for row in 0..8 {
            for col in 0..8 {
                for k in 0..2 {
                    let v = d_uv2.get(row, col)[k].abs();
                    if v > best_val {
                        best_val = v;
                        best = (row, col, k);
                    }
                }
            }
        }
        if best_val > 0.0 {
            let (row, col, k) = best;
            let x0 = uv2.get(row, col)[k];
            let mut up = uv2.clone();
            up.get_mut(row, col)[k] = x0 + h;
            let mut down = uv2.clone();
            down.get_mut(row, col)[k] = x0 - h;
            let numeric =
                (eval(&uv1, &up, &res1, &res2) - eval(&uv1, &down, &res1, &res2)) / (2.0 * h);
            let analytic = d_uv2.get(row, col)[k];
            assert!(
                common::rel_err(analytic, numeric) < 1e-3,
                "case {case} uv2 ({row},{col})[{k}]: {analytic} vs {numeric}"
            );
        }
    }
}

// ------------------------------------------------------------ total + misc

mod total {
    use super::*;
    use surfmap_core::losses::{
        total_loss, total_loss_grad, LossBreakdown, LossGradSink, LossWeights, TotalLossOptions,
        ViewBatchItem,
    };
    use surfmap_core::model::ModelOutput;

    fn gt_outputs(p: &GtPair) -> (ModelOutput, ModelOutput) {
        let seg = |mask: &Mask| {
            Grid::<1>::from_fn(mask.h(), mask.w(), |row, col| {
                [if mask.get(row, col) { 10.0 } else { -10.0 }]
            })
        };
        (
            ModelOutput { uv: p.uv1.clone(), seg_logits: seg(&p.mask1), residual: p.res1.clone() },
            ModelOutput { uv: p.uv2.clone(), seg_logits: seg(&p.mask2), residual: p.res2.clone() },
        )
    }

    fn items<'a>(
        p: &'a GtPair,
        o1: &'a ModelOutput,
        o2: &'a ModelOutput,
    ) -> Vec<ViewBatchItem<'a>> {
        vec![
            ViewBatchItem { output: o1, camera: &p.cam1, mask: &p.mask1, gt_uv: None, gt_posmap: None },
            ViewBatchItem { output: o2, camera: &p.cam2, mask: &p.mask2, gt_uv: None, gt_posmap: None },
        ]
    }

    #[test]
    fn all_ground_truth_total_is_tiny() {
        let p = gt_pair();
        let (o1, o2) = gt_outputs(&p);
        let weights = LossWeights::default();
        let opts = TotalLossOptions::default();
        let breakdown =
            total_loss(&items(&p, &o1, &o2), &[(0, 1)], &p.avg, &weights, &opts).unwrap();
        assert!(breakdown.total < 1e-3, "gt total {}", breakdown.total);
        assert!(breakdown.is_finite());
    }

    #[test]
    fn weight_selection_isolates_terms() {
        let p = gt_pair();
        let (o1, o2) = gt_outputs(&p);
        let weights = LossWeights { repr: 1.0, vis: 0.0, def: 0.0, uv: 0.0, seg: 0.0 };
        let opts = TotalLossOptions::default();
        let b = total_loss(&items(&p, &o1, &o2), &[(0, 1)], &p.avg, &weights, &opts).unwrap();
        assert_eq!(b.total, b.repr);
    }

    #[test]
    fn breakdown_recombines() {
        let p = gt_pair();
        let (mut o1, o2) = gt_outputs(&p);
        // push outputs off the truth for a non-trivial breakdown
        for t in o1.uv.data_mut() {
            t[0] = (t[0] + 0.13).min(1.0);
        }
        for t in o1.residual.data_mut() {
            t[1] += 0.05;
        }
        let weights = LossWeights { repr: 0.7, vis: 1.3, def: 0.025, uv: 0.9, seg: 0.4 };
        let opts = TotalLossOptions::default();
        let b = total_loss(&items(&p, &o1, &o2), &[(0, 1)], &p.avg, &weights, &opts).unwrap();
        let rel = (b.total - b.recombined()).abs() / b.total.abs().max(1e-12);
        assert!(rel < 1e-6, "recombination off by {rel}");
        assert!(b.repr > 0.0 && b.uv > 0.0 && b.def > 0.0 && b.seg > 0.0);
    }

    #[test]
    fn total_is_linear_in_each_weight() {
        let p = gt_pair();
        let (mut o1, o2) = gt_outputs(&p);
        for t in o1.uv.data_mut() {
            t[1] = (t[1] + 0.07).min(1.0);
        }
        let opts = TotalLossOptions::default();
        let base = LossWeights { repr: 1.0, vis: 1.0, def: 0.025, uv: 1.0, seg: 1.0 };
        let b0 = total_loss(&items(&p, &o1, &o2), &[(0, 1)], &p.avg, &base, &opts).unwrap();
        let doubled = LossWeights { vis: 2.0, ..base };
        let b1 = total_loss(&items(&p, &o1, &o2), &[(0, 1)], &p.avg, &doubled, &opts).unwrap();
        let diff = b1.total - b0.total;
        assert!((diff - b0.vis).abs() < 1e-12, "doubling vis weight adds one vis term");
        assert_eq!(b0.repr, b1.repr);
    }

    #[test]
    fn single_view_batches_have_zero_uv_term() {
        let p = gt_pair();
        let (o1, o2) = gt_outputs(&p);
        let weights = LossWeights::default();
        let opts = TotalLossOptions::default();
        let b = total_loss(&items(&p, &o1, &o2), &[], &p.avg, &weights, &opts).unwrap();
        assert_eq!(b.uv, 0.0);
    }

    #[test]
    fn background_predictions_do_not_change_losses() {
        let p = gt_pair();
        let (o1, o2) = gt_outputs(&p);
        let weights = LossWeights { seg: 0.0, ..LossWeights::default() };
        let opts = TotalLossOptions { seg_enabled: false, ..TotalLossOptions::default() };
        let items_clean = items(&p, &o1, &o2);
        let before = total_loss(&items_clean, &[(0, 1)], &p.avg, &weights, &opts).unwrap();
        drop(items_clean);
        let mut o1b = o1.clone();
        for row in 0..64 {
            for col in 0..64 {
                if !p.mask1.get(row, col) {
                    *o1b.uv.get_mut(row, col) = [0.123, 0.987];
                }
            }
        }
        let after = total_loss(&items(&p, &o1b, &o2), &[(0, 1)], &p.avg, &weights, &opts).unwrap();
        assert_eq!(before.total, after.total);
    }

    #[test]
    fn supervised_mode_uses_dense_labels() {
        use surfmap_core::synthgen::{make_instance, rasterize, InstanceSpec, SynthConfig};
        let config = SynthConfig::default();
        let spec = config.instance_spec(0);
        let (mesh, gt_posmap) =
            make_instance(&spec, 32, config.posmap_resolution).unwrap();
        let sphere = InstanceSpec { amplitude: 0.0, ..spec };
        let (_, avg) = make_instance(&sphere, 16, config.posmap_resolution).unwrap();
        let cam = config.camera(0).unwrap();
        let out = rasterize(&mesh, &cam, &cam.forward()).unwrap();
        let mut res = Grid::<3>::zeros(64, 64);
        for (r, (a, b)) in res
            .data_mut()
            .iter_mut()
            .zip(gt_posmap.grid().data().iter().zip(avg.grid().data()))
        {
            for c in 0..3 {
                r[c] = a[c] - b[c];
            }
        }
        let output = ModelOutput {
            uv: out.gt_uv.clone(),
            seg_logits: Grid::<1>::from_fn(64, 64, |r, c| {
                [if out.mask.get(r, c) { 8.0 } else { -8.0 }]
            }),
            residual: res,
        };
        let view = ViewBatchItem {
            output: &output,
            camera: &cam,
            mask: &out.mask,
            gt_uv: Some(&out.gt_uv),
            gt_posmap: Some(&gt_posmap),
        };
        let weights = LossWeights::default();
        let opts = TotalLossOptions { supervised: true, ..TotalLossOptions::default() };
        let mut sinks = vec![LossGradSink::zeros(64, 64, 64)];
        let b: LossBreakdown =
            total_loss_grad(&[view], &[], &avg, &weights, &opts, &mut sinks).unwrap();
        // exact labels: dense terms vanish, def reg stays small
        assert!(b.uv < 1e-12, "dense uv mse on labels {}", b.uv);
        assert!(b.repr < 1e-12, "dense posmap mse on labels {}", b.repr);
        assert_eq!(b.vis, 0.0);
        assert!(b.total < 1e-3);
    }
}
