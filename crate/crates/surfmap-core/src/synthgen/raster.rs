//! Deterministic software rasterizer: z-buffer, perspective-correct
//! barycentric interpolation, Blinn-Phong shading with one directional
//! light plus constant ambient.
//!
//! Albedo is a fixed colormap of the surface UV so rendered images carry
//! correspondence-relevant texture. Triangles are binned into row bands;
//! bands rasterize independently (parallel) while triangles within a band
//! keep mesh order, so output is identical for any worker count.

use crate::error::{Result, SurfmapError};
use crate::geometry::{CameraPose, Grid, Mask, TemplateMesh};
use crate::par::par_map_range;
use nalgebra::{Vector2, Vector3};

/// Rows per rasterization band.
const BAND_ROWS: usize = 8;

/// Fixed UV colormap used as surface albedo.
///
/// Continuous across the azimuth seam (`sin(6*pi*u)` matches at u=0 and
/// u=1) and injective enough that local appearance pins down UV.
pub fn uv_albedo(u: f64, v: f64) -> [f64; 3] {
    let b = 0.5 + 0.35 * (6.0 * std::f64::consts::PI * u).sin() * (3.0 * std::f64::consts::PI * v).cos();
    [0.15 + 0.7 * u, 0.15 + 0.7 * v, b]
}

/// Everything one rendered view provides.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// 8-bit RGB, row-major, H*W*3.
    pub rgb: Vec<u8>,
    pub mask: Mask,
    /// Camera-space z per pixel, 0.0 = background.
    pub depth: Vec<f32>,
    /// Ground-truth UV per pixel, zeros at background; u stored in [0,1).
    pub gt_uv: Grid<2>,
}

#[derive(Clone, Copy)]
struct PixelHit {
    z: f64,
    u: f64,
    v: f64,
    normal: Vector3<f64>,
}

struct ScreenVertex {
    pixel: Vector2<f64>,
    z: f64,
}

/// Renders `mesh` under `cam`. `light_dir` is the propagation direction of
/// the single directional light (the dataset generator passes the camera
/// viewing direction).
pub fn rasterize(
    mesh: &TemplateMesh,
    cam: &CameraPose,
    light_dir: &Vector3<f64>,
) -> Result<RenderOutput> {
    cam.validate()?;
    mesh.validate()?;
    let (w, h) = cam.image_size;
    let normals = mesh.vertex_normals();

    let screen: Vec<Option<ScreenVertex>> = mesh
        .vertices
        .iter()
        .map(|p| cam.project(p).map(|proj| ScreenVertex { pixel: proj.pixel, z: proj.depth }))
        .collect();

    // Bin triangles into row bands by their clipped bounding box.
    let n_bands = h.div_ceil(BAND_ROWS);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_bands];
    for (fi, face) in mesh.faces.iter().enumerate() {
        let (Some(a), Some(b), Some(c)) = (&screen[face[0]], &screen[face[1]], &screen[face[2]])
        else {
            continue; // vertex behind camera
        };
        let min_y = a.pixel.y.min(b.pixel.y).min(c.pixel.y);
        let max_y = a.pixel.y.max(b.pixel.y).max(c.pixel.y);
        let row_lo = (min_y - 0.5).floor().max(0.0) as usize;
        let row_hi = (max_y - 0.5).ceil().min((h - 1) as f64) as usize;
        if min_y > h as f64 || max_y < 0.0 {
            continue;
        }
        for band in (row_lo / BAND_ROWS)..=(row_hi / BAND_ROWS) {
            bins[band].push(fi);
        }
    }

    let bands: Vec<Vec<Option<PixelHit>>> = par_map_range(n_bands, |band| {
        let row_start = band * BAND_ROWS;
        let rows = BAND_ROWS.min(h - row_start);
        let mut buf: Vec<Option<PixelHit>> = vec![None; rows * w];
        for &fi in &bins[band] {
            let face = &mesh.faces[fi];
            let (v0, v1, v2) = (
                screen[face[0]].as_ref().unwrap(),
                screen[face[1]].as_ref().unwrap(),
                screen[face[2]].as_ref().unwrap(),
            );
            let area = cross2(&(v1.pixel - v0.pixel), &(v2.pixel - v0.pixel));
            if area.abs() < 1e-12 {
                continue;
            }
            let inv_area = 1.0 / area;
            let min_x = v0.pixel.x.min(v1.pixel.x).min(v2.pixel.x);
            let max_x = v0.pixel.x.max(v1.pixel.x).max(v2.pixel.x);
            let col_lo = (min_x - 0.5).floor().max(0.0) as usize;
            let col_hi = (max_x - 0.5).ceil().min((w - 1) as f64) as usize;
            if min_x > w as f64 || max_x < 0.0 || col_lo > col_hi {
                continue;
            }
            let min_y = v0.pixel.y.min(v1.pixel.y).min(v2.pixel.y);
            let max_y = v0.pixel.y.max(v1.pixel.y).max(v2.pixel.y);
            let row_lo = ((min_y - 0.5).floor().max(0.0) as usize).max(row_start);
            let row_hi = ((max_y - 0.5).ceil() as usize).min(row_start + rows - 1);
            let (iw0, iw1, iw2) = (1.0 / v0.z, 1.0 / v1.z, 1.0 / v2.z);
            let (uv0, uv1, uv2) = (&mesh.uv[face[0]], &mesh.uv[face[1]], &mesh.uv[face[2]]);
            let (n0, n1, n2) = (&normals[face[0]], &normals[face[1]], &normals[face[2]]);
            for row in row_lo..=row_hi {
                let py = row as f64 + 0.5;
                for col in col_lo..=col_hi {
                    let px = col as f64 + 0.5;
                    let q = Vector2::new(px, py);
                    let l0 = cross2(&(v2.pixel - v1.pixel), &(q - v1.pixel)) * inv_area;
                    let l1 = cross2(&(v0.pixel - v2.pixel), &(q - v2.pixel)) * inv_area;
                    let l2 = 1.0 - l0 - l1;
                    if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                        continue;
                    }
                    let denom = l0 * iw0 + l1 * iw1 + l2 * iw2;
                    let z = 1.0 / denom;
                    let idx = (row - row_start) * w + col;
                    if let Some(hit) = &buf[idx] {
                        if z >= hit.z {
                            continue;
                        }
                    }
                    let u = (l0 * uv0.x * iw0 + l1 * uv1.x * iw1 + l2 * uv2.x * iw2) * z;
                    let v = (l0 * uv0.y * iw0 + l1 * uv1.y * iw1 + l2 * uv2.y * iw2) * z;
                    let normal = (n0 * (l0 * iw0) + n1 * (l1 * iw1) + n2 * (l2 * iw2)) * z;
                    buf[idx] = Some(PixelHit { z, u, v, normal });
                }
            }
        }
        buf
    });

    let mut rgb = vec![0u8; h * w * 3];
    let mut mask_data = vec![false; h * w];
    let mut depth = vec![0.0f32; h * w];
    let mut gt_uv = Grid::<2>::zeros(h, w);
    let to_light = -light_dir.normalize();
    let cam_center = cam.center();
    let mut any = false;
    for band in 0..n_bands {
        let row_start = band * BAND_ROWS;
        for (i, hit) in bands[band].iter().enumerate() {
            let Some(hit) = hit else { continue };
            any = true;
            let row = row_start + i / w;
            let col = i % w;
            let idx = row * w + col;
            mask_data[idx] = true;
            depth[idx] = hit.z as f32;
            // u convention: stored in [0,1), seam value 1.0 wraps to 0.
            let mut u = hit.u.clamp(0.0, 1.0);
            if u >= 1.0 {
                u = 0.0;
            }
            let v = hit.v.clamp(0.0, 1.0);
            *gt_uv.get_mut(row, col) = [u, v];

            let pixel = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
            let point = cam.unproject(&pixel, hit.z);
            let n = hit.normal.normalize();
            let to_eye = (cam_center - point).normalize();
            let ndl = n.dot(&to_light).max(0.0);
            let half = (to_light + to_eye).normalize();
            let spec = 0.12 * n.dot(&half).max(0.0).powf(16.0);
            let albedo = uv_albedo(u, v);
            for c in 0..3 {
                let shade = (albedo[c] * (0.30 + 0.60 * ndl) + spec).clamp(0.0, 1.0);
                rgb[idx * 3 + c] = (shade * 255.0).round() as u8;
            }
        }
    }
    if !any {
        return Err(SurfmapError::EmptyProjection);
    }
    Ok(RenderOutput { rgb, mask: Mask::new(h, w, mask_data)?, depth, gt_uv })
}

#[inline]
fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}
