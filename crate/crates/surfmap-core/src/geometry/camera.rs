//! Perspective camera: intrinsics plus a rigid world-to-camera transform.
//!
//! The camera frame follows the usual computer-vision convention: x right,
//! y down, z forward. Depth is camera-space z before perspective division,
//! which is exactly the value the visibility loss compares.

use crate::error::{Result, SurfmapError};
use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Points with camera-space z at or below this are behind the camera.
pub const EPS_DEPTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    /// World-to-camera rotation (orthonormal, det +1).
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation, frontalized-space units.
    pub translation: Vector3<f64>,
    /// (fx, fy) in pixels.
    pub focal: (f64, f64),
    /// (cx, cy) in pixels.
    pub principal: (f64, f64),
    /// (W, H) in pixels.
    pub image_size: (usize, usize),
}

/// Result of projecting a 3D point: continuous pixel plus camera-space depth.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

/// Projection bundled with the Jacobians needed by the losses.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionGrad {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    /// d(pixel)/d(world point), 2x3 row-major.
    pub d_pixel: [[f64; 3]; 2],
    /// d(depth)/d(world point).
    pub d_depth: [f64; 3],
}

impl CameraPose {
    /// Checks the rotation invariants: `R^T R = I` to 1e-6 and det +1.
    pub fn validate(&self) -> Result<()> {
        let gram = self.rotation.transpose() * self.rotation;
        let eye = Matrix3::<f64>::identity();
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dev: f64 = gram[(i, j)] - eye[(i, j)];
                max_dev = max_dev.max(dev.abs());
            }
        }
        if max_dev >= 1e-6 {
            return Err(SurfmapError::Data(format!(
                "camera rotation is not orthonormal (deviation {max_dev:.3e})"
            )));
        }
        if (self.rotation.determinant() - 1.0).abs() >= 1e-6 {
            return Err(SurfmapError::Data("camera rotation must have det +1".into()));
        }
        if self.focal.0 <= 0.0 || self.focal.1 <= 0.0 {
            return Err(SurfmapError::Data("focal lengths must be positive".into()));
        }
        Ok(())
    }

    /// Projects a frontalized-space point; `None` signals the point is
    /// behind the camera (depth <= `EPS_DEPTH`). Loss code masks such
    /// pixels out instead of aborting.
    pub fn project(&self, point: &Vector3<f64>) -> Option<Projection> {
        let cam = self.rotation * point + self.translation;
        if cam.z <= EPS_DEPTH {
            return None;
        }
        let (fx, fy) = self.focal;
        let (cx, cy) = self.principal;
        Some(Projection {
            pixel: Vector2::new(fx * cam.x / cam.z + cx, fy * cam.y / cam.z + cy),
            depth: cam.z,
        })
    }

    /// Projection with analytic derivatives w.r.t. the world point.
    pub fn project_grad(&self, point: &Vector3<f64>) -> Option<ProjectionGrad> {
        let cam = self.rotation * point + self.translation;
        if cam.z <= EPS_DEPTH {
            return None;
        }
        let (fx, fy) = self.focal;
        let (cx, cy) = self.principal;
        let inv_z = 1.0 / cam.z;
        let pixel = Vector2::new(fx * cam.x * inv_z + cx, fy * cam.y * inv_z + cy);
        // d(pixel)/d(cam) rows, then chain through R.
        let du_dcam = [fx * inv_z, 0.0, -fx * cam.x * inv_z * inv_z];
        let dv_dcam = [0.0, fy * inv_z, -fy * cam.y * inv_z * inv_z];
        let r = &self.rotation;
        let mut d_pixel = [[0.0; 3]; 2];
        let mut d_depth = [0.0; 3];
        for j in 0..3 {
            d_pixel[0][j] =
                du_dcam[0] * r[(0, j)] + du_dcam[1] * r[(1, j)] + du_dcam[2] * r[(2, j)];
            d_pixel[1][j] =
                dv_dcam[0] * r[(0, j)] + dv_dcam[1] * r[(1, j)] + dv_dcam[2] * r[(2, j)];
            d_depth[j] = r[(2, j)];
        }
        Some(ProjectionGrad { pixel, depth: cam.z, d_pixel, d_depth })
    }

    /// Inverse of [`CameraPose::project`]: recovers the frontalized-space
    /// point from a pixel and its depth.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let (fx, fy) = self.focal;
        let (cx, cy) = self.principal;
        let cam = Vector3::new((pixel.x - cx) * depth / fx, (pixel.y - cy) * depth / fy, depth);
        self.rotation.transpose() * (cam - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit vector along the optical axis, in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.transpose() * Vector3::new(0.0, 0.0, 1.0)
    }
}

/// Camera on a circular orbit around the origin.
///
/// Azimuth is `2*pi*index/n_views`, the camera looks at the origin with
/// world up (0,0,1). Deterministic in all arguments.
pub fn generate_orbit_camera(
    index: usize,
    n_views: usize,
    radius: f64,
    elevation_deg: f64,
    image_size: (usize, usize),
    focal: f64,
) -> Result<CameraPose> {
    if index >= n_views {
        return Err(SurfmapError::Config(format!(
            "orbit index {index} out of range for {n_views} views"
        )));
    }
    if radius <= 0.87 {
        return Err(SurfmapError::Config(
            "orbit radius must exceed 0.87 (unit-cube circumsphere)".into(),
        ));
    }
    if elevation_deg.abs() >= 89.0 {
        return Err(SurfmapError::Config("orbit elevation must be below 89 degrees".into()));
    }
    let azimuth = 2.0 * std::f64::consts::PI * index as f64 / n_views as f64;
    let elevation = elevation_deg.to_radians();
    let center = Vector3::new(
        radius * elevation.cos() * azimuth.cos(),
        radius * elevation.cos() * azimuth.sin(),
        radius * elevation.sin(),
    );
    Ok(look_at_camera(center, Vector3::zeros(), image_size, focal))
}

/// Builds a camera at `center` looking at `target` with world up (0,0,1).
pub fn look_at_camera(
    center: Vector3<f64>,
    target: Vector3<f64>,
    image_size: (usize, usize),
    focal: f64,
) -> CameraPose {
    let fwd = (target - center).normalize();
    let up = Vector3::new(0.0, 0.0, 1.0);
    let right = fwd.cross(&up).normalize();
    let down = fwd.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
    let translation = -(rotation * center);
    let (w, h) = image_size;
    CameraPose {
        rotation,
        translation,
        focal: (focal, focal),
        principal: (w as f64 / 2.0, h as f64 / 2.0),
        image_size,
    }
}

/// On-disk JSON form: `{"R": 9 floats row-major, "t": 3, "fx","fy","cx","cy","W","H"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "H")]
    pub h: usize,
}

impl From<&CameraPose> for CameraJson {
    fn from(cam: &CameraPose) -> Self {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = cam.rotation[(i, j)];
            }
        }
        CameraJson {
            r,
            t: [cam.translation.x, cam.translation.y, cam.translation.z],
            fx: cam.focal.0,
            fy: cam.focal.1,
            cx: cam.principal.0,
            cy: cam.principal.1,
            w: cam.image_size.0,
            h: cam.image_size.1,
        }
    }
}

impl TryFrom<&CameraJson> for CameraPose {
    type Error = SurfmapError;

    fn try_from(json: &CameraJson) -> Result<CameraPose> {
        let rotation = Matrix3::from_row_slice(&json.r);
        let cam = CameraPose {
            rotation,
            translation: Vector3::new(json.t[0], json.t[1], json.t[2]),
            focal: (json.fx, json.fy),
            principal: (json.cx, json.cy),
            image_size: (json.w, json.h),
        };
        cam.validate()?;
        Ok(cam)
    }
}
