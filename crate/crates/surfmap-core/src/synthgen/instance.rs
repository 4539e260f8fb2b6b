//! Procedural category: radially-perturbed spheres over an equirectangular
//! UV chart.
//!
//! Chart convention: `u = azimuth / 2pi` (seam at azimuth 0, `u` stored in
//! `[0,1)` on rendered labels), `v = polar / pi` measured from +z. The pole
//! rows of the chart are degenerate and are marked invalid in the validity
//! mask; their texel values are still filled analytically so bilinear
//! sampling near the poles stays well defined.

use crate::error::{Result, SurfmapError};
use crate::geometry::{Grid, PositionMap, TemplateMesh};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Parameters of one procedural instance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstanceSpec {
    pub seed: u64,
    /// Number of harmonic components K.
    pub n_harmonics: usize,
    /// Total relative amplitude bound; each component gets `a_max / K`.
    pub amplitude: f64,
    pub base_radius: f64,
}

impl InstanceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_radius <= 0.0 {
            return Err(SurfmapError::Config("base_radius must be positive".into()));
        }
        if self.amplitude < 0.0 || self.amplitude > 0.3 * self.base_radius {
            return Err(SurfmapError::Config(format!(
                "amplitude {} must lie in [0, 0.3 * base_radius = {}]",
                self.amplitude,
                0.3 * self.base_radius
            )));
        }
        if self.base_radius * (1.0 + self.amplitude) > 0.5 {
            return Err(SurfmapError::Config(
                "base_radius * (1 + amplitude) must stay inside the unit cube".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form radial field of one instance.
///
/// `r(polar, azimuth) = base * (1 + sum_k a_k sin(k*polar + p_k) sin(k*azimuth + q_k))`
/// with coefficients drawn deterministically from the instance seed.
#[derive(Debug, Clone)]
pub struct RadialField {
    base_radius: f64,
    coeffs: Vec<(f64, f64, f64)>, // (a_k, p_k, q_k) for k = 1..=K
}

impl RadialField {
    pub fn from_spec(spec: &InstanceSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let k = spec.n_harmonics;
        let bound = if k > 0 { spec.amplitude / k as f64 } else { 0.0 };
        let coeffs = (1..=k)
            .map(|_| {
                let a = rng.gen_range(-bound..=bound);
                let p = rng.gen_range(0.0..std::f64::consts::TAU);
                let q = rng.gen_range(0.0..std::f64::consts::TAU);
                (a, p, q)
            })
            .collect();
        Ok(RadialField { base_radius: spec.base_radius, coeffs })
    }

    /// Radius at spherical angles (polar from +z in `[0,pi]`, azimuth in `[0,2pi]`).
    pub fn radius(&self, polar: f64, azimuth: f64) -> f64 {
        let mut s = 0.0;
        for (k, (a, p, q)) in self.coeffs.iter().enumerate() {
            let kf = (k + 1) as f64;
            s += a * (kf * polar + p).sin() * (kf * azimuth + q).sin();
        }
        self.base_radius * (1.0 + s)
    }

    /// Surface point at chart coordinates `(u, v)`.
    pub fn point_at_uv(&self, u: f64, v: f64) -> Vector3<f64> {
        let azimuth = u * std::f64::consts::TAU;
        let polar = v * std::f64::consts::PI;
        let r = self.radius(polar, azimuth);
        Vector3::new(
            r * polar.sin() * azimuth.cos(),
            r * polar.sin() * azimuth.sin(),
            r * polar.cos(),
        )
    }
}

/// Chart validity for an `s x s` position map: everything except the two
/// degenerate pole rows.
pub fn chart_validity(s: usize) -> Vec<bool> {
    let mut validity = vec![true; s * s];
    for col in 0..s {
        validity[col] = false; // v = 0 row (north pole)
        validity[(s - 1) * s + col] = false; // v = 1 row (south pole)
    }
    validity
}

/// Builds the instance mesh and its analytic ground-truth position map.
///
/// The mesh is a UV sphere with `sphere_resolution` segments along both
/// azimuth and polar directions; the seam ring at azimuth 0 is duplicated
/// so per-vertex UVs interpolate correctly across triangles.
pub fn make_instance(
    spec: &InstanceSpec,
    sphere_resolution: usize,
    posmap_resolution: usize,
) -> Result<(TemplateMesh, PositionMap)> {
    if sphere_resolution < 8 {
        return Err(SurfmapError::Config("sphere_resolution must be at least 8".into()));
    }
    if posmap_resolution < 2 {
        return Err(SurfmapError::Config("posmap resolution must be at least 2".into()));
    }
    let field = RadialField::from_spec(spec)?;

    let n = sphere_resolution;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    let mut uv = Vec::with_capacity((n + 1) * (n + 1));
    for i in 0..=n {
        let v = i as f64 / n as f64;
        for j in 0..=n {
            let u = j as f64 / n as f64;
            vertices.push(field.point_at_uv(u, v));
            uv.push(Vector2::new(u, v));
        }
    }
    let stride = n + 1;
    let mut faces = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            let a = i * stride + j;
            let b = i * stride + j + 1;
            let c = (i + 1) * stride + j;
            let d = (i + 1) * stride + j + 1;
            faces.push([a, c, b]);
            faces.push([b, c, d]);
        }
    }
    let mesh = TemplateMesh { vertices, faces, uv };
    mesh.validate()?;

    let s = posmap_resolution;
    let grid = Grid::<3>::from_fn(s, s, |row, col| {
        let u = col as f64 / (s - 1) as f64;
        let v = row as f64 / (s - 1) as f64;
        let p = field.point_at_uv(u, v);
        [p.x, p.y, p.z]
    });
    let posmap = PositionMap::new(grid, chart_validity(s))?;
    Ok((mesh, posmap))
}
