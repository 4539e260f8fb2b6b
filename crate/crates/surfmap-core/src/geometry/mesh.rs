//! Triangle mesh with per-vertex UV coordinates.

use crate::error::{Result, SurfmapError};
use nalgebra::{Vector2, Vector3};

/// Category template: shared topology and UV chart for every instance.
#[derive(Clone, Debug)]
pub struct TemplateMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub uv: Vec<Vector2<f64>>,
}

impl TemplateMesh {
    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() || self.faces.is_empty() {
            return Err(SurfmapError::Data("mesh has no vertices or faces".into()));
        }
        if self.uv.len() != self.vertices.len() {
            return Err(SurfmapError::Shape(format!(
                "uv count {} does not match vertex count {}",
                self.uv.len(),
                self.vertices.len()
            )));
        }
        for f in &self.faces {
            for &i in f {
                if i >= self.vertices.len() {
                    return Err(SurfmapError::Data(format!(
                        "face index {i} out of range for {} vertices",
                        self.vertices.len()
                    )));
                }
            }
        }
        for uv in &self.uv {
            if !(0.0..=1.0).contains(&uv.x) || !(0.0..=1.0).contains(&uv.y) {
                return Err(SurfmapError::Data(format!("uv ({}, {}) outside unit square", uv.x, uv.y)));
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            for k in 0..3 {
                min[k] = min[k].min(v[k]);
                max[k] = max[k].max(v[k]);
            }
        }
        (min, max)
    }

    /// Area-weighted per-vertex normals; used for shading only.
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = *f;
            let n = (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a]));
            normals[a] += n;
            normals[b] += n;
            normals[c] += n;
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 1e-12 {
                *n /= len;
            }
        }
        normals
    }
}

/// Centers the bounding box at the origin and scales uniformly so the
/// largest extent becomes exactly 1 (the unit cube the category lives in).
pub fn normalize_mesh(mesh: &TemplateMesh) -> Result<TemplateMesh> {
    mesh.validate()?;
    let (min, max) = mesh.bounds();
    let extent = max - min;
    let max_extent = extent.x.max(extent.y).max(extent.z);
    if max_extent <= 1e-12 {
        return Err(SurfmapError::Data("degenerate mesh: zero extent".into()));
    }
    let center = (min + max) / 2.0;
    let scale = 1.0 / max_extent;
    Ok(TemplateMesh {
        vertices: mesh.vertices.iter().map(|v| (v - center) * scale).collect(),
        faces: mesh.faces.clone(),
        uv: mesh.uv.clone(),
    })
}
