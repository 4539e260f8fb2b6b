//! Differentiable geometric kernels: camera projection, bilinear grid
//! sampling, position-map composition and orbit cameras. Everything here
//! is a pure function on immutable inputs.

mod camera;
mod grid;
mod mesh;

pub use camera::{
    generate_orbit_camera, look_at_camera, CameraJson, CameraPose, Projection, ProjectionGrad,
    EPS_DEPTH,
};
pub use grid::{
    bilinear_tap, compose_posmap, sample_bilinear, BilinearTap, F32Sidecar, Grid, Mask,
    PositionMap, UvMap,
};
pub use mesh::{normalize_mesh, TemplateMesh};
