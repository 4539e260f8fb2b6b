//! Regular grids over the unit UV square and bilinear sampling.
//!
//! Coordinate convention, fixed once for the whole crate: a coordinate
//! `(u, v)` in `[0,1]^2` addresses the grid with `u` along columns and `v`
//! along rows; `(0,0)` hits the center of texel `(row 0, col 0)` and
//! `(1,1)` the center of texel `(S-1, S-1)`. Coordinates outside `[0,1]`
//! are clamped, never rejected, so early-training networks that emit
//! boundary values keep producing finite losses.

use crate::error::{Result, SurfmapError};
use serde::{Deserialize, Serialize};

/// Dense `h x w` grid of `C`-channel f64 texels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<const C: usize> {
    h: usize,
    w: usize,
    data: Vec<[f64; C]>,
}

impl<const C: usize> Grid<C> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Grid { h, w, data: vec![[0.0; C]; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> [f64; C]) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for row in 0..h {
            for col in 0..w {
                data.push(f(row, col));
            }
        }
        Grid { h, w, data }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<[f64; C]>) -> Result<Self> {
        if data.len() != h * w {
            return Err(SurfmapError::Shape(format!(
                "grid data length {} does not match {}x{}",
                data.len(),
                h,
                w
            )));
        }
        Ok(Grid { h, w, data })
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f64; C] {
        self.data[row * self.w + col]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut [f64; C] {
        &mut self.data[row * self.w + col]
    }

    pub fn data(&self) -> &[[f64; C]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f64; C]] {
        &mut self.data
    }

    pub fn same_shape<const D: usize>(&self, other: &Grid<D>) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn map(&self, f: impl Fn(&[f64; C]) -> [f64; C]) -> Grid<C> {
        Grid { h: self.h, w: self.w, data: self.data.iter().map(f).collect() }
    }

    /// Flattens to channel-interleaved f32, row-major. Used by the `.f32`
    /// on-disk format.
    pub fn to_f32(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.data.len() * C);
        for t in &self.data {
            for c in 0..C {
                out.push(t[c] as f32);
            }
        }
        out
    }

    pub fn from_f32(h: usize, w: usize, raw: &[f32]) -> Result<Self> {
        if raw.len() != h * w * C {
            return Err(SurfmapError::Shape(format!(
                "raw f32 buffer length {} does not match {}x{}x{}",
                raw.len(),
                h,
                w,
                C
            )));
        }
        let data = raw
            .chunks_exact(C)
            .map(|c| {
                let mut t = [0.0; C];
                for (i, x) in c.iter().enumerate() {
                    t[i] = *x as f64;
                }
                t
            })
            .collect();
        Ok(Grid { h, w, data })
    }
}

/// Per-pixel UV predictions or labels over an image, values in `[0,1]^2`.
pub type UvMap = Grid<2>;

/// Boolean foreground mask over an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(SurfmapError::Shape(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                h,
                w
            )));
        }
        Ok(Mask { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: bool) -> Self {
        Mask { h, w, data: vec![value; h * w] }
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.w + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.w + col] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Iterates `(row, col)` of foreground pixels in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.w;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / w, i % w))
    }
}

/// One bilinear lookup, retained so gradients can be pushed back through
/// both the grid texels and the continuous coordinates.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap {
    /// Top-left texel of the 2x2 footprint.
    pub row0: usize,
    pub col0: usize,
    /// Fractional offsets inside the footprint, in `[0,1]`.
    pub fx: f64,
    pub fy: f64,
    /// d(col coordinate)/du and d(row coordinate)/dv; zero when the input
    /// coordinate was clamped.
    pub dx_du: f64,
    pub dy_dv: f64,
}

fn locate(coord: f64, n: usize) -> (usize, f64, f64) {
    debug_assert!(n >= 1);
    if n == 1 {
        return (0, 0.0, 0.0);
    }
    let scale = (n - 1) as f64;
    let x = coord * scale;
    if x <= 0.0 {
        (0, 0.0, if coord < 0.0 { 0.0 } else { scale })
    } else if x >= scale {
        (n - 2, 1.0, if coord > 1.0 { 0.0 } else { scale })
    } else {
        let i = x.floor() as usize;
        let i = i.min(n - 2);
        (i, x - i as f64, scale)
    }
}

/// Bilinear sample of `grid` at `(u, v)`; clamps out-of-range coordinates.
pub fn sample_bilinear<const C: usize>(grid: &Grid<C>, u: f64, v: f64) -> [f64; C] {
    bilinear_tap(grid, u, v).0
}

/// Bilinear sample that also returns the tap needed for gradients.
pub fn bilinear_tap<const C: usize>(grid: &Grid<C>, u: f64, v: f64) -> ([f64; C], BilinearTap) {
    let (col0, fx, dx_du) = locate(u, grid.w);
    let (row0, fy, dy_dv) = locate(v, grid.h);
    let col1 = (col0 + 1).min(grid.w - 1);
    let row1 = (row0 + 1).min(grid.h - 1);
    let t00 = grid.get(row0, col0);
    let t01 = grid.get(row0, col1);
    let t10 = grid.get(row1, col0);
    let t11 = grid.get(row1, col1);
    let mut out = [0.0; C];
    for c in 0..C {
        let top = t00[c] * (1.0 - fx) + t01[c] * fx;
        let bot = t10[c] * (1.0 - fx) + t11[c] * fx;
        out[c] = top * (1.0 - fy) + bot * fy;
    }
    (out, BilinearTap { row0, col0, fx, fy, dx_du, dy_dv })
}

impl BilinearTap {
    /// d(sample[c])/d(u,v) for each channel.
    pub fn coord_jacobian<const C: usize>(&self, grid: &Grid<C>) -> [[f64; 2]; C] {
        let col1 = (self.col0 + 1).min(grid.w - 1);
        let row1 = (self.row0 + 1).min(grid.h - 1);
        let t00 = grid.get(self.row0, self.col0);
        let t01 = grid.get(self.row0, col1);
        let t10 = grid.get(row1, self.col0);
        let t11 = grid.get(row1, col1);
        let mut jac = [[0.0; 2]; C];
        for c in 0..C {
            let d_dx = (t01[c] - t00[c]) * (1.0 - self.fy) + (t11[c] - t10[c]) * self.fy;
            let d_dy = (t10[c] - t00[c]) * (1.0 - self.fx) + (t11[c] - t01[c]) * self.fx;
            jac[c] = [d_dx * self.dx_du, d_dy * self.dy_dv];
        }
        jac
    }

    /// Scatters `d_value` into the four texels of `d_grid`.
    pub fn accumulate_grid_grad<const C: usize>(&self, d_value: &[f64; C], d_grid: &mut Grid<C>) {
        let col1 = (self.col0 + 1).min(d_grid.w - 1);
        let row1 = (self.row0 + 1).min(d_grid.h - 1);
        let w00 = (1.0 - self.fx) * (1.0 - self.fy);
        let w01 = self.fx * (1.0 - self.fy);
        let w10 = (1.0 - self.fx) * self.fy;
        let w11 = self.fx * self.fy;
        for c in 0..C {
            d_grid.get_mut(self.row0, self.col0)[c] += w00 * d_value[c];
            d_grid.get_mut(self.row0, col1)[c] += w01 * d_value[c];
            d_grid.get_mut(row1, self.col0)[c] += w10 * d_value[c];
            d_grid.get_mut(row1, col1)[c] += w11 * d_value[c];
        }
    }
}

/// S x S x 3 map of 3D points over UV space with a chart validity mask.
///
/// Realizes the image-encoded mesh: texel `(row i, col j)` stores the
/// surface point at `uv = (j/(S-1), i/(S-1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionMap {
    grid: Grid<3>,
    validity: Vec<bool>,
}

impl PositionMap {
    pub fn new(grid: Grid<3>, validity: Vec<bool>) -> Result<Self> {
        if grid.h() != grid.w() {
            return Err(SurfmapError::Shape(format!(
                "position map must be square, got {}x{}",
                grid.h(),
                grid.w()
            )));
        }
        if validity.len() != grid.h() * grid.w() {
            return Err(SurfmapError::Shape(
                "validity mask does not match position map".into(),
            ));
        }
        Ok(PositionMap { grid, validity })
    }

    pub fn resolution(&self) -> usize {
        self.grid.h()
    }

    pub fn grid(&self) -> &Grid<3> {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut Grid<3> {
        &mut self.grid
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.validity[row * self.grid.w() + col]
    }

    /// UV coordinates of a texel center under the corner-aligned convention.
    pub fn texel_uv(&self, row: usize, col: usize) -> (f64, f64) {
        let s = (self.resolution() - 1) as f64;
        (col as f64 / s, row as f64 / s)
    }

    /// Clamps every texel to the unit cube. Export-time only; the training
    /// graph composes maps unclamped to keep gradients intact.
    pub fn clamped_to_unit_cube(&self) -> PositionMap {
        PositionMap {
            grid: self.grid.map(|t| {
                [t[0].clamp(-0.5, 0.5), t[1].clamp(-0.5, 0.5), t[2].clamp(-0.5, 0.5)]
            }),
            validity: self.validity.clone(),
        }
    }
}

/// Texelwise sum `avg + residual`; validity is copied from `avg`.
///
/// No clamping happens here: clamping is an export-time concern.
pub fn compose_posmap(residual: &Grid<3>, avg: &PositionMap) -> Result<PositionMap> {
    if !residual.same_shape(avg.grid()) {
        return Err(SurfmapError::Shape(format!(
            "residual {}x{} does not match average map {}x{}",
            residual.h(),
            residual.w(),
            avg.grid().h(),
            avg.grid().w()
        )));
    }
    let mut grid = avg.grid().clone();
    for (out, r) in grid.data_mut().iter_mut().zip(residual.data()) {
        out[0] += r[0];
        out[1] += r[1];
        out[2] += r[2];
    }
    Ok(PositionMap { grid, validity: avg.validity.clone() })
}

/// Shape/dtype sidecar stored next to every `.f32` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct F32Sidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
}
