//! Multi-view dataset generation and on-disk layout.
//!
//! Layout, relative to the dataset root:
//!
//! ```text
//! meta.json                      category config, resolutions, splits
//! avg_posmap.f32 + avg_posmap.json   texelwise mean of train-split maps
//! inst_<id>/gt_posmap.f32 (+ .json)
//! inst_<id>/view_<k>.png         RGB render
//! inst_<id>/view_<k>_mask.png    8-bit, 0/255
//! inst_<id>/view_<k>_depth.f32   row-major float32 little-endian
//! inst_<id>/view_<k>_uv.f32
//! inst_<id>/view_<k>_cam.json
//! ```
//!
//! Every `.f32` file has a JSON sidecar with shape and dtype. Instance
//! generation is parallel across instances; each instance derives its own
//! RNG stream from the category seed, so output bytes do not depend on
//! worker count.

use crate::error::{Result, SurfmapError};
use crate::geometry::{CameraJson, CameraPose, F32Sidecar, Grid, Mask, PositionMap};
use crate::par::par_map;
use crate::synthgen::instance::{chart_validity, make_instance, InstanceSpec};
use crate::synthgen::raster::{rasterize, RenderOutput};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Dataset generation parameters. Defaults are the desk-scale setup.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_instances: usize,
    pub n_views: usize,
    pub image_size: usize,
    pub posmap_resolution: usize,
    pub sphere_resolution: usize,
    pub n_harmonics: usize,
    pub amplitude: f64,
    pub base_radius: f64,
    pub orbit_radius: f64,
    pub elevation_deg: f64,
    pub focal: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_instances: 64,
            n_views: 24,
            image_size: 64,
            posmap_resolution: 64,
            sphere_resolution: 128,
            n_harmonics: 3,
            amplitude: 0.1,
            base_radius: 0.35,
            orbit_radius: 2.0,
            elevation_deg: 20.0,
            focal: 80.0,
            train_fraction: 0.75,
            val_fraction: 0.125,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0 || self.n_views == 0 {
            return Err(SurfmapError::Config("need at least one instance and one view".into()));
        }
        if self.image_size % 8 != 0 {
            return Err(SurfmapError::Config("image_size must be divisible by 8".into()));
        }
        if !(0.0..=1.0).contains(&(self.train_fraction + self.val_fraction)) {
            return Err(SurfmapError::Config("split fractions must sum to at most 1".into()));
        }
        self.instance_spec(0).validate()
    }

    /// Per-instance spec; the seed is derived so instances are independent
    /// streams regardless of generation order.
    pub fn instance_spec(&self, instance_id: usize) -> InstanceSpec {
        InstanceSpec {
            seed: mix_seed(self.seed, instance_id as u64),
            n_harmonics: self.n_harmonics,
            amplitude: self.amplitude,
            base_radius: self.base_radius,
        }
    }

    pub fn camera(&self, view: usize) -> Result<CameraPose> {
        crate::geometry::generate_orbit_camera(
            view,
            self.n_views,
            self.orbit_radius,
            self.elevation_deg,
            (self.image_size, self.image_size),
            self.focal,
        )
    }

    /// Contiguous instance-id split: train, then val, then test.
    pub fn splits(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let n = self.n_instances;
        let n_train = ((n as f64) * self.train_fraction).round() as usize;
        let n_val = ((n as f64) * self.val_fraction).round() as usize;
        let n_train = n_train.min(n);
        let n_val = n_val.min(n - n_train);
        let train = (0..n_train).collect();
        let val = (n_train..n_train + n_val).collect();
        let test = (n_train + n_val..n).collect();
        (train, val, test)
    }
}

fn mix_seed(seed: u64, id: u64) -> u64 {
    // splitmix64 step
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `meta.json` contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: SynthConfig,
    pub splits: SplitLists,
    pub format_version: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SplitLists {
    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Sidecar for `avg_posmap.f32`; carries the chart validity bit-packed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AvgPosmapSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Validity mask, row-major, packed LSB-first into bytes, hex-encoded.
    pub validity_bits: String,
    pub validity_len: usize,
}

pub fn pack_bits(bits: &[bool]) -> String {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    let mut s = String::with_capacity(bytes.len() * 2);
    for byte in bytes {
        s.push_str(&format!("{byte:02x}"));
    }
    s
}

pub fn unpack_bits(hexstr: &str, len: usize) -> Result<Vec<bool>> {
    if hexstr.len() % 2 != 0 {
        return Err(SurfmapError::Data("validity hex string has odd length".into()));
    }
    let mut bytes = Vec::with_capacity(hexstr.len() / 2);
    for i in (0..hexstr.len()).step_by(2) {
        let byte = u8::from_str_radix(&hexstr[i..i + 2], 16)
            .map_err(|e| SurfmapError::Data(format!("bad validity hex: {e}")))?;
        bytes.push(byte);
    }
    if bytes.len() != len.div_ceil(8) {
        return Err(SurfmapError::Data("validity bit length mismatch".into()));
    }
    Ok((0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect())
}

pub fn write_f32_file(path: &Path, data: &[f32], shape: &[usize]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if data.len() != expected {
        return Err(SurfmapError::Shape(format!(
            "f32 payload {} does not match shape {:?}",
            data.len(),
            shape
        )));
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let sidecar = F32Sidecar { shape: shape.to_vec(), dtype: "f32le".into() };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_f32_file(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let sidecar: F32Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if sidecar.dtype != "f32le" {
        return Err(SurfmapError::Data(format!("unsupported dtype {}", sidecar.dtype)));
    }
    let bytes = fs::read(path)?;
    let expected: usize = sidecar.shape.iter().product();
    if bytes.len() != expected * 4 {
        return Err(SurfmapError::Data(format!(
            "{} has {} bytes, sidecar shape {:?} wants {}",
            path.display(),
            bytes.len(),
            sidecar.shape,
            expected * 4
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((data, sidecar.shape))
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// One view loaded in memory.
#[derive(Clone, Debug)]
pub struct ViewRecord {
    /// CHW float image in [0,1].
    pub image: Vec<f32>,
    pub mask: Mask,
    /// Camera-space z, 0 = background.
    pub depth: Vec<f32>,
    pub gt_uv: Grid<2>,
    pub camera: CameraPose,
}

/// One instance: ground-truth position map plus all its views.
#[derive(Clone, Debug)]
pub struct InstanceRecord {
    pub instance_id: usize,
    pub gt_posmap: PositionMap,
    pub views: Vec<ViewRecord>,
}

/// Whole dataset resident in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub avg_posmap: PositionMap,
    pub instances: Vec<InstanceRecord>,
}

impl Dataset {
    pub fn image_hw(&self) -> (usize, usize) {
        let s = self.meta.config.image_size;
        (s, s)
    }

    pub fn instance(&self, id: usize) -> &InstanceRecord {
        &self.instances[id]
    }
}

/// Generates the dataset directory. Returns the meta that was written.
pub fn generate_dataset(config: &SynthConfig, root: &Path) -> Result<DatasetMeta> {
    config.validate()?;
    fs::create_dir_all(root)?;
    let (train, val, test) = config.splits();
    let s = config.posmap_resolution;

    let instance_ids: Vec<usize> = (0..config.n_instances).collect();
    let posmaps: Vec<Result<Grid<3>>> = par_map(&instance_ids, |&id| {
        let spec = config.instance_spec(id);
        let (mesh, posmap) = make_instance(&spec, config.sphere_resolution, s)?;
        let dir = root.join(format!("inst_{id}"));
        fs::create_dir_all(&dir)?;
        write_f32_file(&dir.join("gt_posmap.f32"), &posmap.grid().to_f32(), &[s, s, 3])?;
        for view in 0..config.n_views {
            let cam = config.camera(view)?;
            let light = cam.forward();
            let out = rasterize(&mesh, &cam, &light)?;
            write_view(&dir, view, &out, &cam)?;
        }
        Ok(posmap.grid().clone())
    });

    // Average of train-split ground-truth maps, accumulated in id order.
    let mut avg = Grid::<3>::zeros(s, s);
    let mut n_train = 0usize;
    for (id, result) in posmaps.into_iter().enumerate() {
        let grid = result?;
        if train.contains(&id) {
            n_train += 1;
            for (a, g) in avg.data_mut().iter_mut().zip(grid.data()) {
                a[0] += g[0];
                a[1] += g[1];
                a[2] += g[2];
            }
        }
    }
    if n_train == 0 {
        return Err(SurfmapError::Config("train split is empty".into()));
    }
    let inv = 1.0 / n_train as f64;
    for a in avg.data_mut() {
        a[0] *= inv;
        a[1] *= inv;
        a[2] *= inv;
    }
    let validity = chart_validity(s);
    let mut avg_bytes = Vec::with_capacity(s * s * 3 * 4);
    for t in avg.data() {
        for c in 0..3 {
            avg_bytes.extend_from_slice(&(t[c] as f32).to_le_bytes());
        }
    }
    fs::write(root.join("avg_posmap.f32"), avg_bytes)?;
    let avg_sidecar = AvgPosmapSidecar {
        shape: vec![s, s, 3],
        dtype: "f32le".into(),
        validity_bits: pack_bits(&validity),
        validity_len: validity.len(),
    };
    fs::write(root.join("avg_posmap.json"), serde_json::to_vec_pretty(&avg_sidecar)?)?;

    let meta = DatasetMeta {
        config: config.clone(),
        splits: SplitLists { train, val, test },
        format_version: 1,
    };
    fs::write(root.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

fn write_view(dir: &Path, view: usize, out: &RenderOutput, cam: &CameraPose) -> Result<()> {
    let (w, h) = cam.image_size;
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, out.rgb.clone())
        .ok_or_else(|| SurfmapError::Data("rgb buffer size mismatch".into()))?;
    rgb.save(dir.join(format!("view_{view}.png")))?;

    let mask_bytes: Vec<u8> = out.mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let mask_img = image::GrayImage::from_raw(w as u32, h as u32, mask_bytes)
        .ok_or_else(|| SurfmapError::Data("mask buffer size mismatch".into()))?;
    mask_img.save(dir.join(format!("view_{view}_mask.png")))?;

    write_f32_file(&dir.join(format!("view_{view}_depth.f32")), &out.depth, &[h, w])?;
    write_f32_file(&dir.join(format!("view_{view}_uv.f32")), &out.gt_uv.to_f32(), &[h, w, 2])?;
    let cam_json = CameraJson::from(cam);
    fs::write(dir.join(format!("view_{view}_cam.json")), serde_json::to_vec_pretty(&cam_json)?)?;
    Ok(())
}

/// Loads a dataset directory back into memory, checking the
/// mask/depth/uv tri-consistency invariant per view.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(root.join("meta.json"))?)?;
    let s = meta.config.posmap_resolution;

    let avg_sidecar: AvgPosmapSidecar =
        serde_json::from_slice(&fs::read(root.join("avg_posmap.json"))?)?;
    let bytes = fs::read(root.join("avg_posmap.f32"))?;
    if bytes.len() != s * s * 3 * 4 {
        return Err(SurfmapError::Data("avg_posmap.f32 size mismatch".into()));
    }
    let raw: Vec<f32> =
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let validity = unpack_bits(&avg_sidecar.validity_bits, avg_sidecar.validity_len)?;
    let avg_posmap = PositionMap::new(Grid::<3>::from_f32(s, s, &raw)?, validity.clone())?;

    let ids: Vec<usize> = (0..meta.config.n_instances).collect();
    let instances: Vec<Result<InstanceRecord>> = par_map(&ids, |&id| {
        load_instance(root, &meta, id, &validity)
    });
    let instances = instances.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Dataset { root: root.to_path_buf(), meta, avg_posmap, instances })
}

fn load_instance(
    root: &Path,
    meta: &DatasetMeta,
    id: usize,
    validity: &[bool],
) -> Result<InstanceRecord> {
    let dir = root.join(format!("inst_{id}"));
    let s = meta.config.posmap_resolution;
    let (raw, shape) = read_f32_file(&dir.join("gt_posmap.f32"))?;
    if shape != [s, s, 3] {
        return Err(SurfmapError::Data(format!("gt_posmap shape {shape:?} unexpected")));
    }
    let gt_posmap = PositionMap::new(Grid::<3>::from_f32(s, s, &raw)?, validity.to_vec())?;

    let mut views = Vec::with_capacity(meta.config.n_views);
    for view in 0..meta.config.n_views {
        views.push(load_view(&dir, view)?);
    }
    Ok(InstanceRecord { instance_id: id, gt_posmap, views })
}

fn load_view(dir: &Path, view: usize) -> Result<ViewRecord> {
    let cam_json: CameraJson =
        serde_json::from_slice(&fs::read(dir.join(format!("view_{view}_cam.json")))?)?;
    let camera = CameraPose::try_from(&cam_json)?;
    let (w, h) = camera.image_size;

    let rgb = image::open(dir.join(format!("view_{view}.png")))?.into_rgb8();
    if rgb.width() as usize != w || rgb.height() as usize != h {
        return Err(SurfmapError::Data("image size does not match camera".into()));
    }
    // HWC u8 -> CHW f32 in [0,1]
    let mut image_chw = vec![0.0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            image_chw[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }

    let mask_img = image::open(dir.join(format!("view_{view}_mask.png")))?.into_luma8();
    let mask = Mask::new(h, w, mask_img.pixels().map(|p| p.0[0] > 127).collect())?;

    let (depth, dshape) = read_f32_file(&dir.join(format!("view_{view}_depth.f32")))?;
    if dshape != [h, w] {
        return Err(SurfmapError::Data("depth shape mismatch".into()));
    }
    let (uv_raw, ushape) = read_f32_file(&dir.join(format!("view_{view}_uv.f32")))?;
    if ushape != [h, w, 2] {
        return Err(SurfmapError::Data("uv shape mismatch".into()));
    }
    let gt_uv = Grid::<2>::from_f32(h, w, &uv_raw)?;

    // Tri-consistency: mask <=> depth > 0, and uv defined only on mask.
    for i in 0..h * w {
        let fg = mask.data()[i];
        if fg != (depth[i] > 0.0) {
            return Err(SurfmapError::Data(format!(
                "view {view}: mask/depth inconsistency at pixel {i}"
            )));
        }
        let uv = gt_uv.data()[i];
        if fg {
            if !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]) {
                return Err(SurfmapError::Data(format!(
                    "view {view}: foreground uv out of range at pixel {i}"
                )));
            }
        } else if uv != [0.0, 0.0] {
            return Err(SurfmapError::Data(format!(
                "view {view}: background uv must be zero at pixel {i}"
            )));
        }
    }
    Ok(ViewRecord { image: image_chw, mask, depth, gt_uv, camera })
}
