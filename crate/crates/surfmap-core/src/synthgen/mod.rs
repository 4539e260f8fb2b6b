//! Procedural category generator and software rasterizer producing the
//! multi-view training data: RGB renders, masks, depths, poses and
//! ground-truth UV/position maps.

mod dataset;
mod instance;
mod raster;

pub use dataset::{
    generate_dataset, load_dataset, pack_bits, read_f32_file, unpack_bits, write_f32_file,
    AvgPosmapSidecar, Dataset, DatasetMeta, InstanceRecord, Split, SplitLists, SynthConfig,
    ViewRecord,
};
pub use instance::{chart_validity, make_instance, InstanceSpec, RadialField};
pub use raster::{rasterize, uv_albedo, RenderOutput};
