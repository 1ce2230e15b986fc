//! Synthetic shape corpus, viewpoint occlusion and point cloud files.

mod dataset;
pub mod io;
mod shapes;

pub use dataset::{load_split, save_split, synthesize, synthesize_sample, Sample};
pub use io::{read_cloud, read_ply, read_xyz, write_cloud, write_ply, write_xyz};
pub use shapes::{
    generate_shape, occlude_viewpoint, resample_input, sample_surface, ShapeFamily, SyntheticShapeSpec, VIEWPOINTS,
};
