//! File formats and synthetic data.

mod descriptors;
mod manifest;
mod ply;
mod synthetic;

pub use descriptors::{read_keypoints, write_keypoints, DescriptorFile};
pub use manifest::{load_fragment, load_pair, prepare_fragment, FragmentOptions, Manifest, ManifestEntry};
pub use ply::{
    quantize_color, read_ply, read_ply_data, read_ply_from, write_ply, write_ply_to, PlyData, PlyFormat,
    PlyWriteOptions,
};
pub use synthetic::{gen_synthetic, generate_pairs, measure_overlap, SyntheticConfig, SyntheticPair, OVERLAP_RADIUS};
