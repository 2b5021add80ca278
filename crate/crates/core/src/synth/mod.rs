//! Deterministic paired human/robot data.

pub mod dataset;
pub mod embodiment;
pub mod io;
pub mod motion;

pub use dataset::{
    generate_dataset, window_pair, window_starts, DataConfig, Dataset, Downsample, Split, Window,
};
pub use embodiment::{
    joint_angles, make_embodiment_family, make_embodiments, mixing_distance, oracle_retarget,
    EmbodimentDescriptor,
};
pub use io::{read_dataset, read_manifest, write_dataset, DatasetManifest};
pub use motion::{
    generate_human_sequence, sample_beta, MotionStyleParams, StyleFamily, SyntheticSkeleton,
    NUM_JOINTS,
};
