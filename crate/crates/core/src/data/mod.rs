//! Molecular frames: xyz I/O, rotation augmentation, the Lennard-Jones oracle
//! dataset and train/val/test splits.

mod frame;
mod lj;
mod rotation;
mod split;
mod xyz;

use thiserror::Error;

pub use frame::{distance, MolecularFrame, Vec3};
pub use lj::{
    generate_lj_dataset, generate_lj_dataset_with, sample_lj_cluster, LennardJones,
    LjClusterConfig, ARGON,
};
pub use rotation::{augment_rotate, random_rotation, RotationMatrix};
pub use split::{split_dataset, DatasetManifest, DatasetSplit};
pub use xyz::{parse_xyz, write_xyz};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("atomic number {0} outside [1, 118]")]
    Element(u32),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}
