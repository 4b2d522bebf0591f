//! File formats: meshes (OBJ, ascii PLY), PGM images, landmark text files,
//! dataset manifests and key-value config files.

pub mod config;
pub mod landmarks;
pub mod manifest;
pub mod mesh;
pub mod pgm;

pub use config::ConfigFile;
pub use landmarks::{read_landmarks, write_landmarks};
pub use manifest::{
    load_training_samples, read_manifest, write_manifest, write_sweep_dataset, DatasetManifest,
    LoadedSample, ManifestEntry,
};
pub use mesh::{read_mesh, write_mesh, MeshData};
pub use pgm::{read_pgm, write_pgm};
