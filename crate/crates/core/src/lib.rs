//! Multi-scale patch CNN for voxel-wise tissue segmentation.

pub mod checkpoint;
pub mod error;
pub mod inference;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod patch;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod volume;

pub use checkpoint::{load_model, save_model};
pub use error::{Axis, Error, Result};
pub use inference::{dump_kernels, segment, Segmentation};
pub use io::{read_labels, read_mask, read_volume, write_labels, write_mask, write_volume};
pub use layers::Mode;
pub use metrics::{aggregate, dice, evaluate, mean_surface_distance, AggregateReport, MetricsReport};
pub use network::{default_config, shape_chain, BranchSpec, ConvLayerSpec, Model, NetworkConfig};
pub use patch::{extract_group, extract_patch, PatchGroup};
pub use phantom::{generate_context_phantom, generate_phantom, Phantom};
pub use tensor::{conv2d_valid, matmul, maxpool_2x2, mirror_pad, Padding, Scalar, Tensor};
pub use training::{balanced_sample, train, History, LabeledImage, OptimizerState, TrainingConfig};
pub use volume::{scale_intensities, validate_geometry, BrainMask, DataType, Geometry, LabelVolume, Plane, Volume};
