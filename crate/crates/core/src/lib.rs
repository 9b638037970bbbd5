//! Embedding-based instance segmentation: a small tape autodiff engine, the
//! U-Net style backbone that predicts seed and embedding maps, and the
//! seed-driven pipeline that turns those maps into labeled instances.

pub mod dihedral;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod labelmap;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod tiling;
pub mod train;

pub use dihedral::{Dihedral, Rect};
pub use error::{Error, Result};
pub use labelmap::{BinaryMask, DistanceMap, LabelMap};
pub use graph::{BnRunning, Graph, Var};
pub use metrics::{evaluate_dataset, DatasetReport, PooledScores};
pub use model::{ArchitectureConfig, FeatureBundle, ModelParams};
pub use pipeline::{infer, tta_infer, InstanceCandidate, PipelineConfig, Seed};
pub use synth::SynthConfig;
pub use tensor::{Dtype, Tensor};
pub use tiling::{infer_tiled, plan_tiles, ImageProvider, TileConfig, TilePlan};
pub use train::{train, TrainConfig, TrainOutcome};
