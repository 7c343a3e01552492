//! Contrastive neighborhood alignment (CNA) and friends, from scratch.

pub mod datasets;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod neighbors;
pub mod optim;
pub mod trainer;
pub mod transductive;

pub use datasets::{Dataset, SplitSpec};
pub use linalg::{DataMatrix, SymEigResult};
pub use losses::{CnaConfig, KdConfig, LfaConfig, LossBundle, MvuConfig};
pub use metrics::EvalReport;
pub use model::{Activation, ForwardTrace, GradientSet, MlpModel};
pub use neighbors::{KnnGraph, Metric, NeighborSet};
pub use optim::{AdamState, ScheduleKind, ScheduleSpec, SgdState};
pub use trainer::{ExperimentConfig, LossKind, OptimizerKind, RunRecord, TaskKind};
pub use transductive::Embedding;
