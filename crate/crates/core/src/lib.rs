//! EDICT: evidential continuous-time distributions over irregular time
//! series, with uncertainty-guided reweighting (EDGR) at inference time.

pub mod numerics;
pub mod evidential;
pub mod data;
pub mod dynamics;
pub mod evaluation;
pub mod training;
pub mod edgr;
pub mod pipeline;

pub use data::{Cell, Dataset, HoldoutSplit, IrregularSeries, NormStats};
pub use dynamics::{EdictModel, ModelConfig};
pub use edgr::{PolicyKind, ReweightPolicy, SweepResult};
pub use evaluation::{CalibrationReport, CoverageCurve, HoldoutConfig, Mode};
pub use evidential::{NiwParams, PredictiveT};
pub use numerics::Array;
pub use pipeline::{Manifest, SyntheticConfig};
pub use training::{Checkpoint, ClassifierCheckpoint, ClassifierConfig, ClassifierHead, TrainConfig};
