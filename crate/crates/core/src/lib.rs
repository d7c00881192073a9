//! Routability prediction: layout grids, feature extraction, a small
//! autodiff engine, the ibUNet and baseline models, training and metrics.

pub mod dataset;
pub mod features;
pub mod grid;
pub mod layout_io;
pub mod map;
pub mod metrics;
pub mod model;
pub mod npy;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use dataset::{Dataset, DatasetError, InMemoryDataset, Manifest, ManifestDataset, ManifestEntry, Sample, Split};
pub use features::{FeatureError, FeatureMap, FeatureStack, Task};
pub use grid::{make_grid, Cell, GridError, GridSpec, Layout, Net, Pin, Rect};
pub use map::Map2;
pub use metrics::{ConfusionMatrix, MetricError, MetricsReport, RocPoint};
pub use model::{Arch, Model, ModelConfig, ModelError, ModelSpec};
pub use npy::{NpyArray, NpyError};
pub use params::{Param, ParamError, ParamStore};
pub use synth::{SynthError, SynthProfile};
pub use tensor::{Graph, Scalar, Tensor4, TensorError, Var};
pub use train::{TrainConfig, TrainError, TrainState};
