//! Offline datasets, the conservative regularizer and the offline training loop.

pub mod cql;
mod dataset;
mod train;

pub use cql::{cql_loss, cql_penalty, q_objective, LossKind};
pub use dataset::{collect_dataset, from_replay, Behavior, DatasetHeader, OfflineDataset, TrainSplit, DATASET_FORMAT_VERSION};
pub use train::{train_cql, train_offline, OfflineConfig, OfflineRun};
