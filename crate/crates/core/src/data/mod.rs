//! Dataset ingestion, preprocessing, splits and the synthetic suite.

mod bundle;
mod csv_io;
pub mod quantile;
mod schema;
pub mod synth;

pub use bundle::{
    apply_setting, split_rows, standardize_targets, Batch, ColumnData, DatasetBundle, Preprocessing,
    SplitKind, Splits, TargetScaler,
};
pub use csv_io::{load_csv, read_manifest, write_csv, Manifest};
pub use quantile::{fit_quantile_transform, ColumnTransform, QuantileMap};
pub use schema::{ColumnKind, ColumnSpec, FeatureKind, Schema, Setting, TaskType};
pub use synth::{generate_synth_suite, import_suite, SynthSuite, SynthSuiteSpec};
