//! Configuration, training, evaluation and prediction: everything the
//! command-line tool drives.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod predict;
pub mod train;

pub use checkpoint::{Checkpoint, Manifest, MemberRecord};
pub use config::{Config, EvalConfig, LabelNoise, TrainConfig, VolumeSource};
pub use evaluate::{
    evaluate, evaluate_ground_truth, evaluate_on, sample_slices, summary_csv, EvalReport,
    SliceRecord, TestSlice,
};
pub use predict::{predict_files, predict_images, PredictRecord};
pub use train::{train, train_on, EpochLog, TrainOutcome};
