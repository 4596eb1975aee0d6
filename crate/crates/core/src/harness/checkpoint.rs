//! Checkpoint directory: `manifest.json`, one `member_<k>.bin` blob of
//! little-endian `f32` parameters per ensemble member, and `train_log.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{EpochLog, TrainOutcome};
use crate::error::{Error, Result};
use crate::net::{count_params, Method, Model, ModelConfig, ParamCount};

pub const MANIFEST: &str = "manifest.json";
pub const TRAIN_LOG: &str = "train_log.csv";
const FORMAT_VERSION: u32 = 1;

/// How validation drives early stopping; stored in every manifest.
pub const VALIDATION_PROTOCOL: &str = "Gaussian NLL (normalized units, unit variance for \
    methods without one) on a fixed seeded set of pose-augmented slices from the validation \
    volumes, evaluated after every epoch; the best epoch's weights are kept";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub index: usize,
    pub seed: u64,
    /// Epoch whose weights were kept (0 = initial weights).
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub blob: String,
    pub param_count: usize,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub method: Method,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub param_count: ParamCount,
    pub validation: String,
    pub members: Vec<MemberRecord>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub models: Vec<Model>,
}

impl Manifest {
    pub fn new(cfg: &TrainConfig, outcome: &TrainOutcome) -> Self {
        Manifest {
            format: FORMAT_VERSION,
            method: cfg.method,
            seed: cfg.seed,
            model: cfg.model.clone(),
            train: cfg.clone(),
            param_count: count_params(cfg.method, &cfg.model, cfg.members),
            validation: VALIDATION_PROTOCOL.to_string(),
            members: outcome.records.clone(),
        }
    }
}

impl Checkpoint {
    /// The checkpoint `write` would produce, kept in memory.
    pub fn from_outcome(cfg: &TrainConfig, outcome: TrainOutcome) -> Self {
        Checkpoint {
            manifest: Manifest::new(cfg, &outcome),
            models: outcome.models,
        }
    }
}

pub(crate) fn write(dir: &Path, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    let manifest = Manifest::new(cfg, outcome);
    for (model, rec) in outcome.models.iter().zip(&outcome.records) {
        let path = dir.join(&rec.blob);
        fs::write(&path, model.to_blob()).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(TRAIN_LOG);
    fs::write(&path, log_csv(&outcome.records)).map_err(|e| Error::io(&path, e))
}

pub fn log_csv(records: &[MemberRecord]) -> String {
    let mut s = String::from("member,epoch,train_loss,val_loss,val_ED,val_PA\n");
    for r in records {
        for e in &r.history {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.index, e.epoch, e.train_loss, e.val_loss, e.val_ed, e.val_pa
            );
        }
    }
    s
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported format {}", manifest.format),
        ));
    }
    if manifest.members.is_empty() {
        return Err(Error::format(&path, "checkpoint lists no members"));
    }
    let models = manifest
        .members
        .iter()
        .map(|rec| {
            let path = dir.join(&rec.blob);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Model::from_blob(manifest.method, manifest.model.clone(), &bytes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint { manifest, models })
}
