use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::evaluate::infer;
use crate::error::Result;
use crate::net::HeadKind;
use crate::volume::{io, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub kind: HeadKind,
    pub pose: [f64; 9],
    pub variance: Option<[f64; 9]>,
}

/// One prediction: fused pose and variance (voxel units) plus every head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictRecord {
    pub input: String,
    pub pose: [f64; 9],
    pub variance: Option<[f64; 9]>,
    pub heads: Vec<HeadRecord>,
}

pub fn predict_images(
    ckpt: &Checkpoint,
    named: &[(String, Image)],
    seed: u64,
) -> Result<Vec<PredictRecord>> {
    if named.is_empty() {
        return Ok(Vec::new());
    }
    let images: Vec<&Image> = named.iter().map(|(_, i)| i).collect();
    let preds = infer(ckpt, &images, seed)?;
    Ok(named
        .iter()
        .zip(preds)
        .map(|((name, _), p)| PredictRecord {
            input: name.clone(),
            pose: p.mean.to_array(),
            variance: p.variance,
            heads: p
                .heads
                .iter()
                .map(|h| HeadRecord {
                    kind: h.kind,
                    pose: h.pose.to_array(),
                    variance: h.variance,
                })
                .collect(),
        })
        .collect())
}

/// Reads PGM slices and predicts their poses.
pub fn predict_files(
    ckpt: &Checkpoint,
    paths: &[PathBuf],
    seed: u64,
) -> Result<Vec<PredictRecord>> {
    let named = paths
        .iter()
        .map(|p| Ok((display(p), io::read_pgm16(p)?)))
        .collect::<Result<Vec<_>>>()?;
    predict_images(ckpt, &named, seed)
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}
