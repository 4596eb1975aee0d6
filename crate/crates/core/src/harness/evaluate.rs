use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{load_all, EvalConfig};
use super::train::{rng_for, STREAM_TEST};
use crate::ensemble::{de_predict, mcd_predict, Prediction};
use crate::error::{Error, Result};
use crate::geom::PlanePose;
use crate::metrics::{mean_std, slice_metrics, SliceMetrics};
use crate::net::Method;
use crate::volume::{make_batch, sample_pose, AugmentConfig, Image, SliceGrid, SliceImage, Volume};

pub const SUMMARY_HEADER: &str = "method,ED,ED_norm,PA,MSE,NCC,SSIM,mean_var,params";

/// A test slice and the volume it was cut from.
#[derive(Clone, Debug)]
pub struct TestSlice {
    pub volume: usize,
    pub slice: SliceImage,
}

/// `n_per_volume` seeded slices per volume with pose augmentation only.
pub fn test_set(
    volumes: &[Volume],
    n_per_volume: usize,
    augment: &AugmentConfig,
    grid: SliceGrid,
    seed: u64,
) -> Result<Vec<TestSlice>> {
    let mut rng = rng_for(seed, STREAM_TEST);
    let aug = AugmentConfig {
        contrast: (1.0, 1.0),
        brightness: (0.0, 0.0),
        ..*augment
    };
    let mut out = Vec::new();
    for (vi, v) in volumes.iter().enumerate() {
        for slice in make_batch(v, n_per_volume, &aug, grid, &mut rng)? {
            out.push(TestSlice { volume: vi, slice });
        }
    }
    Ok(out)
}

/// `n` fully augmented slices drawn with a generator seeded by `seed`.
pub fn sample_slices(
    volume: &Volume,
    n: usize,
    augment: &AugmentConfig,
    grid: SliceGrid,
    seed: u64,
) -> Result<Vec<SliceImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_batch(volume, n, augment, grid, &mut rng)
}

/// Method-appropriate inference: head fusion and single-pass methods use
/// one deterministic pass, `de` mixes its members, `mcd` runs seeded
/// stochastic passes.
pub fn infer(ckpt: &Checkpoint, images: &[&Image], seed: u64) -> Result<Vec<Prediction>> {
    let m = &ckpt.manifest;
    match m.method {
        Method::De => de_predict(&ckpt.models, images),
        Method::Mcd => mcd_predict(&ckpt.models[0], images, m.train.mc_passes, seed),
        _ => ckpt.models[0].predict(images),
    }
}

/// Metrics for one test slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub volume: usize,
    pub index: usize,
    pub metrics: SliceMetrics,
    /// Mean of the 9 predicted variances (voxel²), if the method has any.
    pub mean_var: Option<f64>,
}

/// Scores predicted poses against the test slices. Images for NCC and SSIM
/// are resampled from the source volume at both poses on `metric_grid`.
pub fn score(
    volumes: &[Volume],
    test: &[TestSlice],
    poses: &[PlanePose],
    variances: &[Option<[f64; 9]>],
    metric_grid: SliceGrid,
) -> Result<Vec<SliceRecord>> {
    if poses.len() != test.len() || variances.len() != test.len() {
        return Err(Error::Shape(format!(
            "{} test slices, {} poses, {} variances",
            test.len(),
            poses.len(),
            variances.len()
        )));
    }
    test.iter()
        .enumerate()
        .map(|(i, t)| {
            let v = &volumes[t.volume];
            let truth = sample_pose(v, &t.slice.pose, metric_grid)?;
            let pred = sample_pose(v, &poses[i], metric_grid)?;
            Ok(SliceRecord {
                volume: t.volume,
                index: i,
                metrics: slice_metrics(&poses[i], &t.slice.pose, &pred, &truth)?,
                mean_var: variances[i].map(|v| v.iter().sum::<f64>() / 9.0),
            })
        })
        .collect()
}

/// Per-slice metrics for one method plus its parameter total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub params: usize,
    pub slices: Vec<SliceRecord>,
}

fn cell(xs: &[f64]) -> String {
    let (m, s) = mean_std(xs);
    format!("{m:.6}±{s:.6}")
}

impl EvalReport {
    pub fn column(&self, f: impl Fn(&SliceRecord) -> f64) -> Vec<f64> {
        self.slices.iter().map(f).collect()
    }

    pub fn mean_of(&self, f: impl Fn(&SliceRecord) -> f64) -> f64 {
        mean_std(&self.column(f)).0
    }

    /// One summary row, fields formatted as `mean±std`.
    pub fn summary_row(&self) -> String {
        let m = |f: fn(&SliceMetrics) -> f64| cell(&self.column(|r| f(&r.metrics)));
        let vars: Option<Vec<f64>> = self.slices.iter().map(|r| r.mean_var).collect();
        let var = match vars {
            Some(v) if !v.is_empty() => cell(&v),
            _ => "nan".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            m(|x| x.ed),
            m(|x| x.ed_norm),
            m(|x| x.pa),
            m(|x| x.mse),
            m(|x| x.ncc),
            m(|x| x.ssim),
            var,
            self.params
        )
    }

    pub fn per_slice_csv(&self) -> String {
        let mut s = String::from("method,volume,slice,ED,ED_norm,PA,MSE,NCC,SSIM,mean_var\n");
        for r in &self.slices {
            let x = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                self.method,
                r.volume,
                r.index,
                x.ed,
                x.ed_norm,
                x.pa,
                x.mse,
                x.ncc,
                x.ssim,
                r.mean_var.map_or("nan".to_string(), |v| format!("{v:.6}"))
            );
        }
        s
    }
}

pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in reports {
        s.push_str(&r.summary_row());
        s.push('\n');
    }
    s
}

fn grids(ckpt_input: usize, half_extent: f64, cfg: &EvalConfig) -> Result<(SliceGrid, SliceGrid)> {
    Ok((
        SliceGrid::new(half_extent, ckpt_input)?,
        SliceGrid::new(half_extent, cfg.metric_resolution)?,
    ))
}

/// Loads the configured test volumes and evaluates the checkpoint.
pub fn evaluate(ckpt: &Checkpoint, cfg: &EvalConfig) -> Result<EvalReport> {
    let volumes = load_all(&cfg.test_volumes)?;
    evaluate_on(ckpt, &volumes, cfg)
}

pub fn evaluate_on(ckpt: &Checkpoint, volumes: &[Volume], cfg: &EvalConfig) -> Result<EvalReport> {
    let m = &ckpt.manifest;
    let (input, metric) = grids(m.model.input_size, m.model.half_extent, cfg)?;
    let test = test_set(volumes, cfg.n_per_volume, &m.train.augment, input, cfg.seed)?;
    let images: Vec<&Image> = test.iter().map(|t| &t.slice.image).collect();
    let preds = infer(ckpt, &images, cfg.seed)?;
    let poses: Vec<PlanePose> = preds.iter().map(|p| p.mean).collect();
    let vars: Vec<_> = preds.iter().map(|p| p.variance).collect();
    Ok(EvalReport {
        method: m.method.to_string(),
        params: m.param_count.total,
        slices: score(volumes, &test, &poses, &vars, metric)?,
    })
}

/// Scores the ground-truth poses against themselves: the metric self-test.
pub fn evaluate_ground_truth(
    volumes: &[Volume],
    augment: &AugmentConfig,
    input_grid: SliceGrid,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let metric = SliceGrid::new(input_grid.half_extent, cfg.metric_resolution)?;
    let test = test_set(volumes, cfg.n_per_volume, augment, input_grid, cfg.seed)?;
    let poses: Vec<PlanePose> = test.iter().map(|t| t.slice.pose).collect();
    Ok(EvalReport {
        method: "ground_truth".into(),
        params: 0,
        slices: score(volumes, &test, &poses, &vec![None; test.len()], metric)?,
    })
}
