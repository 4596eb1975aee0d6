use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, MemberRecord};
use super::config::{load_all, TrainConfig};
use crate::error::{Error, Result};
use crate::geom::PlanePose;
use crate::losses;
use crate::metrics;
use crate::net::{Adam, Model, Tape};
use crate::volume::{make_batch, AugmentConfig, SliceGrid, SliceImage, Volume};

/// RNG streams derived from one seed.
pub(crate) const STREAM_DATA: u64 = 1;
pub(crate) const STREAM_DROPOUT: u64 = 2;
pub(crate) const STREAM_VALIDATION: u64 = 3;
pub(crate) const STREAM_TEST: u64 = 4;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ed: f64,
    pub val_pa: f64,
}

/// Trained ensemble members (one unless the method is `de`).
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub models: Vec<Model>,
    pub records: Vec<MemberRecord>,
}

/// A training or validation slice with the target the loss sees.
pub(crate) struct Sample {
    pub slice: SliceImage,
    pub target: PlanePose,
}

/// Adds the configured label noise to each slice's pose.
pub(crate) fn with_label_noise<R: Rng + ?Sized>(
    slices: Vec<SliceImage>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Vec<Sample> {
    slices
        .into_iter()
        .map(|slice| {
            let mut target = slice.pose;
            if cfg.label_noise.is_active() {
                let std = cfg
                    .label_noise
                    .std_at(slice.aug.transform.t[2], &cfg.augment);
                let normal = Normal::new(0.0, std).expect("noise std is finite and >= 0");
                let mut a = target.to_array();
                for v in a.iter_mut() {
                    *v += normal.sample(rng);
                }
                target = PlanePose::from_array(&a);
            }
            Sample { slice, target }
        })
        .collect()
}

pub(crate) fn grid_for(cfg: &TrainConfig) -> Result<SliceGrid> {
    SliceGrid::new(cfg.model.half_extent, cfg.model.input_size)
}

/// Fixed validation slices shared by every member: pose augmentation only.
pub(crate) fn validation_set(cfg: &TrainConfig, volumes: &[Volume]) -> Result<Vec<Sample>> {
    let mut rng = rng_for(cfg.seed, STREAM_VALIDATION);
    let aug = AugmentConfig {
        contrast: (1.0, 1.0),
        brightness: (0.0, 0.0),
        ..cfg.augment
    };
    let grid = grid_for(cfg)?;
    let mut out = Vec::new();
    for v in volumes {
        let slices = make_batch(v, cfg.val_slices, &aug, grid, &mut rng)?;
        out.extend(with_label_noise(slices, cfg, &mut rng));
    }
    Ok(out)
}

/// Gaussian NLL in normalized units (unit variance when the model has none)
/// plus mean normalized ED and mean PA of the point predictions.
fn validate(model: &Model, val: &[Sample]) -> Result<(f64, f64, f64)> {
    let h = model.config().half_extent;
    let images: Vec<_> = val.iter().map(|s| &s.slice.image).collect();
    let preds = model.predict(&images)?;
    let (mut loss, mut ed, mut pa, mut n_pa) = (0.0, 0.0, 0.0, 0usize);
    for (p, s) in preds.iter().zip(val) {
        let mu = p.mean.to_array().map(|v| v / h);
        let var = p.variance.map_or([1.0; 9], |v| v.map(|x| x / (h * h)));
        let target = s.target.to_array().map(|v| v / h);
        loss += losses::gnll(&mu, &var, &target)?;
        ed += metrics::euclidean_distance(&p.mean, &s.slice.pose, true);
        if let Ok(a) = metrics::plane_angle(&p.mean, &s.slice.pose) {
            pa += a;
            n_pa += 1;
        }
    }
    let n = val.len() as f64;
    Ok((
        loss / n,
        ed / n,
        if n_pa > 0 { pa / n_pa as f64 } else { f64::NAN },
    ))
}

/// Trains every member and, when `out` is given, writes the checkpoint
/// directory (manifest, parameter blobs, CSV log).
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_volumes = load_all(&cfg.train_volumes)?;
    let val_volumes = load_all(&cfg.val_volumes)?;
    train_on(cfg, &train_volumes, &val_volumes, out)
}

/// As [`train`], with volumes already in memory.
pub fn train_on(
    cfg: &TrainConfig,
    train_volumes: &[Volume],
    val_volumes: &[Volume],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let val = validation_set(cfg, val_volumes)?;
    let mut models = Vec::with_capacity(cfg.members);
    let mut records = Vec::with_capacity(cfg.members);
    for k in 0..cfg.members {
        let seed = cfg.seed.wrapping_add(k as u64);
        let (model, record) = train_member(cfg, k, seed, train_volumes, &val, out)?;
        models.push(model);
        records.push(record);
    }
    let outcome = TrainOutcome { models, records };
    if let Some(dir) = out {
        checkpoint::write(dir, cfg, &outcome)?;
    }
    Ok(outcome)
}

fn train_member(
    cfg: &TrainConfig,
    index: usize,
    seed: u64,
    volumes: &[Volume],
    val: &[Sample],
    out: Option<&Path>,
) -> Result<(Model, MemberRecord)> {
    let mut model = Model::new(cfg.method, cfg.model.clone(), seed)?;
    let mut adam = Adam::new(cfg.adam(), model.params().iter().map(Vec::len));
    let mut data_rng = rng_for(seed, STREAM_DATA);
    let mut dropout_rng = rng_for(seed, STREAM_DROPOUT);
    let use_dropout = cfg.model.dropout > 0.0;
    let grid = grid_for(cfg)?;

    let mut best = (f64::INFINITY, 0usize, model.params().to_vec());
    let mut since_best = 0;
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut train_loss = 0.0;
        let batches = volumes
            .iter()
            .enumerate()
            .flat_map(|b| std::iter::repeat_n(b, cfg.batches_per_volume));
        for (vi, volume) in batches {
            let batch_seed: u64 = data_rng.random();
            let mut batch_rng = ChaCha8Rng::seed_from_u64(batch_seed);
            let slices = make_batch(volume, cfg.batch_size, &cfg.augment, grid, &mut batch_rng)?;
            let samples = with_label_noise(slices, cfg, &mut batch_rng);
            let images: Vec<_> = samples.iter().map(|s| &s.slice.image).collect();
            let targets: Vec<_> = samples.iter().map(|s| s.target).collect();

            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &images, use_dropout.then_some(&mut dropout_rng))?;
            let loss = model.loss_with(&mut tape, &fwd, &targets, epoch <= cfg.mean_warmup)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                let msg = format!(
                    "non-finite loss {value} at member {index}, epoch {epoch}, volume {vi}, batch seed {batch_seed}{}",
                    tape.non_finite().map(|op| format!(" (first produced by {op})")).unwrap_or_default()
                );
                if let Some(dir) = out {
                    let dump = serde_json::json!({
                        "member": index, "epoch": epoch, "volume": vi,
                        "batch_seed": batch_seed, "loss": value.to_string(),
                    });
                    let path = dir.join("nonfinite_batch.json");
                    fs::write(&path, dump.to_string()).map_err(|e| Error::io(&path, e))?;
                }
                return Err(Error::Numeric(msg));
            }
            train_loss += value;
            let grads = tape.backward(loss)?;
            let g: Vec<Option<&[f64]>> = (0..model.params().len()).map(|i| grads.get(i)).collect();
            adam.step(model.params_mut(), &g)?;
        }
        train_loss /= (volumes.len() * cfg.batches_per_volume) as f64;
        let (val_loss, val_ed, val_pa) = validate(&model, val)?;
        log::info!(
            "member {index} epoch {epoch}: train {train_loss:.5} val {val_loss:.5} ED {val_ed:.4} PA {val_pa:.4}"
        );
        history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_ed,
            val_pa,
        });
        if epoch <= cfg.mean_warmup {
            // Variances are untrained during warm-up, so their likelihood
            // says nothing yet; keep the latest weights and wait.
            best = (f64::INFINITY, epoch, model.params().to_vec());
        } else if val_loss < best.0 {
            best = (val_loss, epoch, model.params().to_vec());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!(
                    "member {index}: early stop at epoch {epoch}, best epoch {}",
                    best.1
                );
                break;
            }
        }
    }
    let epochs_run = history.len();
    // Round through the stored f32 representation so in-memory results match
    // a reloaded checkpoint exactly.
    let model = Model::from_params(cfg.method, cfg.model.clone(), best.2)?;
    let model = Model::from_blob(cfg.method, cfg.model.clone(), &model.to_blob())?;
    let record = MemberRecord {
        index,
        seed,
        best_epoch: best.1,
        epochs_run,
        blob: format!("member_{index}.bin"),
        param_count: model.num_params(),
        history,
    };
    Ok((model, record))
}
