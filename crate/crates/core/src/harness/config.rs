//! Line-oriented `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated.
//! Every key is optional; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{AdamConfig, Method, ModelConfig};
use crate::volume::{generate_phantom, io, AugmentConfig, Volume};

/// Where a volume comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeSource {
    Phantom { seed: u64, dims: [usize; 3] },
    File(PathBuf),
}

impl VolumeSource {
    pub fn load(&self) -> Result<Volume> {
        match self {
            VolumeSource::Phantom { seed, dims } => generate_phantom(*seed, *dims),
            VolumeSource::File(path) => io::read_volume(path),
        }
    }
}

pub fn load_all(sources: &[VolumeSource]) -> Result<Vec<Volume>> {
    sources.iter().map(VolumeSource::load).collect()
}

/// Synthetic heteroscedastic label noise: each target coordinate gets
/// Gaussian noise with standard deviation (voxels)
/// `base + slope · u`, where `u ∈ [0, 1]` is the slice's normalized `t_z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelNoise {
    pub base: f64,
    pub slope: f64,
}

impl LabelNoise {
    pub fn is_active(&self) -> bool {
        self.base != 0.0 || self.slope != 0.0
    }

    /// Noise amplitude for a slice translated by `tz` under `aug`.
    pub fn std_at(&self, tz: f64, aug: &AugmentConfig) -> f64 {
        let (lo, hi) = aug.trans_z;
        let u = if hi > lo {
            ((tz - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        self.base + self.slope * u
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Batches drawn from each training volume per epoch.
    pub batches_per_volume: usize,
    /// Leading epochs in which Gaussian methods train their mean under unit
    /// variance before the full likelihood takes over.
    pub mean_warmup: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Deep-ensemble size (1 for every other method).
    pub members: usize,
    /// Stochastic passes at MC-dropout inference.
    pub mc_passes: usize,
    /// Fixed validation slices drawn per validation volume.
    pub val_slices: usize,
    pub train_volumes: Vec<VolumeSource>,
    pub val_volumes: Vec<VolumeSource>,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub label_noise: LabelNoise,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Qaerts,
            epochs: 200,
            lr: 2e-4,
            batch_size: 16,
            batches_per_volume: 4,
            mean_warmup: 40,
            patience: 40,
            seed: 0,
            members: 1,
            mc_passes: 5,
            val_slices: 32,
            train_volumes: phantoms(&[1, 2], DEFAULT_DIMS),
            val_volumes: phantoms(&[3], DEFAULT_DIMS),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            label_noise: LabelNoise::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Applies method-specific defaults and checks cross-field rules.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.model.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 || self.batches_per_volume == 0 {
            return bad("batch_size and batches_per_volume must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.train_volumes.is_empty() || self.val_volumes.is_empty() {
            return bad("need at least one training and one validation volume".into());
        }
        if self.val_slices == 0 {
            return bad("val_slices must be >= 1".into());
        }
        match self.method {
            Method::De if self.members == 0 => return bad("de needs members >= 1".into()),
            Method::De => {}
            _ if self.members != 1 => {
                return bad(format!("members = {} is only valid for de", self.members))
            }
            _ => {}
        }
        let rate = self.model.dropout;
        if self.method == Method::Mcd {
            if !(rate > 0.0 && rate < 1.0) {
                return bad(format!("mcd needs a dropout rate in (0, 1), got {rate}"));
            }
            if self.mc_passes == 0 {
                return bad("mc_passes must be >= 1".into());
            }
        } else if rate != 0.0 {
            return bad(format!(
                "dropout is only used by mcd (got {rate} for {})",
                self.method
            ));
        }
        if !(self.label_noise.base >= 0.0 && self.label_noise.slope >= 0.0) {
            return bad("label noise amplitudes must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub test_volumes: Vec<VolumeSource>,
    /// Test slices drawn per volume.
    pub n_per_volume: usize,
    /// Resolution of the images compared by NCC and SSIM.
    pub metric_resolution: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_volumes: phantoms(&[4, 5], DEFAULT_DIMS),
            n_per_volume: 32,
            metric_resolution: 64,
            seed: 0,
        }
    }
}

/// Everything a CLI invocation may configure.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Dimensions for `generate-volume`.
    pub phantom_dims: [usize; 3],
    /// Phantom seed for `generate-volume`.
    pub phantom_seed: u64,
    /// Number of slices for `sample-slices`.
    pub n_slices: usize,
    /// Pixel resolution for `sample-slices`.
    pub slice_resolution: usize,
}

pub const DEFAULT_DIMS: [usize; 3] = [160, 160, 160];

fn phantoms(seeds: &[u64], dims: [usize; 3]) -> Vec<VolumeSource> {
    seeds
        .iter()
        .map(|&seed| VolumeSource::Phantom { seed, dims })
        .collect()
}

impl Config {
    pub fn desk_default() -> Self {
        Self {
            phantom_dims: DEFAULT_DIMS,
            n_slices: 16,
            slice_resolution: 160,
            ..Self::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk_default();
        let mut raw = RawKeys::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value, &mut raw)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {key}: {e}", n + 1)))?;
        }
        cfg.finish(&raw)?;
        Ok(cfg)
    }

    fn set(
        &mut self,
        key: &str,
        value: &str,
        raw: &mut RawKeys,
    ) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "method" => t.method = value.parse().map_err(|e: Error| e.to_string())?,
            "epochs" => t.epochs = num(value)?,
            "lr" => t.lr = num(value)?,
            "batch_size" => t.batch_size = num(value)?,
            "batches_per_volume" => t.batches_per_volume = num(value)?,
            "mean_warmup" => t.mean_warmup = num(value)?,
            "patience" => t.patience = num(value)?,
            "seed" => {
                t.seed = num(value)?;
                self.eval.seed = t.seed;
            }
            "members" => raw.members = Some(num(value)?),
            "dropout" => raw.dropout = Some(num(value)?),
            "mc_passes" => t.mc_passes = num(value)?,
            "val_slices" => t.val_slices = num(value)?,
            "phantom_dims" => {
                let d: [usize; 3] = array(value)?;
                self.phantom_dims = d;
                raw.dims = Some(d);
            }
            "train_phantoms" => raw.train_phantoms = Some(list(value)?),
            "val_phantoms" => raw.val_phantoms = Some(list(value)?),
            "test_phantoms" => raw.test_phantoms = Some(list(value)?),
            "train_volumes" => t.train_volumes = paths(value),
            "val_volumes" => t.val_volumes = paths(value),
            "test_volumes" => self.eval.test_volumes = paths(value),
            "rot_xy_deg" => t.augment.rot_xy = num::<f64>(value)?.to_radians(),
            "rot_z_deg" => t.augment.rot_z = num::<f64>(value)?.to_radians(),
            "trans_z" => t.augment.trans_z = pair(value)?,
            "scale" => t.augment.scale = pair(value)?,
            "contrast" => t.augment.contrast = pair(value)?,
            "brightness" => t.augment.brightness = pair(value)?,
            "input_size" => t.model.input_size = num(value)?,
            "channels" => raw.channels = Some(list(value)?),
            "convs_per_block" => raw.convs_per_block = Some(num(value)?),
            "pool" => t.model.pool = num(value)?,
            "fc_hidden" => t.model.fc_hidden = num(value)?,
            "embedding_dim" => t.model.embedding_dim = num(value)?,
            "half_extent" => t.model.half_extent = num(value)?,
            "label_noise_base" => t.label_noise.base = num(value)?,
            "label_noise_slope" => t.label_noise.slope = num(value)?,
            "n_per_volume" => self.eval.n_per_volume = num(value)?,
            "metric_resolution" => self.eval.metric_resolution = num(value)?,
            "phantom_seed" => self.phantom_seed = num(value)?,
            "n_slices" => self.n_slices = num(value)?,
            "slice_resolution" => self.slice_resolution = num(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn finish(&mut self, raw: &RawKeys) -> Result<()> {
        let dims = raw.dims.unwrap_or(DEFAULT_DIMS);
        if let Some(s) = &raw.train_phantoms {
            self.train.train_volumes = phantoms(s, dims);
        } else if raw.dims.is_some() {
            retarget(&mut self.train.train_volumes, dims);
        }
        if let Some(s) = &raw.val_phantoms {
            self.train.val_volumes = phantoms(s, dims);
        } else if raw.dims.is_some() {
            retarget(&mut self.train.val_volumes, dims);
        }
        if let Some(s) = &raw.test_phantoms {
            self.eval.test_volumes = phantoms(s, dims);
        } else if raw.dims.is_some() {
            retarget(&mut self.eval.test_volumes, dims);
        }
        if raw.channels.is_some() || raw.convs_per_block.is_some() {
            let per = raw.convs_per_block.unwrap_or(2);
            let channels = match &raw.channels {
                Some(c) => c.clone(),
                None => self.train.model.blocks.iter().map(|b| b[0]).collect(),
            };
            self.train.model.blocks = channels.iter().map(|&c| vec![c; per]).collect();
        }
        let method = self.train.method;
        self.train.members = raw
            .members
            .unwrap_or(if method == Method::De { 5 } else { 1 });
        self.train.model.dropout =
            raw.dropout
                .unwrap_or(if method == Method::Mcd { 0.1 } else { 0.0 });
        self.train.validate()
    }
}

fn retarget(sources: &mut [VolumeSource], dims: [usize; 3]) {
    for s in sources {
        if let VolumeSource::Phantom { dims: d, .. } = s {
            *d = dims;
        }
    }
}

#[derive(Default)]
struct RawKeys {
    members: Option<usize>,
    dropout: Option<f64>,
    dims: Option<[usize; 3]>,
    train_phantoms: Option<Vec<u64>>,
    val_phantoms: Option<Vec<u64>>,
    test_phantoms: Option<Vec<u64>>,
    channels: Option<Vec<usize>>,
    convs_per_block: Option<usize>,
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|x| num(x.trim())).collect()
}

fn array<const N: usize>(v: &str) -> std::result::Result<[usize; N], String> {
    let xs: Vec<usize> = list(v)?;
    xs.try_into()
        .map_err(|_| format!("expected {N} comma-separated values"))
}

fn pair(v: &str) -> std::result::Result<(f64, f64), String> {
    let xs: Vec<f64> = list(v)?;
    match xs[..] {
        [a, b] => Ok((a, b)),
        _ => Err("expected `lo, hi`".into()),
    }
}

fn paths(v: &str) -> Vec<VolumeSource> {
    v.split(',')
        .map(|p| VolumeSource::File(PathBuf::from(p.trim())))
        .collect()
}
