use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var, CANONICAL_UNIT};
use super::{HeadKind, Method, ModelConfig};
use crate::ensemble::{fuse_qaerts, HeadPrediction, Prediction};
use crate::error::{Error, Result};
use crate::geom::PlanePose;
use crate::losses;
use crate::volume::Image;

/// Log-variance outputs are clamped to this range before `exp`.
pub const LOG_VAR_RANGE: (f64, f64) = (-10.0, 10.0);
/// Evidential head width: `ν`, `α`, `β` for each of the 9 coordinates.
pub const EVIDENCE_WIDTH: usize = 27;
const INFERENCE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// `backbone` or the head the tensor belongs to.
    pub group: String,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type Pair = (usize, usize);

/// Slot indices of every weight/bias pair.
#[derive(Clone, Debug, Default)]
struct Slots {
    convs: Vec<Vec<Pair>>,
    fc1: Pair,
    fc2: Pair,
    heads: Vec<(HeadKind, Pair)>,
    translation: Option<Pair>,
    log_scale: Option<Pair>,
    variances: Vec<Pair>,
    evidence: Option<Pair>,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn layer(&mut self, name: &str, group: &str, weight: Vec<usize>, out: usize) -> Pair {
        let w = self.specs.len();
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: weight,
            group: group.to_string(),
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![out],
            group: group.to_string(),
        });
        (w, w + 1)
    }
}

fn layout(method: Method, cfg: &ModelConfig) -> (Vec<ParamSpec>, Slots) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let mut slots = Slots::default();
    let mut cin = 1;
    for (i, block) in cfg.blocks.iter().enumerate() {
        let mut pairs = Vec::new();
        for (j, &cout) in block.iter().enumerate() {
            pairs.push(b.layer(
                &format!("conv{}_{}", i + 1, j + 1),
                "backbone",
                vec![cout, cin, 3, 3],
                cout,
            ));
            cin = cout;
        }
        slots.convs.push(pairs);
    }
    let flat = cin * cfg.pool * cfg.pool;
    let d = cfg.embedding_dim;
    slots.fc1 = b.layer("fc1", "backbone", vec![cfg.fc_hidden, flat], cfg.fc_hidden);
    slots.fc2 = b.layer("fc2", "backbone", vec![d, cfg.fc_hidden], d);
    for &kind in method.heads() {
        let w = kind.width();
        slots.heads.push((
            kind,
            b.layer(&format!("head.{}", kind.name()), kind.name(), vec![w, d], w),
        ));
    }
    if method == Method::Qaerts {
        slots.translation = Some(b.layer("head.translation", "translation", vec![3, d], 3));
        slots.log_scale = Some(b.layer("head.log_scale", "log_scale", vec![1, d], 1));
    }
    if method.has_variance_heads() {
        for &kind in method.heads() {
            let group = format!("variance.{}", kind.name());
            slots
                .variances
                .push(b.layer(&format!("head.{group}"), &group, vec![9, d], 9));
        }
    }
    if method.is_evidential() {
        slots.evidence = Some(b.layer(
            "head.evidence",
            "evidence",
            vec![EVIDENCE_WIDTH, d],
            EVIDENCE_WIDTH,
        ));
    }
    (b.specs, slots)
}

/// Trainable-scalar counts for one method/config pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Scalars in one network.
    pub per_model: usize,
    /// Networks trained (ensemble size).
    pub members: usize,
    /// `per_model · members`.
    pub total: usize,
    pub backbone: usize,
    /// Per-group breakdown in declaration order, backbone first.
    pub groups: Vec<(String, usize)>,
    /// Backbone plus a single direct head: the plain regression network.
    pub single_direct: usize,
    /// `per_model - single_direct`.
    pub overhead: usize,
}

impl ParamCount {
    pub fn overhead_fraction(&self) -> f64 {
        self.overhead as f64 / self.per_model as f64
    }
}

pub fn count_params(method: Method, cfg: &ModelConfig, members: usize) -> ParamCount {
    let (specs, _) = layout(method, cfg);
    let mut groups: Vec<(String, usize)> = Vec::new();
    for s in &specs {
        match groups.iter_mut().find(|(g, _)| *g == s.group) {
            Some((_, n)) => *n += s.len(),
            None => groups.push((s.group.clone(), s.len())),
        }
    }
    let per_model: usize = specs.iter().map(ParamSpec::len).sum();
    let backbone = groups
        .iter()
        .find(|(g, _)| g == "backbone")
        .map_or(0, |g| g.1);
    let single_direct = backbone + 9 * (cfg.embedding_dim + 1);
    ParamCount {
        per_model,
        members,
        total: per_model * members,
        backbone,
        groups,
        single_direct,
        overhead: per_model.saturating_sub(single_direct),
    }
}

/// Outputs of one pose head on the tape, in grid-normalized units.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub kind: HeadKind,
    /// `[B, 9]` reference points divided by the grid half-extent.
    pub pose: Var,
    /// `[B, 9]` positive variances, when the method has variance heads.
    pub var: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, D]`.
    pub embedding: Var,
    pub heads: Vec<HeadOutput>,
    /// `[B, 27]` raw evidential outputs (EDL only).
    pub evidence: Option<Var>,
}

/// A network instance: method, config and parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    method: Method,
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    slots: Slots,
    params: Vec<Vec<f64>>,
}

impl Model {
    /// Seeded uniform fan-in initialization (`±1/√fan_in` for weights and
    /// biases). Head biases start at a valid pose: the direct head at the
    /// canonical points, the quaternion at `(1,0,0,0)`, the raw matrix at `I`.
    pub fn new(method: Method, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, slots) = layout(method, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        for pair in specs.chunks(2) {
            let fan_in: usize = pair[0].shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            for s in pair {
                params.push(
                    (0..s.len())
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                );
            }
        }
        let mut model = Self {
            method,
            config,
            specs,
            slots,
            params,
        };
        for (kind, (_, b)) in model.slots.heads.clone() {
            let bias = &mut model.params[b];
            match kind {
                HeadKind::Direct => {
                    for (k, p) in CANONICAL_UNIT.iter().enumerate() {
                        bias[3 * k..3 * k + 3].copy_from_slice(p);
                    }
                }
                HeadKind::Quaternion => bias.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]),
                HeadKind::Matrix => {
                    bias.copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
                }
                HeadKind::AxisAngle | HeadKind::Euler => {}
            }
        }
        Ok(model)
    }

    /// Rebuilds a model from stored parameter values.
    pub fn from_params(method: Method, config: ModelConfig, params: Vec<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        let (specs, slots) = layout(method, &config);
        if params.len() != specs.len() || params.iter().zip(&specs).any(|(p, s)| p.len() != s.len())
        {
            return Err(Error::Shape(format!(
                "parameter tensors do not match the {method} layout ({} tensors expected)",
                specs.len()
            )));
        }
        Ok(Self {
            method,
            config,
            specs,
            slots,
            params,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Parameters as little-endian `f32`, in declaration order.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.num_params());
        for p in &self.params {
            for &v in p {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_blob(method: Method, config: ModelConfig, bytes: &[u8]) -> Result<Self> {
        config.validate()?;
        let (specs, _) = layout(method, &config);
        let n: usize = specs.iter().map(ParamSpec::len).sum();
        if bytes.len() != 4 * n {
            return Err(Error::Shape(format!(
                "parameter blob has {} bytes, {method} model needs {}",
                bytes.len(),
                4 * n
            )));
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let params = specs
            .iter()
            .map(|s| values.by_ref().take(s.len()).collect())
            .collect();
        Self::from_params(method, config, params)
    }

    fn leaf(&self, tape: &mut Tape, slot: usize) -> Result<Var> {
        tape.param(slot, &self.params[slot], &self.specs[slot].shape)
    }

    fn linear(&self, tape: &mut Tape, x: Var, (w, b): Pair) -> Result<Var> {
        let w = self.leaf(tape, w)?;
        let b = self.leaf(tape, b)?;
        tape.linear(x, w, b)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        let rate = self.config.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let mask = (0..tape.value(x).len())
                    .map(|_| {
                        if rng.random::<f64>() < rate {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect();
                tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Backbone: images to the `[B, D]` embedding. Dropout is applied after
    /// each fully connected layer only when an RNG is supplied.
    pub fn embed_on(
        &self,
        tape: &mut Tape,
        images: &[&Image],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let s = self.config.input_size;
        if images.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.height != s || img.width != s {
                return Err(Error::Shape(format!(
                    "image {}x{} does not match model input {s}x{s}",
                    img.height, img.width
                )));
            }
            data.extend_from_slice(&img.data);
        }
        let batch = images.len();
        let mut x = tape.constant(data, &[batch, 1, s, s])?;
        for block in &self.slots.convs {
            for &(w, b) in block {
                let wv = self.leaf(tape, w)?;
                let bv = self.leaf(tape, b)?;
                x = tape.conv2d(x, wv, bv)?;
                x = tape.instance_norm(x)?;
                x = tape.relu(x);
            }
            x = tape.maxpool2(x)?;
        }
        x = tape.adaptive_avg_pool(x, self.config.pool)?;
        let flat = tape.shape(x)[1..].iter().product::<usize>();
        x = tape.reshape(x, &[batch, flat])?;
        x = self.linear(tape, x, self.slots.fc1)?;
        x = tape.relu(x);
        x = self.dropout(tape, x, &mut dropout)?;
        x = self.linear(tape, x, self.slots.fc2)?;
        x = tape.relu(x);
        self.dropout(tape, x, &mut dropout)
    }

    /// Heads on a `[B, D]` embedding.
    pub fn heads_on(&self, tape: &mut Tape, z: Var) -> Result<Vec<HeadOutput>> {
        let shared = match (self.slots.translation, self.slots.log_scale) {
            (Some(t), Some(s)) => {
                let t = self.linear(tape, z, t)?;
                let s = self.linear(tape, z, s)?;
                Some((t, s))
            }
            _ => None,
        };
        let shared = match shared {
            Some((t, s)) => Some(tape.concat_cols(&[t, s])?),
            None => None,
        };
        let mut out = Vec::with_capacity(self.slots.heads.len());
        for (i, &(kind, pair)) in self.slots.heads.iter().enumerate() {
            let raw = self.linear(tape, z, pair)?;
            let pose = match (kind.rotation(), shared) {
                (None, _) => raw,
                (Some(rk), Some(sh)) => tape.pose(rk, raw, sh)?,
                (Some(_), None) => {
                    return Err(Error::Head {
                        head: kind.name(),
                        source: Box::new(Error::InvalidConfig(
                            "rotation head without shared t/s".into(),
                        )),
                    })
                }
            };
            let var = match self.slots.variances.get(i) {
                Some(&vp) => {
                    let lv = self.linear(tape, z, vp)?;
                    let lv = tape.clamp(lv, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
                    Some(tape.exp(lv))
                }
                None => None,
            };
            out.push(HeadOutput { kind, pose, var });
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        images: &[&Image],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let embedding = self.embed_on(tape, images, dropout)?;
        self.forward_from_embedding(tape, embedding)
    }

    pub fn forward_from_embedding(&self, tape: &mut Tape, embedding: Var) -> Result<Forward> {
        let heads = self.heads_on(tape, embedding)?;
        let evidence = match self.slots.evidence {
            Some(pair) => Some(self.linear(tape, embedding, pair)?),
            None => None,
        };
        Ok(Forward {
            embedding,
            heads,
            evidence,
        })
    }

    /// Scalar training loss of the method for targets in voxel units.
    pub fn loss(&self, tape: &mut Tape, fwd: &Forward, targets: &[PlanePose]) -> Result<Var> {
        self.loss_with(tape, fwd, targets, false)
    }

    /// As [`Model::loss`], optionally scoring under unit variance.
    pub fn loss_with(
        &self,
        tape: &mut Tape,
        fwd: &Forward,
        targets: &[PlanePose],
        unit_variance: bool,
    ) -> Result<Var> {
        let h = self.config.half_extent;
        let data: Vec<f64> = targets
            .iter()
            .flat_map(|p| p.to_array().map(|v| v / h))
            .collect();
        let target = tape.constant(data, &[targets.len(), 9])?;
        losses::method_loss_with(self.method, tape, fwd, target, unit_variance)
    }

    /// Embeddings `[B][D]` without dropout.
    pub fn embed(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::new();
            let z = self.embed_on(&mut tape, chunk, None)?;
            let d = tape.shape(z)[1];
            out.extend(tape.value(z).chunks(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Deterministic single-pass inference.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<Prediction>> {
        self.predict_with(images, None)
    }

    /// Single-pass inference; dropout is active when an RNG is supplied.
    pub fn predict_with(
        &self,
        images: &[&Image],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::new();
            let fwd = self.forward(&mut tape, chunk, dropout.as_deref_mut())?;
            out.extend(self.decode(&tape, &fwd)?);
        }
        Ok(out)
    }

    /// Inference from precomputed embeddings.
    pub fn predict_from_embedding(&self, z: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        if z.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.config.embedding_dim;
        if z.iter().any(|row| row.len() != d) {
            return Err(Error::Shape(format!("embedding rows must have length {d}")));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.concat(), &[z.len(), d])?;
        let fwd = self.forward_from_embedding(&mut tape, zv)?;
        self.decode(&tape, &fwd)
    }

    fn decode(&self, tape: &Tape, fwd: &Forward) -> Result<Vec<Prediction>> {
        let h = self.config.half_extent;
        let batch = tape.shape(fwd.embedding)[0];
        let mut out = Vec::with_capacity(batch);
        for r in 0..batch {
            let mut heads = Vec::with_capacity(fwd.heads.len());
            for ho in &fwd.heads {
                let p: [f64; 9] = std::array::from_fn(|i| tape.value(ho.pose)[r * 9 + i] * h);
                let variance = ho
                    .var
                    .map(|v| std::array::from_fn(|i| tape.value(v)[r * 9 + i] * h * h));
                let finite = p
                    .iter()
                    .chain(variance.iter().flatten())
                    .all(|v| v.is_finite());
                if !finite {
                    return Err(Error::Head {
                        head: ho.kind.name(),
                        source: Box::new(Error::Numeric("non-finite head output".into())),
                    });
                }
                heads.push(HeadPrediction {
                    kind: ho.kind,
                    pose: PlanePose::from_array(&p),
                    variance,
                });
            }
            let pred = match self.method {
                Method::Qaerts => {
                    let fused = fuse_qaerts(&heads)?;
                    Prediction {
                        mean: fused.fused_mean,
                        variance: Some(fused.fused_var),
                        heads,
                    }
                }
                Method::Edl => {
                    let ev = fwd.evidence.expect("edl model has an evidence head");
                    let row = &tape.value(ev)[r * EVIDENCE_WIDTH..(r + 1) * EVIDENCE_WIDTH];
                    let gamma = std::array::from_fn(|i| tape.value(fwd.heads[0].pose)[r * 9 + i]);
                    let nig = losses::NigParams::from_raw(gamma, row);
                    let variance = std::array::from_fn(|i| nig.predictive_variance(i) * h * h);
                    Prediction {
                        mean: heads[0].pose,
                        variance: Some(variance),
                        heads,
                    }
                }
                _ => Prediction {
                    mean: heads[0].pose,
                    variance: heads[0].variance,
                    heads,
                },
            };
            out.push(pred);
        }
        Ok(out)
    }
}
