//! Reverse-mode autodiff over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! as leaves tagged with their slot in the owning model; [`Tape::backward`]
//! walks the tape once in reverse and returns one gradient per slot.

use statrs::function::gamma::{digamma, ln_gamma};

use super::kernels;
use crate::error::{Error, Result};
use crate::geom::{self, Dual, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Rotation parameterization of a pose head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationKind {
    Quaternion,
    AxisAngle,
    Euler,
    Matrix,
}

impl RotationKind {
    pub fn width(self) -> usize {
        match self {
            RotationKind::Quaternion => 4,
            RotationKind::AxisAngle | RotationKind::Euler => 3,
            RotationKind::Matrix => 9,
        }
    }
}

/// Width of the shared translation (3) + log-scale (1) block.
pub const SHARED_WIDTH: usize = 4;
const MAX_POSE_INPUTS: usize = 13;
type Jet = Dual<MAX_POSE_INPUTS>;

/// Canonical reference points in grid-normalized units.
pub const CANONICAL_UNIT: [[f64; 3]; 3] = [[0.0, 0.0, 0.0], [1.0, -1.0, 0.0], [-1.0, -1.0, 0.0]];

enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    Softplus(Var),
    LnGamma(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Cols {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Mean(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool {
        x: Var,
        out: usize,
    },
    Pose {
        rot: Var,
        shared: Var,
        jac: Vec<f64>,
        inputs: usize,
    },
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

/// Gradients for every parameter slot that was placed on the tape.
#[derive(Debug, Default)]
pub struct Gradients {
    pub slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&[f64]> {
        self.slots.get(slot).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<&'static str>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Name of the first op that produced a non-finite value, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, name: &'static str) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        if cfg!(debug_assertions)
            && self.non_finite.is_none()
            && value.iter().any(|v| !v.is_finite())
        {
            log::warn!("non-finite value produced by {name}");
            self.non_finite = Some(name);
        }
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var> {
        check_len(&value, shape)?;
        Ok(self.push(value, shape.to_vec(), Op::Leaf, "constant"))
    }

    pub fn param(&mut self, slot: usize, value: &[f64], shape: &[usize]) -> Result<Var> {
        check_len(value, shape)?;
        Ok(self.push(value.to_vec(), shape.to_vec(), Op::Param(slot), "param"))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(shape_err(name, &na.shape, &nb.shape));
        }
        let value = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = na.shape.clone();
        Ok(self.push(value, shape, op, name))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        self.push(value, shape, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, k: Vec<f64>) -> Result<Var> {
        let n = &self.nodes[a.0];
        if n.value.len() != k.len() {
            return Err(shape_err("mul_const", &n.shape, &[k.len()]));
        }
        let value = n.value.iter().zip(&k).map(|(x, m)| x * m).collect();
        let shape = n.shape.clone();
        Ok(self.push(value, shape, Op::MulConst(a, k), "mul_const"))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, "log", f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, "square", |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, "abs", f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, "softplus", softplus, Op::Softplus(a))
    }

    pub fn ln_gamma(&mut self, a: Var) -> Var {
        self.unary(a, "ln_gamma", ln_gamma, Op::LnGamma(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, "clamp", |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![s], vec![1], Op::SumAll(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        self.push(vec![s], vec![1], Op::MeanAll(a), "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        if n.value.len() != shape.iter().product::<usize>() {
            return Err(shape_err("reshape", &n.shape, shape));
        }
        let value = n.value.clone();
        Ok(self.push(value, shape.to_vec(), Op::Reshape(a), "reshape"))
    }

    /// Columns `start..start+len` of a `[B, K]` matrix.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = &self.nodes[x.0];
        let [b, k] = dims2(&n.shape, "cols")?;
        if start + len > k {
            return Err(Error::Shape(format!(
                "cols {start}..{} of width {k}",
                start + len
            )));
        }
        let mut value = Vec::with_capacity(b * len);
        for r in 0..b {
            value.extend_from_slice(&n.value[r * k + start..r * k + start + len]);
        }
        Ok(self.push(value, vec![b, len], Op::Cols { x, start }, "cols"))
    }

    /// Concatenates `[B, k_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let [b, _] = dims2(&self.nodes[first.0].shape, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let [pb, pk] = dims2(&self.nodes[p.0].shape, "concat_cols")?;
            if pb != b {
                return Err(shape_err(
                    "concat_cols",
                    &self.nodes[first.0].shape,
                    &self.nodes[p.0].shape,
                ));
            }
            widths.push(pk);
        }
        let k: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(b * k);
        for r in 0..b {
            for (p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.nodes[p.0].value[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(value, vec![b, k], Op::Concat(parts.to_vec()), "concat_cols"))
    }

    /// Elementwise arithmetic mean of equally shaped tensors.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("mean of zero tensors".into()))?;
        let shape = self.nodes[first.0].shape.clone();
        for p in parts {
            if self.nodes[p.0].shape != shape {
                return Err(shape_err("mean_of", &shape, &self.nodes[p.0].shape));
            }
        }
        let slices: Vec<&[f64]> = parts
            .iter()
            .map(|p| self.nodes[p.0].value.as_slice())
            .collect();
        let value = crate::ensemble::mean_elementwise(&slices);
        Ok(self.push(value, shape, Op::Mean(parts.to_vec()), "mean_of"))
    }

    /// `x · wᵀ + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [batch, fin] = dims2(&self.nodes[x.0].shape, "linear input")?;
        let [fout, win] = dims2(&self.nodes[w.0].shape, "linear weight")?;
        if win != fin || self.nodes[b.0].shape != [fout] {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.nodes[x.0].shape, self.nodes[w.0].shape, self.nodes[b.0].shape
            )));
        }
        let mut value = Vec::with_capacity(batch * fout);
        for _ in 0..batch {
            value.extend_from_slice(&self.nodes[b.0].value);
        }
        kernels::gemm(
            batch,
            fin,
            fout,
            &self.nodes[x.0].value,
            (fin, 1),
            &self.nodes[w.0].value,
            (1, fin),
            &mut value,
            1.0,
        );
        Ok(self.push(value, vec![batch, fout], Op::Linear { x, w, b }, "linear"))
    }

    /// 3x3 convolution, stride 1, zero padding 1. `x: [B, C, H, W]`,
    /// `w: [O, C, 3, 3]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != 3 || ws[3] != 3 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if self.nodes[b.0].shape != [ws[0]] {
            return Err(shape_err("conv2d bias", &[ws[0]], &self.nodes[b.0].shape));
        }
        let (batch, cin, h, wd, cout) = (xs[0], xs[1], xs[2], xs[3], ws[0]);
        let plane = h * wd;
        let k = cin * 9;
        let mut cols = vec![0.0; batch * k * plane];
        let mut value = vec![0.0; batch * cout * plane];
        let bias = &self.nodes[b.0].value;
        for n in 0..batch {
            let img = &self.nodes[x.0].value[n * cin * plane..(n + 1) * cin * plane];
            let col = &mut cols[n * k * plane..(n + 1) * k * plane];
            kernels::im2col3(img, cin, h, wd, col);
            let out = &mut value[n * cout * plane..(n + 1) * cout * plane];
            for (o, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.fill(bias[o]);
            }
            kernels::gemm(
                cout,
                k,
                plane,
                &self.nodes[w.0].value,
                (k, 1),
                col,
                (plane, 1),
                out,
                1.0,
            );
        }
        Ok(self.push(
            value,
            vec![batch, cout, h, wd],
            Op::Conv2d { x, w, b, cols },
            "conv2d",
        ))
    }

    /// Per-sample, per-channel normalization over the spatial plane.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::Shape(format!(
                "instance_norm expects 4D input, got {xs:?}"
            )));
        }
        let plane = xs[2] * xs[3];
        let src = &self.nodes[x.0].value;
        let mut value = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(xs[0] * xs[1]);
        for (chunk, out) in src.chunks(plane).zip(value.chunks_mut(plane)) {
            let inv = kernels::normalize_plane(chunk, out);
            inv_std.push(inv);
        }
        Ok(self.push(value, xs, Op::InstanceNorm { x, inv_std }, "instance_norm"))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::Shape(format!(
                "maxpool2 needs [B,C,H>=2,W>=2], got {xs:?}"
            )));
        }
        let (oh, ow) = (xs[2] / 2, xs[3] / 2);
        let (value, argmax) =
            kernels::maxpool2(&self.nodes[x.0].value, xs[0] * xs[1], xs[2], xs[3]);
        Ok(self.push(
            value,
            vec![xs[0], xs[1], oh, ow],
            Op::MaxPool2 { x, argmax },
            "maxpool2",
        ))
    }

    /// Average pooling onto an `out × out` grid with adaptive bins.
    pub fn adaptive_avg_pool(&mut self, x: Var, out: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 || out == 0 || xs[2] < out || xs[3] < out {
            return Err(Error::Shape(format!(
                "adaptive_avg_pool to {out}x{out} from {xs:?}"
            )));
        }
        let value =
            kernels::adaptive_avg_pool(&self.nodes[x.0].value, xs[0] * xs[1], xs[2], xs[3], out);
        Ok(self.push(
            value,
            vec![xs[0], xs[1], out, out],
            Op::AdaptiveAvgPool { x, out },
            "adaptive_avg_pool",
        ))
    }

    /// Maps raw rotation parameters `[B, k]` plus the shared translation and
    /// log-scale `[B, 4]` to the three transformed reference points `[B, 9]`
    /// in grid-normalized units. Degenerate quaternion or matrix outputs
    /// fall back to the identity rotation.
    pub fn pose(&mut self, kind: RotationKind, rot: Var, shared: Var) -> Result<Var> {
        let k = kind.width();
        let [batch, rk] = dims2(&self.nodes[rot.0].shape, "pose rotation")?;
        let [sb, sk] = dims2(&self.nodes[shared.0].shape, "pose shared")?;
        if rk != k || sb != batch || sk != SHARED_WIDTH {
            return Err(Error::Shape(format!(
                "pose {kind:?}: rotation {:?}, shared {:?}",
                self.nodes[rot.0].shape, self.nodes[shared.0].shape
            )));
        }
        let inputs = k + SHARED_WIDTH;
        let mut value = Vec::with_capacity(batch * 9);
        let mut jac = Vec::with_capacity(batch * 9 * inputs);
        for r in 0..batch {
            let rv = &self.nodes[rot.0].value[r * k..(r + 1) * k];
            let sv = &self.nodes[shared.0].value[r * SHARED_WIDTH..(r + 1) * SHARED_WIDTH];
            let out = pose_jet(kind, rv, sv);
            for o in &out {
                value.push(o.re);
            }
            for o in &out {
                jac.extend_from_slice(&o.eps[..inputs]);
            }
        }
        Ok(self.push(
            value,
            vec![batch, 9],
            Op::Pose {
                rot,
                shared,
                jac,
                inputs,
            },
            "pose",
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(slot) => {
                    if out.slots.len() <= *slot {
                        out.slots.resize(*slot + 1, None);
                    }
                    match &mut out.slots[*slot] {
                        Some(acc) => axpy(acc, &g, 1.0),
                        empty => *empty = Some(g),
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Div(a, b) => {
                    let vb = &self.nodes[b.0].value;
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g / y).collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .zip(vb)
                        .map(|((g, q), y)| -g * q / y)
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads, *a, &g),
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::MulConst(a, k) => {
                    let ga: Vec<f64> = g.iter().zip(k).map(|(v, m)| v * m).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = g.iter().zip(&node.value).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Log(a) => self.elementwise_back(&mut grads, *a, &g, |g, x| g / x),
                Op::Square(a) => self.elementwise_back(&mut grads, *a, &g, |g, x| 2.0 * g * x),
                Op::Abs(a) => self.elementwise_back(&mut grads, *a, &g, |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }),
                Op::Relu(a) => {
                    self.elementwise_back(&mut grads, *a, &g, |g, x| if x > 0.0 { g } else { 0.0 })
                }
                Op::Softplus(a) => self.elementwise_back(&mut grads, *a, &g, |g, x| g * sigmoid(x)),
                Op::LnGamma(a) => self.elementwise_back(&mut grads, *a, &g, |g, x| g * digamma(x)),
                Op::Clamp(a, lo, hi) => self.elementwise_back(&mut grads, *a, &g, |g, x| {
                    if x > *lo && x < *hi {
                        g
                    } else {
                        0.0
                    }
                }),
                Op::SumAll(a) => {
                    let n = self.nodes[a.0].value.len();
                    accumulate(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].value.len();
                    accumulate(&mut grads, *a, &vec![g[0] / n as f64; n]);
                }
                Op::Cols { x, start } => {
                    let [b, k] = dims2(&self.nodes[x.0].shape, "cols")?;
                    let len = node.shape[1];
                    let mut gx = vec![0.0; b * k];
                    for r in 0..b {
                        gx[r * k + start..r * k + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Concat(parts) => {
                    let (b, k) = (node.shape[0], node.shape[1]);
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].shape[1];
                        let mut gp = Vec::with_capacity(b * w);
                        for r in 0..b {
                            gp.extend_from_slice(&g[r * k + offset..r * k + offset + w]);
                        }
                        accumulate(&mut grads, *p, &gp);
                        offset += w;
                    }
                }
                Op::Mean(parts) => {
                    let inv = 1.0 / parts.len() as f64;
                    let gp: Vec<f64> = g.iter().map(|v| v * inv).collect();
                    for p in parts {
                        accumulate(&mut grads, *p, &gp);
                    }
                }
                Op::Linear { x, w, b } => {
                    let [batch, fin] = dims2(&self.nodes[x.0].shape, "linear")?;
                    let fout = node.shape[1];
                    let mut gx = vec![0.0; batch * fin];
                    kernels::gemm(
                        batch,
                        fout,
                        fin,
                        &g,
                        (fout, 1),
                        &self.nodes[w.0].value,
                        (fin, 1),
                        &mut gx,
                        0.0,
                    );
                    let mut gw = vec![0.0; fout * fin];
                    kernels::gemm(
                        fout,
                        batch,
                        fin,
                        &g,
                        (1, fout),
                        &self.nodes[x.0].value,
                        (fin, 1),
                        &mut gw,
                        0.0,
                    );
                    let mut gb = vec![0.0; fout];
                    for row in g.chunks(fout) {
                        axpy(&mut gb, row, 1.0);
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *w, &gw);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Conv2d { x, w, b, cols } => {
                    let xs = &self.nodes[x.0].shape;
                    let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let cout = node.shape[1];
                    let plane = h * wd;
                    let k = cin * 9;
                    let wv = &self.nodes[w.0].value;
                    let mut gw = vec![0.0; cout * k];
                    let mut gb = vec![0.0; cout];
                    let mut gx = vec![0.0; batch * cin * plane];
                    let mut gcol = vec![0.0; k * plane];
                    for n in 0..batch {
                        let go = &g[n * cout * plane..(n + 1) * cout * plane];
                        let col = &cols[n * k * plane..(n + 1) * k * plane];
                        kernels::gemm(
                            cout,
                            plane,
                            k,
                            go,
                            (plane, 1),
                            col,
                            (1, plane),
                            &mut gw,
                            1.0,
                        );
                        for (o, chunk) in go.chunks(plane).enumerate() {
                            gb[o] += chunk.iter().sum::<f64>();
                        }
                        kernels::gemm(k, cout, plane, wv, (1, k), go, (plane, 1), &mut gcol, 0.0);
                        kernels::col2im3(
                            &gcol,
                            cin,
                            h,
                            wd,
                            &mut gx[n * cin * plane..(n + 1) * cin * plane],
                        );
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *w, &gw);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::InstanceNorm { x, inv_std } => {
                    let plane = node.shape[2] * node.shape[3];
                    let mut gx = vec![0.0; g.len()];
                    for (((gy, y), out), inv) in g
                        .chunks(plane)
                        .zip(node.value.chunks(plane))
                        .zip(gx.chunks_mut(plane))
                        .zip(inv_std)
                    {
                        kernels::normalize_plane_backward(gy, y, *inv, out);
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                    for (gv, &idx) in g.iter().zip(argmax) {
                        gx[idx] += gv;
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::AdaptiveAvgPool { x, out } => {
                    let xs = &self.nodes[x.0].shape;
                    let gx =
                        kernels::adaptive_avg_pool_backward(&g, xs[0] * xs[1], xs[2], xs[3], *out);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Pose {
                    rot,
                    shared,
                    jac,
                    inputs,
                } => {
                    let k = inputs - SHARED_WIDTH;
                    let batch = node.shape[0];
                    let mut grot = vec![0.0; batch * k];
                    let mut gshared = vec![0.0; batch * SHARED_WIDTH];
                    for r in 0..batch {
                        for o in 0..9 {
                            let go = g[r * 9 + o];
                            if go == 0.0 {
                                continue;
                            }
                            let row = &jac[(r * 9 + o) * inputs..(r * 9 + o + 1) * inputs];
                            for j in 0..k {
                                grot[r * k + j] += go * row[j];
                            }
                            for j in 0..SHARED_WIDTH {
                                gshared[r * SHARED_WIDTH + j] += go * row[k + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *rot, &grot);
                    accumulate(&mut grads, *shared, &gshared);
                }
            }
        }
        Ok(out)
    }

    fn elementwise_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        f: impl Fn(f64, f64) -> f64,
    ) {
        let ga: Vec<f64> = g
            .iter()
            .zip(&self.nodes[a.0].value)
            .map(|(&g, &x)| f(g, x))
            .collect();
        accumulate(grads, a, &ga);
    }
}

/// Forward-mode evaluation of one pose row with its Jacobian.
fn pose_jet(kind: RotationKind, rot: &[f64], shared: &[f64]) -> [Jet; 9] {
    let k = kind.width();
    let r: Vec<Jet> = rot
        .iter()
        .enumerate()
        .map(|(i, &v)| Jet::variable(v, i))
        .collect();
    let t = [
        Jet::variable(shared[0], k),
        Jet::variable(shared[1], k + 1),
        Jet::variable(shared[2], k + 2),
    ];
    let log_s = Jet::variable(shared[3], k + 3);
    let s = Jet {
        re: log_s.re.exp(),
        eps: log_s.eps.map(|e| e * log_s.re.exp()),
    };
    let identity = [
        [Jet::one(), Jet::zero(), Jet::zero()],
        [Jet::zero(), Jet::one(), Jet::zero()],
        [Jet::zero(), Jet::zero(), Jet::one()],
    ];
    let m = match kind {
        RotationKind::Quaternion => {
            geom::quat_to_mat([r[0], r[1], r[2], r[3]]).unwrap_or_else(|| {
                log::warn!("quaternion head produced a zero vector, using identity");
                identity
            })
        }
        RotationKind::AxisAngle => geom::axis_angle_to_mat([r[0], r[1], r[2]]),
        RotationKind::Euler => geom::euler_to_mat([r[0], r[1], r[2]]),
        RotationKind::Matrix => {
            let raw: [Jet; 9] = std::array::from_fn(|i| r[i]);
            geom::gram_schmidt(&raw).unwrap_or_else(|| {
                log::warn!("matrix head produced degenerate columns, using identity");
                identity
            })
        }
    };
    geom::transform_points(&m, s, t, &CANONICAL_UNIT)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_len(value: &[f64], shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if value.len() != n {
        return Err(Error::Shape(format!(
            "{} values for shape {shape:?}",
            value.len()
        )));
    }
    Ok(())
}

fn dims2(shape: &[usize], what: &str) -> Result<[usize; 2]> {
    match shape {
        [a, b] => Ok([*a, *b]),
        _ => Err(Error::Shape(format!(
            "{what} expects a 2D tensor, got {shape:?}"
        ))),
    }
}

fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    for (y, v) in acc.iter_mut().zip(x) {
        *y += a * v;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => axpy(acc, g, 1.0),
        empty => *empty = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    /// Central-difference check of `build` wrt every entry of every input.
    fn gradcheck(inputs: Vec<(Vec<f64>, Vec<usize>)>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |vals: &[(Vec<f64>, Vec<usize>)]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals
                .iter()
                .enumerate()
                .map(|(i, (v, s))| t.param(i, v, s).unwrap())
                .collect();
            let out = build(&mut t, &vars);
            (t.scalar(out), t.backward(out).unwrap())
        };
        let (_, grads) = eval(&inputs);
        let eps = 1e-5;
        for (slot, (vals, _)) in inputs.iter().enumerate() {
            for j in 0..vals.len() {
                let mut plus = inputs.clone();
                plus[slot].0[j] += eps;
                let mut minus = inputs.clone();
                minus[slot].0[j] -= eps;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let an = grads.get(slot).map_or(0.0, |g| g[j]);
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "slot {slot} index {j}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = t.constant(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        let y = t.relu(x);
        assert_eq!(t.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn instance_norm_of_constant_map_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(vec![3.5; 2 * 16], &[1, 2, 4, 4]).unwrap();
        let y = t.instance_norm(x).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_with_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random(&mut rng, 2 * 5 * 6);
        let mut kernel = vec![0.0; 2 * 2 * 9];
        kernel[4] = 1.0; // out 0 <- in 0 center tap
        kernel[3 * 9 + 4] = 1.0; // out 1 <- in 1 center tap
        let mut t = Tape::new();
        let x = t.constant(img.clone(), &[1, 2, 5, 6]).unwrap();
        let w = t.constant(kernel, &[2, 2, 3, 3]).unwrap();
        let b = t.constant(vec![0.0, 0.0], &[2]).unwrap();
        let y = t.conv2d(x, w, b).unwrap();
        assert_eq!(t.value(y), img.as_slice());
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cin, cout, h, w) = (2, 3, 4, 5);
        let img = random(&mut rng, cin * h * w);
        let ker = random(&mut rng, cout * cin * 9);
        let bias = random(&mut rng, cout);
        let mut t = Tape::new();
        let x = t.constant(img.clone(), &[1, cin, h, w]).unwrap();
        let wv = t.constant(ker.clone(), &[cout, cin, 3, 3]).unwrap();
        let b = t.constant(bias.clone(), &[cout]).unwrap();
        let y = t.conv2d(x, wv, b).unwrap();
        for o in 0..cout {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = bias[o];
                    for i in 0..cin {
                        for dr in 0..3 {
                            for dc in 0..3 {
                                let (rr, cc) = (r as isize + dr - 1, c as isize + dc - 1);
                                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                    continue;
                                }
                                acc += ker[((o * cin + i) * 3 + dr as usize) * 3 + dc as usize]
                                    * img[(i * h + rr as usize) * w + cc as usize];
                            }
                        }
                    }
                    let got = t.value(y)[(o * h + r) * w + c];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let w = t.param(0, &[1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = t.sum(w);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(0).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_squared_norm_is_identity() {
        let vals = [0.5, -1.5, 2.0];
        let mut t = Tape::new();
        let w = t.param(0, &vals, &[3]).unwrap();
        let sq = t.square(w);
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(0).unwrap(), &vals);
    }

    #[test]
    fn disconnected_parameter_gets_no_gradient() {
        let mut t = Tape::new();
        let a = t.param(0, &[1.0], &[1]).unwrap();
        let _b = t.param(1, &[2.0], &[1]).unwrap();
        let loss = t.sum(a);
        let g = t.backward(loss).unwrap();
        assert!(g.get(1).is_none());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 3], &[3]).unwrap();
        let b = t.constant(vec![0.0; 4], &[4]).unwrap();
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn gradcheck_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 6);
        let b: Vec<f64> = random(&mut rng, 6).iter().map(|v| v + 2.5).collect();
        gradcheck(
            vec![(a.clone(), vec![2, 3]), (b.clone(), vec![2, 3])],
            |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let d = t.sub(s, v[0]).unwrap();
                let m = t.mul(d, v[0]).unwrap();
                let q = t.div(m, v[1]).unwrap();
                let e = t.exp(q);
                let l = t.log(v[1]);
                let sq = t.square(l);
                let ab = t.abs(v[0]);
                let sp = t.softplus(ab);
                let lg = t.ln_gamma(v[1]);
                let cl = t.clamp(v[0], -0.5, 0.5);
                let c = t.add_scalar(cl, 3.0);
                let c = t.scale(c, 0.7);
                let mc = t.mul_const(c, vec![1.0, 0.0, 2.0, 1.0, 0.5, 3.0]).unwrap();
                let parts = [e, sq, sp, lg, mc];
                let avg = t.mean_of(&parts).unwrap();
                let total = t.sum(avg);
                let m2 = t.mean(e);
                t.add(total, m2).unwrap()
            },
        );
    }

    #[test]
    fn gradcheck_linear_and_cols() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        gradcheck(
            vec![
                (random(&mut rng, 3 * 4), vec![3, 4]),
                (random(&mut rng, 5 * 4), vec![5, 4]),
                (random(&mut rng, 5), vec![5]),
            ],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2]).unwrap();
                let c = t.cols(y, 1, 3).unwrap();
                let c = t.concat_cols(&[c, v[0], c]).unwrap();
                let r = t.relu(c);
                let sq = t.square(r);
                t.sum(sq)
            },
        );
    }

    #[test]
    fn gradcheck_conv_norm_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        gradcheck(
            vec![
                (random(&mut rng, 2 * 2 * 6 * 6), vec![2, 2, 6, 6]),
                (random(&mut rng, 3 * 2 * 9), vec![3, 2, 3, 3]),
                (random(&mut rng, 3), vec![3]),
                (random(&mut rng, 2 * 3 * 2 * 2), vec![2, 3 * 2 * 2]),
            ],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2]).unwrap();
                let n = t.instance_norm(y).unwrap();
                let p = t.maxpool2(n).unwrap();
                let a = t.adaptive_avg_pool(p, 2).unwrap();
                let f = t.reshape(a, &[2, 12]).unwrap();
                let m = t.mul(f, v[3]).unwrap();
                t.sum(m)
            },
        );
    }

    #[test]
    fn gradcheck_pose_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [
            RotationKind::Quaternion,
            RotationKind::AxisAngle,
            RotationKind::Euler,
            RotationKind::Matrix,
        ] {
            let mut rot = random(&mut rng, 2 * kind.width());
            if kind == RotationKind::Matrix {
                for r in 0..2 {
                    for d in 0..3 {
                        rot[r * 9 + 4 * d] += 1.5;
                    }
                }
            }
            let shared = random(&mut rng, 2 * SHARED_WIDTH);
            let weights = random(&mut rng, 18);
            gradcheck(
                vec![
                    (rot, vec![2, kind.width()]),
                    (shared, vec![2, SHARED_WIDTH]),
                ],
                |t, v| {
                    let p = t.pose(kind, v[0], v[1]).unwrap();
                    let w = t.constant(weights.clone(), &[2, 9]).unwrap();
                    let m = t.mul(p, w).unwrap();
                    t.sum(m)
                },
            );
        }
    }

    #[test]
    fn zero_quaternion_head_falls_back_to_identity() {
        let mut t = Tape::new();
        let rot = t.constant(vec![0.0; 4], &[1, 4]).unwrap();
        let shared = t.constant(vec![0.0; 4], &[1, 4]).unwrap();
        let p = t.pose(RotationKind::Quaternion, rot, shared).unwrap();
        assert_eq!(
            t.value(p),
            &[0.0, 0.0, 0.0, 1.0, -1.0, 0.0, -1.0, -1.0, 0.0]
        );
        let rot9 = t.constant(vec![0.0; 9], &[1, 9]).unwrap();
        let p9 = t.pose(RotationKind::Matrix, rot9, shared).unwrap();
        assert_eq!(t.value(p9), t.value(p));
    }
}
