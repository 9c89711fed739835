//! A small three-headed policy trained with hand-written reverse-mode gradients.
//!
//! All weights live in one flat `Vec<f64>`; [`Layout`] names the blocks. The
//! trunk maps `[obs, task one-hot, subtask one-hot, embodiment flag]` to an
//! embedding `z`. On top of it sit a flow-matching action head, a per-position
//! token head and a subtask head. The subtask head reads `z_hl`, the trunk
//! output with the subtask input zeroed, so it never sees its own label.
//!
//! Flow convention: `a_τ = τ·a + (1−τ)·ε`, velocity target `a − ε`, sampling by
//! Euler integration from `τ = 0` to `τ = 1`. Actions are divided by
//! `action_scale` before entering the flow head and multiplied back on output.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::episode::write_atomic;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite at step {step}")]
    DivergedLoss { step: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub n_tasks: usize,
    pub n_subtasks: usize,
    pub horizon: usize,
    pub unified_dim: usize,
    pub width: usize,
    pub flow_hidden: usize,
    pub token_positions: usize,
    pub token_rank: usize,
    pub vocab_size: usize,
    /// Per unified dim; the flow head works on `action / scale`.
    pub action_scale: Vec<f64>,
}

impl ModelConfig {
    pub fn action_dim(&self) -> usize {
        self.horizon * self.unified_dim
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_tasks + self.n_subtasks + 1
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.into()));
        if [
            self.obs_dim,
            self.n_tasks,
            self.n_subtasks,
            self.horizon,
            self.unified_dim,
            self.width,
            self.flow_hidden,
            self.token_positions,
            self.token_rank,
            self.vocab_size,
        ]
        .contains(&0)
        {
            return bad("all sizes must be ≥ 1");
        }
        if self.action_scale.len() != self.unified_dim {
            return bad("action_scale needs one entry per unified dim");
        }
        if self.action_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("action_scale entries must be positive");
        }
        Ok(())
    }

    /// Scale of flat action index `k` (row-major `H × D`).
    fn scale_at(&self, k: usize) -> f64 {
        self.action_scale[k % self.unified_dim]
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Weight matrices are stored `out × in`; biases are `1 × out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: Block,
    pub b: Block,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub trunk1: Dense,
    pub trunk2: Dense,
    pub flow1: Dense,
    pub flow2: Dense,
    pub flow3: Dense,
    pub tok_proj: Dense,
    pub tok_out: Dense,
    pub sub: Dense,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut off = 0;
        let mut dense = |out: usize, inp: usize| {
            let w = Block { offset: off, rows: out, cols: inp };
            off += out * inp;
            let b = Block { offset: off, rows: 1, cols: out };
            off += out;
            Dense { w, b }
        };
        let a = c.action_dim();
        let trunk1 = dense(c.width, c.input_dim());
        let trunk2 = dense(c.width, c.width);
        let flow1 = dense(c.flow_hidden, c.width + a + 1);
        let flow2 = dense(c.flow_hidden, c.flow_hidden);
        let flow3 = dense(a, c.flow_hidden);
        let tok_proj = dense(c.token_positions * c.token_rank, c.width);
        let tok_out = dense(c.vocab_size, c.token_rank);
        let sub = dense(c.n_subtasks, c.width);
        Self {
            trunk1,
            trunk2,
            flow1,
            flow2,
            flow3,
            tok_proj,
            tok_out,
            sub,
            total: off,
        }
    }

    pub fn blocks(&self) -> [(&'static str, Dense); 8] {
        [
            ("trunk1", self.trunk1),
            ("trunk2", self.trunk2),
            ("flow1", self.flow1),
            ("flow2", self.flow2),
            ("flow3", self.flow3),
            ("tok_proj", self.tok_proj),
            ("tok_out", self.tok_out),
            ("sub", self.sub),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

fn view(data: &[f64], b: Block) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((b.rows, b.cols), &data[b.range()]).expect("block shape")
}

fn view_mut(data: &mut [f64], b: Block) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((b.rows, b.cols), &mut data[b.range()]).expect("block shape")
}

fn bias(data: &[f64], b: Block) -> ArrayView1<'_, f64> {
    ArrayView1::from(&data[b.range()])
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let data = vec![0.0; layout.total];
        Ok(Self { config, layout, data })
    }

    /// Gaussian weights with std `1/√fan_in`, zero biases. The trunk column
    /// reading the embodiment flag starts at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, d) in p.layout.blocks() {
            let std = 1.0 / (d.w.cols as f64).sqrt();
            for v in &mut p.data[d.w.range()] {
                let n: f64 = rng.sample(StandardNormal);
                *v = n * std;
            }
        }
        let flag_col = p.config.input_dim() - 1;
        let t1 = p.layout.trunk1.w;
        let mut w = view_mut(&mut p.data, t1);
        w.column_mut(flag_col).fill(0.0);
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rounds every weight to the nearest f32 so that a checkpoint round-trip
    /// reproduces the in-memory parameters exactly.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = f64::from(*v as f32);
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let ck = |reason: String| PolicyError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let json = serde_json::to_vec(&self.config).map_err(|e| ck(e.to_string()))?;
        let mut buf = Vec::with_capacity(48 + json.len() + 4 * self.data.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&self.config.fingerprint());
        buf.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for v in &self.data {
            buf.write_all(&(*v as f32).to_le_bytes()).map_err(|e| ck(e.to_string()))?;
        }
        write_atomic(path, &buf).map_err(|e| ck(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let ck = |reason: String| PolicyError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| ck(e.to_string()))?;
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8], PolicyError> {
            let s = bytes.get(at..at + n).ok_or_else(|| ck("truncated".into()))?;
            at += n;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(ck("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ck(format!("unsupported version {version}")));
        }
        let jl = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let config: ModelConfig = serde_json::from_slice(take(jl)?).map_err(|e| ck(e.to_string()))?;
        let fp: [u8; 32] = take(32)?.try_into().unwrap();
        if fp != config.fingerprint() {
            return Err(ck("config fingerprint mismatch".into()));
        }
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut p = Self::zeros(config).map_err(|e| ck(e.to_string()))?;
        if n != p.len() {
            return Err(ck(format!("expected {} weights, found {n}", p.len())));
        }
        let payload = take(4 * n)?;
        for (v, c) in p.data.iter_mut().zip(payload.chunks_exact(4)) {
            *v = f64::from(f32::from_le_bytes(c.try_into().unwrap()));
        }
        Ok(p)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"XVLA";
const CHECKPOINT_VERSION: u32 = 1;

/// One training batch. `actions` and `action_mask` are `B × (H·D)` in raw
/// (unscaled) units; `tokens[b]` is the BPE sequence of sample `b`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub task: Vec<usize>,
    pub subtask: Vec<usize>,
    pub flag: Vec<f64>,
    pub actions: Array2<f64>,
    pub action_mask: Array2<f64>,
    pub tokens: Vec<Vec<u32>>,
    /// Per-sample multiplier on the subtask loss.
    pub hl_weight: Vec<f64>,
    /// Per-sample multiplier on the flow and token losses.
    pub ll_weight: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.task.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task.is_empty()
    }

    fn check(&self, c: &ModelConfig) -> Result<(), PolicyError> {
        let b = self.len();
        let ok = self.obs.dim() == (b, c.obs_dim)
            && self.subtask.len() == b
            && self.flag.len() == b
            && self.actions.dim() == (b, c.action_dim())
            && self.action_mask.dim() == (b, c.action_dim())
            && self.tokens.len() == b
            && self.hl_weight.len() == b
            && self.ll_weight.len() == b
            && self.task.iter().all(|&t| t < c.n_tasks)
            && self.subtask.iter().all(|&s| s < c.n_subtasks)
            && self.tokens.iter().flatten().all(|&t| (t as usize) < c.vocab_size);
        if ok {
            Ok(())
        } else {
            Err(PolicyError::ShapeMismatch(format!("batch of {b} does not match model config")))
        }
    }
}

/// The random draws of one training step, kept apart from the batch so losses
/// are deterministic functions of `(params, batch, noise)`.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub eps: Array2<f64>,
    pub tau: Vec<f64>,
    /// Samples whose subtask input is zeroed for the action heads.
    pub drop_subtask: Vec<bool>,
}

impl StepNoise {
    pub fn draw(rng: &mut impl Rng, batch: usize, action_dim: usize, drop_prob: f64) -> Self {
        let eps = Array2::from_shape_simple_fn((batch, action_dim), || rng.sample(StandardNormal));
        let tau = (0..batch).map(|_| rng.random::<f64>()).collect();
        let drop_subtask = (0..batch).map(|_| rng.random::<f64>() < drop_prob).collect();
        Self { eps, tau, drop_subtask }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub flow: f64,
    pub token: f64,
    pub subtask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            flow: 1.0,
            token: 1.0,
            subtask: 1.0,
        }
    }
}

impl LossWeights {
    pub const FLOW: Self = Self { flow: 1.0, token: 0.0, subtask: 0.0 };
    pub const TOKEN: Self = Self { flow: 0.0, token: 1.0, subtask: 0.0 };
    pub const SUBTASK: Self = Self { flow: 0.0, token: 0.0, subtask: 1.0 };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub flow: f64,
    pub token: f64,
    pub subtask: f64,
    pub total: f64,
}

fn tanh_layer(x: ArrayView2<f64>, data: &[f64], d: Dense) -> Array2<f64> {
    let mut y = x.dot(&view(data, d.w).t());
    y += &bias(data, d.b);
    y.mapv_inplace(f64::tanh);
    y
}

fn linear_layer(x: ArrayView2<f64>, data: &[f64], d: Dense) -> Array2<f64> {
    let mut y = x.dot(&view(data, d.w).t());
    y += &bias(data, d.b);
    y
}

/// Accumulates weight and bias gradients for `y = f(x W^T + b)` given the
/// gradient w.r.t. the pre-activation, and returns the gradient w.r.t. `x`.
fn dense_backward(
    dpre: &Array2<f64>,
    x: ArrayView2<f64>,
    data: &[f64],
    grad: &mut [f64],
    d: Dense,
    need_dx: bool,
) -> Option<Array2<f64>> {
    let mut gw = view_mut(grad, d.w);
    ndarray::linalg::general_mat_mul(1.0, &dpre.t(), &x, 1.0, &mut gw);
    let db = dpre.sum_axis(Axis(0));
    for (g, v) in grad[d.b.range()].iter_mut().zip(db.iter()) {
        *g += v;
    }
    need_dx.then(|| dpre.dot(&view(data, d.w)))
}

fn tanh_grad(dy: Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let mut d = dy;
    Zip::from(&mut d).and(y).for_each(|g, &v| *g *= 1.0 - v * v);
    d
}

/// Trunk input rows. `subtask = None` zeroes the subtask one-hot.
fn trunk_input(
    c: &ModelConfig,
    obs: ArrayView2<f64>,
    task: &[usize],
    subtask: &[Option<usize>],
    flag: &[f64],
) -> Array2<f64> {
    let b = obs.nrows();
    let mut x = Array2::zeros((b, c.input_dim()));
    x.slice_mut(s![.., ..c.obs_dim]).assign(&obs);
    for i in 0..b {
        x[[i, c.obs_dim + task[i]]] = 1.0;
        if let Some(s) = subtask[i] {
            x[[i, c.obs_dim + c.n_tasks + s]] = 1.0;
        }
        x[[i, c.input_dim() - 1]] = flag[i];
    }
    x
}

struct TrunkPass {
    x: Array2<f64>,
    h1: Array2<f64>,
    z: Array2<f64>,
}

fn trunk_forward(p: &ModelParams, x: Array2<f64>) -> TrunkPass {
    let h1 = tanh_layer(x.view(), &p.data, p.layout.trunk1);
    let z = tanh_layer(h1.view(), &p.data, p.layout.trunk2);
    TrunkPass { x, h1, z }
}

fn trunk_backward(p: &ModelParams, pass: &TrunkPass, dz: Array2<f64>, grad: &mut [f64]) {
    let dpre2 = tanh_grad(dz, &pass.z);
    let dh1 = dense_backward(&dpre2, pass.h1.view(), &p.data, grad, p.layout.trunk2, true).unwrap();
    let dpre1 = tanh_grad(dh1, &pass.h1);
    dense_backward(&dpre1, pass.x.view(), &p.data, grad, p.layout.trunk1, false);
}

/// Trunk embedding for a batch of observations.
pub fn embed(
    p: &ModelParams,
    obs: ArrayView2<f64>,
    task: &[usize],
    subtask: &[Option<usize>],
    flag: &[f64],
) -> Result<Array2<f64>, PolicyError> {
    let c = &p.config;
    let b = obs.nrows();
    if obs.ncols() != c.obs_dim || task.len() != b || subtask.len() != b || flag.len() != b {
        return Err(PolicyError::ShapeMismatch(format!(
            "embed expects {} obs features per row and one task/subtask/flag per row",
            c.obs_dim
        )));
    }
    if task.iter().any(|&t| t >= c.n_tasks) || subtask.iter().flatten().any(|&s| s >= c.n_subtasks) {
        return Err(PolicyError::ShapeMismatch("task or subtask id out of range".into()));
    }
    Ok(trunk_forward(p, trunk_input(c, obs, task, subtask, flag)).z)
}

fn flow_input(z: ArrayView2<f64>, a_tau: ArrayView2<f64>, tau: &[f64]) -> Array2<f64> {
    let (b, w) = z.dim();
    let a = a_tau.ncols();
    let mut f = Array2::zeros((b, w + a + 1));
    f.slice_mut(s![.., ..w]).assign(&z);
    f.slice_mut(s![.., w..w + a]).assign(&a_tau);
    for (i, t) in tau.iter().enumerate() {
        f[[i, w + a]] = *t;
    }
    f
}

struct FlowPass {
    f: Array2<f64>,
    g1: Array2<f64>,
    g2: Array2<f64>,
    v: Array2<f64>,
}

fn flow_forward(p: &ModelParams, z: ArrayView2<f64>, a_tau: ArrayView2<f64>, tau: &[f64]) -> FlowPass {
    let f = flow_input(z, a_tau, tau);
    let g1 = tanh_layer(f.view(), &p.data, p.layout.flow1);
    let g2 = tanh_layer(g1.view(), &p.data, p.layout.flow2);
    let v = linear_layer(g2.view(), &p.data, p.layout.flow3);
    FlowPass { f, g1, g2, v }
}

/// Returns the gradient w.r.t. `z`.
fn flow_backward(p: &ModelParams, pass: &FlowPass, dv: Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
    let l = &p.layout;
    let dg2 = dense_backward(&dv, pass.g2.view(), &p.data, grad, l.flow3, true).unwrap();
    let dp2 = tanh_grad(dg2, &pass.g2);
    let dg1 = dense_backward(&dp2, pass.g1.view(), &p.data, grad, l.flow2, true).unwrap();
    let dp1 = tanh_grad(dg1, &pass.g1);
    let df = dense_backward(&dp1, pass.f.view(), &p.data, grad, l.flow1, true).unwrap();
    df.slice(s![.., ..p.config.width]).to_owned()
}

/// Row-wise log-softmax.
fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Combined weighted loss and its gradient w.r.t. every parameter.
pub fn loss_and_grad(
    p: &ModelParams,
    batch: &Batch,
    noise: &StepNoise,
    weights: LossWeights,
) -> Result<(LossParts, Vec<f64>), PolicyError> {
    let c = &p.config;
    batch.check(c)?;
    let b = batch.len();
    let a_dim = c.action_dim();
    if noise.eps.dim() != (b, a_dim) || noise.tau.len() != b || noise.drop_subtask.len() != b {
        return Err(PolicyError::ShapeMismatch("noise does not match batch".into()));
    }
    let bf = b as f64;
    let mut grad = vec![0.0; p.len()];
    let mut parts = LossParts::default();

    if weights.flow > 0.0 || weights.token > 0.0 {
        let sub_in: Vec<Option<usize>> = (0..b)
            .map(|i| (!noise.drop_subtask[i]).then_some(batch.subtask[i]))
            .collect();
        let trunk = trunk_forward(p, trunk_input(c, batch.obs.view(), &batch.task, &sub_in, &batch.flag));
        let mut dz = Array2::<f64>::zeros(trunk.z.dim());

        if weights.flow > 0.0 {
            let mut a_tau = Array2::zeros((b, a_dim));
            let mut target = Array2::zeros((b, a_dim));
            for i in 0..b {
                let t = noise.tau[i];
                for k in 0..a_dim {
                    // Masked dims act as a zero target so they cannot leak into a_τ.
                    let a = batch.action_mask[[i, k]] * batch.actions[[i, k]] / c.scale_at(k);
                    let e = noise.eps[[i, k]];
                    a_tau[[i, k]] = t * a + (1.0 - t) * e;
                    target[[i, k]] = a - e;
                }
            }
            let pass = flow_forward(p, trunk.z.view(), a_tau.view(), &noise.tau);
            let mut dv = Array2::zeros((b, a_dim));
            let mut loss = 0.0;
            for i in 0..b {
                let wi = batch.ll_weight[i];
                for k in 0..a_dim {
                    let m = batch.action_mask[[i, k]];
                    if m == 0.0 {
                        continue;
                    }
                    let r = pass.v[[i, k]] - target[[i, k]];
                    loss += wi * m * r * r;
                    dv[[i, k]] = weights.flow * 2.0 * wi * m * r / bf;
                }
            }
            parts.flow = loss / bf;
            dz += &flow_backward(p, &pass, dv, &mut grad);
        }

        if weights.token > 0.0 {
            let (pn, r) = (c.token_positions, c.token_rank);
            let u = linear_layer(trunk.z.view(), &p.data, p.layout.tok_proj);
            let e = view(&p.data, p.layout.tok_out.w);
            let cb = bias(&p.data, p.layout.tok_out.b);
            let n_valid: usize = batch.tokens.iter().map(|t| t.len().min(pn)).sum();
            let mut du = Array2::zeros(u.dim());
            let mut loss = 0.0;
            if n_valid > 0 {
                let nv = n_valid as f64;
                for pos in 0..pn {
                    let rows: Vec<usize> = (0..b).filter(|&i| batch.tokens[i].len() > pos).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let up = u.select(Axis(0), &rows);
                    let up = up.slice(s![.., pos * r..(pos + 1) * r]);
                    let mut logits = up.dot(&e.t());
                    logits += &cb;
                    let lsm = log_softmax(&logits);
                    let mut dl = lsm.mapv(f64::exp);
                    for (j, &i) in rows.iter().enumerate() {
                        let wi = batch.ll_weight[i];
                        let y = batch.tokens[i][pos] as usize;
                        loss -= wi * lsm[[j, y]];
                        dl[[j, y]] -= 1.0;
                        dl.row_mut(j).mapv_inplace(|v| v * weights.token * wi / nv);
                    }
                    let dup = dense_backward(&dl, up, &p.data, &mut grad, p.layout.tok_out, true).unwrap();
                    for (j, &i) in rows.iter().enumerate() {
                        du.slice_mut(s![i, pos * r..(pos + 1) * r]).assign(&dup.row(j));
                    }
                }
                parts.token = loss / nv;
            }
            dz += &dense_backward(&du, trunk.z.view(), &p.data, &mut grad, p.layout.tok_proj, true).unwrap();
        }

        trunk_backward(p, &trunk, dz, &mut grad);
    }

    if weights.subtask > 0.0 {
        let none = vec![None; b];
        let trunk = trunk_forward(p, trunk_input(c, batch.obs.view(), &batch.task, &none, &batch.flag));
        let logits = linear_layer(trunk.z.view(), &p.data, p.layout.sub);
        let lsm = log_softmax(&logits);
        let mut dl = lsm.mapv(f64::exp);
        let mut loss = 0.0;
        for i in 0..b {
            let wi = batch.hl_weight[i];
            loss -= wi * lsm[[i, batch.subtask[i]]];
            dl[[i, batch.subtask[i]]] -= 1.0;
            dl.row_mut(i).mapv_inplace(|v| v * weights.subtask * wi / bf);
        }
        parts.subtask = loss / bf;
        let dz = dense_backward(&dl, trunk.z.view(), &p.data, &mut grad, p.layout.sub, true).unwrap();
        trunk_backward(p, &trunk, dz, &mut grad);
    }

    parts.total = weights.flow * parts.flow + weights.token * parts.token + weights.subtask * parts.subtask;
    Ok((parts, grad))
}

pub fn loss_flow(p: &ModelParams, batch: &Batch, noise: &StepNoise) -> Result<(f64, Vec<f64>), PolicyError> {
    loss_and_grad(p, batch, noise, LossWeights::FLOW).map(|(l, g)| (l.flow, g))
}

pub fn loss_tokens(p: &ModelParams, batch: &Batch, noise: &StepNoise) -> Result<(f64, Vec<f64>), PolicyError> {
    loss_and_grad(p, batch, noise, LossWeights::TOKEN).map(|(l, g)| (l.token, g))
}

pub fn loss_subtask(p: &ModelParams, batch: &Batch, noise: &StepNoise) -> Result<(f64, Vec<f64>), PolicyError> {
    loss_and_grad(p, batch, noise, LossWeights::SUBTASK).map(|(l, g)| (l.subtask, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Probability that a sample's subtask input is hidden from the action heads.
    pub subtask_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            steps: 1000,
            loss_weights: LossWeights::default(),
            seed: 0,
            subtask_dropout: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let w = self.loss_weights;
        if [w.flow, w.token, w.subtask].iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || w.flow + w.token + w.subtask <= 0.0
        {
            return Err(PolicyError::InvalidConfig(
                "loss weights must be ≥ 0 with at least one positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PolicyError::InvalidConfig("learning rate must be finite and ≥ 0".into()));
        }
        if self.batch_size == 0 {
            return Err(PolicyError::InvalidConfig("batch_size must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.subtask_dropout) {
            return Err(PolicyError::InvalidConfig("subtask_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Supplies the batch for a given step. Implementations must be a pure
/// function of the step index for training to be reproducible.
pub trait BatchSource {
    fn batch(&mut self, step: usize, batch_size: usize) -> Batch;
}

impl<F: FnMut(usize, usize) -> Batch> BatchSource for F {
    fn batch(&mut self, step: usize, batch_size: usize) -> Batch {
        self(step, batch_size)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub flow: f64,
    pub token: f64,
    pub subtask: f64,
    pub total: f64,
}

/// Per-step noise for training run `seed`, independent of earlier steps.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

pub fn train(
    mut params: ModelParams,
    source: &mut dyn BatchSource,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<LossRecord>), PolicyError> {
    cfg.validate()?;
    let mut opt = Adam::new(params.len());
    let mut curve = Vec::with_capacity(cfg.steps);
    let a_dim = params.config.action_dim();
    for step in 0..cfg.steps {
        let batch = source.batch(step, cfg.batch_size);
        let mut rng = step_rng(cfg.seed, step);
        let noise = StepNoise::draw(&mut rng, batch.len(), a_dim, cfg.subtask_dropout);
        let (l, g) = loss_and_grad(&params, &batch, &noise, cfg.loss_weights)?;
        if !l.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::DivergedLoss { step });
        }
        if cfg.learning_rate > 0.0 {
            opt.step(&mut params.data, &g, cfg.learning_rate);
        }
        curve.push(LossRecord {
            step,
            flow: l.flow,
            token: l.token,
            subtask: l.subtask,
            total: l.total,
        });
    }
    Ok((params, curve))
}

pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<(), PolicyError> {
    let err = |e: String| PolicyError::Checkpoint {
        path: path.display().to_string(),
        reason: e,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in curve {
        w.serialize(r).map_err(|e| err(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| err(e.to_string()))?;
    write_atomic(path, &bytes).map_err(|e| err(e.to_string()))
}

/// Euler integration of the learned velocity field from `eps` (τ = 0) to
/// τ = 1 in `n_steps` equal steps; returns `B × (H·D)` actions in raw units.
///
/// Where `mask` is zero the field is replaced by `−ε`, the exact velocity of
/// the zero target those dims were trained on, so they stay on their path.
#[allow(clippy::too_many_arguments)]
pub fn sample_actions(
    p: &ModelParams,
    obs: ArrayView2<f64>,
    task: &[usize],
    subtask: &[Option<usize>],
    flag: &[f64],
    mask: Option<&Array2<f64>>,
    eps: &Array2<f64>,
    n_steps: usize,
) -> Result<Array2<f64>, PolicyError> {
    let z = embed(p, obs, task, subtask, flag)?;
    let c = &p.config;
    let shape = (obs.nrows(), c.action_dim());
    if eps.dim() != shape || mask.is_some_and(|m| m.dim() != shape) || n_steps == 0 {
        return Err(PolicyError::ShapeMismatch("noise/mask shape or step count".into()));
    }
    Ok(integrate(eps, n_steps, c, |x, tau| {
        let t = vec![tau; x.nrows()];
        let mut v = flow_forward(p, z.view(), x.view(), &t).v;
        if let Some(m) = mask {
            Zip::from(&mut v).and(m).and(eps).for_each(|v, &m, &e| {
                if m == 0.0 {
                    *v = -e;
                }
            });
        }
        v
    }))
}

/// Euler integration with an arbitrary velocity field (in scaled units).
pub fn integrate(
    eps: &Array2<f64>,
    n_steps: usize,
    c: &ModelConfig,
    mut field: impl FnMut(&Array2<f64>, f64) -> Array2<f64>,
) -> Array2<f64> {
    let dt = 1.0 / n_steps as f64;
    let mut x = eps.clone();
    for k in 0..n_steps {
        let v = field(&x, k as f64 * dt);
        x.scaled_add(dt, &v);
    }
    for ((_, k), v) in x.indexed_iter_mut() {
        *v *= c.scale_at(k);
    }
    x
}

pub fn subtask_logits(
    p: &ModelParams,
    obs: ArrayView2<f64>,
    task: &[usize],
    flag: &[f64],
) -> Result<Array2<f64>, PolicyError> {
    let none = vec![None; obs.nrows()];
    let z = embed(p, obs, task, &none, flag)?;
    Ok(linear_layer(z.view(), &p.data, p.layout.sub))
}

/// Argmax of the subtask logits; ties go to the lowest id.
pub fn predict_subtask(
    p: &ModelParams,
    obs: ArrayView2<f64>,
    task: &[usize],
    flag: &[f64],
) -> Result<Vec<usize>, PolicyError> {
    let logits = subtask_logits(p, obs, task, flag)?;
    Ok(logits.rows().into_iter().map(|r| argmax(r)).collect())
}

/// Per-position argmax of the token head.
pub fn predict_tokens(
    p: &ModelParams,
    obs: ArrayView2<f64>,
    task: &[usize],
    subtask: &[Option<usize>],
    flag: &[f64],
) -> Result<Vec<Vec<u32>>, PolicyError> {
    let c = &p.config;
    let z = embed(p, obs, task, subtask, flag)?;
    let u = linear_layer(z.view(), &p.data, p.layout.tok_proj);
    let e = view(&p.data, p.layout.tok_out.w);
    let cb: Array1<f64> = bias(&p.data, p.layout.tok_out.b).to_owned();
    let r = c.token_rank;
    Ok(u.rows()
        .into_iter()
        .map(|row| {
            (0..c.token_positions)
                .map(|pos| {
                    let logits = e.dot(&row.slice(s![pos * r..(pos + 1) * r])) + &cb;
                    argmax(logits.view()) as u32
                })
                .collect()
        })
        .collect())
}

fn argmax(r: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = i;
        }
    }
    best
}
