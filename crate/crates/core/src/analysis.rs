//! Embedding analysis: exact t-SNE, a cross-validated linear probe for
//! embodiment identity, and the normalized centroid gap.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{write_atomic, EmbodimentId};
use crate::policy::{embed, ModelParams, PolicyError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need N > 3·perplexity points, got N = {n} for perplexity {perplexity}")]
    PerplexityTooLarge { n: usize, perplexity: f64 },
    #[error("only one embodiment label present")]
    SingleClass,
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("embedding set is malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("writing {path}: {reason}")]
    Output { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub points: Array2<f64>,
    pub labels: Vec<EmbodimentId>,
    /// `(scene_id, task_id)` per point.
    pub meta: Vec<(u32, u32)>,
}

impl EmbeddingSet {
    pub fn new(points: Array2<f64>, labels: Vec<EmbodimentId>, meta: Vec<(u32, u32)>) -> Result<Self, AnalysisError> {
        let n = points.nrows();
        if n < 2 || labels.len() != n || meta.len() != n {
            return Err(AnalysisError::Malformed(format!(
                "{n} points, {} labels, {} meta rows",
                labels.len(),
                meta.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::Malformed("non-finite coordinate".into()));
        }
        Ok(Self { points, labels, meta })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Binary targets: the smallest label present is class 0, all others class 1.
    fn binary_targets(&self) -> Result<Vec<f64>, AnalysisError> {
        let first = *self.labels.iter().min().expect("non-empty");
        let y: Vec<f64> = self.labels.iter().map(|l| f64::from(u8::from(*l != first))).collect();
        if y.iter().all(|v| *v == 0.0) {
            return Err(AnalysisError::SingleClass);
        }
        Ok(y)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let d = self.points.ncols();
        let mut header = vec!["embodiment".to_string(), "scene_id".into(), "task_id".into()];
        header.extend((0..d).map(|k| format!("z{k}")));
        let out = |e: csv::Error| AnalysisError::Output {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        w.write_record(&header).map_err(out)?;
        for i in 0..self.len() {
            let mut rec = vec![self.labels[i].to_string(), self.meta[i].0.to_string(), self.meta[i].1.to_string()];
            rec.extend(self.points.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(out)?;
        }
        finish_csv(w, path)
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>, path: &Path) -> Result<(), AnalysisError> {
    let out = |reason: String| AnalysisError::Output {
        path: path.display().to_string(),
        reason,
    };
    let bytes = w.into_inner().map_err(|e| out(e.to_string()))?;
    write_atomic(path, &bytes).map_err(|e| out(e.to_string()))
}

/// One observation to embed.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingInput {
    pub obs: Vec<f64>,
    pub task: usize,
    pub flag: f64,
    pub embodiment: EmbodimentId,
    pub scene_id: u32,
    pub task_id: u32,
}

/// Embeds `per_class_n` inputs per embodiment, drawn without replacement
/// under `seed`. The subtask input is left empty, as for the subtask head.
pub fn collect_embeddings(
    params: &ModelParams,
    inputs: &[EmbeddingInput],
    per_class_n: usize,
    seed: u64,
) -> Result<EmbeddingSet, AnalysisError> {
    let mut ids: Vec<EmbodimentId> = inputs.iter().map(|x| x.embodiment).collect();
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for id in ids {
        let mut pool: Vec<usize> = (0..inputs.len()).filter(|&i| inputs[i].embodiment == id).collect();
        if pool.len() < per_class_n {
            return Err(AnalysisError::InsufficientData(format!(
                "{id} has {} inputs, {per_class_n} requested",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        pool.truncate(per_class_n);
        pool.sort_unstable();
        chosen.extend(pool);
    }
    if chosen.is_empty() {
        return Err(AnalysisError::InsufficientData("no inputs".into()));
    }
    let d = params.config.obs_dim;
    let mut obs = Array2::zeros((chosen.len(), d));
    for (r, &i) in chosen.iter().enumerate() {
        if inputs[i].obs.len() != d {
            return Err(AnalysisError::Malformed(format!("input {i} has {} features", inputs[i].obs.len())));
        }
        obs.row_mut(r).assign(&ndarray::ArrayView1::from(&inputs[i].obs));
    }
    let task: Vec<usize> = chosen.iter().map(|&i| inputs[i].task).collect();
    let flag: Vec<f64> = chosen.iter().map(|&i| inputs[i].flag).collect();
    let z = embed(params, obs.view(), &task, &vec![None; chosen.len()], &flag)?;
    EmbeddingSet::new(
        z,
        chosen.iter().map(|&i| inputs[i].embodiment).collect(),
        chosen.iter().map(|&i| (inputs[i].scene_id, inputs[i].task_id)).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    pub layout: Array2<f64>,
    pub initial_kl: f64,
    pub final_kl: f64,
}

pub fn squared_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let sq: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let g = x.dot(&x.t());
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { (sq[i] + sq[j] - 2.0 * g[[i, j]]).max(0.0) })
}

/// Conditional distribution of row `i` at precision `beta` and its entropy in bits.
fn row_affinity(d: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let min = d
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = d
        .iter()
        .enumerate()
        .map(|(j, v)| if j == i { 0.0 } else { (-(v - min) * beta).exp() })
        .collect();
    let sum: f64 = p.iter().sum();
    let mut h = 0.0;
    for v in &mut p {
        *v /= sum;
        if *v > 0.0 {
            h -= *v * v.log2();
        }
    }
    (p, h)
}

/// Per-point precision found by bisection so each row's entropy is
/// `log₂(perplexity)`; returns the row-stochastic conditionals and the betas.
pub fn conditional_affinities(d2: &Array2<f64>, perplexity: f64) -> (Array2<f64>, Vec<f64>) {
    let n = d2.nrows();
    let target = perplexity.log2();
    let mut p = Array2::zeros((n, n));
    let mut betas = vec![0.0; n];
    for i in 0..n {
        let row: Vec<f64> = d2.row(i).to_vec();
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let mut best = row_affinity(&row, i, beta);
        for _ in 0..200 {
            let diff = best.1 - target;
            if diff.abs() < 1e-7 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            best = row_affinity(&row, i, beta);
        }
        betas[i] = beta;
        for (j, v) in best.0.into_iter().enumerate() {
            p[[i, j]] = v;
        }
    }
    (p, betas)
}

/// Entropy in bits of row `i` of a conditional-affinity matrix.
pub fn row_entropy_bits(p: &Array2<f64>, i: usize) -> f64 {
    p.row(i).iter().filter(|v| **v > 0.0).map(|v| -v * v.log2()).sum()
}

fn joint_affinities(d2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let (cond, _) = conditional_affinities(d2, perplexity);
    let n = cond.nrows() as f64;
    let mut p = &cond + &cond.t();
    p.mapv_inplace(|v| (v / (2.0 * n)).max(1e-12));
    for i in 0..p.nrows() {
        p[[i, i]] = 0.0;
    }
    p
}

fn student_q(y: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let d = squared_distances(y.view());
    let mut num = d.mapv(|v| 1.0 / (1.0 + v));
    for i in 0..num.nrows() {
        num[[i, i]] = 0.0;
    }
    let sum = num.sum();
    let q = num.mapv(|v| (v / sum).max(1e-12));
    (q, num)
}

/// `KL(P ‖ Q)` of a layout against joint affinities.
pub fn kl_divergence(p: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let (q, _) = student_q(y);
    let mut kl = 0.0;
    for ((i, j), &pij) in p.indexed_iter() {
        if i != j && pij > 0.0 {
            kl += pij * (pij / q[[i, j]]).ln();
        }
    }
    kl
}

/// Exact t-SNE.
pub fn tsne(points: ArrayView2<f64>, cfg: &TsneConfig) -> Result<TsneResult, AnalysisError> {
    let n = points.nrows();
    if (n as f64) <= 3.0 * cfg.perplexity {
        return Err(AnalysisError::PerplexityTooLarge {
            n,
            perplexity: cfg.perplexity,
        });
    }
    let p = joint_affinities(&squared_distances(points), cfg.perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y = Array2::from_shape_simple_fn((n, 2), || 1e-4 * rng.sample::<f64, _>(StandardNormal));
    let initial_kl = kl_divergence(&p, &y);
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.momentum_switch { 0.5 } else { 0.8 };
        let (q, num) = student_q(&y);
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            let (mut g0, mut g1) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let m = 4.0 * (exag * p[[i, j]] - q[[i, j]]) * num[[i, j]];
                g0 += m * (y[[i, 0]] - y[[j, 0]]);
                g1 += m * (y[[i, 1]] - y[[j, 1]]);
            }
            grad[[i, 0]] = g0;
            grad[[i, 1]] = g1;
        }
        for ((g, u), gain) in grad.iter().zip(update.iter()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) { *gain + 0.2 } else { (*gain * 0.8).max(0.01) };
        }
        update = &update * momentum - &(&grad * &gains) * cfg.learning_rate;
        y += &update;
        let mean = y.mean_axis(Axis(0)).expect("n > 0");
        y -= &mean;
    }
    let final_kl = kl_divergence(&p, &y);
    Ok(TsneResult {
        layout: y,
        initial_kl,
        final_kl,
    })
}

pub fn write_layout_csv(path: &Path, layout: &Array2<f64>, set: &EmbeddingSet) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let out = |e: csv::Error| AnalysisError::Output {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    w.write_record(["x", "y", "embodiment", "scene_id", "task_id"]).map_err(out)?;
    for i in 0..set.len() {
        w.write_record([
            layout[[i, 0]].to_string(),
            layout[[i, 1]].to_string(),
            set.labels[i].to_string(),
            set.meta[i].0.to_string(),
            set.meta[i].1.to_string(),
        ])
        .map_err(out)?;
    }
    finish_csv(w, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub folds: usize,
    pub l2: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            l2: 1e-3,
            iterations: 300,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub fold_accuracies: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on the L2-regularized logistic loss, from zero.
fn fit_logistic(x: &Array2<f64>, y: &[f64], cfg: &ProbeConfig) -> (Array1<f64>, f64) {
    let (n, d) = x.dim();
    let mut w = Array1::zeros(d);
    let mut b = 0.0;
    let yv = Array1::from(y.to_vec());
    for _ in 0..cfg.iterations {
        let logits = x.dot(&w) + b;
        let r = logits.mapv(sigmoid) - &yv;
        let gw = x.t().dot(&r) / n as f64 + &w * cfg.l2;
        let gb = r.sum() / n as f64;
        w.scaled_add(-cfg.learning_rate, &gw);
        b -= cfg.learning_rate * gb;
    }
    (w, b)
}

/// K-fold cross-validated accuracy of a logistic probe predicting embodiment.
///
/// Each training fold is centred on its mean and divided by one global scale
/// (its RMS norm), so the probe is unaffected by rotations of the embedding.
pub fn probe_alignment(set: &EmbeddingSet, cfg: &ProbeConfig) -> Result<ProbeResult, AnalysisError> {
    let y = set.binary_targets()?;
    let n = set.len();
    if cfg.folds < 2 || n < cfg.folds {
        return Err(AnalysisError::InsufficientData(format!("{n} points for {} folds", cfg.folds)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % cfg.folds;
    }
    let mut correct_total = 0usize;
    let mut fold_accuracies = Vec::with_capacity(cfg.folds);
    for k in 0..cfg.folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
        let xtr = set.points.select(Axis(0), &train);
        let mean = xtr.mean_axis(Axis(0)).expect("non-empty fold");
        let centred = &xtr - &mean;
        let rms = (centred.iter().map(|v| v * v).sum::<f64>() / train.len() as f64).sqrt();
        let scale = if rms > 0.0 { rms } else { 1.0 };
        let xtr = centred / scale;
        let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let (w, b) = fit_logistic(&xtr, &ytr, cfg);
        let xte = (&set.points.select(Axis(0), &test) - &mean) / scale;
        let pred = xte.dot(&w) + b;
        let correct = test
            .iter()
            .zip(pred.iter())
            .filter(|(&i, &s)| (s > 0.0) == (y[i] == 1.0))
            .count();
        correct_total += correct;
        fold_accuracies.push(correct as f64 / test.len() as f64);
    }
    Ok(ProbeResult {
        accuracy: correct_total as f64 / n as f64,
        fold_accuracies,
    })
}

/// Distance between the two class centroids in units of the pooled
/// within-class standard deviation (averaged over dimensions).
pub fn centroid_gap(set: &EmbeddingSet) -> Result<f64, AnalysisError> {
    let y = set.binary_targets()?;
    let idx = |c: f64| -> Vec<usize> { (0..set.len()).filter(|&i| y[i] == c).collect() };
    let (a, b) = (idx(0.0), idx(1.0));
    let xa = set.points.select(Axis(0), &a);
    let xb = set.points.select(Axis(0), &b);
    let ma = xa.mean_axis(Axis(0)).expect("non-empty");
    let mb = xb.mean_axis(Axis(0)).expect("non-empty");
    let diff = &ma - &mb;
    let gap = diff.dot(&diff).sqrt();
    if gap == 0.0 {
        return Ok(0.0);
    }
    let ss = (&xa - &ma).mapv(|v| v * v).sum() + (&xb - &mb).mapv(|v| v * v).sum();
    let dof = (set.len() as f64 - 2.0).max(1.0) * set.points.ncols() as f64;
    let pooled = (ss / dof).sqrt();
    if pooled == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(gap / pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMetrics {
    pub probe_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub centroid_gap: f64,
    pub n_points: usize,
}

pub fn alignment_metrics(set: &EmbeddingSet, cfg: &ProbeConfig) -> Result<AlignmentMetrics, AnalysisError> {
    let probe = probe_alignment(set, cfg)?;
    Ok(AlignmentMetrics {
        probe_accuracy: probe.accuracy,
        fold_accuracies: probe.fold_accuracies,
        centroid_gap: centroid_gap(set)?,
        n_points: set.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: EmbodimentId = EmbodimentId::Human;
    const R: EmbodimentId = EmbodimentId::Robot(0);

    fn gaussian_set(n: usize, d: usize, shift: f64, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Array2::from_shape_simple_fn((2 * n, d), || rng.sample::<f64, _>(StandardNormal));
        for i in n..2 * n {
            pts[[i, 0]] += shift;
        }
        let labels = (0..2 * n).map(|i| if i < n { H } else { R }).collect();
        EmbeddingSet::new(pts, labels, vec![(0, 0); 2 * n]).unwrap()
    }

    fn silhouette(y: &Array2<f64>, labels: &[usize]) -> f64 {
        let d = squared_distances(y.view()).mapv(f64::sqrt);
        let n = labels.len();
        let k = labels.iter().max().unwrap() + 1;
        let mut total = 0.0;
        for i in 0..n {
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += d[[i, j]];
                    counts[labels[j]] += 1;
                }
            }
            let a = sums[labels[i]] / counts[labels[i]] as f64;
            let b = (0..k)
                .filter(|&c| c != labels[i])
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    #[test]
    fn bandwidth_search_hits_target_entropy_on_uniform_distances() {
        let n = 50;
        let d2 = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 });
        let (p, _) = conditional_affinities(&d2, 30.0);
        for i in 0..n {
            // Uniform distances cap the entropy at log₂(n−1) ≥ log₂ 30.
            let h = row_entropy_bits(&p, i);
            assert!((h - (n as f64 - 1.0).log2()).abs() < 1e-5 || (h - 30f64.log2()).abs() < 1e-5, "{h}");
        }
        // Varied distances: the target is reachable and must be hit.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_simple_fn((n, 3), || rng.sample::<f64, _>(StandardNormal));
        let (p, _) = conditional_affinities(&squared_distances(x.view()), 10.0);
        for i in 0..n {
            assert!((row_entropy_bits(&p, i) - 10f64.log2()).abs() < 1e-5);
        }
    }

    #[test]
    fn tsne_lowers_kl_and_separates_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let per = 40;
        let mut pts = Array2::zeros((3 * per, 5));
        let mut labels = Vec::new();
        for c in 0..3 {
            for i in 0..per {
                for k in 0..5 {
                    let centre = if k == c { 10.0 } else { 0.0 };
                    pts[[c * per + i, k]] = centre + 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
                labels.push(c);
            }
        }
        let cfg = TsneConfig {
            perplexity: 10.0,
            iterations: 500,
            ..TsneConfig::default()
        };
        let r = tsne(pts.view(), &cfg).unwrap();
        assert!(r.final_kl < r.initial_kl);
        assert!(silhouette(&r.layout, &labels) > 0.5);
    }

    #[test]
    fn tsne_rejects_large_perplexity() {
        let pts = Array2::zeros((20, 2));
        assert!(matches!(
            tsne(pts.view(), &TsneConfig::default()),
            Err(AnalysisError::PerplexityTooLarge { .. })
        ));
    }

    #[test]
    fn tsne_kl_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_simple_fn((40, 2), || rng.sample::<f64, _>(StandardNormal));
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = ndarray::arr2(&[[c, -s], [s, c]]);
        let xr = x.dot(&rot);
        let p = joint_affinities(&squared_distances(x.view()), 5.0);
        let pr = joint_affinities(&squared_distances(xr.view()), 5.0);
        let y = Array2::from_shape_simple_fn((40, 2), || rng.sample::<f64, _>(StandardNormal));
        assert!((kl_divergence(&p, &y) - kl_divergence(&pr, &y)).abs() < 1e-9);
    }

    #[test]
    fn probe_is_near_chance_on_shared_distribution() {
        let set = gaussian_set(250, 8, 0.0, 1);
        let acc = probe_alignment(&set, &ProbeConfig::default()).unwrap().accuracy;
        assert!((0.4..=0.6).contains(&acc), "{acc}");
    }

    #[test]
    fn probe_separates_disjoint_distributions() {
        let set = gaussian_set(250, 8, 10.0, 2);
        let acc = probe_alignment(&set, &ProbeConfig::default()).unwrap().accuracy;
        assert!(acc > 0.95, "{acc}");
    }

    #[test]
    fn probe_is_label_symmetric_and_rotation_invariant() {
        let set = gaussian_set(100, 4, 1.0, 3);
        let cfg = ProbeConfig::default();
        let base = probe_alignment(&set, &cfg).unwrap();
        let mut flipped = set.clone();
        flipped.labels = set.labels.iter().map(|l| if *l == H { R } else { H }).collect();
        assert_eq!(probe_alignment(&flipped, &cfg).unwrap().accuracy, base.accuracy);
        // Random orthogonal matrix via Gram–Schmidt.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = nalgebra::DMatrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let qa = Array2::from_shape_fn((4, 4), |(i, j)| q[(i, j)]);
        let mut rotated = set.clone();
        rotated.points = set.points.dot(&qa);
        let r = probe_alignment(&rotated, &cfg).unwrap();
        for (a, b) in r.fold_accuracies.iter().zip(&base.fold_accuracies) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn probe_needs_two_classes() {
        let mut set = gaussian_set(10, 2, 0.0, 5);
        set.labels = vec![R; 20];
        assert!(matches!(probe_alignment(&set, &ProbeConfig::default()), Err(AnalysisError::SingleClass)));
        assert!(matches!(centroid_gap(&set), Err(AnalysisError::SingleClass)));
    }

    #[test]
    fn centroid_gap_cases() {
        let same = gaussian_set(250, 2, 0.0, 6);
        assert!(centroid_gap(&same).unwrap() < 0.2);
        let shifted = gaussian_set(250, 8, 5.0, 7);
        assert!((centroid_gap(&shifted).unwrap() - 5.0).abs() < 0.5);
        let two = EmbeddingSet::new(ndarray::arr2(&[[1.0, 2.0], [1.0, 2.0]]), vec![H, R], vec![(0, 0); 2]).unwrap();
        assert_eq!(centroid_gap(&two).unwrap(), 0.0);
    }

    #[test]
    fn collected_embeddings_are_balanced_and_labelled() {
        use crate::policy::tests::tiny_config;
        let p = ModelParams::init(tiny_config(), 0).unwrap();
        let inputs: Vec<EmbeddingInput> = (0..12)
            .map(|i| EmbeddingInput {
                obs: vec![i as f64 * 0.1; 5],
                task: 1,
                flag: f64::from(u8::from(i % 3 == 0)),
                embodiment: if i % 3 == 0 { H } else { R },
                scene_id: i,
                task_id: 1,
            })
            .collect();
        let set = collect_embeddings(&p, &inputs, 1, 0).unwrap();
        assert_eq!(set.len(), 2);
        let set = collect_embeddings(&p, &inputs, 4, 3).unwrap();
        assert_eq!(set, collect_embeddings(&p, &inputs, 4, 3).unwrap());
        for i in 0..set.len() {
            let src = &inputs[set.meta[i].0 as usize];
            assert_eq!(src.embodiment, set.labels[i]);
        }
        assert!(collect_embeddings(&p, &inputs, 5, 0).is_err());
    }
}
