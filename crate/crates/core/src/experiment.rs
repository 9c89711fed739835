//! The transfer experiment: pretrain on a rung of the diversity ladder,
//! fine-tune with and without human data, evaluate on held-out benchmarks,
//! and measure how far human and robot embeddings overlap.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::{slot_map, ChunkConfig, SkeletonLayout, UNIFIED_DIM};
use crate::analysis::{
    alignment_metrics, collect_embeddings, tsne, write_layout_csv, AlignmentMetrics, AnalysisError, EmbeddingInput,
    EmbeddingSet, ProbeConfig, TsneConfig,
};
use crate::data::{unified_chunks, DataError, MixtureSource, Routing, SampleSet};
use crate::episode::{write_atomic, Embodiment, EmbodimentId, Episode};
use crate::mixture::{build_mixture, Component, MixtureError};
use crate::policy::{
    predict_subtask, sample_actions, train, write_loss_csv, LossRecord, ModelConfig, ModelParams, PolicyError,
    TrainConfig,
};
use crate::tokenizer::{Tokenizer, TokenizerConfig};
use crate::world::{
    benchmark, command_from_unified_row, default_embodiments, diversity_subset, expert_steps, generate_episode,
    generate_scene, rollout_batch, score, Benchmark, Command, DiversityLadder, EmbodimentParams, EmbodimentSpec, Policy,
    TaskKind, TaskSpec, WorldError, WorldState, N_SUBTASKS, N_TASKS, OBS_DIM,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("invalid sweep config: {0}")]
    Config(String),
    #[error("no embodiment {0} in the roster")]
    UnknownEmbodiment(EmbodimentId),
    #[error("{path}: {reason}")]
    Output { path: String, reason: String },
}

fn out_err(path: &Path) -> impl Fn(String) -> ExperimentError + '_ {
    move |reason| ExperimentError::Output {
        path: path.display().to_string(),
        reason,
    }
}

/// Which data a head learns from during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Target-robot data only.
    Robot,
    /// Target-robot and transfer data.
    Cotrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mix {
    RobotOnly,
    WithTransfer,
}

impl Mix {
    pub fn label(self, transfer: EmbodimentId) -> String {
        match self {
            Mix::RobotOnly => "robot_only".into(),
            Mix::WithTransfer => format!("with_{transfer}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Episodes per (combo, robot) in the pretraining pool.
    pub pretrain_episodes: usize,
    /// Target-robot episodes on the benchmark's related task.
    pub finetune_robot_episodes: usize,
    /// Transfer-embodiment episodes on the benchmark task itself.
    pub finetune_transfer_episodes: usize,
    /// Unlabelled frames held after each demo ends.
    pub pad: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pretrain_episodes: 3,
            finetune_robot_episodes: 8,
            finetune_transfer_episodes: 8,
            pad: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub width: usize,
    pub flow_hidden: usize,
    pub token_positions: usize,
    pub token_rank: usize,
    /// Per unified dim; see [`default_action_scale`].
    pub action_scale: Vec<f64>,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            width: 128,
            flow_hidden: 128,
            token_positions: 32,
            token_rank: 16,
            action_scale: default_action_scale(),
        }
    }
}

/// Rough per-dim magnitude of a 4-step chunk: translations of a few steps,
/// small rotations, unit gripper, head sway.
pub fn default_action_scale() -> Vec<f64> {
    let mut s = vec![0.0; UNIFIED_DIM];
    for base in [0, 7] {
        for k in 0..3 {
            s[base + k] = 0.02;
            s[base + 3 + k] = 0.02;
        }
    }
    s[6] = 1.0;
    s[13] = 1.0;
    for v in &mut s[14..20] {
        *v = 0.05;
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub benchmark: String,
    pub per_class_n: usize,
    pub probe: ProbeConfig,
    pub tsne: TsneConfig,
    /// t-SNE layouts are written for the first this-many seeds.
    pub tsne_seeds: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            benchmark: "sort_eggs".into(),
            per_class_n: 200,
            probe: ProbeConfig::default(),
            tsne: TsneConfig::default(),
            tsne_seeds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub ladder: DiversityLadder,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub benchmarks: Vec<String>,
    pub mixes: Vec<Mix>,
    pub data: DataConfig,
    pub model: ModelShape,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub chunk: ChunkConfig,
    pub tokenizer: TokenizerConfig,
    pub flow_steps: usize,
    pub hl_source: Source,
    pub ll_source: Source,
    /// Human by default; another robot gives the cross-embodiment preset.
    pub transfer: EmbodimentId,
    /// Also give the target robot demos of the benchmark task itself.
    pub upper_bound: bool,
    pub target_robot: EmbodimentId,
    pub pretrain_robots: Vec<EmbodimentId>,
    /// Added on the top rung when the ladder's `x_emb` is set.
    pub extra_robots: Vec<EmbodimentId>,
    pub embodiments: Vec<EmbodimentParams>,
    pub alignment: AlignmentConfig,
    /// Step limit per eval episode, as a multiple of the expert's steps.
    pub eval_step_factor: f64,
    pub bootstrap_resamples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ladder: DiversityLadder {
                fractions: vec![0.0, 1.0],
                x_emb: false,
                ..DiversityLadder::default()
            },
            seeds: (0..10).collect(),
            eval_episodes: 30,
            benchmarks: vec!["sort_eggs".into()],
            mixes: vec![Mix::RobotOnly, Mix::WithTransfer],
            data: DataConfig::default(),
            model: ModelShape::default(),
            pretrain: TrainConfig {
                steps: 8000,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                steps: 1000,
                ..TrainConfig::default()
            },
            chunk: ChunkConfig::default(),
            tokenizer: TokenizerConfig::default(),
            flow_steps: 10,
            hl_source: Source::Cotrained,
            ll_source: Source::Cotrained,
            transfer: EmbodimentId::Human,
            upper_bound: false,
            target_robot: EmbodimentId::Robot(0),
            pretrain_robots: vec![EmbodimentId::Robot(0), EmbodimentId::Robot(1)],
            extra_robots: vec![EmbodimentId::Robot(2), EmbodimentId::Robot(3), EmbodimentId::Robot(4)],
            embodiments: default_embodiments(),
            alignment: AlignmentConfig::default(),
            eval_step_factor: 1.5,
            bootstrap_resamples: 10_000,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed".into());
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be ≥ 1".into());
        }
        if self.ladder.fractions.is_empty() || self.ladder.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("ladder fractions must lie in [0, 1]".into());
        }
        if self.flow_steps == 0 {
            return bad("flow_steps must be ≥ 1".into());
        }
        if self.tokenizer.horizon != self.chunk.horizon || self.tokenizer.unified_dim != self.chunk.unified_dim {
            return bad("tokenizer and chunk shapes differ".into());
        }
        if self.chunk.unified_dim != UNIFIED_DIM {
            return bad(format!("unified_dim must be {UNIFIED_DIM}"));
        }
        if self.transfer == self.target_robot {
            return bad("transfer embodiment must differ from the target robot".into());
        }
        for b in &self.benchmarks {
            benchmark(b)?;
        }
        for id in self.roster_ids() {
            self.embodiment(id)?;
        }
        self.chunk.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.tokenizer.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.model_config()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    fn roster_ids(&self) -> Vec<EmbodimentId> {
        let mut ids = vec![self.target_robot, self.transfer];
        ids.extend(&self.pretrain_robots);
        ids.extend(&self.extra_robots);
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn embodiment(&self, id: EmbodimentId) -> Result<EmbodimentSpec, ExperimentError> {
        let p = self
            .embodiments
            .iter()
            .find(|p| p.id == id)
            .ok_or(ExperimentError::UnknownEmbodiment(id))?;
        Ok(EmbodimentSpec::build(p.clone())?)
    }

    pub fn model_config(&self) -> Result<ModelConfig, ExperimentError> {
        let c = ModelConfig {
            obs_dim: OBS_DIM,
            n_tasks: N_TASKS,
            n_subtasks: N_SUBTASKS,
            horizon: self.chunk.horizon,
            unified_dim: self.chunk.unified_dim,
            width: self.model.width,
            flow_hidden: self.model.flow_hidden,
            token_positions: self.model.token_positions,
            token_rank: self.model.token_rank,
            vocab_size: self.tokenizer.bpe_vocab_size,
            action_scale: self.model.action_scale.clone(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Ladder rungs in sweep order.
    pub fn points(&self) -> Vec<LadderPoint> {
        let mut v: Vec<LadderPoint> = self
            .ladder
            .fractions
            .iter()
            .map(|&fraction| LadderPoint { fraction, x_emb: false })
            .collect();
        if self.ladder.x_emb {
            let top = self.ladder.fractions.iter().cloned().fold(0.0, f64::max);
            v.push(LadderPoint {
                fraction: top,
                x_emb: true,
            });
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub fraction: f64,
    pub x_emb: bool,
}

impl LadderPoint {
    pub fn tag(&self) -> String {
        format!("f{:.2}{}", self.fraction, if self.x_emb { "x" } else { "" })
    }
}

/// Stable 64-bit seed for the `idx`-th item of stream `tag` under run seed `seed`.
pub fn derive_seed(seed: u64, tag: &str, idx: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(idx.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Where an episode in the seed pool came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Pretrain { scene: u32, task: u32 },
    FinetuneRobot { bench: usize },
    FinetuneTransfer { bench: usize },
    UpperBound { bench: usize },
}

/// All demonstrations for one seed, tokenized.
pub struct SeedData {
    pub seed: u64,
    pub episodes: Vec<Episode>,
    pub roles: Vec<Role>,
    pub tokenizer: Tokenizer,
    pub samples: SampleSet,
    pub benchmarks: Vec<Benchmark>,
}

impl SeedData {
    pub fn generate(cfg: &SweepConfig, seed: u64) -> Result<Self, ExperimentError> {
        let mut episodes = Vec::new();
        let mut roles = Vec::new();
        let mut pool_robots = cfg.pretrain_robots.clone();
        if cfg.ladder.x_emb {
            pool_robots.extend(&cfg.extra_robots);
        }
        let pad = cfg.data.pad.max(cfg.chunk.span());
        for (scene, task) in cfg.ladder.order() {
            for &r in &pool_robots {
                let emb = cfg.embodiment(r)?;
                for k in 0..cfg.data.pretrain_episodes {
                    let tag = format!("pre-{scene}-{task}-{r}");
                    let spec = TaskSpec::new(TaskKind::from_id(task).expect("grid task"));
                    episodes.push(generate_episode(scene, spec, &emb, derive_seed(seed, &tag, k as u64), pad)?);
                    roles.push(Role::Pretrain { scene, task });
                }
            }
        }
        let benchmarks: Vec<Benchmark> = cfg.benchmarks.iter().map(|b| benchmark(b)).collect::<Result<_, _>>()?;
        let target = cfg.embodiment(cfg.target_robot)?;
        let transfer = cfg.embodiment(cfg.transfer)?;
        let mut alignment_bench = None;
        if !cfg.benchmarks.contains(&cfg.alignment.benchmark) {
            alignment_bench = Some(benchmark(&cfg.alignment.benchmark)?);
        }
        let all: Vec<Benchmark> = benchmarks.iter().cloned().chain(alignment_bench).collect();
        for (bi, b) in all.iter().enumerate() {
            for k in 0..cfg.data.finetune_robot_episodes {
                let s = derive_seed(seed, &format!("ft-robot-{}", b.name), k as u64);
                episodes.push(generate_episode(b.robot_scene, b.robot_task, &target, s, pad)?);
                roles.push(Role::FinetuneRobot { bench: bi });
            }
            for k in 0..cfg.data.finetune_transfer_episodes {
                let s = derive_seed(seed, &format!("ft-transfer-{}", b.name), k as u64);
                episodes.push(generate_episode(b.scene, b.task, &transfer, s, pad)?);
                roles.push(Role::FinetuneTransfer { bench: bi });
            }
            if cfg.upper_bound {
                for k in 0..cfg.data.finetune_robot_episodes {
                    let s = derive_seed(seed, &format!("ft-upper-{}", b.name), k as u64);
                    episodes.push(generate_episode(b.scene, b.task, &target, s, pad)?);
                    roles.push(Role::UpperBound { bench: bi });
                }
            }
        }
        let skel = SkeletonLayout::default();
        let corpus = unified_chunks(&episodes, &cfg.chunk, &skel)?;
        let tokenizer = Tokenizer::train(&corpus, cfg.tokenizer).map_err(DataError::from)?;
        let samples = SampleSet::build(&episodes, &cfg.chunk, &skel, &tokenizer)?;
        Ok(Self {
            seed,
            episodes,
            roles,
            tokenizer,
            samples,
            benchmarks: all,
        })
    }

    fn bench_index(&self, name: &str) -> Result<usize, ExperimentError> {
        self.benchmarks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| ExperimentError::World(WorldError::UnknownBenchmark(name.into())))
    }

    fn episodes_where(&self, pred: impl Fn(&Role, &Episode) -> bool) -> Vec<usize> {
        (0..self.episodes.len()).filter(|&k| pred(&self.roles[k], &self.episodes[k])).collect()
    }
}

/// Pretraining on the rung's combos. Fraction 0 is the seeded initialization.
pub fn run_pretrain(
    cfg: &SweepConfig,
    data: &SeedData,
    point: LadderPoint,
) -> Result<(ModelParams, Vec<LossRecord>), ExperimentError> {
    let init = ModelParams::init(cfg.model_config()?, derive_seed(data.seed, "init", 0))?;
    let combos = diversity_subset(&cfg.ladder, point.fraction)?;
    if combos.is_empty() {
        let mut p = init;
        p.round_to_f32();
        return Ok((p, Vec::new()));
    }
    let mut robots = cfg.pretrain_robots.clone();
    if point.x_emb {
        robots.extend(&cfg.extra_robots);
    }
    let eps = data.episodes_where(|r, e| match r {
        Role::Pretrain { scene, task } => combos.contains(&(*scene, *task)) && robots.contains(&e.embodiment.id),
        _ => false,
    });
    let spec = build_mixture(
        vec![data.samples.component("pretrain", eps, 1.0)],
        derive_seed(data.seed, &format!("pretrain-mix-{}", point.tag()), 0),
    )?;
    let mut source = MixtureSource {
        samples: &data.samples,
        spec,
        routing: vec![Routing::BOTH],
    };
    let tc = TrainConfig {
        seed: derive_seed(data.seed, &format!("pretrain-{}", point.tag()), 0),
        ..cfg.pretrain.clone()
    };
    let (mut p, curve) = train(init, &mut source, &tc)?;
    p.round_to_f32();
    Ok((p, curve))
}

/// Fine-tuning components: target robot first, then the transfer source.
pub fn finetune_components(
    cfg: &SweepConfig,
    data: &SeedData,
    bench: &str,
    mix: Mix,
) -> Result<(Vec<Component>, Vec<Routing>), ExperimentError> {
    let bi = data.bench_index(bench)?;
    let robot = data.episodes_where(|r, _| {
        matches!(r, Role::FinetuneRobot { bench } if *bench == bi)
            || matches!(r, Role::UpperBound { bench } if *bench == bi)
    });
    let transfer = data.episodes_where(|r, _| matches!(r, Role::FinetuneTransfer { bench } if *bench == bi));
    let w = match mix {
        Mix::RobotOnly => 0.0,
        Mix::WithTransfer => 0.5,
    };
    let flag = |s: Source| f64::from(u8::from(s == Source::Cotrained));
    Ok((
        vec![
            data.samples.component("robot", robot, 1.0 - w),
            data.samples.component("transfer", transfer, w),
        ],
        vec![
            Routing::BOTH,
            Routing {
                hl: flag(cfg.hl_source),
                ll: flag(cfg.ll_source),
            },
        ],
    ))
}

pub fn run_finetune(
    cfg: &SweepConfig,
    data: &SeedData,
    start: &ModelParams,
    point: LadderPoint,
    bench: &str,
    mix: Mix,
) -> Result<(ModelParams, Vec<LossRecord>), ExperimentError> {
    let (components, routing) = finetune_components(cfg, data, bench, mix)?;
    let tag = format!("finetune-{}-{bench}-{mix:?}", point.tag());
    let spec = build_mixture(components, derive_seed(data.seed, &format!("{tag}-mix"), 0))?;
    let mut source = MixtureSource {
        samples: &data.samples,
        spec,
        routing,
    };
    let tc = TrainConfig {
        seed: derive_seed(data.seed, &tag, 0),
        ..cfg.finetune.clone()
    };
    let (mut p, curve) = train(start.clone(), &mut source, &tc)?;
    p.round_to_f32();
    Ok((p, curve))
}

/// Closed-loop policy: predict the subtask, feed it back, integrate the flow
/// and execute the first row of the chunk.
pub struct ModelPolicy<'a> {
    pub params: &'a ModelParams,
    pub task: usize,
    pub flag: f64,
    pub flow_steps: usize,
    mask: Array1<f64>,
    rngs: Vec<ChaCha8Rng>,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(
        params: &'a ModelParams,
        task: usize,
        embodiment: Embodiment,
        flow_steps: usize,
        n_envs: usize,
        seed: u64,
    ) -> Self {
        let c = &params.config;
        let mut slot = vec![0.0; c.unified_dim];
        for s in slot_map(&embodiment) {
            slot[s] = 1.0;
        }
        let mask = Array1::from_iter((0..c.action_dim()).map(|k| slot[k % c.unified_dim]));
        let rngs = (0..n_envs)
            .map(|k| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(k as u64);
                r
            })
            .collect();
        Self {
            params,
            task,
            flag: f64::from(u8::from(embodiment.id.is_human())),
            flow_steps,
            mask,
            rngs,
        }
    }
}

impl Policy for ModelPolicy<'_> {
    fn act(&mut self, active: &[usize], _: &[&WorldState], obs: &Array2<f64>) -> Vec<(Command, Option<usize>)> {
        let n = active.len();
        let a = self.params.config.action_dim();
        let task = vec![self.task; n];
        let flag = vec![self.flag; n];
        let sub = predict_subtask(self.params, obs.view(), &task, &flag).expect("shapes fixed by config");
        let mut eps = Array2::zeros((n, a));
        for (row, &k) in active.iter().enumerate() {
            for j in 0..a {
                eps[[row, j]] = self.rngs[k].sample::<f64, _>(StandardNormal);
            }
        }
        let mask = Array2::from_shape_fn((n, a), |(_, j)| self.mask[j]);
        let subs: Vec<Option<usize>> = sub.iter().map(|&s| Some(s)).collect();
        let acts = sample_actions(self.params, obs.view(), &task, &subs, &flag, Some(&mask), &eps, self.flow_steps)
            .expect("shapes fixed by config");
        let d = self.params.config.unified_dim;
        (0..n)
            .map(|r| {
                let row: Vec<f64> = acts.row(r).iter().take(d).copied().collect();
                (command_from_unified_row(&row), Some(sub[r]))
            })
            .collect()
    }
}

/// Scores of `n` seeded rollouts on a benchmark's held-out combo.
pub fn run_eval(
    policy: &mut dyn Policy,
    bench: &Benchmark,
    emb: &EmbodimentSpec,
    n: usize,
    seed: u64,
    step_factor: f64,
) -> Result<Vec<f64>, ExperimentError> {
    let scenes: Vec<WorldState> = (0..n)
        .map(|k| generate_scene(bench.scene, bench.task, derive_seed(seed, &format!("eval-{}", bench.name), k as u64)))
        .collect::<Result<_, _>>()?;
    let limits: Vec<usize> = scenes
        .iter()
        .map(|s| {
            let expert = expert_steps(s, emb.max_step(), 100_000).unwrap_or(100_000);
            (expert as f64 * step_factor).ceil() as usize + 10
        })
        .collect();
    let traces = rollout_batch(policy, scenes, emb, &limits, derive_seed(seed, &format!("eval-obs-{}", bench.name), 0));
    Ok(traces.iter().map(score).collect())
}

pub fn eval_model(
    cfg: &SweepConfig,
    params: &ModelParams,
    bench: &Benchmark,
    seed: u64,
) -> Result<Vec<f64>, ExperimentError> {
    let emb = cfg.embodiment(cfg.target_robot)?;
    let mut policy = ModelPolicy::new(
        params,
        bench.task.kind.id() as usize,
        emb.embodiment,
        cfg.flow_steps,
        cfg.eval_episodes,
        derive_seed(seed, &format!("policy-noise-{}", bench.name), 0),
    );
    run_eval(&mut policy, bench, &emb, cfg.eval_episodes, seed, cfg.eval_step_factor)
}

/// Target-robot and transfer frames from a benchmark's fine-tuning data,
/// all conditioned on the benchmark task.
pub fn alignment_inputs(data: &SeedData, bench: &str) -> Result<Vec<EmbeddingInput>, ExperimentError> {
    let bi = data.bench_index(bench)?;
    let task = data.benchmarks[bi].task.kind.id();
    let eps = data.episodes_where(|r, _| {
        matches!(r, Role::FinetuneRobot { bench } | Role::FinetuneTransfer { bench } if *bench == bi)
    });
    let s = &data.samples;
    let mut out = Vec::new();
    for k in eps {
        for i in s.offsets[k]..s.offsets[k + 1] {
            out.push(EmbeddingInput {
                obs: s.obs.row(i).to_vec(),
                task: task as usize,
                flag: s.flag[i],
                embodiment: s.embodiment[i],
                scene_id: s.scene[i],
                task_id: task,
            });
        }
    }
    Ok(out)
}

pub fn run_alignment(
    cfg: &SweepConfig,
    data: &SeedData,
    params: &ModelParams,
) -> Result<(EmbeddingSet, AlignmentMetrics), ExperimentError> {
    let inputs = alignment_inputs(data, &cfg.alignment.benchmark)?;
    let set = collect_embeddings(
        params,
        &inputs,
        cfg.alignment.per_class_n,
        derive_seed(data.seed, "embed-sample", 0),
    )?;
    let probe = ProbeConfig {
        seed: derive_seed(data.seed, "probe", 0),
        ..cfg.alignment.probe
    };
    let m = alignment_metrics(&set, &probe)?;
    Ok((set, m))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation over √n; zero for a single value.
pub fn standard_error(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Lower end of the one-sided `1 − alpha` percentile-bootstrap interval for the mean.
pub fn bootstrap_lower_bound(v: &[f64], resamples: usize, alpha: f64, seed: u64) -> f64 {
    let n = v.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| v[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let k = ((alpha * resamples as f64).floor() as usize).min(resamples - 1);
    means[k]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub fraction: f64,
    pub x_emb: bool,
    pub mix: String,
    pub benchmark: String,
    pub seed: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub fraction: f64,
    pub x_emb: bool,
    pub seed: u64,
    pub probe_accuracy: f64,
    pub centroid_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub fraction: f64,
    pub x_emb: bool,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub x_emb: bool,
    pub mix: String,
    pub benchmark: String,
    pub mean: f64,
    pub standard_error: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainPoint {
    pub fraction: f64,
    pub x_emb: bool,
    pub benchmark: String,
    pub mean_gain: f64,
    pub standard_error: f64,
    pub n: usize,
}

/// Gain at the top rung minus gain at the bottom rung, paired by seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emergence {
    pub benchmark: String,
    pub low_fraction: f64,
    pub high_fraction: f64,
    pub mean_difference: f64,
    pub lower_bound_95: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPoint {
    pub fraction: f64,
    pub x_emb: bool,
    pub mean_probe_accuracy: f64,
    pub probe_standard_error: f64,
    pub mean_centroid_gap: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    pub curves: Vec<CurvePoint>,
    pub gains: Vec<GainPoint>,
    pub emergence: Vec<Emergence>,
    pub alignment: Vec<AlignmentPoint>,
    pub failures: Vec<FailedCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<ScoreRow>,
    pub alignment: Vec<AlignmentRow>,
    pub summary: SweepSummary,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub jobs: usize,
    pub progress: bool,
}

struct CellOutput {
    rows: Vec<ScoreRow>,
    alignment: Option<AlignmentRow>,
}

fn save_params(dir: &Path, name: &str, p: &ModelParams, curve: &[LossRecord]) -> Result<(), ExperimentError> {
    p.save(&dir.join("checkpoints").join(format!("{name}.ckpt")))?;
    write_loss_csv(&dir.join("losses").join(format!("{name}.csv")), curve)?;
    Ok(())
}

/// One ladder rung under one seed: pretrain once, then every benchmark × mix.
fn run_cell(
    cfg: &SweepConfig,
    data: &SeedData,
    point: LadderPoint,
    opts: &RunOptions,
) -> Result<CellOutput, ExperimentError> {
    let seed = data.seed;
    let (pre, curve) = run_pretrain(cfg, data, point)?;
    if let Some(dir) = &opts.out_dir {
        save_params(dir, &format!("pretrain_{}_s{seed}", point.tag()), &pre, &curve)?;
    }
    let mut rows = Vec::new();
    let mut alignment = None;
    let mut names: Vec<String> = cfg.benchmarks.clone();
    if !names.contains(&cfg.alignment.benchmark) {
        names.push(cfg.alignment.benchmark.clone());
    }
    for name in &names {
        let scored = cfg.benchmarks.contains(name);
        let bench = benchmark(name)?;
        let mixes: Vec<Mix> = if scored { cfg.mixes.clone() } else { vec![Mix::WithTransfer] };
        for mix in mixes {
            let (ft, curve) = run_finetune(cfg, data, &pre, point, name, mix)?;
            let cell = format!("finetune_{}_{name}_{}_s{seed}", point.tag(), mix.label(cfg.transfer));
            if let Some(dir) = &opts.out_dir {
                save_params(dir, &cell, &ft, &curve)?;
            }
            if scored {
                let scores = eval_model(cfg, &ft, &bench, seed)?;
                rows.push(ScoreRow {
                    fraction: point.fraction,
                    x_emb: point.x_emb,
                    mix: mix.label(cfg.transfer),
                    benchmark: name.clone(),
                    seed,
                    score: mean(&scores),
                });
            }
            if mix == Mix::WithTransfer && *name == cfg.alignment.benchmark {
                let (set, m) = run_alignment(cfg, data, &ft)?;
                if let Some(dir) = &opts.out_dir {
                    let stem = format!("{}_s{seed}", point.tag());
                    let emb_dir = dir.join("embeddings");
                    set.write_csv(&emb_dir.join(format!("{stem}.csv")))?;
                    let rank = cfg.seeds.iter().position(|s| *s == seed).unwrap_or(usize::MAX);
                    if rank < cfg.alignment.tsne_seeds {
                        let tc = TsneConfig {
                            seed: derive_seed(seed, "tsne", 0),
                            ..cfg.alignment.tsne
                        };
                        let r = tsne(set.points.view(), &tc)?;
                        write_layout_csv(&emb_dir.join(format!("{stem}_tsne.csv")), &r.layout, &set)?;
                    }
                }
                alignment = Some(AlignmentRow {
                    fraction: point.fraction,
                    x_emb: point.x_emb,
                    seed,
                    probe_accuracy: m.probe_accuracy,
                    centroid_gap: m.centroid_gap,
                });
            }
        }
    }
    if opts.progress {
        eprintln!("done {} seed {seed}", point.tag());
    }
    Ok(CellOutput { rows, alignment })
}

fn key(f: f64, x: bool) -> (u64, bool) {
    (f.to_bits(), x)
}

pub fn summarize(cfg: &SweepConfig, rows: &[ScoreRow], align: &[AlignmentRow], failures: Vec<FailedCell>) -> SweepSummary {
    let points = cfg.points();
    let mut curves = Vec::new();
    let mut gains = Vec::new();
    let mut per_seed_gain: BTreeMap<(String, (u64, bool)), BTreeMap<u64, f64>> = BTreeMap::new();
    let robot = Mix::RobotOnly.label(cfg.transfer);
    let with = Mix::WithTransfer.label(cfg.transfer);
    for b in &cfg.benchmarks {
        for p in &points {
            let at = |mix: &str| -> BTreeMap<u64, f64> {
                rows.iter()
                    .filter(|r| &r.benchmark == b && r.mix == mix && key(r.fraction, r.x_emb) == key(p.fraction, p.x_emb))
                    .map(|r| (r.seed, r.score))
                    .collect()
            };
            for mix in &cfg.mixes {
                let label = mix.label(cfg.transfer);
                let v: Vec<f64> = at(&label).into_values().collect();
                if v.is_empty() {
                    continue;
                }
                curves.push(CurvePoint {
                    fraction: p.fraction,
                    x_emb: p.x_emb,
                    mix: label,
                    benchmark: b.clone(),
                    mean: mean(&v),
                    standard_error: standard_error(&v),
                    n: v.len(),
                });
            }
            let (r, w) = (at(&robot), at(&with));
            let g: BTreeMap<u64, f64> = w.iter().filter_map(|(s, sw)| r.get(s).map(|sr| (*s, sw - sr))).collect();
            if g.is_empty() {
                continue;
            }
            let v: Vec<f64> = g.values().copied().collect();
            gains.push(GainPoint {
                fraction: p.fraction,
                x_emb: p.x_emb,
                benchmark: b.clone(),
                mean_gain: mean(&v),
                standard_error: standard_error(&v),
                n: v.len(),
            });
            per_seed_gain.insert((b.clone(), key(p.fraction, p.x_emb)), g);
        }
    }
    let plain: Vec<f64> = points.iter().filter(|p| !p.x_emb).map(|p| p.fraction).collect();
    let mut emergence = Vec::new();
    if plain.len() >= 2 {
        let lo = plain.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plain.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for b in &cfg.benchmarks {
            let (Some(gl), Some(gh)) = (
                per_seed_gain.get(&(b.clone(), key(lo, false))),
                per_seed_gain.get(&(b.clone(), key(hi, false))),
            ) else {
                continue;
            };
            let d: Vec<f64> = gh.iter().filter_map(|(s, h)| gl.get(s).map(|l| h - l)).collect();
            if d.is_empty() {
                continue;
            }
            emergence.push(Emergence {
                benchmark: b.clone(),
                low_fraction: lo,
                high_fraction: hi,
                mean_difference: mean(&d),
                lower_bound_95: bootstrap_lower_bound(&d, cfg.bootstrap_resamples.max(1), 0.05, derive_seed(0, "bootstrap", 0)),
                n: d.len(),
            });
        }
    }
    let alignment = points
        .iter()
        .filter_map(|p| {
            let sel: Vec<&AlignmentRow> = align.iter().filter(|a| key(a.fraction, a.x_emb) == key(p.fraction, p.x_emb)).collect();
            if sel.is_empty() {
                return None;
            }
            let acc: Vec<f64> = sel.iter().map(|a| a.probe_accuracy).collect();
            let gap: Vec<f64> = sel.iter().map(|a| a.centroid_gap).collect();
            Some(AlignmentPoint {
                fraction: p.fraction,
                x_emb: p.x_emb,
                mean_probe_accuracy: mean(&acc),
                probe_standard_error: standard_error(&acc),
                mean_centroid_gap: mean(&gap),
                n: acc.len(),
            })
        })
        .collect();
    SweepSummary {
        config_fingerprint: cfg.fingerprint(),
        seeds: cfg.seeds.clone(),
        curves,
        gains,
        emergence,
        alignment,
        failures,
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let err = out_err(path);
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| err(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| err(e.to_string()))?;
    write_atomic(path, &bytes).map_err(|e| err(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let err = out_err(path);
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| err(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|e| err(e.to_string()))
}

pub fn write_results_csv(path: &Path, rows: &[ScoreRow]) -> Result<(), ExperimentError> {
    write_csv(path, rows)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ScoreRow>, ExperimentError> {
    let err = out_err(path);
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| err(e.to_string()))
}

pub fn read_alignment_csv(path: &Path) -> Result<Vec<AlignmentRow>, ExperimentError> {
    let err = out_err(path);
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| err(e.to_string()))
}

/// Writes results.csv, gains.csv, alignment.csv, summary.json and config.json.
pub fn write_artifacts(dir: &Path, cfg: &SweepConfig, result: &SweepResult) -> Result<(), ExperimentError> {
    write_results_csv(&dir.join("results.csv"), &result.rows)?;
    write_csv(&dir.join("gains.csv"), &result.summary.gains)?;
    write_csv(&dir.join("alignment.csv"), &result.alignment)?;
    write_json(&dir.join("summary.json"), &result.summary)?;
    write_json(&dir.join("config.json"), cfg)
}

/// Every (seed, rung) cell, each independent of the others.
pub fn run_sweep(cfg: &SweepConfig, opts: &RunOptions) -> Result<SweepResult, ExperimentError> {
    cfg.validate()?;
    let points = cfg.points();
    let run_seed = |seed: u64| -> Vec<(LadderPoint, Result<CellOutput, ExperimentError>)> {
        match SeedData::generate(cfg, seed) {
            Ok(data) => points.iter().map(|&p| (p, run_cell(cfg, &data, p, opts))).collect(),
            Err(e) => {
                let msg = e.to_string();
                points.iter().map(|&p| (p, Err(ExperimentError::Config(msg.clone())))).collect()
            }
        }
    };
    let per_seed: Vec<(u64, Vec<(LadderPoint, Result<CellOutput, ExperimentError>)>)> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        pool.install(|| cfg.seeds.par_iter().map(|&s| (s, run_seed(s))).collect())
    } else {
        cfg.seeds.iter().map(|&s| (s, run_seed(s))).collect()
    };
    let mut rows = Vec::new();
    let mut alignment = Vec::new();
    let mut failures = Vec::new();
    for (seed, cells) in per_seed {
        for (p, r) in cells {
            match r {
                Ok(c) => {
                    rows.extend(c.rows);
                    alignment.extend(c.alignment);
                }
                Err(e) => failures.push(FailedCell {
                    fraction: p.fraction,
                    x_emb: p.x_emb,
                    seed,
                    error: e.to_string(),
                }),
            }
        }
    }
    let summary = summarize(cfg, &rows, &alignment, failures);
    let result = SweepResult {
        rows,
        alignment,
        summary,
    };
    if let Some(dir) = &opts.out_dir {
        write_artifacts(dir, cfg, &result)?;
    }
    Ok(result)
}
