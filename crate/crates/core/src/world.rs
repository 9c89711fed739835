//! A deterministic planar pick-and-place world.
//!
//! One effector moves in a 1 m × 1 m workspace, picks objects and drops them
//! into containers. Tasks differ only in which container each object belongs
//! to. Each embodiment sees the world through its own fixed affine "style" of
//! the canonical feature vector, plus observation noise, and moves with its own
//! kinematic gain.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, Vector3};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{SLOT_RIGHT_EE, SLOT_RIGHT_GRIP};
use crate::episode::{
    Embodiment, EmbodimentId, Episode, Frame, HandKeypoints, PoseRecord, SubtaskSpan, KEYPOINTS_PER_HAND,
};
use crate::geometry::{Pose6, RotVec3};

pub const WORKSPACE: f64 = 1.0;
pub const MAX_STEP: f64 = 0.05;
pub const GRASP_RADIUS: f64 = 0.02;
pub const PLACE_RADIUS: f64 = 0.06;
/// The expert opens the gripper once this close to the container centre.
const RELEASE_RADIUS: f64 = 0.02;
/// Positions in observations are multiplied by this, so one effector step
/// is about half a unit.
pub const POSITION_SCALE: f64 = 10.0;
pub const APPEARANCE_DIM: usize = 8;
/// Per-episode spread of the appearance vector around its scene's value.
pub const APPEARANCE_JITTER: f64 = 0.5;
/// Std of the zero-mean displacement noise added while recording
/// demonstrations, relative to the embodiment's step size.
pub const DEMO_NOISE: f64 = 0.3;
pub const N_CLASSES: usize = 11;
pub const N_COLORS: usize = 3;
pub const N_TASKS: usize = 5;
pub const N_SUBTASKS: usize = 3;
pub const N_CANDIDATES: usize = 2;
pub const MAX_CONTAINERS: usize = 2;

const OBJ_FEATURES: usize = 2 + N_COLORS + N_CLASSES + 1;
const CONTAINER_FEATURES: usize = 4;
pub const ATTACHED_OFFSET: usize = 2;
pub const CANDIDATE_OFFSET: usize = 3 + N_COLORS + N_CLASSES;
pub const CONTAINER_OFFSET: usize = CANDIDATE_OFFSET + N_CANDIDATES * OBJ_FEATURES;
pub const APPEARANCE_OFFSET: usize = CONTAINER_OFFSET + MAX_CONTAINERS * CONTAINER_FEATURES;
/// Length of the canonical (and every rendered) observation vector.
pub const OBS_DIM: usize = APPEARANCE_OFFSET + APPEARANCE_DIM;

pub mod class {
    pub const CUP: u8 = 0;
    pub const WRAPPER: u8 = 1;
    pub const CAN: u8 = 2;
    pub const PLATE: u8 = 3;
    pub const BOWL: u8 = 4;
    pub const FORK: u8 = 5;
    pub const EGG: u8 = 6;
    pub const SPICE: u8 = 7;
    pub const SHIRT: u8 = 8;
    pub const SPATULA: u8 = 9;
    pub const LADLE: u8 = 10;
}

pub mod color {
    pub const WHITE: u8 = 0;
    pub const BROWN: u8 = 1;
    pub const OTHER: u8 = 2;
}

pub const SUBTASK_PICK: usize = 0;
pub const SUBTASK_PLACE_0: usize = 1;
pub const SUBTASK_PLACE_1: usize = 2;

pub fn subtask_vocab() -> Vec<String> {
    vec![
        "pick up the nearest item".into(),
        "put it in the first container".into(),
        "put it in the second container".into(),
    ]
}

/// Scenes 0..4 form the pretraining grid; 4, 5 and 6 are held out.
pub const GRID_SCENES: u32 = 4;
pub const GRID_TASKS: u32 = 4;
pub const SCENE_SPICE: u32 = 4;
pub const SCENE_DRESSER: u32 = 5;
pub const SCENE_EGGS: u32 = 6;
pub const N_SCENES: u32 = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("task is already complete")]
    TaskComplete,
    #[error("unknown scene {0}")]
    UnknownScene(u32),
    #[error("fraction {0} is not on the ladder")]
    NotOnLadder(f64),
    #[error("style matrix condition number {0:.1} exceeds 100")]
    IllConditioned(f64),
    #[error("unknown benchmark {0}")]
    UnknownBenchmark(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Bus,
    Tidy,
    Sort,
    Pack,
    SortEggs,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [Self::Bus, Self::Tidy, Self::Sort, Self::Pack, Self::SortEggs];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn rule(self) -> ScoringRule {
        match self {
            Self::Bus | Self::Tidy | Self::Sort => ScoringRule::Fraction,
            Self::SortEggs => ScoringRule::FractionWithSeal,
            Self::Pack => ScoringRule::Binary,
        }
    }

    pub fn containers(self) -> usize {
        match self {
            Self::Tidy => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringRule {
    Fraction,
    /// Container "seals" count as extra points.
    FractionWithSeal,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Bus with object classes never seen in pretraining.
    #[serde(default)]
    pub novel_objects: bool,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            novel_objects: false,
        }
    }

    /// Containers that accept `obj` as a correct placement.
    pub fn accepts(&self, obj: &Object) -> Vec<usize> {
        match self.kind {
            TaskKind::Tidy => vec![0],
            TaskKind::Bus => vec![usize::from(matches!(obj.class, class::WRAPPER | class::CAN))],
            TaskKind::Sort => vec![sort_bin(obj.class)],
            TaskKind::Pack => vec![0, 1],
            TaskKind::SortEggs => vec![usize::from(obj.color == color::BROWN)],
        }
    }
}

/// Class → container table of the sort task.
fn sort_bin(c: u8) -> usize {
    match c {
        class::CUP | class::PLATE | class::BOWL | class::FORK | class::SPATULA | class::LADLE => 0,
        _ => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub position: [f64; 2],
    pub class: u8,
    pub color: u8,
    pub placed_in: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Container {
    pub position: [f64; 2],
    pub capacity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effector {
    pub position: [f64; 2],
    pub attached: Option<usize>,
    pub grip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub scene_id: u32,
    pub task: TaskSpec,
    pub objects: Vec<Object>,
    pub containers: Vec<Container>,
    pub effector: Effector,
    pub appearance: [f64; APPEARANCE_DIM],
    pub step: usize,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl WorldState {
    pub fn fill(&self, c: usize) -> usize {
        self.objects.iter().filter(|o| o.placed_in == Some(c)).count()
    }

    pub fn is_correct(&self, i: usize) -> bool {
        let o = &self.objects[i];
        o.placed_in.is_some_and(|c| self.task.accepts(o).contains(&c))
    }

    /// Unplaced, unattached objects sorted by distance to the effector, ties by id.
    pub fn candidates(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.objects.len())
            .filter(|&i| self.objects[i].placed_in.is_none() && self.effector.attached != Some(i))
            .collect();
        let p = self.effector.position;
        v.sort_by(|&a, &b| {
            dist(self.objects[a].position, p)
                .total_cmp(&dist(self.objects[b].position, p))
                .then(a.cmp(&b))
        });
        v
    }

    pub fn is_complete(&self) -> bool {
        (0..self.objects.len()).all(|i| self.is_correct(i))
    }

    /// Container the expert would bring `obj` to: the first accepting one,
    /// or for `Pack` the nearest one with room.
    pub fn target_container(&self, obj: usize) -> usize {
        let accept = self.task.accepts(&self.objects[obj]);
        let p = self.effector.position;
        accept
            .iter()
            .copied()
            .filter(|&c| c < self.containers.len() && self.fill(c) < self.containers[c].capacity)
            .min_by(|&a, &b| {
                dist(self.containers[a].position, p)
                    .total_cmp(&dist(self.containers[b].position, p))
                    .then(a.cmp(&b))
            })
            .unwrap_or(accept[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SceneLayout {
    containers: [[f64; 2]; 2],
    single: [f64; 2],
    region: [f64; 4],
}

fn scene_layout(scene: u32) -> Option<SceneLayout> {
    let l = |c0, c1, single, region| SceneLayout {
        containers: [c0, c1],
        single,
        region,
    };
    Some(match scene {
        0 => l([0.15, 0.9], [0.85, 0.9], [0.5, 0.9], [0.15, 0.85, 0.1, 0.7]),
        1 => l([0.1, 0.1], [0.9, 0.1], [0.5, 0.08], [0.15, 0.85, 0.3, 0.9]),
        2 => l([0.08, 0.3], [0.08, 0.7], [0.08, 0.5], [0.3, 0.9, 0.1, 0.9]),
        3 => l([0.3, 0.92], [0.7, 0.08], [0.92, 0.5], [0.15, 0.8, 0.2, 0.8]),
        SCENE_SPICE => l([0.2, 0.92], [0.8, 0.92], [0.5, 0.92], [0.1, 0.9, 0.1, 0.6]),
        SCENE_DRESSER => l([0.92, 0.25], [0.92, 0.75], [0.92, 0.5], [0.1, 0.7, 0.1, 0.9]),
        SCENE_EGGS => l([0.25, 0.1], [0.75, 0.1], [0.5, 0.1], [0.1, 0.9, 0.3, 0.9]),
        _ => return None,
    })
}

/// Fixed per-scene nuisance vector (lighting, furniture, backdrop).
pub fn scene_appearance(scene: u32) -> [f64; APPEARANCE_DIM] {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA99E_A2A0_0000 + u64::from(scene));
    let mut a = [0.0; APPEARANCE_DIM];
    for v in &mut a {
        *v = rng.sample(StandardNormal);
    }
    a
}

fn object_pool(scene: u32, task: &TaskSpec) -> (&'static [u8], usize) {
    use class::*;
    match task.kind {
        TaskKind::SortEggs => (&[EGG], 12),
        TaskKind::Pack if scene == SCENE_EGGS => (&[EGG], 12),
        TaskKind::Pack => (&[CUP, CAN, BOWL, PLATE, EGG], 6),
        TaskKind::Bus if task.novel_objects => (&[SPATULA, LADLE, WRAPPER, CAN], 9),
        TaskKind::Bus => (&[CUP, PLATE, BOWL, FORK, WRAPPER, CAN], 9),
        TaskKind::Sort => (&[CUP, WRAPPER, CAN, PLATE, BOWL, FORK, SHIRT], 8),
        TaskKind::Tidy => match scene {
            0 => (&[CUP, PLATE, BOWL], 6),
            1 => (&[SHIRT, CAN], 6),
            2 => (&[FORK, WRAPPER], 6),
            3 => (&[BOWL, SHIRT, CUP], 6),
            SCENE_SPICE => (&[SPICE], 6),
            SCENE_DRESSER => (&[SHIRT], 6),
            _ => (&[CUP, BOWL], 6),
        },
    }
}

fn scene_rng(scene: u32, task: &TaskSpec, seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(
        (u64::from(scene) << 40) ^ (u64::from(task.kind.id()) << 32) ^ (u64::from(task.novel_objects) << 31) ^ salt,
    );
    rng
}

/// Deterministic layout from `(scene, task, seed)`.
pub fn generate_scene(scene_id: u32, task: TaskSpec, seed: u64) -> Result<WorldState, WorldError> {
    let layout = scene_layout(scene_id).ok_or(WorldError::UnknownScene(scene_id))?;
    let mut rng = scene_rng(scene_id, &task, seed, 0);
    let jitter = |rng: &mut ChaCha8Rng, p: [f64; 2]| {
        [
            (p[0] + rng.random_range(-0.03..0.03)).clamp(0.02, 0.98),
            (p[1] + rng.random_range(-0.03..0.03)).clamp(0.02, 0.98),
        ]
    };
    let (pool, n) = object_pool(scene_id, &task);
    let eggs = pool == [class::EGG] && n == 12;
    let containers: Vec<Container> = if task.kind.containers() == 1 {
        vec![Container {
            position: jitter(&mut rng, layout.single),
            capacity: n,
        }]
    } else {
        let capacity = if eggs { 6 } else { n };
        layout
            .containers
            .iter()
            .map(|&p| Container {
                position: jitter(&mut rng, p),
                capacity,
            })
            .collect()
    };
    let [x0, x1, y0, y1] = layout.region;
    let mut objects: Vec<Object> = Vec::with_capacity(n);
    let mut tries = 0;
    while objects.len() < n {
        let p = [rng.random_range(x0..x1), rng.random_range(y0..y1)];
        tries += 1;
        let clear = objects.iter().all(|o| dist(o.position, p) > 0.06)
            && containers.iter().all(|c| dist(c.position, p) > PLACE_RADIUS + 0.04);
        if !clear && tries < 10_000 {
            continue;
        }
        let i = objects.len();
        let cls = pool[rng.random_range(0..pool.len())];
        let col = if eggs {
            if i % 2 == 0 {
                color::WHITE
            } else {
                color::BROWN
            }
        } else {
            rng.random_range(0..N_COLORS as u8)
        };
        objects.push(Object {
            position: p,
            class: cls,
            color: col,
            placed_in: None,
        });
    }
    let mut appearance = scene_appearance(scene_id);
    for v in &mut appearance {
        *v += APPEARANCE_JITTER * rng.sample::<f64, _>(StandardNormal);
    }
    let effector = Effector {
        position: [0.5 + rng.random_range(-0.1..0.1), 0.5 + rng.random_range(-0.1..0.1)],
        attached: None,
        grip: 0.0,
    };
    Ok(WorldState {
        scene_id,
        task,
        objects,
        containers,
        effector,
        appearance,
        step: 0,
    })
}

/// The embodiment-independent feature vector.
pub fn canonical_features(s: &WorldState) -> Array1<f64> {
    let mut f = Array1::zeros(OBS_DIM);
    let p = s.effector.position;
    f[0] = POSITION_SCALE * (p[0] - 0.5);
    f[1] = POSITION_SCALE * (p[1] - 0.5);
    if let Some(i) = s.effector.attached {
        let o = &s.objects[i];
        f[ATTACHED_OFFSET] = 1.0;
        f[ATTACHED_OFFSET + 1 + o.color as usize] = 1.0;
        f[ATTACHED_OFFSET + 1 + N_COLORS + o.class as usize] = 1.0;
    }
    for (k, &i) in s.candidates().iter().take(N_CANDIDATES).enumerate() {
        let o = &s.objects[i];
        let b = CANDIDATE_OFFSET + k * OBJ_FEATURES;
        f[b] = POSITION_SCALE * (o.position[0] - p[0]);
        f[b + 1] = POSITION_SCALE * (o.position[1] - p[1]);
        f[b + 2 + o.color as usize] = 1.0;
        f[b + 2 + N_COLORS + o.class as usize] = 1.0;
        f[b + OBJ_FEATURES - 1] = 1.0;
    }
    for (c, cont) in s.containers.iter().enumerate().take(MAX_CONTAINERS) {
        let b = CONTAINER_OFFSET + c * CONTAINER_FEATURES;
        f[b] = POSITION_SCALE * (cont.position[0] - p[0]);
        f[b + 1] = POSITION_SCALE * (cont.position[1] - p[1]);
        f[b + 2] = 1.0;
        f[b + 3] = s.fill(c) as f64 / cont.capacity.max(1) as f64;
    }
    for (k, v) in s.appearance.iter().enumerate() {
        f[APPEARANCE_OFFSET + k] = *v;
    }
    f
}

/// Parameters from which an embodiment's observation style is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentParams {
    pub id: EmbodimentId,
    pub style_seed: u64,
    /// Strength ε of the random mixing in `A = I + ε·G`.
    pub style_mix: f64,
    /// Norm of the offset component inside the appearance block.
    pub appearance_offset: f64,
    /// Norm of the offset component over the remaining features.
    pub general_offset: f64,
    pub noise_sigma: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbodimentSpec {
    pub params: EmbodimentParams,
    pub embodiment: Embodiment,
    pub style: Array2<f64>,
    pub offset: Array1<f64>,
}

impl EmbodimentSpec {
    pub fn build(params: EmbodimentParams) -> Result<Self, WorldError> {
        let d = OBS_DIM;
        let mut rng = ChaCha8Rng::seed_from_u64(params.style_seed);
        let scale = params.style_mix / (d as f64).sqrt();
        let style = Array2::from_shape_fn((d, d), |(i, j)| {
            let g: f64 = rng.sample(StandardNormal);
            f64::from(u8::from(i == j)) + scale * g
        });
        let cond = condition_number(&style);
        if !(cond < 100.0) {
            return Err(WorldError::IllConditioned(cond));
        }
        let mut app = Array1::<f64>::zeros(d);
        let mut gen = Array1::<f64>::zeros(d);
        for k in 0..d {
            let g: f64 = rng.sample(StandardNormal);
            if k >= APPEARANCE_OFFSET {
                app[k] = g;
            } else {
                gen[k] = g;
            }
        }
        let unit = |v: Array1<f64>| {
            let n = v.dot(&v).sqrt();
            if n > 0.0 {
                v / n
            } else {
                v
            }
        };
        let offset = unit(app) * params.appearance_offset + unit(gen) * params.general_offset;
        Ok(Self {
            embodiment: Embodiment::new(params.id),
            params,
            style,
            offset,
        })
    }

    pub fn id(&self) -> EmbodimentId {
        self.params.id
    }

    pub fn max_step(&self) -> f64 {
        MAX_STEP * self.params.gain
    }

    /// The trunk's embodiment flag: 1 for humans, 0 for robots.
    pub fn flag(&self) -> f64 {
        f64::from(u8::from(self.params.id.is_human()))
    }

    pub fn condition_number(&self) -> f64 {
        condition_number(&self.style)
    }
}

fn condition_number(a: &Array2<f64>) -> f64 {
    let (r, c) = a.dim();
    let m = DMatrix::from_fn(r, c, |i, j| a[[i, j]]);
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

/// Default embodiment roster: the human, the target robot, a second
/// pretraining robot and three extra robots.
pub fn default_embodiments() -> Vec<EmbodimentParams> {
    let robot = |k: u8, mix: f64, app: f64, gain: f64| EmbodimentParams {
        id: EmbodimentId::Robot(k),
        style_seed: 0x5EED_0000 + u64::from(k),
        style_mix: mix,
        appearance_offset: app,
        general_offset: 0.1,
        noise_sigma: 0.05,
        gain,
    };
    vec![
        EmbodimentParams {
            id: EmbodimentId::Human,
            style_seed: 0x5EED_00FF,
            style_mix: 0.3,
            appearance_offset: 3.0,
            general_offset: 0.2,
            noise_sigma: 0.05,
            gain: 1.2,
        },
        robot(0, 0.1, 1.5, 1.0),
        robot(1, 0.15, 2.0, 0.8),
        robot(2, 0.2, 2.5, 0.9),
        robot(3, 0.2, 2.5, 1.1),
        robot(4, 0.25, 3.0, 0.7),
    ]
}

/// `style · canonical + offset + σ·noise`.
pub fn render_obs(s: &WorldState, emb: &EmbodimentSpec, rng: &mut impl Rng) -> Array1<f64> {
    let canon = canonical_features(s);
    let mut o = emb.style.dot(&canon) + &emb.offset;
    if emb.params.noise_sigma > 0.0 {
        for v in o.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += emb.params.noise_sigma * n;
        }
    }
    o
}

/// Realized effector motion plus gripper command for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Command {
    pub displacement: [f64; 2],
    pub grip: f64,
}

impl Command {
    pub const IDLE: Command = Command {
        displacement: [0.0, 0.0],
        grip: 0.0,
    };
}

fn clip_norm(d: [f64; 2], max: f64) -> [f64; 2] {
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if n > max {
        [d[0] * max / n, d[1] * max / n]
    } else {
        d
    }
}

/// Advances the world by one command. Displacements longer than `max_step`
/// are shortened; the effector stays in the workspace.
pub fn apply_command(s: &mut WorldState, cmd: Command, max_step: f64) {
    let d = clip_norm(cmd.displacement, max_step);
    let d = [
        if d[0].is_finite() { d[0] } else { 0.0 },
        if d[1].is_finite() { d[1] } else { 0.0 },
    ];
    let p = &mut s.effector.position;
    p[0] = (p[0] + d[0]).clamp(0.0, WORKSPACE);
    p[1] = (p[1] + d[1]).clamp(0.0, WORKSPACE);
    let pos = *p;
    if let Some(i) = s.effector.attached {
        s.objects[i].position = pos;
    }
    let closed = cmd.grip > 0.5;
    match (closed, s.effector.attached) {
        (true, None) => {
            if let Some(&i) = s.candidates().first() {
                if dist(s.objects[i].position, pos) <= GRASP_RADIUS {
                    s.effector.attached = Some(i);
                    s.objects[i].position = pos;
                }
            }
        }
        (false, Some(i)) => {
            s.effector.attached = None;
            let spot = (0..s.containers.len())
                .filter(|&c| dist(s.containers[c].position, pos) <= PLACE_RADIUS)
                .filter(|&c| s.fill(c) < s.containers[c].capacity)
                .min_by(|&a, &b| {
                    dist(s.containers[a].position, pos)
                        .total_cmp(&dist(s.containers[b].position, pos))
                        .then(a.cmp(&b))
                });
            if let Some(c) = spot {
                s.objects[i].placed_in = Some(c);
                s.objects[i].position = s.containers[c].position;
            }
        }
        _ => {}
    }
    s.effector.grip = if closed { 1.0 } else { 0.0 };
    s.step += 1;
}

/// One expert step: the command and the subtask it serves.
pub fn expert_command(s: &WorldState, max_step: f64) -> Result<(Command, usize), WorldError> {
    let pos = s.effector.position;
    if let Some(i) = s.effector.attached {
        let c = s.target_container(i);
        let target = s.containers[c].position;
        let d = clip_norm([target[0] - pos[0], target[1] - pos[1]], max_step);
        let next = [pos[0] + d[0], pos[1] + d[1]];
        let release = dist(next, target) <= RELEASE_RADIUS;
        let cmd = Command {
            displacement: d,
            grip: if release { 0.0 } else { 1.0 },
        };
        return Ok((cmd, SUBTASK_PLACE_0 + c));
    }
    let &i = s.candidates().first().ok_or(WorldError::TaskComplete)?;
    let target = s.objects[i].position;
    let d = clip_norm([target[0] - pos[0], target[1] - pos[1]], max_step);
    let next = [pos[0] + d[0], pos[1] + d[1]];
    let grasp = dist(next, target) <= GRASP_RADIUS;
    Ok((
        Command {
            displacement: d,
            grip: if grasp { 1.0 } else { 0.0 },
        },
        SUBTASK_PICK,
    ))
}

/// The expert's next `horizon` commands as robot action rows
/// (`[dx, dy, grip]` cumulative from the current pose) and the current subtask.
pub fn scripted_expert(
    s: &WorldState,
    max_step: f64,
    horizon: usize,
) -> Result<(Array2<f64>, usize), WorldError> {
    let (_, subtask) = expert_command(s, max_step)?;
    let mut sim = s.clone();
    let start = s.effector.position;
    let mut rows = Array2::zeros((horizon, 3));
    for r in 0..horizon {
        let cmd = expert_command(&sim, max_step).map(|c| c.0).unwrap_or(Command::IDLE);
        apply_command(&mut sim, cmd, max_step);
        rows[[r, 0]] = sim.effector.position[0] - start[0];
        rows[[r, 1]] = sim.effector.position[1] - start[1];
        rows[[r, 2]] = cmd.grip;
    }
    Ok((rows, subtask))
}

/// Steps the expert needs from `s`, or `None` if it does not finish in `limit`.
pub fn expert_steps(s: &WorldState, max_step: f64, limit: usize) -> Option<usize> {
    let mut sim = s.clone();
    for n in 0..limit {
        match expert_command(&sim, max_step) {
            Ok((cmd, _)) => apply_command(&mut sim, cmd, max_step),
            Err(_) => return Some(n),
        }
    }
    None
}

/// A loose analytic bound on expert steps: every leg is a straight line of at
/// most the workspace diagonal, plus one grasp or release step per leg.
pub fn expert_step_bound(s: &WorldState, max_step: f64) -> usize {
    let leg = (std::f64::consts::SQRT_2 * WORKSPACE / max_step).ceil() as usize + 1;
    2 * s.objects.len() * leg
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParts {
    pub correct: usize,
    pub sealed: usize,
    pub objects: usize,
    pub containers: usize,
}

pub fn score_fraction(correct: usize, objects: usize) -> f64 {
    correct as f64 / objects as f64
}

pub fn score_with_seal(correct: usize, sealed: usize, objects: usize, containers: usize) -> f64 {
    (correct + sealed) as f64 / (objects + containers) as f64
}

pub fn score_binary(correct: usize, objects: usize) -> f64 {
    f64::from(u8::from(correct == objects))
}

pub fn score_parts(s: &WorldState) -> ScoreParts {
    let correct = (0..s.objects.len()).filter(|&i| s.is_correct(i)).count();
    // A container seals once it is full and holds only correct items.
    let sealed = (0..s.containers.len())
        .filter(|&c| {
            let inside: Vec<usize> = (0..s.objects.len()).filter(|&i| s.objects[i].placed_in == Some(c)).collect();
            inside.len() == s.containers[c].capacity && inside.iter().all(|&i| s.is_correct(i))
        })
        .count();
    ScoreParts {
        correct,
        sealed,
        objects: s.objects.len(),
        containers: s.containers.len(),
    }
}

pub fn score_state(s: &WorldState) -> f64 {
    let p = score_parts(s);
    match s.task.kind.rule() {
        ScoringRule::Fraction => score_fraction(p.correct, p.objects),
        ScoringRule::FractionWithSeal => score_with_seal(p.correct, p.sealed, p.objects, p.containers),
        ScoringRule::Binary => score_binary(p.correct, p.objects),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub final_state: WorldState,
    pub steps: usize,
    pub completed: bool,
    pub truncated: bool,
    /// Subtask reported by the policy at each step, when it reports one.
    pub subtasks: Vec<Option<usize>>,
}

pub fn score(trace: &Trace) -> f64 {
    score_state(&trace.final_state)
}

/// Closed-loop controller over a batch of environments.
pub trait Policy {
    /// `active[k]` is the environment index of row `k` of `obs`.
    fn act(&mut self, active: &[usize], states: &[&WorldState], obs: &Array2<f64>) -> Vec<(Command, Option<usize>)>;
}

/// The scripted expert as a closed-loop policy.
pub struct ExpertPolicy {
    pub max_step: f64,
}

impl Policy for ExpertPolicy {
    fn act(&mut self, _: &[usize], states: &[&WorldState], _: &Array2<f64>) -> Vec<(Command, Option<usize>)> {
        states
            .iter()
            .map(|s| match expert_command(s, self.max_step) {
                Ok((c, sub)) => (c, Some(sub)),
                Err(_) => (Command::IDLE, None),
            })
            .collect()
    }
}

/// Does nothing.
pub struct IdlePolicy;

impl Policy for IdlePolicy {
    fn act(&mut self, active: &[usize], _: &[&WorldState], _: &Array2<f64>) -> Vec<(Command, Option<usize>)> {
        vec![(Command::IDLE, None); active.len()]
    }
}

/// Reads a command from row 0 of a unified action chunk.
pub fn command_from_unified_row(row: &[f64]) -> Command {
    Command {
        displacement: [row[SLOT_RIGHT_EE.start], row[SLOT_RIGHT_EE.start + 1]],
        grip: row[SLOT_RIGHT_GRIP],
    }
}

/// Runs all environments in lockstep until each completes or hits its step
/// limit. Observation noise for environment `k` comes from its own stream of
/// `obs_seed`, so results do not depend on batch composition.
pub fn rollout_batch(
    policy: &mut dyn Policy,
    scenes: Vec<WorldState>,
    emb: &EmbodimentSpec,
    max_steps: &[usize],
    obs_seed: u64,
) -> Vec<Trace> {
    let n = scenes.len();
    let mut states = scenes;
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(obs_seed);
            r.set_stream(k as u64);
            r
        })
        .collect();
    let mut subtasks = vec![Vec::new(); n];
    let mut done: Vec<bool> = states.iter().map(|s| s.is_complete()).collect();
    loop {
        let active: Vec<usize> = (0..n).filter(|&k| !done[k] && states[k].step < max_steps[k]).collect();
        if active.is_empty() {
            break;
        }
        let mut obs = Array2::zeros((active.len(), OBS_DIM));
        for (row, &k) in active.iter().enumerate() {
            obs.row_mut(row).assign(&render_obs(&states[k], emb, &mut rngs[k]));
        }
        let cmds = {
            let refs: Vec<&WorldState> = active.iter().map(|&k| &states[k]).collect();
            policy.act(&active, &refs, &obs)
        };
        for (&k, (cmd, sub)) in active.iter().zip(cmds) {
            apply_command(&mut states[k], cmd, emb.max_step());
            subtasks[k].push(sub);
            done[k] = states[k].is_complete();
        }
    }
    states
        .into_iter()
        .zip(subtasks)
        .map(|(s, subtasks)| {
            let completed = s.is_complete();
            Trace {
                steps: s.step,
                truncated: !completed,
                completed,
                subtasks,
                final_state: s,
            }
        })
        .collect()
}

pub fn rollout(
    policy: &mut dyn Policy,
    scene: WorldState,
    emb: &EmbodimentSpec,
    max_steps: usize,
    obs_seed: u64,
) -> Trace {
    rollout_batch(policy, vec![scene], emb, &[max_steps], obs_seed).remove(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiversityLadder {
    pub scenes: u32,
    pub tasks: u32,
    pub fractions: Vec<f64>,
    pub x_emb: bool,
    /// Seeds the order in which combos join the ladder.
    pub order_seed: u64,
}

impl Default for DiversityLadder {
    fn default() -> Self {
        Self {
            scenes: GRID_SCENES,
            tasks: GRID_TASKS,
            fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            x_emb: true,
            order_seed: 7,
        }
    }
}

impl DiversityLadder {
    pub fn order(&self) -> Vec<(u32, u32)> {
        let mut all: Vec<(u32, u32)> = (0..self.scenes)
            .flat_map(|s| (0..self.tasks).map(move |t| (s, t)))
            .collect();
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(self.order_seed));
        all
    }
}

/// The first `round(f·S·T)` combos of the ladder order; nested by construction.
pub fn diversity_subset(ladder: &DiversityLadder, fraction: f64) -> Result<BTreeSet<(u32, u32)>, WorldError> {
    if !ladder.fractions.iter().any(|f| (f - fraction).abs() < 1e-12) {
        return Err(WorldError::NotOnLadder(fraction));
    }
    let total = (ladder.scenes * ladder.tasks) as f64;
    let k = (fraction * total).round() as usize;
    Ok(ladder.order().into_iter().take(k).collect())
}

/// A held-out evaluation combo with its fine-tuning data sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub name: String,
    pub scene: u32,
    pub task: TaskSpec,
    /// Robot fine-tuning data: the related task the target robot was shown.
    pub robot_scene: u32,
    pub robot_task: TaskSpec,
}

pub fn benchmarks() -> Vec<Benchmark> {
    let b = |name: &str, scene, task, robot_scene, robot_task| Benchmark {
        name: name.into(),
        scene,
        task,
        robot_scene,
        robot_task,
    };
    let t = TaskSpec::new;
    vec![
        b("spice", SCENE_SPICE, t(TaskKind::Tidy), 0, t(TaskKind::Tidy)),
        b("dresser", SCENE_DRESSER, t(TaskKind::Tidy), 1, t(TaskKind::Tidy)),
        b(
            "bus_novel",
            2,
            TaskSpec {
                kind: TaskKind::Bus,
                novel_objects: true,
            },
            2,
            t(TaskKind::Bus),
        ),
        b("sort_eggs", SCENE_EGGS, t(TaskKind::SortEggs), SCENE_EGGS, t(TaskKind::Pack)),
    ]
}

pub fn benchmark(name: &str) -> Result<Benchmark, WorldError> {
    benchmarks()
        .into_iter()
        .find(|b| b.name == name)
        .ok_or_else(|| WorldError::UnknownBenchmark(name.into()))
}

/// Head pose of the human demonstrator at frame `t`: a slow sway.
fn head_pose(t: usize, phase: f64) -> Pose6 {
    let a = t as f64 * 0.15 + phase;
    Pose6::new(
        Vector3::new(0.5 + 0.01 * a.sin(), -0.35 + 0.01 * (0.7 * a).cos(), 0.45 + 0.005 * (1.3 * a).sin()),
        RotVec3(Vector3::new(0.03 * (0.9 * a).sin(), 0.02 * (1.1 * a).cos(), 0.03 * (0.5 * a).sin())),
    )
}

/// Hand keypoints in the hand's own frame; palm, middle and ring base
/// (indices 0, 9, 13) span the frame with identity rotation.
fn hand_template() -> [Vector3<f64>; KEYPOINTS_PER_HAND] {
    let mut k = [Vector3::zeros(); KEYPOINTS_PER_HAND];
    for (f, y) in [0.03, 0.015, 0.0, -0.015].iter().enumerate() {
        for j in 0..4 {
            let idx = 1 + f * 4 + j;
            if idx < KEYPOINTS_PER_HAND {
                k[idx] = Vector3::new(0.05 + 0.03 * j as f64, *y, 0.0);
            }
        }
    }
    k[9] = Vector3::new(0.08, 0.01, 0.0);
    k[13] = Vector3::new(0.08, -0.01, 0.0);
    k[16] = Vector3::new(0.02, 0.05, 0.0);
    k
}

const LEFT_REST: [f64; 3] = [0.25, 0.2, 0.0];

fn robot_body(frame: &mut Frame, s: &WorldState) {
    let left = Pose6::from_translation(LEFT_REST[0], LEFT_REST[1], LEFT_REST[2]);
    let p = s.effector.position;
    frame.left_ee = Some(PoseRecord::from_pose(&left));
    frame.right_ee = Some(PoseRecord::from_pose(&Pose6::from_translation(p[0], p[1], 0.0)));
    frame.left_grip = Some(0.0);
    frame.right_grip = Some(s.effector.grip as f32);
}

fn human_body(frame: &mut Frame, s: &WorldState, t: usize, phase: f64) {
    let head = head_pose(t, phase);
    let inv = head.inverse();
    let tpl = hand_template();
    let p = s.effector.position;
    let palms = [Vector3::new(LEFT_REST[0], LEFT_REST[1], LEFT_REST[2]), Vector3::new(p[0], p[1], 0.0)];
    let mut kp = HandKeypoints::zeros();
    for (h, palm) in palms.iter().enumerate() {
        for (k, q) in tpl.iter().enumerate() {
            let local = inv.transform_point(&(palm + q));
            kp.0[h][k] = [local.x as f32, local.y as f32, local.z as f32];
        }
    }
    frame.head_pose = Some(PoseRecord::from_pose(&head));
    frame.hand_keypoints = Some(kp);
}

/// Records one expert demonstration as an episode. After the task completes
/// the last state is held for `pad` extra frames, which carry no subtask, so
/// that every labelled frame admits a full action chunk.
pub fn generate_episode(
    scene_id: u32,
    task: TaskSpec,
    emb: &EmbodimentSpec,
    seed: u64,
    pad: usize,
) -> Result<Episode, WorldError> {
    let mut s = generate_scene(scene_id, task, seed)?;
    let mut obs_rng = scene_rng(scene_id, &task, seed, 1 + u64::from(emb.id().code()));
    let phase = obs_rng.random_range(0.0..std::f64::consts::TAU);
    let limit = 2 * expert_step_bound(&s, emb.max_step());
    let mut act_rng = scene_rng(scene_id, &task, seed, 100 + u64::from(emb.id().code()));
    let sigma = DEMO_NOISE * emb.max_step();
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    let human = emb.id().is_human();
    let record = |s: &WorldState, rng: &mut ChaCha8Rng, t: usize| {
        let obs: Vec<f32> = render_obs(s, emb, rng).iter().map(|v| *v as f32).collect();
        let mut f = Frame::new(t as f64 * 0.1, obs);
        if human {
            human_body(&mut f, s, t, phase);
        } else {
            robot_body(&mut f, s);
        }
        f
    };
    while let Ok((cmd, sub)) = expert_command(&s, emb.max_step()) {
        if labels.len() >= limit {
            break;
        }
        frames.push(record(&s, &mut obs_rng, frames.len()));
        labels.push(sub as u32);
        let mut cmd = cmd;
        for d in cmd.displacement.iter_mut() {
            *d += sigma * act_rng.sample::<f64, _>(StandardNormal);
        }
        apply_command(&mut s, cmd, emb.max_step());
    }
    for _ in 0..=pad {
        frames.push(record(&s, &mut obs_rng, frames.len()));
    }
    let mut subtasks: Vec<SubtaskSpan> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match subtasks.last_mut() {
            Some(sp) if sp.label_id == l && sp.end_frame == t as u32 => sp.end_frame += 1,
            _ => subtasks.push(SubtaskSpan {
                start_frame: t as u32,
                end_frame: t as u32 + 1,
                label_id: l,
            }),
        }
    }
    Ok(Episode {
        id: format!("{}-s{}-t{}-n{}-{}", emb.id(), scene_id, task.kind.id(), u8::from(task.novel_objects), seed),
        embodiment: emb.embodiment,
        scene_id,
        task_id: task.kind.id(),
        frames,
        subtasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{action_chunk, ChunkConfig, SkeletonLayout};
    use crate::episode::validate_episode;

    fn spec(k: usize) -> EmbodimentSpec {
        EmbodimentSpec::build(default_embodiments()[k].clone()).unwrap()
    }

    fn all_tasks() -> Vec<(u32, TaskSpec)> {
        let mut v: Vec<(u32, TaskSpec)> = (0..GRID_SCENES)
            .flat_map(|s| TaskKind::ALL[..4].iter().map(move |&k| (s, TaskSpec::new(k))))
            .collect();
        for b in benchmarks() {
            v.push((b.scene, b.task));
            v.push((b.robot_scene, b.robot_task));
        }
        v
    }

    #[test]
    fn scenes_are_deterministic_and_in_bounds() {
        let t = TaskSpec::new(TaskKind::Sort);
        assert_eq!(generate_scene(1, t, 5).unwrap(), generate_scene(1, t, 5).unwrap());
        for seed in 0..100 {
            for (scene, task) in all_tasks() {
                let s = generate_scene(scene, task, seed).unwrap();
                for o in &s.objects {
                    assert!(o.position.iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
        assert!(generate_scene(99, t, 0).is_err());
    }

    #[test]
    fn sort_scenes_have_two_containers_and_mixed_objects() {
        let s = generate_scene(0, TaskSpec::new(TaskKind::Sort), 3).unwrap();
        assert_eq!(s.containers.len(), 2);
        let bins: BTreeSet<usize> = s.objects.iter().map(|o| sort_bin(o.class)).collect();
        assert_eq!(bins.len(), 2);
        let e = generate_scene(SCENE_EGGS, TaskSpec::new(TaskKind::SortEggs), 3).unwrap();
        let white = e.objects.iter().filter(|o| o.color == color::WHITE).count();
        assert_eq!((e.objects.len(), white, e.containers.len()), (12, 6, 2));
    }

    #[test]
    fn identity_style_without_noise_renders_canonical_features() {
        let mut p = default_embodiments()[1].clone();
        p.style_mix = 0.0;
        p.appearance_offset = 0.0;
        p.general_offset = 0.0;
        p.noise_sigma = 0.0;
        let e = EmbodimentSpec::build(p).unwrap();
        let s = generate_scene(2, TaskSpec::new(TaskKind::Bus), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(render_obs(&s, &e, &mut rng), canonical_features(&s));
    }

    #[test]
    fn styles_differ_by_their_affine_maps() {
        let s = generate_scene(3, TaskSpec::new(TaskKind::Pack), 2).unwrap();
        let canon = canonical_features(&s);
        for k in [0, 1, 2] {
            let mut p = default_embodiments()[k].clone();
            p.noise_sigma = 0.0;
            let e = EmbodimentSpec::build(p).unwrap();
            let o = render_obs(&s, &e, &mut ChaCha8Rng::seed_from_u64(0));
            // Invert the style: solve A x = o − b.
            let a = DMatrix::from_fn(OBS_DIM, OBS_DIM, |i, j| e.style[[i, j]]);
            let rhs = nalgebra::DVector::from_fn(OBS_DIM, |i, _| o[i] - e.offset[i]);
            let x = a.lu().solve(&rhs).unwrap();
            for i in 0..OBS_DIM {
                assert!((x[i] - canon[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let s = generate_scene(0, TaskSpec::new(TaskKind::Tidy), 0).unwrap();
        let e = spec(0);
        let a = render_obs(&s, &e, &mut ChaCha8Rng::seed_from_u64(9));
        let b = render_obs(&s, &e, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn styles_are_well_conditioned() {
        for p in default_embodiments() {
            assert!(EmbodimentSpec::build(p).unwrap().condition_number() < 100.0);
        }
    }

    #[test]
    fn expert_grasps_when_on_object() {
        let mut s = generate_scene(0, TaskSpec::new(TaskKind::Tidy), 4).unwrap();
        let i = s.candidates()[0];
        s.effector.position = s.objects[i].position;
        let (cmd, sub) = expert_command(&s, MAX_STEP).unwrap();
        assert_eq!(sub, SUBTASK_PICK);
        assert_eq!(cmd.grip, 1.0);
        apply_command(&mut s, cmd, MAX_STEP);
        assert_eq!(s.effector.attached, Some(i));
    }

    #[test]
    fn single_object_finishes_within_distance_bound() {
        let mut s = generate_scene(0, TaskSpec::new(TaskKind::Tidy), 1).unwrap();
        s.objects.truncate(1);
        let p = s.effector.position;
        let o = s.objects[0].position;
        let c = s.containers[0].position;
        let bound = (dist(p, o) / MAX_STEP).ceil() + (dist(o, c) / MAX_STEP).ceil();
        let n = expert_steps(&s, MAX_STEP, 1000).unwrap();
        assert!(n as f64 <= bound, "{n} > {bound}");
    }

    #[test]
    fn subtasks_alternate_pick_then_place() {
        let e = generate_episode(1, TaskSpec::new(TaskKind::Sort), &spec(1), 2, 4).unwrap();
        let labels: Vec<u32> = e.subtasks.iter().map(|s| s.label_id).collect();
        for (k, l) in labels.iter().enumerate() {
            assert_eq!(*l == SUBTASK_PICK as u32, k % 2 == 0, "{labels:?}");
        }
        assert_eq!(labels.len(), 16);
    }

    #[test]
    fn expert_solves_every_combo_for_every_embodiment() {
        let embs: Vec<EmbodimentSpec> = default_embodiments().into_iter().map(|p| EmbodimentSpec::build(p).unwrap()).collect();
        for (scene, task) in all_tasks() {
            for e in &embs {
                for seed in 0..3 {
                    let s = generate_scene(scene, task, seed).unwrap();
                    let bound = expert_step_bound(&s, e.max_step());
                    let mut pol = ExpertPolicy { max_step: e.max_step() };
                    let tr = rollout(&mut pol, s, e, bound, seed);
                    assert!(tr.completed, "scene {scene} task {task:?} emb {}", e.id());
                    assert_eq!(score(&tr), 1.0);
                }
            }
        }
    }

    #[test]
    fn idle_policy_scores_zero() {
        for (scene, task) in all_tasks() {
            let s = generate_scene(scene, task, 0).unwrap();
            let tr = rollout(&mut IdlePolicy, s, &spec(1), 50, 0);
            assert_eq!(score(&tr), 0.0);
            assert!(tr.truncated);
        }
    }

    #[test]
    fn rollouts_are_deterministic_and_batch_independent() {
        let e = spec(1);
        let scenes: Vec<WorldState> = (0..3).map(|k| generate_scene(0, TaskSpec::new(TaskKind::Bus), k).unwrap()).collect();
        let mut pol = ExpertPolicy { max_step: e.max_step() };
        let a = rollout_batch(&mut pol, scenes.clone(), &e, &[400; 3], 5);
        let b = rollout_batch(&mut pol, scenes.clone(), &e, &[400; 3], 5);
        assert_eq!(a, b);
    }

    #[test]
    fn scoring_formulas() {
        assert!((score_fraction(9, 9) - 1.0).abs() < 1e-12);
        assert!((score_with_seal(12, 2, 12, 2) - 1.0).abs() < 1e-12);
        assert!((score_with_seal(7, 1, 12, 2) - 8.0 / 14.0).abs() < 1e-12);
        assert_eq!(score_binary(6, 6), 1.0);
        assert_eq!(score_binary(5, 6), 0.0);
    }

    #[test]
    fn egg_scoring_on_states() {
        let mut s = generate_scene(SCENE_EGGS, TaskSpec::new(TaskKind::SortEggs), 0).unwrap();
        // Fill container 0 with its six white eggs: 6 correct + 1 seal.
        for i in 0..12 {
            if s.objects[i].color == color::WHITE {
                s.objects[i].placed_in = Some(0);
            }
        }
        assert!((score_state(&s) - 7.0 / 14.0).abs() < 1e-12);
        // One brown egg in the wrong container breaks nothing already sealed.
        let brown = (0..12).find(|&i| s.objects[i].color == color::BROWN).unwrap();
        s.objects[brown].placed_in = Some(1);
        assert!((score_state(&s) - 8.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn ladder_subsets() {
        let l = DiversityLadder::default();
        assert_eq!(diversity_subset(&l, 0.25).unwrap().len(), 4);
        assert_eq!(diversity_subset(&l, 1.0).unwrap().len(), 16);
        assert!(diversity_subset(&l, 0.0).unwrap().is_empty());
        assert!(diversity_subset(&l, 0.3).is_err());
        let sets: Vec<_> = l.fractions.iter().map(|&f| diversity_subset(&l, f).unwrap()).collect();
        for w in sets.windows(2) {
            assert!(w[0].is_subset(&w[1]));
        }
    }

    #[test]
    fn episodes_validate_and_chunk() {
        let cfg = ChunkConfig::default();
        for k in [0usize, 1] {
            let e = generate_episode(0, TaskSpec::new(TaskKind::Bus), &spec(k), 3, cfg.span()).unwrap();
            assert!(validate_episode(&e).is_empty(), "{:?}", validate_episode(&e));
            let last_labelled = e.subtasks.last().unwrap().end_frame as usize - 1;
            let c = action_chunk(&e, last_labelled, &cfg, &SkeletonLayout::default()).unwrap();
            assert_eq!(c.dim(), if k == 0 { 18 } else { 16 });
        }
    }

    #[test]
    fn human_hand_chunk_tracks_effector_motion() {
        let cfg = ChunkConfig::default();
        let s0 = generate_scene(2, TaskSpec::new(TaskKind::Tidy), 8).unwrap();
        let e = generate_episode(2, TaskSpec::new(TaskKind::Tidy), &spec(0), 8, cfg.span()).unwrap();
        let c = action_chunk(&e, 0, &cfg, &SkeletonLayout::default()).unwrap();
        let mut sim = s0.clone();
        let ms = spec(0).max_step();
        let mut act_rng = scene_rng(2, &TaskSpec::new(TaskKind::Tidy), 8, 100 + u64::from(spec(0).id().code()));
        for i in 0..cfg.horizon {
            let (mut cmd, _) = expert_command(&sim, ms).unwrap();
            for d in cmd.displacement.iter_mut() {
                *d += DEMO_NOISE * ms * act_rng.sample::<f64, _>(StandardNormal);
            }
            apply_command(&mut sim, cmd, ms);
            let dx = sim.effector.position[0] - s0.effector.position[0];
            assert!((c.values[[i, 6]] - dx).abs() < 1e-5, "{} vs {dx}", c.values[[i, 6]]);
        }
    }

    #[test]
    fn probe_separates_embodiments_on_identical_states() {
        // Least-squares linear probe on raw observations.
        let (a, b) = (spec(0), spec(1));
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..100 {
            let s = generate_scene((seed % 4) as u32, TaskSpec::new(TaskKind::Bus), seed).unwrap();
            rows.push(render_obs(&s, &a, &mut rng));
            y.push(1.0);
            rows.push(render_obs(&s, &b, &mut rng));
            y.push(-1.0);
        }
        let n = rows.len();
        let x = DMatrix::from_fn(n, OBS_DIM + 1, |i, j| if j == OBS_DIM { 1.0 } else { rows[i][j] });
        let yv = nalgebra::DVector::from_vec(y.clone());
        let w = (x.transpose() * &x + DMatrix::identity(OBS_DIM + 1, OBS_DIM + 1) * 1e-3)
            .lu()
            .solve(&(x.transpose() * yv))
            .unwrap();
        let pred = x * w;
        let acc = (0..n).filter(|&i| pred[i].signum() == y[i]).count() as f64 / n as f64;
        assert!(acc > 0.95, "{acc}");
    }
}
