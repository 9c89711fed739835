//! Training samples cut from episodes, and batch assembly from mixture draws.
//!
//! A sample is one subtask-labelled frame: its observation, the unified action
//! chunk that starts there, and the chunk's token sequence. Unlabelled padding
//! frames only serve as chunk targets.

use ndarray::{Array2, Axis};
use thiserror::Error;

use crate::action::{action_chunk, unify, ActionError, ChunkConfig, SkeletonLayout};
use crate::episode::{EmbodimentId, Episode};
use crate::mixture::{sample_batch, Component, MixtureSpec};
use crate::policy::{Batch, BatchSource};
use crate::tokenizer::{Tokenizer, TokenizerError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("episode {episode}: {source}")]
    Action { episode: String, source: ActionError },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("episode {0} has inconsistent observation width")]
    ObsWidth(String),
    #[error("no samples")]
    Empty,
}

/// Unified chunks at every labelled frame, for tokenizer training.
pub fn unified_chunks(
    episodes: &[Episode],
    chunk: &ChunkConfig,
    skeleton: &SkeletonLayout,
) -> Result<Vec<(Array2<f64>, Vec<bool>)>, DataError> {
    let mut out = Vec::new();
    for e in episodes {
        for t in labelled_starts(e, chunk) {
            out.push(chunk_at(e, t, chunk, skeleton)?);
        }
    }
    Ok(out)
}

fn labelled_starts(e: &Episode, chunk: &ChunkConfig) -> Vec<usize> {
    (0..chunk.valid_starts(e.len())).filter(|&t| e.subtask_at(t).is_some()).collect()
}

fn chunk_at(
    e: &Episode,
    t: usize,
    chunk: &ChunkConfig,
    skeleton: &SkeletonLayout,
) -> Result<(Array2<f64>, Vec<bool>), DataError> {
    let err = |source| DataError::Action {
        episode: e.id.clone(),
        source,
    };
    let c = action_chunk(e, t, chunk, skeleton).map_err(err)?;
    unify(&c, chunk.unified_dim).map_err(err)
}

/// Column-aligned sample store. Samples of episode `k` occupy
/// `offsets[k]..offsets[k + 1]`.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub obs: Array2<f64>,
    pub task: Vec<usize>,
    pub subtask: Vec<usize>,
    pub flag: Vec<f64>,
    pub actions: Array2<f64>,
    pub mask: Array2<f64>,
    pub tokens: Vec<Vec<u32>>,
    pub embodiment: Vec<EmbodimentId>,
    pub scene: Vec<u32>,
    pub offsets: Vec<usize>,
}

impl SampleSet {
    pub fn build(
        episodes: &[Episode],
        chunk: &ChunkConfig,
        skeleton: &SkeletonLayout,
        tokenizer: &Tokenizer,
    ) -> Result<Self, DataError> {
        let obs_dim = episodes.first().map(|e| e.obs_dim()).ok_or(DataError::Empty)?;
        let a_dim = chunk.flat_dim();
        let mut obs = Vec::new();
        let mut actions = Vec::new();
        let mut mask = Vec::new();
        let mut s = Self {
            obs: Array2::zeros((0, obs_dim)),
            task: Vec::new(),
            subtask: Vec::new(),
            flag: Vec::new(),
            actions: Array2::zeros((0, a_dim)),
            mask: Array2::zeros((0, a_dim)),
            tokens: Vec::new(),
            embodiment: Vec::new(),
            scene: Vec::new(),
            offsets: vec![0],
        };
        for e in episodes {
            if e.obs_dim() != obs_dim {
                return Err(DataError::ObsWidth(e.id.clone()));
            }
            let flag = f64::from(u8::from(e.embodiment.id.is_human()));
            for t in labelled_starts(e, chunk) {
                let (x, m) = chunk_at(e, t, chunk, skeleton)?;
                obs.extend(e.frames[t].obs_features.iter().map(|v| f64::from(*v)));
                actions.extend(x.iter().copied());
                for _ in 0..chunk.horizon {
                    mask.extend(m.iter().map(|&b| f64::from(u8::from(b))));
                }
                s.tokens.push(tokenizer.encode(&x, &m)?.tokens);
                s.task.push(e.task_id as usize);
                s.subtask.push(e.subtask_at(t).expect("labelled") as usize);
                s.flag.push(flag);
                s.embodiment.push(e.embodiment.id);
                s.scene.push(e.scene_id);
            }
            s.offsets.push(s.task.len());
        }
        let n = s.task.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        s.obs = Array2::from_shape_vec((n, obs_dim), obs).expect("rows are obs_dim wide");
        s.actions = Array2::from_shape_vec((n, a_dim), actions).expect("rows are H·D wide");
        s.mask = Array2::from_shape_vec((n, a_dim), mask).expect("rows are H·D wide");
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.task.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task.is_empty()
    }

    pub fn n_episodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// `(episode, sample count)` pairs for a mixture component.
    pub fn component(&self, name: &str, episodes: impl IntoIterator<Item = usize>, weight: f64) -> Component {
        Component::new(
            name,
            episodes
                .into_iter()
                .map(|k| (k, self.offsets[k + 1] - self.offsets[k]))
                .filter(|e| e.1 > 0)
                .collect(),
            weight,
        )
    }

    pub fn index(&self, episode: usize, frame: usize) -> usize {
        self.offsets[episode] + frame
    }

    /// Gathers rows into a batch with the given per-row loss weights.
    pub fn batch(&self, rows: &[usize], hl_weight: Vec<f64>, ll_weight: Vec<f64>) -> Batch {
        Batch {
            obs: self.obs.select(Axis(0), rows),
            task: rows.iter().map(|&i| self.task[i]).collect(),
            subtask: rows.iter().map(|&i| self.subtask[i]).collect(),
            flag: rows.iter().map(|&i| self.flag[i]).collect(),
            actions: self.actions.select(Axis(0), rows),
            action_mask: self.mask.select(Axis(0), rows),
            tokens: rows.iter().map(|&i| self.tokens[i].clone()).collect(),
            hl_weight,
            ll_weight,
        }
    }
}

/// Loss routing for one mixture component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Routing {
    pub hl: f64,
    pub ll: f64,
}

impl Routing {
    pub const BOTH: Routing = Routing { hl: 1.0, ll: 1.0 };
}

/// Batches drawn from a mixture over one sample set.
pub struct MixtureSource<'a> {
    pub samples: &'a SampleSet,
    pub spec: MixtureSpec,
    /// One entry per mixture component.
    pub routing: Vec<Routing>,
}

impl BatchSource for MixtureSource<'_> {
    fn batch(&mut self, step: usize, batch_size: usize) -> Batch {
        let draws = sample_batch(&self.spec, batch_size, step as u64);
        let rows: Vec<usize> = draws.iter().map(|d| self.samples.index(d.episode, d.frame)).collect();
        let hl = draws.iter().map(|d| self.routing[d.component].hl).collect();
        let ll = draws.iter().map(|d| self.routing[d.component].ll).collect();
        self.samples.batch(&rows, hl, ll)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::build_mixture;
    use crate::tokenizer::TokenizerConfig;
    use crate::world::{default_embodiments, generate_episode, EmbodimentSpec, TaskKind, TaskSpec};

    fn episodes() -> Vec<Episode> {
        let emb = default_embodiments();
        let human = EmbodimentSpec::build(emb[0].clone()).unwrap();
        let robot = EmbodimentSpec::build(emb[1].clone()).unwrap();
        let t = TaskSpec::new(TaskKind::Tidy);
        vec![
            generate_episode(0, t, &robot, 1, 4).unwrap(),
            generate_episode(0, t, &human, 2, 4).unwrap(),
        ]
    }

    #[test]
    fn samples_cover_every_labelled_frame() {
        let eps = episodes();
        let chunk = ChunkConfig::default();
        let skel = SkeletonLayout::default();
        let corpus = unified_chunks(&eps, &chunk, &skel).unwrap();
        let tok = Tokenizer::train(&corpus, TokenizerConfig::default()).unwrap();
        let s = SampleSet::build(&eps, &chunk, &skel, &tok).unwrap();
        let labelled: usize = eps.iter().map(|e| (0..e.len()).filter(|&t| e.subtask_at(t).is_some()).count()).sum();
        assert_eq!(s.len(), labelled);
        assert_eq!(s.len(), corpus.len());
        assert_eq!(s.n_episodes(), 2);
        for i in 0..s.len() {
            let human = s.embodiment[i].is_human();
            assert_eq!(s.flag[i], f64::from(u8::from(human)));
            // Grip slot (13) is valid only for robots; head slots only for humans.
            assert_eq!(s.mask[[i, 13]], f64::from(u8::from(!human)));
            assert_eq!(s.mask[[i, 19]], f64::from(u8::from(human)));
            let (x, m) = &corpus[i];
            assert_eq!(tok.encode(x, m).unwrap().tokens, s.tokens[i]);
        }
    }

    #[test]
    fn mixture_source_routes_weights_by_component() {
        let eps = episodes();
        let chunk = ChunkConfig::default();
        let skel = SkeletonLayout::default();
        let tok = Tokenizer::train(&unified_chunks(&eps, &chunk, &skel).unwrap(), TokenizerConfig::default()).unwrap();
        let s = SampleSet::build(&eps, &chunk, &skel, &tok).unwrap();
        let spec = build_mixture(vec![s.component("robot", [0], 1.0), s.component("human", [1], 1.0)], 3).unwrap();
        let mut src = MixtureSource {
            samples: &s,
            spec,
            routing: vec![Routing::BOTH, Routing { hl: 1.0, ll: 0.0 }],
        };
        let b = src.batch(5, 64);
        for i in 0..b.len() {
            let human = b.flag[i] == 1.0;
            assert_eq!(b.ll_weight[i], f64::from(u8::from(!human)));
            assert_eq!(b.hl_weight[i], 1.0);
        }
        let again = src.batch(5, 64);
        assert_eq!(again.obs, b.obs);
    }
}
