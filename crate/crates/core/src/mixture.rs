//! Weighted co-training mixtures with random-access batch sampling.
//!
//! Every draw first picks a component with probability equal to its weight,
//! then a `(episode, chunk start)` pair uniformly within that component. The
//! randomness for step `k` comes from stream `k` of a ChaCha generator keyed by
//! the mixture seed, so any step can be drawn without replaying earlier ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{DatasetManifest, EmbodimentId, ManifestEntry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixtureError {
    #[error("component {0} has positive weight but no samples")]
    EmptyComponent(usize),
    #[error("mixture weights sum to zero")]
    ZeroTotalWeight,
    #[error("weight {weight} of component {index} is negative or not finite")]
    BadWeight { index: usize, weight: f64 },
    #[error("mixture has no components")]
    NoComponents,
}

/// One data source: episodes (by caller-defined index) and how many chunk
/// starts each offers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub episodes: Vec<(usize, usize)>,
    pub weight: f64,
}

impl Component {
    pub fn new(name: impl Into<String>, episodes: Vec<(usize, usize)>, weight: f64) -> Self {
        Self {
            name: name.into(),
            episodes,
            weight,
        }
    }

    pub fn total_starts(&self) -> usize {
        self.episodes.iter().map(|e| e.1).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub components: Vec<Component>,
    /// Normalized weights.
    pub weights: Vec<f64>,
    pub seed: u64,
    cumulative: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draw {
    pub component: usize,
    pub episode: usize,
    pub frame: usize,
}

pub fn build_mixture(components: Vec<Component>, seed: u64) -> Result<MixtureSpec, MixtureError> {
    if components.is_empty() {
        return Err(MixtureError::NoComponents);
    }
    for (index, c) in components.iter().enumerate() {
        if !(c.weight.is_finite() && c.weight >= 0.0) {
            return Err(MixtureError::BadWeight {
                index,
                weight: c.weight,
            });
        }
        if c.weight > 0.0 && c.total_starts() == 0 {
            return Err(MixtureError::EmptyComponent(index));
        }
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    if total <= 0.0 {
        return Err(MixtureError::ZeroTotalWeight);
    }
    let weights = components.iter().map(|c| c.weight / total).collect();
    let cumulative = components
        .iter()
        .map(|c| {
            c.episodes
                .iter()
                .scan(0, |acc, e| {
                    *acc += e.1;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    Ok(MixtureSpec {
        components,
        weights,
        seed,
        cumulative,
    })
}

impl MixtureSpec {
    fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let last = self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if *w > 0.0 && u < acc {
                return i;
            }
        }
        last
    }

    fn locate(&self, component: usize, k: usize) -> (usize, usize) {
        let cum = &self.cumulative[component];
        let slot = cum.partition_point(|&c| c <= k);
        let before = if slot == 0 { 0 } else { cum[slot - 1] };
        (self.components[component].episodes[slot].0, k - before)
    }
}

/// Draws `batch_size` samples for training step `step`.
pub fn sample_batch(spec: &MixtureSpec, batch_size: usize, step: u64) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(step);
    (0..batch_size)
        .map(|_| {
            let component = spec.pick_component(rng.random::<f64>());
            let total = *spec.cumulative[component].last().expect("non-empty component");
            let (episode, frame) = spec.locate(component, rng.random_range(0..total));
            Draw {
                component,
                episode,
                frame,
            }
        })
        .collect()
}

/// Which manifest episodes a mixture entry takes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embodiment: Option<EmbodimentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_ids: Option<Vec<u32>>,
}

impl EpisodeFilter {
    pub fn matches(&self, e: &ManifestEntry) -> bool {
        self.embodiment.is_none_or(|id| id == e.embodiment)
            && self.scene_ids.as_ref().is_none_or(|s| s.contains(&e.scene_id))
            && self.task_ids.as_ref().is_none_or(|t| t.contains(&e.task_id))
    }

    pub fn apply(&self, m: &DatasetManifest) -> DatasetManifest {
        DatasetManifest {
            format_version: m.format_version,
            episodes: m.episodes.iter().filter(|e| self.matches(e)).cloned().collect(),
        }
    }
}

/// One line of a mixture config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub dataset: String,
    #[serde(default)]
    pub filter: EpisodeFilter,
    pub weight: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comp(n_eps: usize, starts: usize, w: f64) -> Component {
        Component::new("c", (0..n_eps).map(|e| (e, starts)).collect(), w)
    }

    #[test]
    fn weights_normalize() {
        let m = build_mixture(vec![comp(2, 3, 1.0), comp(2, 3, 1.0)], 0).unwrap();
        assert_eq!(m.weights, vec![0.5, 0.5]);
        let m = build_mixture(vec![comp(2, 3, 3.0), comp(2, 3, 1.0)], 0).unwrap();
        assert_eq!(m.weights, vec![0.75, 0.25]);
        let m = build_mixture(vec![comp(1, 1, 0.2)], 0).unwrap();
        assert_eq!(m.weights, vec![1.0]);
    }

    #[test]
    fn invalid_mixtures() {
        assert_eq!(
            build_mixture(vec![comp(2, 3, 0.0), comp(1, 1, 0.0)], 0),
            Err(MixtureError::ZeroTotalWeight)
        );
        assert_eq!(build_mixture(vec![comp(0, 3, 1.0)], 0), Err(MixtureError::EmptyComponent(0)));
        assert!(build_mixture(vec![comp(1, 3, 1.0), comp(0, 0, 0.0)], 0).is_ok());
        assert!(matches!(build_mixture(vec![comp(1, 3, -1.0)], 0), Err(MixtureError::BadWeight { .. })));
    }

    #[test]
    fn zero_weight_component_is_never_drawn() {
        let m = build_mixture(vec![comp(3, 4, 1.0), comp(3, 4, 0.0)], 9).unwrap();
        for step in 0..50 {
            assert!(sample_batch(&m, 32, step).iter().all(|d| d.component == 0));
        }
    }

    #[test]
    fn steps_are_random_access() {
        let m = build_mixture(vec![comp(3, 4, 1.0), comp(5, 2, 1.0)], 3).unwrap();
        let direct = sample_batch(&m, 16, 40);
        for s in 0..40 {
            sample_batch(&m, 16, s);
        }
        assert_eq!(sample_batch(&m, 16, 40), direct);
    }

    #[test]
    fn draws_cover_all_starts_uniformly() {
        // Episode 7 has three starts, episode 2 has one: 3:1 odds.
        let m = build_mixture(vec![Component::new("c", vec![(7, 3), (2, 1)], 1.0)], 1).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for step in 0..500 {
            for d in sample_batch(&m, 40, step) {
                *counts.entry((d.episode, d.frame)).or_insert(0usize) += 1;
            }
        }
        assert_eq!(counts.len(), 4);
        for (&(e, f), &n) in &counts {
            assert!(f < if e == 7 { 3 } else { 1 });
            assert!((n as f64 - 5000.0).abs() < 300.0, "{e} {f} {n}");
        }
    }

    #[test]
    fn filters_select_by_fields() {
        let entry = |id: &str, emb, s, t| ManifestEntry {
            id: id.into(),
            embodiment: emb,
            scene_id: s,
            task_id: t,
            frame_count: 10,
            path: format!("{id}.eg2a"),
        };
        let m = DatasetManifest {
            format_version: 1,
            episodes: vec![
                entry("a", EmbodimentId::Human, 6, 4),
                entry("b", EmbodimentId::Robot(0), 6, 3),
                entry("c", EmbodimentId::Robot(0), 1, 3),
            ],
        };
        let f = EpisodeFilter {
            embodiment: Some(EmbodimentId::Robot(0)),
            scene_ids: Some(vec![6]),
            task_ids: None,
        };
        let ids: Vec<String> = f.apply(&m).episodes.into_iter().map(|e| e.id).collect();
        assert_eq!(ids, vec!["b".to_string()]);
        let json = r#"[{"dataset":"d","filter":{"embodiment":"human"},"weight":1.0}]"#;
        let parsed: Vec<MixtureEntry> = serde_json::from_str(json).unwrap();
        assert_eq!(parsed[0].filter.apply(&m).len(), 1);
    }
}
