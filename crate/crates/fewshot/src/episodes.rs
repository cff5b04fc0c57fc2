//! Episode (task) construction: N-way K-shot support/query sampling, label
//! noise injection, and deterministic per-epoch episode streams.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::LabeledImageSet;
use crate::rng::SeedTree;

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("episode needs n_way >= 2 and k_shot >= 1, got {n_way}-way {k_shot}-shot")]
    BadSpec { n_way: usize, k_shot: usize },
    #[error("need {need} classes but the pool has {have}")]
    TooFewClasses { need: usize, have: usize },
    #[error("class {class} has {have} samples, need {need} for support+query")]
    TooFewSamples {
        class: String,
        need: usize,
        have: usize,
    },
}

/// Episode shape: `n_way` classes, `k_shot` support and `n_query` query
/// images per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            n_way: 5,
            k_shot: 5,
            n_query: 16,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.n_way < 2 || self.k_shot == 0 {
            return Err(EpisodeError::BadSpec {
                n_way: self.n_way,
                k_shot: self.k_shot,
            });
        }
        Ok(())
    }
}

/// One few-shot task. Indices are global positions in the source set;
/// labels are episode-local in 0..n_way, assigned by sampling order.
/// `class_map[l]` is the global class behind episode label `l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub class_map: Vec<usize>,
    pub support_idx: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query_idx: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Samples without replacement `n` items from `pool` (partial Fisher-Yates).
fn sample_distinct(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool = pool.to_vec();
    for i in 0..n {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(n);
    pool
}

/// Draws one episode from the classes in `class_pool`. Support and query
/// sets are disjoint; each episode label gets exactly `k_shot` support and
/// `n_query` query images.
pub fn sample_episode(
    set: &LabeledImageSet,
    class_pool: &[usize],
    spec: EpisodeSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, EpisodeError> {
    spec.validate()?;
    if class_pool.len() < spec.n_way {
        return Err(EpisodeError::TooFewClasses {
            need: spec.n_way,
            have: class_pool.len(),
        });
    }
    let by_class = set.indices_by_class();
    let need = spec.k_shot + spec.n_query;
    let class_map = sample_distinct(class_pool, spec.n_way, rng);
    let mut ep = Episode {
        spec,
        class_map: class_map.clone(),
        support_idx: Vec::with_capacity(spec.n_way * spec.k_shot),
        support_labels: Vec::with_capacity(spec.n_way * spec.k_shot),
        query_idx: Vec::with_capacity(spec.n_way * spec.n_query),
        query_labels: Vec::with_capacity(spec.n_way * spec.n_query),
    };
    for (label, &class) in class_map.iter().enumerate() {
        let pool = &by_class[class];
        if pool.len() < need {
            return Err(EpisodeError::TooFewSamples {
                class: set.class_names[class].clone(),
                need,
                have: pool.len(),
            });
        }
        let picked = sample_distinct(pool, need, rng);
        for &idx in &picked[..spec.k_shot] {
            ep.support_idx.push(idx);
            ep.support_labels.push(label);
        }
        for &idx in &picked[spec.k_shot..] {
            ep.query_idx.push(idx);
            ep.query_labels.push(label);
        }
    }
    Ok(ep)
}

/// Injects label noise: `n_swaps` times, exchange the labels of two support
/// items that currently carry different labels. Each swap corrupts at most
/// two items and the per-label counts never change. Pairs are drawn with
/// replacement, so later swaps may undo earlier ones.
pub fn apply_label_swaps(episode: &Episode, n_swaps: usize, rng: &mut ChaCha8Rng) -> Episode {
    let mut out = episode.clone();
    let n = out.support_labels.len();
    for _ in 0..n_swaps {
        let i = rng.random_range(0..n);
        let others: Vec<usize> = (0..n)
            .filter(|&j| out.support_labels[j] != out.support_labels[i])
            .collect();
        let j = others[rng.random_range(0..others.len())];
        out.support_labels.swap(i, j);
    }
    out
}

/// Number of support items whose label differs from the clean episode.
pub fn count_mislabeled(clean: &Episode, noisy: &Episode) -> usize {
    clean
        .support_labels
        .iter()
        .zip(&noisy.support_labels)
        .filter(|(a, b)| a != b)
        .count()
}

/// A deterministic batch of episodes: episode `i` of epoch `e` depends only
/// on the seed tree, `e`, and `i` — not on how many are drawn.
pub fn episode_stream(
    set: &LabeledImageSet,
    class_pool: &[usize],
    spec: EpisodeSpec,
    tree: SeedTree,
    epoch: u64,
    count: usize,
) -> Result<Vec<Episode>, EpisodeError> {
    let epoch_tree = tree.derive_indexed("epoch", epoch);
    (0..count)
        .map(|i| {
            let mut rng = epoch_tree.derive_indexed("episode", i as u64).rng();
            sample_episode(set, class_pool, spec, &mut rng)
        })
        .collect()
}

/// Text manifest of an episode: a header line then one
/// `role<TAB>global_index<TAB>episode_label<TAB>global_class` line per item.
pub fn episode_manifest(ep: &Episode) -> String {
    let mut out = format!(
        "way\t{}\tshot\t{}\tquery\t{}\n",
        ep.spec.n_way, ep.spec.k_shot, ep.spec.n_query
    );
    for (&idx, &label) in ep.support_idx.iter().zip(&ep.support_labels) {
        out.push_str(&format!(
            "support\t{}\t{}\t{}\n",
            idx, label, ep.class_map[label]
        ));
    }
    for (&idx, &label) in ep.query_idx.iter().zip(&ep.query_labels) {
        out.push_str(&format!(
            "query\t{}\t{}\t{}\n",
            idx, label, ep.class_map[label]
        ));
    }
    out
}
