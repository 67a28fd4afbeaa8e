//! Label-based pseudo replay: previous labels with related tokens inserted
//! become synthetic inputs whose target is the label itself.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{contract, Result};
use crate::label_pool::{cosine, FrozenEmbedder};
use crate::objective::{TaskVocab, TrainPair};
use crate::seq2seq::NUM_RESERVED;

pub const DEFAULT_NEIGHBORS: usize = 10;

/// The `k` most similar content tokens of every content token.
#[derive(Debug, Clone, PartialEq)]
pub struct RelatednessTable {
    k: usize,
    neighbors: Vec<Vec<usize>>,
}

impl RelatednessTable {
    pub fn new(embedder: &FrozenEmbedder, k: usize) -> Result<Self> {
        let n = embedder.vocab_size();
        let unit = (0..n)
            .map(|i| embedder.embed(&[i]))
            .collect::<Result<Vec<_>>>()?;
        let neighbors = (0..n)
            .map(|i| {
                if i < NUM_RESERVED {
                    return vec![];
                }
                let mut scored: Vec<(f64, usize)> = (NUM_RESERVED..n)
                    .filter(|&j| j != i)
                    .map(|j| (cosine(&unit[i], &unit[j]), j))
                    .collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                scored.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect();
        Ok(Self { k, neighbors })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, id: usize) -> &[usize] {
        self.neighbors.get(id).map_or(&[], Vec::as_slice)
    }
}

/// `ceil(0.3 · n)` in integer arithmetic.
pub fn insertion_count(n: usize) -> usize {
    (3 * n).div_ceil(10)
}

/// Round half up of `λ · n`.
pub fn lpr_sample_count(lambda: f64, n: usize) -> Result<usize> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return contract(format!("lambda must be non-negative, got {lambda}"));
    }
    Ok((lambda * n as f64 + 0.5).floor() as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub tokens: Vec<usize>,
    /// `inserted[i]` marks positions of `tokens` that were added.
    pub inserted: Vec<bool>,
}

impl Augmented {
    pub fn original(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .zip(&self.inserted)
            .filter(|(_, &ins)| !ins)
            .map(|(&t, _)| t)
            .collect()
    }
}

/// Inserts `ceil(0.3·|y|)` neighbor tokens of randomly chosen anchors at
/// random positions, preserving the order of `y`.
pub fn augment_label<R: Rng>(y: &[usize], table: &RelatednessTable, rng: &mut R) -> Result<Augmented> {
    if y.is_empty() {
        return contract("cannot augment an empty label");
    }
    let mut tokens = y.to_vec();
    let mut inserted = vec![false; y.len()];
    for _ in 0..insertion_count(y.len()) {
        let anchor = y[rng.gen_range(0..y.len())];
        let Some(&tok) = table.neighbors(anchor).choose(rng) else {
            log::warn!("token {anchor} has no neighbors; skipping insertion");
            continue;
        };
        let pos = rng.gen_range(0..=tokens.len());
        tokens.insert(pos, tok);
        inserted.insert(pos, true);
    }
    Ok(Augmented { tokens, inserted })
}

/// A previous label eligible for pseudo replay.
#[derive(Debug, Clone)]
pub struct LprSource {
    pub label: Vec<usize>,
    pub task: usize,
    pub vocab: Arc<TaskVocab>,
}

#[derive(Debug, Clone)]
pub struct PseudoSample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub task: usize,
    pub vocab: Arc<TaskVocab>,
}

impl PseudoSample {
    pub fn to_pair(&self) -> TrainPair {
        TrainPair::new(self.input.clone(), &self.target, Some(self.vocab.clone()))
    }
}

/// Pseudo-replay sources for task `current`: every distinct label of earlier
/// tasks, in order.
pub fn build_lpr(previous: &[LprSource], current: usize) -> Result<Vec<LprSource>> {
    let mut out: Vec<LprSource> = vec![];
    for s in previous {
        if s.task >= current {
            return contract(format!(
                "pseudo-replay source from task {} while training task {current}",
                s.task
            ));
        }
        if !out.iter().any(|o| o.label == s.label) {
            out.push(s.clone());
        }
    }
    Ok(out)
}

/// One freshly augmented pair per source.
pub fn refresh_lpr<R: Rng>(
    sources: &[LprSource],
    table: &RelatednessTable,
    rng: &mut R,
) -> Result<Vec<PseudoSample>> {
    sources.iter().map(|s| augment(s, table, rng)).collect()
}

/// `round(λ·n)` draws with replacement, each re-augmented.
pub fn sample_lpr<R: Rng>(
    sources: &[LprSource],
    lambda: f64,
    n: usize,
    table: &RelatednessTable,
    rng: &mut R,
) -> Result<Vec<PseudoSample>> {
    let count = lpr_sample_count(lambda, n)?;
    if sources.is_empty() {
        return Ok(vec![]);
    }
    if count == 0 && lambda > 0.0 {
        log::warn!("pseudo replay starved: round({lambda} * {n}) = 0");
    }
    (0..count)
        .map(|_| augment(sources.choose(rng).expect("non-empty"), table, rng))
        .collect()
}

fn augment<R: Rng>(s: &LprSource, table: &RelatednessTable, rng: &mut R) -> Result<PseudoSample> {
    Ok(PseudoSample {
        input: augment_label(&s.label, table, rng)?.tokens,
        target: s.label.clone(),
        task: s.task,
        vocab: s.vocab.clone(),
    })
}
