//! Generation losses: the ordinary next-token NLL, the vocabulary-restricted
//! (VAG) loss and the exemplar-mode combination of the two.
//!
//! All losses are means over contributing target tokens. The restricted loss
//! masks logits outside a task vocabulary to `-inf` before the log-softmax, so
//! output-embedding rows outside that vocabulary get exactly zero gradient.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::seq2seq::{Bound, Seq2SeqModel, Vocabulary, BOS, EOS, PAD, UNK};
use crate::tensor::{RowMask, Tape, Tensor, Var};

/// Token ids used by the label sequences of one task, plus EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVocab {
    task: usize,
    ids: Vec<usize>,
    mask: Arc<[bool]>,
    labels: Vec<String>,
}

impl TaskVocab {
    pub fn new(task: usize, labels: &[String], vocab: &Vocabulary) -> Result<Self> {
        if labels.is_empty() {
            return contract(format!("task {task} has no labels"));
        }
        let mut ids = BTreeSet::from([EOS]);
        for label in labels {
            let toks = vocab.encode(label);
            if toks.iter().all(|&t| t == UNK) {
                return contract(format!("label {label:?} has no in-vocabulary token"));
            }
            ids.extend(toks);
        }
        if ids.len() * 2 > vocab.len() {
            log::warn!(
                "task {task} vocabulary covers {} of {} tokens",
                ids.len(),
                vocab.len()
            );
        }
        let mut mask = vec![false; vocab.len()];
        for &i in &ids {
            mask[i] = true;
        }
        Ok(Self {
            task,
            ids: ids.into_iter().collect(),
            mask: mask.into(),
            labels: labels.to_vec(),
        })
    }

    /// Every token of `vocab`; masking with it is the identity.
    pub fn full(vocab: &Vocabulary) -> Self {
        Self {
            task: 0,
            ids: (0..vocab.len()).collect(),
            mask: vec![true; vocab.len()].into(),
            labels: vec![],
        }
    }

    /// Arbitrary id subset; EOS is added.
    pub fn from_ids(task: usize, ids: impl IntoIterator<Item = usize>, vocab_size: usize) -> Result<Self> {
        let mut set: BTreeSet<usize> = ids.into_iter().collect();
        set.insert(EOS);
        if let Some(&bad) = set.iter().find(|&&i| i >= vocab_size) {
            return Err(crate::Error::OutOfVocab {
                id: bad,
                size: vocab_size,
            });
        }
        let mut mask = vec![false; vocab_size];
        for &i in &set {
            mask[i] = true;
        }
        Ok(Self {
            task,
            ids: set.into_iter().collect(),
            mask: mask.into(),
            labels: vec![],
        })
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.mask.get(id).copied().unwrap_or(false)
    }

    pub fn mask(&self) -> &Arc<[bool]> {
        &self.mask
    }

    /// The labels this vocabulary was built from.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

pub fn task_vocab(task: usize, labels: &[String], vocab: &Vocabulary) -> Result<TaskVocab> {
    TaskVocab::new(task, labels, vocab)
}

/// `P'(w) = exp(s_w) / Σ_{u ∈ V_t} exp(s_u)` over the full vocabulary, with
/// exact zeros outside `V_t`.
pub fn masked_next_token_dist(logits: &Tensor, vocab: &TaskVocab) -> Result<Vec<f64>> {
    if logits.len() != vocab.mask.len() {
        return Err(crate::Error::Shape {
            op: "masked_next_token_dist",
            left: logits.shape().to_vec(),
            right: vec![vocab.mask.len()],
        });
    }
    restricted_softmax(logits.data(), &vocab.mask)
}

/// Softmax over the entries where `allowed` is true; exact zeros elsewhere.
pub fn restricted_softmax(logits: &[f64], allowed: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != allowed.len() {
        return Err(crate::Error::Shape {
            op: "restricted_softmax",
            left: vec![logits.len()],
            right: vec![allowed.len()],
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, logits.len(), logits.to_vec())?);
    let lp = tape.log_softmax_rows(x, Some(&RowMask::Shared(allowed.into())))?;
    Ok(tape.value(lp).data().iter().map(|v| v.exp()).collect())
}

/// One teacher-forced training pair. `target` ends with EOS.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    /// Vocabulary the restricted loss normalizes over for this pair.
    pub vocab: Option<Arc<TaskVocab>>,
}

impl TrainPair {
    pub fn new(input: Vec<usize>, label: &[usize], vocab: Option<Arc<TaskVocab>>) -> Self {
        let mut target = label.to_vec();
        target.push(EOS);
        Self {
            input,
            target,
            vocab,
        }
    }

    /// Target positions that contribute to the loss: up to and including the
    /// first EOS. Trailing padding is dropped.
    fn effective_target(&self) -> Result<&[usize]> {
        let Some(end) = self.target.iter().position(|&t| t == EOS) else {
            return contract("target does not terminate with EOS");
        };
        let t = &self.target[..=end];
        if t.contains(&PAD) {
            return contract("padding inside target");
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Masking<'a> {
    /// Softmax over the whole vocabulary.
    Full,
    /// One task vocabulary for the whole batch.
    Shared(&'a TaskVocab),
    /// Each pair's own `vocab`.
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayMode {
    /// No stored examples: the restricted loss alone.
    NonExemplar,
    /// Real replay available: `normal + μ · restricted`.
    Exemplar,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub normal_term: f64,
    pub vag_term: f64,
    pub token_count: usize,
}

/// Loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub total: Var,
    pub normal: Option<Var>,
    pub vag: Option<Var>,
    pub token_count: usize,
}

impl LossGraph {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        LossBreakdown {
            total: tape.value(self.total).data()[0],
            normal_term: val(self.normal),
            vag_term: val(self.vag),
            token_count: self.token_count,
        }
    }
}

struct PairGraph {
    logits: Var,
    targets: Vec<usize>,
}

fn pair_logits(
    tape: &mut Tape,
    model: &Seq2SeqModel,
    p: &Bound,
    pair: &TrainPair,
) -> Result<PairGraph> {
    let targets = pair.effective_target()?.to_vec();
    let mut prefix = Vec::with_capacity(targets.len());
    prefix.push(BOS);
    prefix.extend_from_slice(&targets[..targets.len() - 1]);
    let memory = model.encode_on(tape, p, &pair.input)?;
    let states = model.decode_states_on(tape, p, memory, &prefix)?;
    let logits = model.logits_on(tape, p, states)?;
    Ok(PairGraph { logits, targets })
}

/// Summed token NLL of one pair under an optional vocabulary restriction.
fn pair_nll(tape: &mut Tape, g: &PairGraph, restrict: Option<&TaskVocab>) -> Result<Var> {
    if let Some(v) = restrict {
        if let Some(&bad) = g.targets.iter().find(|&&t| !v.contains(t)) {
            return contract(format!(
                "target token {bad} outside the vocabulary of task {}",
                v.task
            ));
        }
    }
    let mask = restrict.map(|v| RowMask::Shared(v.mask.clone()));
    let lp = tape.log_softmax_rows(g.logits, mask.as_ref())?;
    tape.pick_nll(lp, &g.targets, 1.0)
}

fn restriction<'a>(masking: Masking<'a>, pair: &'a TrainPair) -> Result<Option<&'a TaskVocab>> {
    match masking {
        Masking::Full => Ok(None),
        Masking::Shared(v) => Ok(Some(v)),
        Masking::PerSample => match &pair.vocab {
            Some(v) => Ok(Some(v)),
            None => contract("per-sample masking on a pair without a vocabulary"),
        },
    }
}

fn mean(tape: &mut Tape, sums: &[Var], tokens: usize) -> Result<Option<Var>> {
    if sums.is_empty() {
        return Ok(None);
    }
    let s = tape.add_all(sums)?;
    Ok(Some(tape.scale(s, 1.0 / tokens as f64)))
}

/// Mean token NLL of a batch, recorded on `tape`.
pub fn nll_on(
    tape: &mut Tape,
    model: &Seq2SeqModel,
    p: &Bound,
    batch: &[TrainPair],
    masking: Masking<'_>,
) -> Result<LossGraph> {
    if batch.is_empty() {
        return contract("empty batch");
    }
    let mut sums = Vec::with_capacity(batch.len());
    let mut tokens = 0;
    for pair in batch {
        let g = pair_logits(tape, model, p, pair)?;
        tokens += g.targets.len();
        sums.push(pair_nll(tape, &g, restriction(masking, pair)?)?);
    }
    let total = mean(tape, &sums, tokens)?.expect("non-empty batch");
    let masked = !matches!(masking, Masking::Full);
    Ok(LossGraph {
        total,
        normal: (!masked).then_some(total),
        vag: masked.then_some(total),
        token_count: tokens,
    })
}

/// Exemplar-mode objective recorded on `tape`.
///
/// The normal term covers `er ∪ current`, the restricted term covers
/// `lpr ∪ current` with every pair normalized over its own vocabulary. In
/// non-exemplar mode `er` must be empty and the total is the restricted term.
#[allow(clippy::too_many_arguments)]
pub fn combined_on(
    tape: &mut Tape,
    model: &Seq2SeqModel,
    p: &Bound,
    current: &[TrainPair],
    er: &[TrainPair],
    lpr: &[TrainPair],
    mu: f64,
    mode: ReplayMode,
) -> Result<LossGraph> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return contract(format!("mu must be non-negative, got {mu}"));
    }
    if mode == ReplayMode::NonExemplar && !er.is_empty() {
        return contract("replay examples given in non-exemplar mode");
    }
    if current.is_empty() && er.is_empty() && lpr.is_empty() {
        return contract("empty batch");
    }
    let exemplar = mode == ReplayMode::Exemplar;
    let (mut normal_sums, mut normal_tokens) = (vec![], 0);
    let (mut vag_sums, mut vag_tokens) = (vec![], 0);
    let mut distinct_tokens = 0;

    for pair in current {
        let g = pair_logits(tape, model, p, pair)?;
        distinct_tokens += g.targets.len();
        if exemplar {
            normal_sums.push(pair_nll(tape, &g, None)?);
            normal_tokens += g.targets.len();
        }
        vag_sums.push(pair_nll(tape, &g, restriction(Masking::PerSample, pair)?)?);
        vag_tokens += g.targets.len();
    }
    for pair in er {
        let g = pair_logits(tape, model, p, pair)?;
        distinct_tokens += g.targets.len();
        normal_sums.push(pair_nll(tape, &g, None)?);
        normal_tokens += g.targets.len();
    }
    for pair in lpr {
        let g = pair_logits(tape, model, p, pair)?;
        distinct_tokens += g.targets.len();
        vag_sums.push(pair_nll(tape, &g, restriction(Masking::PerSample, pair)?)?);
        vag_tokens += g.targets.len();
    }

    let normal = mean(tape, &normal_sums, normal_tokens)?;
    let vag = mean(tape, &vag_sums, vag_tokens)?;
    let total = match (exemplar, normal, vag) {
        (false, _, Some(v)) => v,
        (true, Some(n), Some(v)) => {
            let weighted = tape.scale(v, mu);
            tape.add(n, weighted)?
        }
        (true, Some(n), None) => n,
        (true, None, Some(v)) => tape.scale(v, mu),
        _ => return contract("objective has no contributing terms"),
    };
    Ok(LossGraph {
        total,
        normal,
        vag,
        token_count: distinct_tokens,
    })
}

/// Mean token NLL of a batch.
pub fn nll_loss(model: &Seq2SeqModel, batch: &[TrainPair], masking: Masking<'_>) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    Ok(nll_on(&mut tape, model, &p, batch, masking)?.breakdown(&tape))
}

pub fn combined_exemplar_loss(
    model: &Seq2SeqModel,
    current: &[TrainPair],
    er: &[TrainPair],
    lpr: &[TrainPair],
    mu: f64,
    mode: ReplayMode,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    Ok(combined_on(&mut tape, model, &p, current, er, lpr, mu, mode)?.breakdown(&tape))
}
