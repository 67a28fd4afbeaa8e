//! Class-incremental protocol: sequential task training, evaluation on every
//! task seen so far, and the run report.

mod buffer;
mod ewc;
mod learner;
mod optim;
mod pretrain;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use buffer::{buffer_quota, BufferItem, ReplayBuffer};
pub use ewc::{add_ewc_grad, ewc_penalty, fisher_diagonal, EwcState};
pub use learner::{Evaluation, Learner, Prediction, TaskLog};
pub use optim::{clip_global_norm, Adam};
pub use pretrain::pretrain;

use crate::config::{ExperimentConfig, Method, TrainConfig};
use crate::data::{generate_synthetic, generate_unlabeled, ingest_jsonl, read_stream, split_tasks, TaskStream};
use crate::error::{contract, Result};
use crate::label_pool::FrozenEmbedder;
use crate::metrics::{
    final_accuracy, last_task_bias, nc_metric, subset_accuracy, AccuracyMatrix, ConfusionMatrix, FeatureBundle,
};
use crate::replay::RelatednessTable;
use crate::seq2seq::{Seq2SeqModel, Vocabulary};

/// Independent RNG stream `tag` of a run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_PRETRAIN: u64 = 1;
const TAG_TRAIN: u64 = 2;

/// Task stream for `seed` plus the unlabeled pretraining corpus.
///
/// The seed decides the class order unless a pre-split stream is given.
/// Synthetic pretraining texts come from the class templates; other sources
/// reuse their training texts.
pub fn load_stream(cfg: &ExperimentConfig, seed: u64) -> Result<(TaskStream, Vec<String>)> {
    if let Some(dir) = &cfg.data.stream {
        let stream = read_stream(dir)?;
        let corpus = train_texts(&stream);
        return Ok((stream, corpus));
    }
    match &cfg.data.path {
        None => {
            let spec = &cfg.data.synthetic;
            let data = generate_synthetic(spec)?;
            let stream = split_tasks(&data, spec.tasks, spec.classes_per_task, seed)?;
            let corpus = if cfg.pretrain.enabled {
                generate_unlabeled(spec, cfg.pretrain.corpus_size, seed)?
            } else {
                vec![]
            };
            Ok((stream, corpus))
        }
        Some(path) => {
            let data = ingest_jsonl(path)?;
            let stream = split_tasks(&data, cfg.data.tasks, cfg.data.classes_per_task, seed)?;
            let corpus = train_texts(&stream);
            Ok((stream, corpus))
        }
    }
}

fn train_texts(stream: &TaskStream) -> Vec<String> {
    stream
        .tasks
        .iter()
        .flat_map(|t| t.train.iter().map(|e| e.text.clone()))
        .collect()
}

/// Everything shared by the methods of one seed.
#[derive(Debug, Clone)]
pub struct Environment {
    pub vocab: Arc<Vocabulary>,
    pub embedder: Arc<FrozenEmbedder>,
    pub relatedness: Arc<RelatednessTable>,
    /// Starting point of every learner, after pretraining.
    pub base_model: Seq2SeqModel,
    pub pretrain_loss: Option<f64>,
    /// Test inputs of every class of the stream, for the NC trajectory.
    pub probe: Vec<(Vec<usize>, usize)>,
}

impl Environment {
    pub fn prepare(stream: &TaskStream, corpus: &[String], cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let vocab = Arc::new(stream.vocabulary(corpus.iter().map(String::as_str)));
        let embedder = match &cfg.embedder.vectors {
            Some(path) => FrozenEmbedder::from_file(path, &vocab, cfg.embedder.seed)?,
            None => FrozenEmbedder::new(vocab.len(), cfg.embedder.dim, cfg.embedder.seed)?,
        };
        let relatedness = RelatednessTable::new(&embedder, cfg.train.neighbors)?;
        let mut model = Seq2SeqModel::init(cfg.model.clone(), vocab.clone(), seed)?;
        let pretrain_loss = if cfg.pretrain.enabled && !corpus.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_PRETRAIN));
            Some(pretrain(&mut model, corpus, &cfg.pretrain, &mut rng)?)
        } else {
            None
        };
        let classes = stream.classes();
        let mut probe = vec![];
        for t in &stream.tasks {
            for e in &t.test {
                let c = classes.iter().position(|c| *c == e.label).expect("label of its task");
                probe.push((vocab.encode(&e.text), c));
            }
        }
        Ok(Self {
            vocab,
            embedder: Arc::new(embedder),
            relatedness: Arc::new(relatedness),
            base_model: model,
            pretrain_loss,
            probe,
        })
    }

    /// NC of `model` on the probe set.
    pub fn nc(&self, model: &Seq2SeqModel) -> Result<f64> {
        let feats = self
            .probe
            .iter()
            .map(|(x, _)| model.pooled(x))
            .collect::<Result<Vec<_>>>()?;
        let classes = self.probe.iter().map(|p| p.1).collect();
        nc_metric(&FeatureBundle::new(feats, classes)?)
    }
}

/// Per-task row of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRecord {
    #[serde(flatten)]
    pub log: TaskLog,
    /// Accuracy over the test data of tasks `1..=task`.
    pub accuracy: f64,
    pub nc: f64,
    /// Fraction of predictions falling in this task's classes.
    pub last_task_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    /// Class names in label-pool order.
    pub classes: Vec<String>,
    pub accuracy: AccuracyMatrix,
    pub final_accuracy: f64,
    pub confusion: ConfusionMatrix,
    /// NC before training and after every task.
    pub nc: Vec<f64>,
    pub last_task_bias: f64,
    pub tasks: Vec<TaskRecord>,
    pub predictions: usize,
    pub fallbacks: usize,
    /// Correct predictions in the final evaluation that came from a fallback.
    pub final_fallback_hits: usize,
    pub closed_world_violations: usize,
}

/// Trains `method` over the stream in order, evaluating after every task.
pub fn run_sequence(
    stream: &TaskStream,
    env: &Environment,
    cfg: &TrainConfig,
    method: Method,
    seed: u64,
) -> Result<RunReport> {
    if stream.is_empty() {
        return contract("empty task stream");
    }
    let rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_TRAIN));
    let mut learner = Learner::new(method, cfg, env, rng)?;
    let mut nc = vec![env.nc(&env.base_model)?];
    let mut accuracy = AccuracyMatrix::new();
    let mut tasks = vec![];
    let mut last = None;
    let (mut predictions, mut fallbacks, mut violations) = (0, 0, 0);
    let mut offset = 0;
    for (i, task) in stream.tasks.iter().enumerate() {
        let log = learner.train_task(task)?;
        let eval = learner.evaluate(&stream.tasks[..=i])?;
        predictions += eval.predictions;
        fallbacks += eval.fallbacks;
        violations += eval.closed_world_violations;
        let mut row = vec![];
        let mut start = 0;
        for t in &stream.tasks[..=i] {
            let ids: Vec<usize> = (start..start + t.classes.len()).collect();
            row.push(subset_accuracy(&eval.confusion, &ids)?);
            start += t.classes.len();
        }
        accuracy.push_row(row)?;
        let current: Vec<usize> = (offset..offset + task.classes.len()).collect();
        offset += task.classes.len();
        let bias = last_task_bias(&eval.confusion, &current)?;
        let acc = final_accuracy(&eval.confusion)?;
        nc.push(env.nc(learner.model())?);
        log::info!(
            "{method} seed {seed} task {}: acc {acc:.3} bias {bias:.3} epochs {}",
            task.id,
            log.epochs_run
        );
        tasks.push(TaskRecord {
            log,
            accuracy: acc,
            nc: *nc.last().unwrap(),
            last_task_bias: bias,
        });
        last = Some((eval.confusion, acc, bias, eval.fallback_hits));
    }
    let (confusion, final_accuracy, last_task_bias, final_fallback_hits) = last.expect("non-empty stream");
    Ok(RunReport {
        method,
        seed,
        classes: learner.pool().entries().iter().map(|e| e.text.clone()).collect(),
        accuracy,
        final_accuracy,
        confusion,
        nc,
        last_task_bias,
        tasks,
        predictions,
        fallbacks,
        final_fallback_hits,
        closed_world_violations: violations,
    })
}

/// Joint training on all tasks at once, the non-continual upper bound.
pub fn run_joint(stream: &TaskStream, env: &Environment, cfg: &TrainConfig, method: Method, seed: u64) -> Result<RunReport> {
    run_sequence(&stream.joint(), env, cfg, method, seed)
}
