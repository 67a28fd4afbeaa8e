use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::config::{Method, TrainConfig};
use crate::data::{Example, Task};
use crate::error::{contract, Error, Result};
use crate::label_pool::LabelPool;
use crate::metrics::ConfusionMatrix;
use crate::objective::{combined_on, nll_on, LossGraph, Masking, ReplayMode, TaskVocab, TrainPair};
use crate::replay::{build_lpr, lpr_sample_count, sample_lpr, LprSource};
use crate::seq2seq::{argmax, Bound, Seq2SeqModel};
use crate::tensor::{Tape, Tensor, Var};

use super::buffer::{buffer_quota, ReplayBuffer};
use super::ewc::{add_ewc_grad, ewc_penalty, fisher_diagonal, EwcState};
use super::optim::{clip_global_norm, Adam};
use super::Environment;

/// Bookkeeping of one trained task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskLog {
    pub task: usize,
    pub train_size: usize,
    pub classes: usize,
    pub epochs_run: usize,
    pub best_val_loss: f64,
    /// Pseudo-replay samples drawn in each epoch.
    pub lpr_counts: Vec<usize>,
    /// `round(λ·|D_t|)` when earlier labels exist, else 0.
    pub lpr_expected: usize,
    pub buffer_added: usize,
    pub buffer_expected: usize,
    pub buffer_size: usize,
    pub pool_size: usize,
}

/// Linear head over mean-pooled encoder states, one row per class seen.
#[derive(Debug, Clone)]
struct Head {
    w: Arc<Tensor>,
    b: Arc<Tensor>,
}

impl Head {
    fn grow(&mut self, n: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let d = self.w.cols();
        let rows = self.w.rows() + n;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut w = self.w.data().to_vec();
        w.extend((0..n * d).map(|_| normal.sample(rng)));
        let mut b = self.b.data().to_vec();
        b.resize(rows, 0.0);
        self.w = Arc::new(Tensor::matrix(rows, d, w)?);
        self.b = Arc::new(Tensor::vector(b));
        Ok(())
    }

    fn params(&self) -> Vec<Arc<Tensor>> {
        vec![self.w.clone(), self.b.clone()]
    }
}

/// One training pair of the current objective.
#[derive(Debug, Clone)]
struct Sample {
    pair: TrainPair,
    class: usize,
}

pub struct Learner<'a> {
    method: Method,
    cfg: &'a TrainConfig,
    env: &'a Environment,
    model: Seq2SeqModel,
    head: Option<Head>,
    pool: LabelPool,
    /// Labels in pool order; also the classifier head's row order.
    classes: Vec<String>,
    lpr_sources: Vec<LprSource>,
    buffer: ReplayBuffer,
    buffer_vocab: Vec<Arc<TaskVocab>>,
    ewc: Option<EwcState>,
    next_task: usize,
    rng: ChaCha8Rng,
}

impl<'a> Learner<'a> {
    pub fn new(method: Method, cfg: &'a TrainConfig, env: &'a Environment, rng: ChaCha8Rng) -> Result<Self> {
        let model = env.base_model.clone();
        let head = method.is_classifier().then(|| Head {
            w: Arc::new(Tensor::zeros(vec![0, model.config().d_model])),
            b: Arc::new(Tensor::zeros(vec![0])),
        });
        Ok(Self {
            method,
            cfg,
            env,
            head,
            pool: LabelPool::new(env.embedder.clone()),
            classes: vec![],
            lpr_sources: vec![],
            buffer: ReplayBuffer::new(),
            buffer_vocab: vec![],
            ewc: None,
            next_task: 1,
            rng,
            model,
        })
    }

    pub fn model(&self) -> &Seq2SeqModel {
        &self.model
    }

    pub fn pool(&self) -> &LabelPool {
        &self.pool
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Width of the classifier head, if any.
    pub fn head_width(&self) -> Option<usize> {
        self.head.as_ref().map(|h| h.w.rows())
    }

    fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Protocol(format!("label {label:?} not seen in training")))
    }

    fn sample(&self, e: &Example, vocab: Option<&Arc<TaskVocab>>) -> Result<Sample> {
        let v = self.model.vocab();
        Ok(Sample {
            pair: TrainPair::new(v.encode(&e.text), &v.encode(&e.label), vocab.cloned()),
            class: self.class_index(&e.label)?,
        })
    }

    fn classifier_loss(&self, tape: &mut Tape, p: &Bound, head: (Var, Var), batch: &[&Sample]) -> Result<Var> {
        let mut terms = Vec::with_capacity(batch.len());
        for s in batch {
            let states = self.model.encode_on(tape, p, &s.pair.input)?;
            let pooled = tape.mean_rows(states)?;
            let logits = tape.matmul_bt(pooled, head.0)?;
            let logits = tape.add_bias(logits, head.1)?;
            let lp = tape.log_softmax_rows(logits, None)?;
            terms.push(tape.pick_nll(lp, &[s.class], 1.0 / batch.len() as f64)?);
        }
        tape.add_all(&terms)
    }

    /// Objective of one batch: `current` from this task, `er` from the
    /// buffer, `lpr` pseudo samples.
    fn batch_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        head: Option<(Var, Var)>,
        current: &[&Sample],
        er: &[&Sample],
        lpr: &[TrainPair],
    ) -> Result<Var> {
        let pairs = |xs: &[&Sample]| xs.iter().map(|s| s.pair.clone()).collect::<Vec<_>>();
        let g: LossGraph = match self.method {
            Method::VanillaClassifier | Method::Er => {
                let all: Vec<&Sample> = current.iter().chain(er).copied().collect();
                return self.classifier_loss(tape, p, head.expect("classifier head"), &all);
            }
            Method::VanillaG | Method::EwcG => nll_on(tape, &self.model, p, &pairs(current), Masking::Full)?,
            Method::Vag => combined_on(
                tape,
                &self.model,
                p,
                &pairs(current),
                &[],
                lpr,
                self.cfg.mu,
                ReplayMode::NonExemplar,
            )?,
            Method::VagEr => combined_on(
                tape,
                &self.model,
                p,
                &pairs(current),
                &pairs(er),
                lpr,
                self.cfg.mu,
                ReplayMode::Exemplar,
            )?,
        };
        Ok(g.total)
    }

    fn bind_head(&self, tape: &mut Tape, track: bool) -> Option<(Var, Var)> {
        self.head.as_ref().map(|h| {
            if track {
                (tape.param(h.w.clone()), tape.param(h.b.clone()))
            } else {
                (tape.constant(h.w.clone()), tape.constant(h.b.clone()))
            }
        })
    }

    /// Mean per-batch loss of the current-task objective on `data`.
    fn eval_loss(&self, data: &[Sample]) -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0);
        for chunk in data.chunks(self.cfg.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let p = self.model.bind(&mut tape, false);
            let head = self.bind_head(&mut tape, false);
            let loss = self.batch_loss(&mut tape, &p, head, &refs, &[], &[])?;
            sum += tape.value(loss).data()[0];
            n += 1;
        }
        Ok(sum / n as f64)
    }

    fn snapshot(&self) -> (Vec<Arc<Tensor>>, Option<Head>) {
        (self.model.params().to_vec(), self.head.clone())
    }

    fn restore(&mut self, s: (Vec<Arc<Tensor>>, Option<Head>)) {
        self.model.params_mut().clone_from_slice(&s.0);
        self.head = s.1;
    }

    /// Trains task `task`; tasks must arrive in order.
    pub fn train_task(&mut self, task: &Task) -> Result<TaskLog> {
        if task.id != self.next_task {
            return Err(Error::Protocol(format!(
                "expected task {}, got task {}",
                self.next_task, task.id
            )));
        }
        if task.train.is_empty() || task.val.is_empty() {
            return contract(format!("task {} needs training and validation data", task.id));
        }
        let t = task.id;
        let vocab = self.model.vocab().clone();
        let tv = if self.method.uses_vag() {
            Some(Arc::new(TaskVocab::new(t, &task.classes, &vocab)?))
        } else {
            None
        };
        for c in &task.classes {
            if self.classes.contains(c) {
                return Err(Error::Protocol(format!("class {c:?} reappears in task {t}")));
            }
            self.classes.push(c.clone());
        }
        if let Some(h) = &mut self.head {
            h.grow(task.classes.len(), self.model.config().init_std, &mut self.rng)?;
        }

        let train = task
            .train
            .iter()
            .map(|e| self.sample(e, tv.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let val = task
            .val
            .iter()
            .map(|e| self.sample(e, tv.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let er: Vec<Sample> = if self.method.uses_buffer() {
            self.buffer
                .items()
                .iter()
                .map(|it| self.sample(&it.example, Some(&self.buffer_vocab[it.task - 1])))
                .collect::<Result<_>>()?
        } else {
            vec![]
        };
        let lpr_base = if self.method.uses_vag() {
            build_lpr(&self.lpr_sources, t)?
        } else {
            vec![]
        };
        let lpr_expected = if lpr_base.is_empty() {
            0
        } else {
            lpr_sample_count(self.cfg.lambda_lpr, train.len())?
        };

        let mut opt = Adam::new(self.cfg.lr);
        let mut head_opt = Adam::new(self.cfg.lr);
        let mut best = (self.eval_loss(&val)?, self.snapshot());
        let mut bad = 0;
        let mut lpr_counts = vec![];
        let mut epochs_run = 0;
        for _ in 0..self.cfg.epochs {
            epochs_run += 1;
            let lpr: Vec<TrainPair> = sample_lpr(
                &lpr_base,
                self.cfg.lambda_lpr,
                train.len(),
                &self.env.relatedness,
                &mut self.rng,
            )?
            .iter()
            .map(|s| s.to_pair())
            .collect();
            lpr_counts.push(lpr.len());
            let mut order: Vec<&Sample> = train.iter().collect();
            order.shuffle(&mut self.rng);
            let mut er_order: Vec<&Sample> = er.iter().collect();
            er_order.shuffle(&mut self.rng);
            let nb = order.len().div_ceil(self.cfg.batch_size);
            let spread = |n: usize, b: usize| (b * n / nb, (b + 1) * n / nb);
            for b in 0..nb {
                let cur = &order[b * self.cfg.batch_size..((b + 1) * self.cfg.batch_size).min(order.len())];
                let (e0, e1) = spread(er_order.len(), b);
                let (l0, l1) = spread(lpr.len(), b);
                self.step(&mut opt, &mut head_opt, cur, &er_order[e0..e1], &lpr[l0..l1])?;
            }
            let v = self.eval_loss(&val)?;
            log::debug!("{} task {t} epoch {epochs_run} val {v:.4}", self.method);
            if v < best.0 {
                best = (v, self.snapshot());
                bad = 0;
            } else {
                bad += 1;
                if bad >= self.cfg.patience {
                    break;
                }
            }
        }
        let best_val_loss = best.0;
        self.restore(best.1);

        self.pool.add_labels(&task.classes, t, &vocab)?;
        if let Some(tv) = &tv {
            for c in &task.classes {
                self.lpr_sources.push(LprSource {
                    label: vocab.encode(c),
                    task: t,
                    vocab: tv.clone(),
                });
            }
        }
        let (mut buffer_added, mut buffer_expected) = (0, 0);
        if self.method.uses_buffer() {
            let bv = match &tv {
                Some(v) => v.clone(),
                None => Arc::new(TaskVocab::full(&vocab)),
            };
            self.buffer_vocab.push(bv);
            buffer_expected = buffer_quota(self.cfg.buffer_fraction, task.train.len());
            buffer_added = self
                .buffer
                .update(&task.train, t, self.cfg.buffer_fraction, &mut self.rng)?;
        }
        if self.method == Method::EwcG {
            let pairs: Vec<TrainPair> = train.iter().map(|s| s.pair.clone()).collect();
            let fisher = fisher_diagonal(&self.model, &pairs)?;
            self.ewc = Some(EwcState::absorb(self.ewc.take(), self.model.params(), fisher));
        }
        self.next_task += 1;
        Ok(TaskLog {
            task: t,
            train_size: train.len(),
            classes: task.classes.len(),
            epochs_run,
            best_val_loss,
            lpr_counts,
            lpr_expected,
            buffer_added,
            buffer_expected,
            buffer_size: self.buffer.len(),
            pool_size: self.pool.len(),
        })
    }

    fn step(
        &mut self,
        opt: &mut Adam,
        head_opt: &mut Adam,
        current: &[&Sample],
        er: &[&Sample],
        lpr: &[TrainPair],
    ) -> Result<()> {
        let mut tape = Tape::new();
        let p = self.model.bind(&mut tape, true);
        let head = self.bind_head(&mut tape, true);
        let loss = self.batch_loss(&mut tape, &p, head, current, er, lpr)?;
        let grads = tape.backward(loss)?;
        let mut g = p.collect(&tape, &grads);
        let n_model = g.len();
        if let Some((w, b)) = head {
            for v in [w, b] {
                g.push(grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]));
            }
        }
        if let Some(ewc) = &self.ewc {
            add_ewc_grad(
                &mut g[..n_model],
                self.model.params(),
                &ewc.anchor,
                &ewc.fisher,
                self.cfg.ewc_weight,
            )?;
        }
        if self.cfg.clip_norm > 0.0 {
            clip_global_norm(&mut g, self.cfg.clip_norm);
        }
        let head_grads = g.split_off(n_model);
        opt.update(self.model.params_mut(), &g)?;
        if let Some(h) = &mut self.head {
            let mut hp = h.params();
            head_opt.update(&mut hp, &head_grads)?;
            h.w = hp[0].clone();
            h.b = hp[1].clone();
        }
        Ok(())
    }

    /// Current EWC penalty, 0 before the first anchor.
    pub fn ewc_penalty(&self) -> Result<f64> {
        match &self.ewc {
            Some(s) => ewc_penalty(self.model.params(), &s.anchor, &s.fisher, self.cfg.ewc_weight),
            None => Ok(0.0),
        }
    }

    /// Pool index predicted for `text`. Only the input text is consulted.
    pub fn predict(&self, text: &str) -> Result<Prediction> {
        let ids = self.model.vocab().encode(text);
        match &self.head {
            Some(h) => {
                let mut tape = Tape::new();
                let p = self.model.bind(&mut tape, false);
                let states = self.model.encode_on(&mut tape, &p, &ids)?;
                let pooled = tape.mean_rows(states)?;
                let w = tape.constant(h.w.clone());
                let b = tape.constant(h.b.clone());
                let logits = tape.matmul_bt(pooled, w)?;
                let logits = tape.add_bias(logits, b)?;
                Ok(Prediction {
                    index: argmax(tape.value(logits).data()),
                    fallback: false,
                    generated: None,
                })
            }
            None => {
                let pr = self.pool.predict(&self.model, &ids)?;
                Ok(Prediction {
                    index: pr.index,
                    fallback: pr.fallback,
                    generated: Some(pr.y_gen),
                })
            }
        }
    }

    /// Confusion over every class trained so far, on the test splits of
    /// `tasks`. Also counts predictions outside the pool.
    pub fn evaluate(&self, tasks: &[Task]) -> Result<Evaluation> {
        let mut confusion = ConfusionMatrix::new(self.pool.len());
        let mut eval = Evaluation::default();
        for task in tasks {
            for e in &task.test {
                let truth = self.class_index(&e.label)?;
                let pr = self.predict(&e.text)?;
                if pr.index >= self.pool.len() {
                    eval.closed_world_violations += 1;
                    continue;
                }
                if pr.fallback {
                    eval.fallbacks += 1;
                    if pr.index == truth {
                        eval.fallback_hits += 1;
                    }
                }
                eval.predictions += 1;
                confusion.record(truth, pr.index)?;
            }
        }
        eval.confusion = confusion;
        Ok(eval)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub index: usize,
    pub fallback: bool,
    /// The generated sequence, for generation learners.
    pub generated: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub predictions: usize,
    pub fallbacks: usize,
    /// Fallbacks that happened to land on the true class.
    pub fallback_hits: usize,
    pub closed_world_violations: usize,
}
