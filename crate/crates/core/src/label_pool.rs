//! Growing label pool and retrieval of the closest label for a generated
//! sequence.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Error, Result};
use crate::seq2seq::{Seq2SeqModel, Vocabulary};

pub const DEFAULT_EMBED_DIM: usize = 64;

/// Frozen per-token vectors; a sequence embeds as the L2-normalized mean.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEmbedder {
    dim: usize,
    seed: u64,
    table: Vec<f64>,
}

impl FrozenEmbedder {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedder dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..vocab_size * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self { dim, seed, table })
    }

    /// Reads `token v1 .. vd` lines. Tokens missing from the file keep seeded
    /// random vectors; file tokens outside `vocab` are ignored.
    pub fn from_file(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut rows: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut dim = None;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            };
            let mut parts = line.split_whitespace();
            let Some(tok) = parts.next() else { continue };
            let v = parts
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(e.to_string()))?;
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(parse_err("expected finite components".into()));
            }
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(parse_err(format!("expected {d} components, got {}", v.len())))
                }
                _ => {}
            }
            if let Some(id) = vocab.id(tok) {
                rows.insert(id, v);
            }
        }
        let Some(dim) = dim else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: "no vectors".into(),
            });
        };
        let mut e = Self::new(vocab.len(), dim, seed)?;
        for (id, v) in rows {
            e.table[id * dim..(id + 1) * dim].copy_from_slice(&v);
        }
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab_size(&self) -> usize {
        self.table.len() / self.dim
    }

    pub fn token_vector(&self, id: usize) -> Result<&[f64]> {
        if id >= self.vocab_size() {
            return Err(Error::OutOfVocab {
                id,
                size: self.vocab_size(),
            });
        }
        Ok(&self.table[id * self.dim..(id + 1) * self.dim])
    }

    /// Multiplies every token vector by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut e = self.clone();
        e.table.iter_mut().for_each(|x| *x *= c);
        e
    }

    /// Unit vector for a sequence; the zero vector for an empty one.
    pub fn embed(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        if ids.is_empty() {
            return Ok(out);
        }
        for &id in ids {
            for (o, v) in out.iter_mut().zip(self.token_vector(id)?) {
                *o += v;
            }
        }
        let n = ids.len() as f64;
        out.iter_mut().for_each(|x| *x /= n);
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(out)
    }
}

/// Cosine similarity; `-1` if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let zero = |v: &[f64]| v.iter().all(|&x| x == 0.0);
    if zero(a) || zero(b) {
        return -1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub tokens: Vec<usize>,
    pub text: String,
    pub task: usize,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieval {
    pub index: usize,
    pub score: f64,
    /// The query was empty and the first entry was returned.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub index: usize,
    pub y_gen: Vec<usize>,
    pub score: f64,
    pub fallback: bool,
}

/// Append-only set of distinct label sequences.
#[derive(Debug, Clone)]
pub struct LabelPool {
    embedder: Arc<FrozenEmbedder>,
    entries: Vec<PoolEntry>,
    index: HashMap<Vec<usize>, usize>,
}

impl LabelPool {
    pub fn new(embedder: Arc<FrozenEmbedder>) -> Self {
        Self {
            embedder,
            entries: vec![],
            index: HashMap::new(),
        }
    }

    pub fn embedder(&self) -> &Arc<FrozenEmbedder> {
        &self.embedder
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> Option<&PoolEntry> {
        self.entries.get(i)
    }

    pub fn position(&self, tokens: &[usize]) -> Option<usize> {
        self.index.get(tokens).copied()
    }

    /// Adds the not-yet-seen labels of task `task`; returns how many were new.
    pub fn add_labels(&mut self, labels: &[String], task: usize, vocab: &Vocabulary) -> Result<usize> {
        let before = self.len();
        for text in labels {
            let tokens = vocab.encode(text);
            if tokens.is_empty() {
                return contract(format!("empty label in task {task}"));
            }
            if self.index.contains_key(&tokens) {
                continue;
            }
            let embedding = self.embedder.embed(&tokens)?;
            self.index.insert(tokens.clone(), self.entries.len());
            self.entries.push(PoolEntry {
                tokens,
                text: text.clone(),
                task,
                embedding,
            });
        }
        Ok(self.len() - before)
    }

    /// Exhaustive cosine argmax; ties go to the earliest entry.
    pub fn retrieve(&self, y_gen: &[usize]) -> Result<Retrieval> {
        if self.entries.is_empty() {
            return contract("retrieval from an empty label pool");
        }
        if y_gen.is_empty() {
            log::debug!("empty generation; falling back to the first pool entry");
            return Ok(Retrieval {
                index: 0,
                score: -1.0,
                fallback: true,
            });
        }
        let q = self.embedder.embed(y_gen)?;
        let mut best = Retrieval {
            index: 0,
            score: f64::NEG_INFINITY,
            fallback: false,
        };
        for (i, e) in self.entries.iter().enumerate() {
            let s = cosine(&e.embedding, &q);
            if s > best.score {
                best.index = i;
                best.score = s;
            }
        }
        Ok(best)
    }

    /// Greedy generation followed by retrieval. Only the input is consulted.
    pub fn predict(&self, model: &Seq2SeqModel, input: &[usize]) -> Result<Prediction> {
        let y_gen = model.greedy_decode(input, model.config().max_target_len)?;
        let r = self.retrieve(&y_gen)?;
        Ok(Prediction {
            index: r.index,
            y_gen,
            score: r.score,
            fallback: r.fallback,
        })
    }
}
