//! Synthetic benchmark generation, JSONL ingestion and class-incremental task
//! splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq2seq::{tokenize, Vocabulary};

pub const MAX_TEXT_TOKENS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub text: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub records: Vec<ExampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct labels, sorted.
    pub fn labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.label.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == Some(split)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub bag_size: usize,
    /// Sampling weight of label tokens inside a class bag; other bag tokens
    /// weigh 1.
    pub label_weight: f64,
    pub noise_rate: f64,
    /// Size of the lexicon noise tokens are drawn from.
    pub noise_vocab: usize,
    /// Give every class its own tokens instead of sharing two with a sibling.
    pub disjoint_bags: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            tasks: 5,
            classes_per_task: 4,
            train_per_class: 60,
            val_per_class: 20,
            test_per_class: 20,
            min_len: 8,
            max_len: 20,
            bag_size: 8,
            label_weight: 2.0,
            noise_rate: 0.1,
            noise_vocab: 100,
            disjoint_bags: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.tasks * self.classes_per_task != self.classes {
            return err(format!(
                "{} tasks of {} classes do not make {} classes",
                self.tasks, self.classes_per_task, self.classes
            ));
        }
        if self.classes < 2 || self.tasks == 0 {
            return err("need at least 2 classes and 1 task".into());
        }
        if !self.disjoint_bags && self.classes % 2 != 0 {
            return err("sibling sharing needs an even class count".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > MAX_TEXT_TOKENS {
            return err(format!("bad text length range {}..={}", self.min_len, self.max_len));
        }
        if self.bag_size < 4 {
            return err("bag_size must be at least 4".into());
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return err(format!("noise_rate {} outside [0, 1]", self.noise_rate));
        }
        if self.noise_rate > 0.0 && self.noise_vocab == 0 {
            return err("noise needs a non-empty noise lexicon".into());
        }
        if !(self.label_weight > 0.0 && self.label_weight.is_finite()) {
            return err("label_weight must be positive".into());
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return err("every split needs at least one example per class".into());
        }
        Ok(())
    }
}

/// Label phrase and weighted token bag of one synthetic class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTemplate {
    pub label: Vec<String>,
    pub bag: Vec<String>,
    pub weights: Vec<f64>,
}

struct WordSource {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl WordSource {
    const CONSONANTS: &'static [u8] = b"bdfgklmnprstvz";
    const VOWELS: &'static [u8] = b"aeiou";

    fn next(&mut self) -> String {
        loop {
            let syllables = self.rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(*Self::CONSONANTS.choose(&mut self.rng).unwrap() as char);
                w.push(*Self::VOWELS.choose(&mut self.rng).unwrap() as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

struct Generator {
    spec: SyntheticSpec,
    templates: Vec<ClassTemplate>,
    noise: Vec<String>,
}

impl Generator {
    fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut words = WordSource {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            used: HashSet::new(),
        };
        let mut templates = Vec::with_capacity(spec.classes);
        let mut shared: Option<(String, String)> = None;
        for c in 0..spec.classes {
            let sibling = if spec.disjoint_bags {
                None
            } else if c % 2 == 0 {
                let pair = (words.next(), words.next());
                shared = Some(pair.clone());
                Some(pair)
            } else {
                shared.take()
            };
            let label_len = words.rng.gen_range(2..=3);
            let mut label: Vec<String> = (0..label_len - 1).map(|_| words.next()).collect();
            let extra = match sibling {
                Some((head, extra)) => {
                    label.push(head);
                    Some(extra)
                }
                None => {
                    label.push(words.next());
                    None
                }
            };
            let mut bag = label.clone();
            let mut weights = vec![spec.label_weight; bag.len()];
            bag.extend(extra);
            while bag.len() < spec.bag_size {
                bag.push(words.next());
            }
            weights.resize(bag.len(), 1.0);
            templates.push(ClassTemplate {
                label,
                bag,
                weights,
            });
        }
        let noise = (0..spec.noise_vocab).map(|_| words.next()).collect();
        Ok(Self {
            spec: spec.clone(),
            templates,
            noise,
        })
    }

    fn text(&self, class: usize, rng: &mut ChaCha8Rng) -> String {
        let t = &self.templates[class];
        let pick = WeightedIndex::new(&t.weights).expect("positive weights");
        let len = rng.gen_range(self.spec.min_len..=self.spec.max_len);
        (0..len)
            .map(|_| {
                if rng.gen::<f64>() < self.spec.noise_rate {
                    self.noise.choose(rng).unwrap().as_str()
                } else {
                    t.bag[rng.sample(&pick)].as_str()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// The class templates `generate_synthetic` draws from.
pub fn synthetic_templates(spec: &SyntheticSpec) -> Result<Vec<ClassTemplate>> {
    Ok(Generator::new(spec)?.templates)
}

/// Labeled train/val/test records for every class, deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let g = Generator::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_DA7A);
    let mut records = vec![];
    for (c, t) in g.templates.iter().enumerate() {
        let label = t.label.join(" ");
        for (split, n) in [
            (Split::Train, spec.train_per_class),
            (Split::Val, spec.val_per_class),
            (Split::Test, spec.test_per_class),
        ] {
            for _ in 0..n {
                records.push(ExampleRecord {
                    text: g.text(c, &mut rng),
                    label: label.clone(),
                    split: Some(split),
                });
            }
        }
    }
    Ok(Dataset { records })
}

/// Unlabeled texts from the same class templates, used for denoising
/// pretraining. Classes are visited round-robin.
pub fn generate_unlabeled(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Vec<String>> {
    let g = Generator::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0123_4567_89AB);
    Ok((0..n).map(|i| g.text(i % spec.classes, &mut rng)).collect())
}

pub fn ingest_jsonl(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = vec![];
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let mut r: ExampleRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if tokenize(&r.label).is_empty() {
            return Err(err("empty label".into()));
        }
        let toks = tokenize(&r.text);
        if toks.len() > MAX_TEXT_TOKENS {
            log::warn!("{}:{}: text truncated to {MAX_TEXT_TOKENS} tokens", path.display(), n + 1);
            r.text = toks[..MAX_TEXT_TOKENS].join(" ");
        }
        records.push(r);
    }
    Ok(Dataset { records })
}

pub fn emit_jsonl(records: &[ExampleRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One labeled example inside a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    /// 1-based position in the stream.
    pub id: usize,
    pub classes: Vec<String>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Task {
    pub fn split(&self, s: Split) -> &[Example] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Every task merged into a single one.
    pub fn joint(&self) -> TaskStream {
        let mut task = Task {
            id: 1,
            classes: vec![],
            train: vec![],
            val: vec![],
            test: vec![],
        };
        for t in &self.tasks {
            task.classes.extend(t.classes.iter().cloned());
            task.train.extend(t.train.iter().cloned());
            task.val.extend(t.val.iter().cloned());
            task.test.extend(t.test.iter().cloned());
        }
        TaskStream { tasks: vec![task] }
    }

    /// All classes in stream order.
    pub fn classes(&self) -> Vec<String> {
        self.tasks.iter().flat_map(|t| t.classes.clone()).collect()
    }

    /// Vocabulary over training texts and every label.
    pub fn vocabulary<'a>(&'a self, extra: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let texts = self
            .tasks
            .iter()
            .flat_map(|t| t.train.iter().map(|e| e.text.as_str()).chain(t.classes.iter().map(String::as_str)));
        Vocabulary::build(texts.chain(extra))
    }
}

/// Shuffles the classes with `seed` and deals them into `tasks` groups of
/// `per_task`. Records without a split are assigned 60/20/20 per class.
pub fn split_tasks(data: &Dataset, tasks: usize, per_task: usize, seed: u64) -> Result<TaskStream> {
    let mut labels = data.labels();
    if tasks == 0 || per_task == 0 || labels.len() != tasks * per_task {
        return Err(Error::Config(format!(
            "{} classes cannot be split into {tasks} tasks of {per_task}",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);

    let mut by_class: BTreeMap<&str, Vec<&ExampleRecord>> = BTreeMap::new();
    for r in &data.records {
        by_class.entry(r.label.as_str()).or_default().push(r);
    }
    let mut out = Vec::with_capacity(tasks);
    for (i, group) in labels.chunks(per_task).enumerate() {
        let mut task = Task {
            id: i + 1,
            classes: group.to_vec(),
            train: vec![],
            val: vec![],
            test: vec![],
        };
        for label in group {
            let recs = &by_class[label.as_str()];
            let unsplit: Vec<&&ExampleRecord> = recs.iter().filter(|r| r.split.is_none()).collect();
            let n = unsplit.len();
            let (n_train, n_val) = ((n * 6).div_ceil(10), (n * 2) / 10);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut assigned = vec![Split::Test; n];
            for (rank, &j) in order.iter().enumerate() {
                assigned[j] = if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
            let mut k = 0;
            for r in recs {
                let s = r.split.unwrap_or_else(|| {
                    k += 1;
                    assigned[k - 1]
                });
                let ex = Example {
                    text: r.text.clone(),
                    label: r.label.clone(),
                };
                match s {
                    Split::Train => task.train.push(ex),
                    Split::Val => task.val.push(ex),
                    Split::Test => task.test.push(ex),
                }
            }
        }
        if task.train.is_empty() {
            return Err(Error::Config(format!("task {} has no training data", task.id)));
        }
        out.push(task);
    }
    Ok(TaskStream { tasks: out })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTask {
    id: usize,
    classes: Vec<String>,
    train: String,
    val: String,
    test: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StreamManifest {
    tasks: Vec<ManifestTask>,
}

/// Writes `task_<t>_<split>.jsonl` files plus `manifest.json`.
pub fn write_stream(stream: &TaskStream, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = StreamManifest { tasks: vec![] };
    for t in &stream.tasks {
        let name = |s: &str| format!("task_{}_{s}.jsonl", t.id);
        for (s, xs) in [("train", &t.train), ("val", &t.val), ("test", &t.test)] {
            let recs: Vec<ExampleRecord> = xs
                .iter()
                .map(|e| ExampleRecord {
                    text: e.text.clone(),
                    label: e.label.clone(),
                    split: None,
                })
                .collect();
            emit_jsonl(&recs, &dir.join(name(s)))?;
        }
        manifest.tasks.push(ManifestTask {
            id: t.id,
            classes: t.classes.clone(),
            train: name("train"),
            val: name("val"),
            test: name("test"),
        });
    }
    let f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

pub fn read_stream(dir: &Path) -> Result<TaskStream> {
    let manifest: StreamManifest = serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
    let load = |f: &str| -> Result<Vec<Example>> {
        Ok(ingest_jsonl(&dir.join(f))?
            .records
            .into_iter()
            .map(|r| Example {
                text: r.text,
                label: r.label,
            })
            .collect())
    };
    let mut tasks = vec![];
    let mut seen = HashSet::new();
    for (i, m) in manifest.tasks.into_iter().enumerate() {
        if m.id != i + 1 {
            return Err(Error::Protocol(format!("manifest lists task {} at position {}", m.id, i + 1)));
        }
        for c in &m.classes {
            if !seen.insert(c.clone()) {
                return Err(Error::Protocol(format!("class {c:?} appears in two tasks")));
            }
        }
        let task = Task {
            id: m.id,
            train: load(&m.train)?,
            val: load(&m.val)?,
            test: load(&m.test)?,
            classes: m.classes,
        };
        for e in task.train.iter().chain(&task.val).chain(&task.test) {
            if !task.classes.contains(&e.label) {
                return Err(Error::Protocol(format!("label {:?} not in task {}", e.label, task.id)));
            }
        }
        tasks.push(task);
    }
    Ok(TaskStream { tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let d = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(d.count(Split::Train), 1200);
        assert_eq!(d.count(Split::Val), 400);
        assert_eq!(d.count(Split::Test), 400);
        assert_eq!(d.labels().len(), 20);
        for r in &d.records {
            let n = tokenize(&r.text).len();
            assert!((8..=20).contains(&n));
            let l = tokenize(&r.label).len();
            assert!((2..=3).contains(&l));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let s = SyntheticSpec::default();
        assert_eq!(generate_synthetic(&s).unwrap(), generate_synthetic(&s).unwrap());
        let other = SyntheticSpec { seed: 1, ..s.clone() };
        assert_ne!(generate_synthetic(&s).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn siblings_share_two_tokens() {
        let t = synthetic_templates(&SyntheticSpec::default()).unwrap();
        for pair in t.chunks(2) {
            let a: HashSet<_> = pair[0].bag.iter().collect();
            let b: HashSet<_> = pair[1].bag.iter().collect();
            assert_eq!(a.intersection(&b).count(), 2);
            assert_eq!(pair[0].label.last(), pair[1].label.last());
            assert_eq!(pair[0].bag.len(), 8);
        }
        let d = synthetic_templates(&SyntheticSpec {
            disjoint_bags: true,
            ..Default::default()
        })
        .unwrap();
        let all: Vec<&String> = d.iter().flat_map(|t| &t.bag).collect();
        assert_eq!(all.len(), all.iter().collect::<HashSet<_>>().len());
    }

    #[test]
    fn spec_validation() {
        let bad = SyntheticSpec {
            tasks: 3,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
    }

    fn toy(classes: usize, per: usize) -> Dataset {
        let mut records = vec![];
        for c in 0..classes {
            for i in 0..per {
                records.push(ExampleRecord {
                    text: format!("w{c} x{i}"),
                    label: format!("class {c}"),
                    split: None,
                });
            }
        }
        Dataset { records }
    }

    #[test]
    fn split_twenty_into_ten_by_two() {
        let d = toy(20, 10);
        let s = split_tasks(&d, 10, 2, 4).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.tasks.iter().all(|t| t.classes.len() == 2));
        let all: HashSet<String> = s.classes().into_iter().collect();
        assert_eq!(all.len(), 20);
        let t = &s.tasks[0];
        assert_eq!((t.train.len(), t.val.len(), t.test.len()), (12, 4, 4));
        assert_eq!(s, split_tasks(&d, 10, 2, 4).unwrap());
        assert!(matches!(split_tasks(&toy(21, 3), 10, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic(&SyntheticSpec {
            train_per_class: 3,
            val_per_class: 1,
            test_per_class: 1,
            ..Default::default()
        })
        .unwrap();
        let p = dir.path().join("d.jsonl");
        emit_jsonl(&d.records, &p).unwrap();
        assert_eq!(ingest_jsonl(&p).unwrap(), d);

        fs::write(&p, "{\"text\": \"a\", \"label\": \"b\"}\nnot json\n").unwrap();
        match ingest_jsonl(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stream_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic(&SyntheticSpec {
            train_per_class: 4,
            val_per_class: 2,
            test_per_class: 2,
            ..Default::default()
        })
        .unwrap();
        let s = split_tasks(&d, 5, 4, 9).unwrap();
        write_stream(&s, dir.path()).unwrap();
        assert_eq!(read_stream(dir.path()).unwrap(), s);
    }
}
