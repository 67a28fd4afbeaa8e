use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use labelcil::config::ExperimentConfig;
use labelcil::data::{emit_jsonl, generate_synthetic, write_stream};
use labelcil::harness::{load_stream, run_joint, run_sequence, Environment, RunReport};
use labelcil::report::{
    combined_curve_csv, metric_rows, read_metrics, summarize, summary_text, write_aggregate, write_run, MetricRow,
};
use labelcil::Error;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn read_config_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn parse_config(text: &str, path: &Path, seeds: Option<Vec<u64>>) -> Result<ExperimentConfig> {
    let anchored = |e: Error| CliError::Config(format!("{}: {e}", path.display()));
    let mut cfg = ExperimentConfig::from_toml(text).map_err(anchored)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
        cfg.validate().map_err(anchored)?;
    }
    Ok(cfg)
}

fn load_config(path: &Path, seeds: Option<Vec<u64>>) -> Result<ExperimentConfig> {
    parse_config(&read_config_text(path)?, path, seeds)
}

/// Applies `f` to every item on up to `threads` workers, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new(items.iter().map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

pub fn gen_data(config: &Path, out: Option<PathBuf>, seeds: Option<Vec<u64>>) -> Result<()> {
    let cfg = load_config(config, seeds)?;
    let out = out.unwrap_or_else(|| cfg.output.dir.join("data"));
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    if cfg.data.path.is_none() && cfg.data.stream.is_none() {
        let data = generate_synthetic(&cfg.data.synthetic)?;
        emit_jsonl(&data.records, &out.join("dataset.jsonl"))?;
    }
    for &seed in &cfg.seeds {
        let (stream, _) = load_stream(&cfg, seed)?;
        write_stream(&stream, &out.join(format!("seed_{seed}")))?;
    }
    fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(io_err(&out))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> labelcil::Result<Vec<(String, RunReport)>> {
    let (stream, corpus) = load_stream(cfg, seed)?;
    let env = Environment::prepare(&stream, &corpus, cfg, seed)?;
    let mut out = vec![];
    for &m in &cfg.methods {
        out.push((m.name().to_string(), run_sequence(&stream, &env, &cfg.train, m, seed)?));
    }
    if cfg.joint {
        for &m in &cfg.methods {
            out.push((format!("joint-{}", m.name()), run_joint(&stream, &env, &cfg.train, m, seed)?));
        }
    }
    Ok(out)
}

/// Runs every seed and method of `cfg`, writing per-run files and the
/// aggregate into `out`.
fn run_experiment(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<Vec<MetricRow>> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(io_err(out))?;
    let results = parallel_map(&cfg.seeds, threads, |&s| run_seed(cfg, s));
    let mut rows = vec![];
    for (&seed, res) in cfg.seeds.iter().zip(results) {
        let runs = res.map_err(|e| CliError::Runtime(format!("seed {seed}: {e}")))?;
        for (label, r) in runs {
            write_run(&out.join(format!("seed_{seed}")).join(&label), &r)?;
            rows.extend(metric_rows(&r, &label));
        }
    }
    write_aggregate(out, &rows)?;
    Ok(rows)
}

pub fn run(config: &Path, out: Option<PathBuf>, seeds: Option<Vec<u64>>, threads: usize) -> Result<()> {
    let cfg = load_config(config, seeds)?;
    let out = out.unwrap_or_else(|| cfg.output.dir.clone());
    let rows = run_experiment(&cfg, &out, threads)?;
    print!("{}", summary_text(&summarize(&rows)));
    Ok(())
}

/// Parses `section.key=v1,v2,...`.
fn parse_param(param: &str) -> Result<(Vec<String>, Vec<toml::Value>, Vec<String>)> {
    let bad = || CliError::Config(format!("--param {param:?}: expected section.key=v1,v2,..."));
    let (key, values) = param.split_once('=').ok_or_else(bad)?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(bad());
    }
    let raw: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if raw.iter().any(String::is_empty) {
        return Err(bad());
    }
    let parsed = raw
        .iter()
        .map(|v| {
            if let Ok(i) = v.parse::<i64>() {
                toml::Value::Integer(i)
            } else if let Ok(f) = v.parse::<f64>() {
                toml::Value::Float(f)
            } else if let Ok(b) = v.parse::<bool>() {
                toml::Value::Boolean(b)
            } else {
                toml::Value::String(v.clone())
            }
        })
        .collect();
    Ok((path, parsed, raw))
}

fn set_dotted(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = table;
    for p in parents {
        let entry = t
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{p} is not a config section")))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

pub fn sweep(
    config: &Path,
    out: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    threads: usize,
    param: &str,
) -> Result<()> {
    let text = read_config_text(config)?;
    let base = parse_config(&text, config, seeds.clone())?;
    let (path, values, raw) = parse_param(param)?;
    let key = path.join(".");
    let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
    // every cell is validated before anything trains
    let mut cells = vec![];
    for (v, name) in values.into_iter().zip(&raw) {
        let mut t = table.clone();
        set_dotted(&mut t, &path, v)?;
        let cell_text = toml::to_string(&t).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg = parse_config(&cell_text, config, seeds.clone())
            .map_err(|e| CliError::Config(format!("{key}={name}: {e}")))?;
        cells.push((format!("{key}={name}"), cfg));
    }
    let out = out.unwrap_or_else(|| base.output.dir.join("sweep"));
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let results = parallel_map(&cells, threads, |(name, cfg)| run_experiment(cfg, &out.join(name), 1));

    let mut status = String::from("cell,status,message\n");
    let mut failed = 0;
    let mut finals: Vec<Option<Vec<MetricRow>>> = vec![];
    for ((name, _), res) in cells.iter().zip(results) {
        match res {
            Ok(rows) => {
                status += &format!("{name},ok,\n");
                finals.push(Some(final_rows(&rows)));
            }
            Err(e) => {
                log::error!("sweep cell {name} failed: {e}");
                failed += 1;
                status += &format!("{name},failed,\"{}\"\n", e.to_string().replace('"', "'"));
                finals.push(None);
            }
        }
    }
    fs::write(out.join("status.csv"), status).map_err(io_err(&out))?;
    let curve = sweep_csv(&cells.iter().map(|c| c.0.clone()).collect::<Vec<_>>(), &finals, &base);
    fs::write(out.join("sweep.csv"), &curve).map_err(io_err(&out))?;
    print!("{curve}");
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} sweep cells failed", cells.len())));
    }
    Ok(())
}

fn final_rows(rows: &[MetricRow]) -> Vec<MetricRow> {
    let last = rows.iter().map(|r| r.task).max().unwrap_or(0);
    rows.iter().filter(|r| r.task == last).cloned().collect()
}

/// Final accuracy per (method, seed) with one column per sweep value, plus a
/// mean row per method. Failed cells are left empty.
fn sweep_csv(names: &[String], finals: &[Option<Vec<MetricRow>>], base: &ExperimentConfig) -> String {
    let mut out = String::from("method,seed");
    for n in names {
        out += &format!(",{n}");
    }
    out += "\n";
    let mut labels: Vec<String> = base.methods.iter().map(|m| m.name().to_string()).collect();
    if base.joint {
        labels.extend(base.methods.iter().map(|m| format!("joint-{}", m.name())));
    }
    let lookup = |cell: &Option<Vec<MetricRow>>, label: &str, seed: Option<u64>| -> Option<f64> {
        let rows = cell.as_ref()?;
        let xs: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == label && seed.is_none_or(|s| r.seed == s))
            .map(|r| r.accuracy)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    for label in &labels {
        let seeds = base.seeds.iter().map(|&s| (s.to_string(), Some(s)));
        for (seed_name, seed) in seeds.chain([("mean".to_string(), None)]) {
            out += &format!("{label},{seed_name}");
            for cell in finals {
                match lookup(cell, label, seed) {
                    Some(v) => out += &format!(",{v}"),
                    None => out += ",",
                }
            }
            out += "\n";
        }
    }
    out
}

pub fn report(runs: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let mut all = vec![];
    let mut text = String::new();
    for dir in runs {
        let rows = read_metrics(&dir.join("metrics.csv"))?;
        text += &format!("== {} ==\n{}", dir.display(), summary_text(&summarize(&rows)));
        all.push((dir.display().to_string(), rows));
    }
    print!("{text}");
    if let Some(out) = out {
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        fs::write(out.join("summary.txt"), &text).map_err(io_err(&out))?;
        fs::write(out.join("curve.csv"), combined_curve_csv(&all)?).map_err(io_err(&out))?;
    }
    Ok(())
}
