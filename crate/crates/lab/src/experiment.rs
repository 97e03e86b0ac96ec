//! Seeded repetitions of training runs, per-run output directories and the
//! aggregated report.
//!
//! Layout under the output directory:
//!
//! ```text
//! <label>/rep<r>/checkpoint.txt
//! <label>/rep<r>/train_log.txt
//! <label>/rep<r>/metrics.txt
//! <label>/rep0/cocos_i2t.txt, cocos_t2i.txt
//! report.csv, report.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cocos_core::cocos::{cocos_protocol, statistic_names, CocosConfig};
use cocos_core::metrics::RetrievalMetrics;
use cocos_core::synth::{generate, strip_identifiers, Split, SynthDataset};
use cocos_core::trainer::{evaluate_split, train, Checkpoint, TrainConfig};
use cocos_core::Direction;

use crate::config::{DatasetSource, ExperimentConfig, RunSpec};
use crate::error::{LabError, Result};
use crate::format::{self, KeyValues};

/// Metric names per direction, in report order. mAP@5 is an i2t metric only.
pub fn metric_names(direction: &str) -> &'static [&'static str] {
    match direction {
        "i2t" => &["r1", "r5", "r10", "avg_recall", "map5", "rsum"],
        "t2i" => &["r1", "r5", "r10", "avg_recall", "rsum"],
        _ => &["rsum"],
    }
}

fn metric_values(m: &RetrievalMetrics) -> Vec<(&'static str, f64)> {
    let mut v = vec![
        ("r1", m.recall_percent(1).unwrap_or(0.0)),
        ("r5", m.recall_percent(5).unwrap_or(0.0)),
        ("r10", m.recall_percent(10).unwrap_or(0.0)),
        ("avg_recall", m.average_recall()),
    ];
    if m.direction == Direction::I2T {
        v.push(("map5", m.map_at_5_percent()));
    }
    v.push(("rsum", m.rsum()));
    v
}

/// `key=value` lines `<variant>.<direction>.<metric>` for one evaluation.
pub fn format_eval(variant: &str, i2t: &RetrievalMetrics, t2i: &RetrievalMetrics) -> String {
    let mut s = String::new();
    for m in [i2t, t2i] {
        for (name, v) in metric_values(m) {
            writeln!(s, "{variant}.{}.{name}={v}", m.direction).unwrap();
        }
    }
    writeln!(s, "{variant}.all.rsum={}", i2t.rsum() + t2i.rsum()).unwrap();
    s
}

/// Loads or generates the dataset of one repetition.
pub fn dataset_for(source: &DatasetSource, seed: u64) -> Result<SynthDataset> {
    match source {
        DatasetSource::Synth { config, fixed_seed } => {
            let mut c = config.clone();
            c.seed = fixed_seed.unwrap_or(seed);
            Ok(generate(&c)?)
        }
        DatasetSource::Path(p) => format::read_dataset(p),
    }
}

pub fn run_dir(out: &Path, label: &str, rep: usize) -> PathBuf {
    out.join(label).join(format!("rep{rep}"))
}

/// Trains one repetition and writes its checkpoint, log and test metrics to
/// `dir`. Datasets with identifiers are additionally evaluated with the test
/// identifiers stripped (variant `stripped`).
pub fn execute_single(
    dataset: &SynthDataset,
    label: &str,
    train_cfg: &TrainConfig,
    cocos: Option<&CocosConfig>,
    dir: &Path,
) -> Result<Checkpoint> {
    let (ck, log) = train(dataset, train_cfg)?;
    format::write_text(&dir.join("checkpoint.txt"), &format::format_checkpoint(&ck)?)?;
    format::write_text(&dir.join("train_log.txt"), &format::format_train_log(&log))?;

    let mut text = String::new();
    writeln!(text, "label={label}").unwrap();
    writeln!(text, "loss={}", train_cfg.loss).unwrap();
    writeln!(text, "seed={}", train_cfg.seed).unwrap();
    writeln!(text, "best_epoch={}", ck.epoch).unwrap();
    writeln!(text, "val_rsum={}", ck.val_rsum).unwrap();
    let (i2t, t2i) = evaluate_split(&ck.encoders, dataset, Split::Test)?;
    text.push_str(&format_eval("test", &i2t, &t2i));
    if dataset.config.injection.is_some() {
        let stripped = strip_identifiers(dataset)?;
        let (i2t, t2i) = evaluate_split(&ck.encoders, &stripped, Split::Test)?;
        text.push_str(&format_eval("stripped", &i2t, &t2i));
    }
    format::write_text(&dir.join("metrics.txt"), &text)?;

    if let Some(c) = cocos {
        let c = CocosConfig { seed: train_cfg.seed, ..*c };
        for r in cocos_protocol(&ck.encoders, dataset, train_cfg.loss, &train_cfg.params, &c)? {
            format::write_text(&dir.join(format!("cocos_{}.txt", r.direction)), &format::format_cocos(&r))?;
        }
    }
    Ok(ck)
}

fn execute_job(cfg: &ExperimentConfig, fixed: Option<&SynthDataset>, run: &RunSpec, rep: usize, out: &Path) -> Result<()> {
    let seed = cfg.seeds(run)[rep];
    let owned;
    let dataset = match fixed {
        Some(d) => d,
        None => {
            owned = dataset_for(&cfg.dataset, seed)?;
            &owned
        }
    };
    let train_cfg = TrainConfig { seed, ..run.train.clone() };
    let cocos = if rep == 0 { cfg.cocos.as_ref() } else { None };
    execute_single(dataset, &run.label, &train_cfg, cocos, &run_dir(out, &run.label, rep))?;
    Ok(())
}

/// Runs every repetition of every run with up to `jobs` concurrent
/// trainings, then aggregates and writes `report.csv` and `report.txt`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Report> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    // the dataset is shared when it does not depend on the repetition seed
    let fixed = match &cfg.dataset {
        DatasetSource::Path(p) => Some(format::read_dataset(p)?),
        DatasetSource::Synth { fixed_seed: Some(_), .. } => Some(dataset_for(&cfg.dataset, 0)?),
        DatasetSource::Synth { fixed_seed: None, .. } => None,
    };
    for run in &cfg.runs {
        let dir = out.join(&run.label);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
        }
    }
    let work: Vec<(&RunSpec, usize)> =
        cfg.runs.iter().flat_map(|r| (0..r.repeats).map(move |rep| (r, rep))).collect();
    let next = AtomicUsize::new(0);
    let errors = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, work.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(run, rep)) = work.get(i) else { break };
                if let Err(e) = execute_job(cfg, fixed.as_ref(), run, rep, out) {
                    errors.lock().unwrap().push((i, e));
                }
            });
        }
    });
    let mut errors = errors.into_inner().unwrap();
    errors.sort_by_key(|(i, _)| *i);
    if let Some((_, e)) = errors.into_iter().next() {
        return Err(e);
    }
    let labels: Vec<&str> = cfg.runs.iter().map(|r| r.label.as_str()).collect();
    let report = aggregate_labels(out, &labels)?;
    report.write(out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub label: String,
    pub direction: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    /// Repetition seeds per label, in label order.
    pub seeds: Vec<(String, Vec<u64>)>,
    pub rows: Vec<Row>,
}

impl Report {
    pub fn get(&self, label: &str, direction: &str, metric: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label && r.direction == direction && r.metric == metric)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| LabError::Config(format!("csv: {e}"));
        w.write_record(["label", "direction", "metric", "mean", "std"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([&r.label, &r.direction, &r.metric, &r.mean.to_string(), &r.std.to_string()])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| LabError::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Aligned table: one line per label and direction, metrics as
    /// `mean ± std` columns.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (label, seeds) in &self.seeds {
            let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
            writeln!(s, "# seeds {label}: {}", list.join(",")).unwrap();
        }
        let mut groups: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            if !groups.contains(&(r.label.as_str(), r.direction.as_str())) {
                groups.push((&r.label, &r.direction));
            }
        }
        let cell = |r: &Row| {
            if r.metric.starts_with("cocos.") && r.metric.contains("w_") {
                format!("{:.3} ± {:.3}", r.mean, r.std)
            } else {
                format!("{:.2} ± {:.2}", r.mean, r.std)
            }
        };
        let lw = groups.iter().map(|g| g.0.len()).max().unwrap_or(5).max(5);
        for (label, dir) in groups {
            let rows: Vec<&Row> = self.rows.iter().filter(|r| r.label == label && r.direction == dir).collect();
            let mut line = format!("{label:<lw$}  {dir:<3}");
            for r in rows {
                write!(line, "  {}={:<16}", r.metric, cell(r)).unwrap();
            }
            s.push_str(line.trim_end());
            s.push('\n');
        }
        s
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        format::write_text(&out.join("report.csv"), &self.to_csv()?)?;
        format::write_text(&out.join("report.txt"), &self.to_table())
    }
}

fn population(values: &[f64]) -> (f64, f64) {
    cocos_core::stats::mean_std(values)
}

fn rep_dirs(label_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut reps = Vec::new();
    for entry in fs::read_dir(label_dir).map_err(|e| LabError::io(label_dir, e))? {
        let entry = entry.map_err(|e| LabError::io(label_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(r) = name.strip_prefix("rep").and_then(|n| n.parse::<usize>().ok()) {
            if entry.path().join("metrics.txt").is_file() {
                reps.push((r, entry.path()));
            }
        }
    }
    reps.sort();
    Ok(reps)
}

/// Aggregates every `<label>/rep*/metrics.txt` below `out`, labels sorted.
pub fn aggregate(out: &Path) -> Result<Report> {
    if !out.is_dir() {
        return Err(LabError::Usage(format!("{} is not a directory", out.display())));
    }
    let mut labels = Vec::new();
    for entry in fs::read_dir(out).map_err(|e| LabError::io(out, e))? {
        let entry = entry.map_err(|e| LabError::io(out, e))?;
        if entry.path().is_dir() && !rep_dirs(&entry.path())?.is_empty() {
            labels.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if labels.is_empty() {
        return Err(LabError::Usage(format!("no run directories under {}", out.display())));
    }
    labels.sort();
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    aggregate_labels(out, &refs)
}

fn aggregate_labels(out: &Path, labels: &[&str]) -> Result<Report> {
    let mut report = Report::default();
    for &label in labels {
        let reps = rep_dirs(&out.join(label))?;
        let kvs = reps.iter().map(|(_, d)| KeyValues::load(&d.join("metrics.txt"))).collect::<Result<Vec<_>>>()?;
        let seeds = kvs.iter().map(|kv| kv.get::<u64>("seed")).collect::<Result<Vec<_>>>()?;
        report.seeds.push((label.to_string(), seeds));
        for variant in ["test", "stripped"] {
            if kvs.iter().any(|kv| kv.raw(&format!("{variant}.all.rsum")).is_none()) {
                continue;
            }
            let row_label = if variant == "test" { label.to_string() } else { format!("{label}:{variant}") };
            for dir in ["i2t", "t2i", "all"] {
                for &metric in metric_names(dir) {
                    let key = format!("{variant}.{dir}.{metric}");
                    let values = kvs.iter().map(|kv| kv.get::<f64>(&key)).collect::<Result<Vec<_>>>()?;
                    let (mean, std) = population(&values);
                    report.rows.push(Row { label: row_label.clone(), direction: dir.into(), metric: metric.into(), mean, std });
                }
            }
        }
        if let Some((_, first)) = reps.first() {
            for dir in ["i2t", "t2i"] {
                let path = first.join(format!("cocos_{dir}.txt"));
                if !path.is_file() {
                    continue;
                }
                let kv = KeyValues::load(&path)?;
                let loss = kv.get::<cocos_core::losses::LossKind>("loss")?;
                for stat in statistic_names(loss) {
                    report.rows.push(Row {
                        label: label.to_string(),
                        direction: dir.into(),
                        metric: format!("cocos.{stat}"),
                        mean: kv.get(&format!("{stat}.mean"))?,
                        std: kv.get(&format!("{stat}.std"))?,
                    });
                }
            }
        }
    }
    Ok(report)
}
