//! Multiple-choice evaluation: baselines, scheme runs, normalized scores and
//! resumable grid sweeps.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compose::scheme::FIELDS;
use crate::compose::{
    baseline_choice, test1_pyramidal_generation, test2_concept_similarity, ChoiceScores, CompositionScheme, TestKind,
};
use crate::error::{Error, Result};
use crate::io::McInstance;
use crate::model::Model;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const INDEX_FILE: &str = "index.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMINGS_FILE: &str = "timings.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub chosen: usize,
    pub gold: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `None` for the baseline.
    pub scheme: Option<CompositionScheme>,
    pub test: TestKind,
    #[serde(rename = "n")]
    pub n_instances: usize,
    #[serde(rename = "acc")]
    pub accuracy: f64,
    pub normalized: Option<f64>,
    pub records: Vec<InstanceRecord>,
}

impl EvalResult {
    fn from_records(scheme: Option<CompositionScheme>, test: TestKind, records: Vec<InstanceRecord>) -> Self {
        let correct = records.iter().filter(|r| r.chosen == r.gold).count();
        Self {
            scheme,
            test,
            n_instances: records.len(),
            accuracy: correct as f64 / records.len() as f64,
            normalized: None,
            records,
        }
    }

    pub fn normalize_by(&mut self, baseline: &EvalResult) {
        self.normalized = normalized(self.accuracy, baseline.accuracy);
    }
}

/// `acc / baseline`, undefined for a zero baseline.
pub fn normalized(acc: f64, baseline: f64) -> Option<f64> {
    if baseline > 0.0 {
        Some(acc / baseline)
    } else {
        log::warn!("baseline accuracy is 0, no normalized score");
        None
    }
}

fn collect<F>(task: &[McInstance], f: F) -> Result<Vec<InstanceRecord>>
where
    F: Fn(&McInstance) -> Result<ChoiceScores> + Sync,
{
    if task.is_empty() {
        return Err(Error::NoInstances);
    }
    task.par_iter()
        .map(|inst| {
            let s = f(inst)?;
            Ok(InstanceRecord {
                id: inst.id.clone(),
                chosen: s.chosen,
                gold: inst.gold,
                scores: s.scores,
            })
        })
        .collect()
}

/// Standard full-token log-likelihood choice selection.
pub fn baseline_score(model: &Model, task: &[McInstance], length_norm: bool) -> Result<EvalResult> {
    let records = collect(task, |inst| baseline_choice(model, inst, length_norm))?;
    let mut r = EvalResult::from_records(None, TestKind::Baseline, records);
    r.normalized = Some(1.0);
    Ok(r)
}

/// Runs `test` with `scheme` over the task. The scheme is checked before
/// any instance runs; `baseline`, when given, adds the normalized score.
pub fn run_eval(
    model: &Model,
    task: &[McInstance],
    scheme: &CompositionScheme,
    test: TestKind,
    baseline: Option<&EvalResult>,
    length_norm: bool,
) -> Result<EvalResult> {
    if test == TestKind::Baseline {
        let mut r = baseline_score(model, task, length_norm)?;
        if let Some(b) = baseline {
            r.normalize_by(b);
        }
        return Ok(r);
    }
    scheme.validate_for(test, !model.has_encoder())?;
    let records = collect(task, |inst| match test {
        TestKind::Test1 => test1_pyramidal_generation(model, inst, scheme, length_norm),
        _ => test2_concept_similarity(model, inst, scheme),
    })?;
    let mut r = EvalResult::from_records(Some(*scheme), test, records);
    if let Some(b) = baseline {
        r.normalize_by(b);
    }
    Ok(r)
}

/// Value lists per scheme field; fields left out keep their defaults.
/// Values may be JSON strings or integers (`"ENCODING_LAYER": [-1, 6]`).
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(transparent)]
pub struct GridSpec(pub BTreeMap<String, Vec<serde_json::Value>>);

/// One enumerated grid point: a scheme, or the reason it was skipped.
#[derive(Clone, Debug, PartialEq)]
pub enum GridPoint {
    Valid(CompositionScheme),
    Skipped { point: String, reason: String },
}

impl GridSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GridSpec = serde_json::from_str(text)?;
        if let Some(k) = spec.0.keys().find(|k| !FIELDS.contains(&k.as_str())) {
            return Err(Error::InvalidScheme(format!("unknown grid field {k:?}")));
        }
        if let Some((k, _)) = spec.0.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::InvalidScheme(format!("grid field {k} has no values")));
        }
        Ok(spec)
    }

    fn value_lists(&self) -> Result<Vec<(&'static str, Vec<String>)>> {
        FIELDS
            .iter()
            .filter_map(|&f| self.0.get(f).map(|vals| (f, vals)))
            .map(|(f, vals)| {
                let strs = vals
                    .iter()
                    .map(|v| match v {
                        serde_json::Value::String(s) => Ok(s.clone()),
                        serde_json::Value::Number(n) => Ok(n.to_string()),
                        serde_json::Value::Null => Ok("None".to_owned()),
                        other => Err(Error::InvalidScheme(format!("grid value {other} for {f}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((f, strs))
            })
            .collect()
    }

    /// Cartesian product in field order, last field varying fastest.
    /// Duplicates after parsing (aliases) are dropped.
    pub fn expand(&self, test: TestKind, causal_context: bool) -> Result<Vec<GridPoint>> {
        let lists = self.value_lists()?;
        let total: usize = lists.iter().map(|(_, v)| v.len()).product();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for mut flat in 0..total {
            let mut picks = vec![""; lists.len()];
            for (i, (_, vals)) in lists.iter().enumerate().rev() {
                picks[i] = &vals[flat % vals.len()];
                flat /= vals.len();
            }
            let point = lists
                .iter()
                .zip(&picks)
                .map(|((k, _), v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(",");
            let mut scheme = CompositionScheme::default();
            let parsed = lists
                .iter()
                .zip(&picks)
                .try_for_each(|((k, _), v)| scheme.set(k, v))
                .and_then(|_| scheme.validate_for(test, causal_context));
            match parsed {
                Err(e) => {
                    let reason = match e {
                        Error::InvalidScheme(m) => m,
                        e => e.to_string(),
                    };
                    log::info!("skipping {point}: {reason}");
                    out.push(GridPoint::Skipped { point, reason });
                }
                Ok(()) if seen.insert(scheme.to_string()) => out.push(GridPoint::Valid(scheme)),
                Ok(()) => log::debug!("duplicate grid point {point}"),
            }
        }
        Ok(out)
    }
}

/// One line of `results.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub hash: String,
    pub scheme: CompositionScheme,
    pub test: TestKind,
    pub n: usize,
    pub acc: Option<f64>,
    pub normalized: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SweepRecord {
    fn key(&self) -> (String, TestKind) {
        (self.scheme.to_string(), self.test)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    pub resume: bool,
    pub length_norm: bool,
    /// Rows in `summary.csv`.
    pub top_k: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            resume: false,
            length_norm: false,
            top_k: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    /// All records in the results file, best accuracy first (failures last).
    pub results: Vec<SweepRecord>,
    pub skipped: Vec<(String, String)>,
    /// Points evaluated in this call (as opposed to loaded on resume).
    pub ran: usize,
}

/// Reads complete records and truncates a partial trailing line left by an
/// interrupted writer.
fn load_results(path: &Path) -> Result<Vec<SweepRecord>> {
    let Ok(file) = File::open(path) else {
        return Ok(Vec::new());
    };
    let mut records = Vec::new();
    let mut good_len = 0u64;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        match serde_json::from_str::<SweepRecord>(line.trim_end()) {
            Ok(r) => records.push(r),
            Err(_) => break,
        }
        good_len += n as u64;
    }
    let actual = fs::metadata(path)?.len();
    if actual != good_len {
        log::warn!(
            "{}: dropping {} bytes of partial output",
            path.display(),
            actual - good_len
        );
        OpenOptions::new().write(true).open(path)?.set_len(good_len)?;
    }
    Ok(records)
}

fn write_index(dir: &Path, records: &[SweepRecord]) -> Result<()> {
    let index: BTreeMap<String, usize> = records.iter().enumerate().map(|(i, r)| (r.hash.clone(), i)).collect();
    let mut f = BufWriter::new(File::create(dir.join(INDEX_FILE))?);
    serde_json::to_writer_pretty(&mut f, &index)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn sort_by_accuracy(records: &mut [SweepRecord]) {
    records.sort_by(|a, b| match (a.acc, b.acc) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

pub fn write_summary(path: &Path, sorted: &[SweepRecord], top_k: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["rank", "hash", "test", "accuracy", "normalized"];
    header.extend(FIELDS);
    w.write_record(&header)?;
    for (rank, r) in sorted.iter().filter(|r| r.acc.is_some()).take(top_k).enumerate() {
        let mut row = vec![
            (rank + 1).to_string(),
            r.hash.clone(),
            r.test.to_string(),
            r.acc.map(|a| a.to_string()).unwrap_or_default(),
            r.normalized.map(|a| a.to_string()).unwrap_or_default(),
        ];
        row.extend(r.scheme.values());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluates every valid grid point, appending one record per scheme to
/// `dir/results.jsonl` in grid order. With `resume`, schemes already in the
/// file are skipped, so an interrupted sweep finishes with the same file a
/// fresh run writes.
pub fn sweep(
    model: &Model,
    task: &[McInstance],
    grid: &GridSpec,
    test: TestKind,
    dir: &Path,
    opts: &SweepOptions,
) -> Result<SweepOutcome> {
    if task.is_empty() {
        return Err(Error::NoInstances);
    }
    fs::create_dir_all(dir)?;
    let points = grid.expand(test, !model.has_encoder())?;
    let results_path = dir.join(RESULTS_FILE);
    let mut records = if opts.resume {
        load_results(&results_path)?
    } else {
        File::create(&results_path)?;
        Vec::new()
    };
    let done: HashSet<_> = records.iter().map(SweepRecord::key).collect();
    let baseline = baseline_score(model, task, opts.length_norm)?;

    let mut out = BufWriter::new(OpenOptions::new().append(true).create(true).open(&results_path)?);
    let mut timings = OpenOptions::new()
        .append(true)
        .create(true)
        .open(dir.join(TIMINGS_FILE))?;
    let mut skipped = Vec::new();
    let mut ran = 0;
    for p in points {
        let scheme = match p {
            GridPoint::Valid(s) => s,
            GridPoint::Skipped { point, reason } => {
                skipped.push((point, reason));
                continue;
            }
        };
        if done.contains(&(scheme.to_string(), test)) {
            continue;
        }
        let t0 = Instant::now();
        let rec = match run_eval(model, task, &scheme, test, Some(&baseline), opts.length_norm) {
            Ok(r) => SweepRecord {
                hash: scheme.hash(),
                scheme,
                test,
                n: r.n_instances,
                acc: Some(r.accuracy),
                normalized: r.normalized,
                error: None,
            },
            Err(e) => {
                log::warn!("{scheme}: {e}");
                SweepRecord {
                    hash: scheme.hash(),
                    scheme,
                    test,
                    n: task.len(),
                    acc: None,
                    normalized: None,
                    error: Some(e.to_string()),
                }
            }
        };
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
        out.flush()?;
        writeln!(
            timings,
            "{}",
            serde_json::json!({ "hash": rec.hash, "wall_ms": wall_ms })
        )?;
        records.push(rec);
        ran += 1;
    }
    write_index(dir, &records)?;
    sort_by_accuracy(&mut records);
    write_summary(&dir.join(SUMMARY_FILE), &records, opts.top_k)?;
    Ok(SweepOutcome {
        results: records,
        skipped,
        ran,
    })
}
