//! Answer scoring, dataset loading and benchmark runs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{self, BufRead};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, golds: &[String]) -> u8 {
    let p = normalize_answer(prediction);
    golds.iter().any(|g| normalize_answer(g) == p) as u8
}

fn f1_single(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return (pt.is_empty() && gt.is_empty()) as u8 as f64;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pt.len() as f64;
    let recall = overlap as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Max token F1 over the golds.
pub fn token_f1(prediction: &str, golds: &[String]) -> f64 {
    golds.iter().map(|g| f1_single(prediction, g)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Generic,
    Hotpotqa,
    Musique,
    #[serde(rename = "2wiki")]
    TwoWiki,
}

impl DatasetFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetFormat::Generic => "generic",
            DatasetFormat::Hotpotqa => "hotpotqa",
            DatasetFormat::Musique => "musique",
            DatasetFormat::TwoWiki => "2wiki",
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generic" => Ok(DatasetFormat::Generic),
            "hotpotqa" => Ok(DatasetFormat::Hotpotqa),
            "musique" => Ok(DatasetFormat::Musique),
            "2wiki" => Ok(DatasetFormat::TwoWiki),
            other => Err(EvalError::UnsupportedFormat(other.to_string())),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unsupported dataset format {0:?} (expected generic, hotpotqa, musique or 2wiki)")]
    UnsupportedFormat(String),
    #[error("{location}: {message}")]
    Parse { location: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("dataset has no examples")]
    EmptyDataset,
}

fn parse_err(location: String, message: impl Into<String>) -> EvalError {
    EvalError::Parse {
        location,
        message: message.into(),
    }
}

fn string_field(rec: &Value, names: &[&str], location: &str) -> Result<String, EvalError> {
    for name in names {
        match rec.get(*name) {
            Some(Value::String(s)) => return Ok(s.clone()),
            Some(Value::Number(n)) => return Ok(n.to_string()),
            Some(_) => return Err(parse_err(location.to_string(), format!("field {name:?} is not a string"))),
            None => {}
        }
    }
    Err(parse_err(location.to_string(), format!("missing field {:?}", names[0])))
}

fn string_list(v: &Value, name: &str, location: &str) -> Result<Vec<String>, EvalError> {
    match v {
        Value::String(s) => Ok(vec![s.clone()]),
        Value::Array(items) => items
            .iter()
            .map(|i| match i {
                Value::String(s) => Ok(s.clone()),
                _ => Err(parse_err(location.to_string(), format!("{name:?} must hold strings"))),
            })
            .collect(),
        _ => Err(parse_err(location.to_string(), format!("{name:?} must be a string or list"))),
    }
}

fn adapt(rec: &Value, format: DatasetFormat, location: &str) -> Result<QAExample, EvalError> {
    if !rec.is_object() {
        return Err(parse_err(location.to_string(), "record is not an object"));
    }
    let id = string_field(rec, &["id", "_id"], location)?;
    let question = string_field(rec, &["question"], location)?;
    let mut golds = match format {
        DatasetFormat::Generic => {
            let v = rec
                .get("answers")
                .ok_or_else(|| parse_err(location.to_string(), "missing field \"answers\""))?;
            string_list(v, "answers", location)?
        }
        DatasetFormat::Hotpotqa | DatasetFormat::TwoWiki | DatasetFormat::Musique => {
            vec![string_field(rec, &["answer"], location)?]
        }
    };
    if format == DatasetFormat::Musique {
        if let Some(aliases) = rec.get("answer_aliases") {
            golds.extend(string_list(aliases, "answer_aliases", location)?);
        }
    }
    if golds.is_empty() {
        return Err(parse_err(location.to_string(), "no gold answers"));
    }
    Ok(QAExample {
        id,
        question,
        gold_answers: golds,
    })
}

/// Parse a dataset. Native benchmark files may be a JSON array or line-JSON;
/// the generic format is line-JSON `{id, question, answers}`.
pub fn read_dataset(reader: impl BufRead, format: DatasetFormat) -> Result<Vec<QAExample>, EvalError> {
    let mut text = String::new();
    let mut reader = reader;
    reader.read_to_string(&mut text)?;
    if format != DatasetFormat::Generic && text.trim_start().starts_with('[') {
        let records: Vec<Value> = serde_json::from_str(&text)
            .map_err(|e| parse_err(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        return records
            .iter()
            .enumerate()
            .map(|(i, r)| adapt(r, format, &format!("record {}", i + 1)))
            .collect();
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("line {}", i + 1);
        let rec: Value = serde_json::from_str(line).map_err(|e| parse_err(location.clone(), e.to_string()))?;
        out.push(adapt(&rec, format, &location)?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<QAExample>, EvalError> {
    let file = std::fs::File::open(path)?;
    read_dataset(io::BufReader::new(file), format)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub id: String,
    pub prediction: String,
    pub em: u8,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset_name: String,
    pub method: String,
    pub n: usize,
    pub em: f64,
    pub f1: f64,
    pub failures: usize,
    pub per_example: Vec<ExampleResult>,
    pub config: Value,
}

impl RunReport {
    pub fn from_results(dataset_name: &str, method: &str, per_example: Vec<ExampleResult>, config: Value) -> Self {
        let n = per_example.len();
        let denom = n.max(1) as f64;
        let em = 100.0 * per_example.iter().map(|r| r.em as f64).sum::<f64>() / denom;
        let f1 = 100.0 * per_example.iter().map(|r| r.f1).sum::<f64>() / denom;
        RunReport {
            dataset_name: dataset_name.to_string(),
            method: method.to_string(),
            n,
            em,
            f1,
            failures: per_example.iter().filter(|r| r.error.is_some()).count(),
            per_example,
            config,
        }
    }

    pub fn summary_line(&self) -> String {
        format!("EM {:.2} F1 {:.2}", self.em, self.f1)
    }
}

/// Solve every example and score it.
///
/// `solve` returns the predicted answer or an error message; a failed example
/// scores zero and keeps its place. Results follow dataset order.
pub fn run_benchmark<F>(dataset: &[QAExample], solve: F, parallelism: usize) -> Result<Vec<ExampleResult>, EvalError>
where
    F: Fn(&QAExample) -> Result<String, String> + Sync,
{
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let score = |ex: &QAExample| match solve(ex) {
        Ok(prediction) => ExampleResult {
            id: ex.id.clone(),
            em: exact_match(&prediction, &ex.gold_answers),
            f1: token_f1(&prediction, &ex.gold_answers),
            prediction,
            error: None,
        },
        Err(e) => ExampleResult {
            id: ex.id.clone(),
            prediction: String::new(),
            em: 0,
            f1: 0.0,
            error: Some(e),
        },
    };
    let workers = parallelism.clamp(1, dataset.len());
    if workers == 1 {
        return Ok(dataset.iter().map(score).collect());
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ExampleResult>>> = Mutex::new(vec![None; dataset.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(ex) = dataset.get(i) else { break };
                let r = score(ex);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    Ok(slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every example scored"))
        .collect())
}

/// Published reference numbers (gpt-4o-mini, 1,000 questions per dataset).
/// Shown for magnitude only; not reproducible at desk scale.
pub const REFERENCE_MAIN: &[(&str, f64, f64)] = &[("musique", 29.70, 38.14), ("2wiki", 61.90, 64.30), ("hotpotqa", 56.00, 64.30)];

/// Published HotpotQA ablation numbers, same caveat.
pub const REFERENCE_ABLATIONS: &[(&str, f64, f64)] = &[
    ("full", 56.0, 64.3),
    ("w/o Decomposition", 50.5, 59.6),
    ("w/o Rewriting", 49.5, 50.2),
    ("w/o Update", 54.5, 63.7),
];

pub fn reference_for(dataset: &str) -> Option<(f64, f64)> {
    REFERENCE_MAIN
        .iter()
        .find(|(d, _, _)| d.eq_ignore_ascii_case(dataset))
        .map(|&(_, em, f1)| (em, f1))
}

/// Fixed-width table: one row per report, plus reference rows when given.
pub fn render_table(reports: &[RunReport], references: &[(String, f64, f64)]) -> String {
    let dataset = reports.first().map(|r| r.dataset_name.as_str()).unwrap_or("");
    let mut width = "Method".len();
    for r in reports {
        width = width.max(r.method.len());
    }
    for (m, _, _) in references {
        width = width.max(m.len());
    }
    let em_header = format!("{dataset} EM");
    let col = em_header.len().max(8);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>col$}  {:>8}", "Method", em_header, "F1");
    let _ = writeln!(out, "{}", "-".repeat(width + col + 12));
    for r in reports {
        let _ = writeln!(out, "{:<width$}  {:>col$.2}  {:>8.2}", r.method, r.em, r.f1);
    }
    for (m, em, f1) in references {
        let _ = writeln!(out, "{:<width$}  {:>col$.2}  {:>8.2}", m, em, f1);
    }
    out
}
