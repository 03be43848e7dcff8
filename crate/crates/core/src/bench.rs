//! Benchmark loaders, answer metrics, invocation statistics and the runner
//! that pushes each instance through ingest, graph construction and a
//! leader session.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Team;
use crate::config::EngineConfig;
use crate::ingest::RawTable;
use crate::kgbuild::KgConfig;
use crate::leader::{run_session_with, SessionFinal, SessionOptions, SessionTrace};
use crate::llm::{LlmError, LlmPort, Metered, ReplayLlm, Usage};
use crate::value::parse_finite;
use crate::workspace::{Clock, Workspace};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed {what} at {record}: {message}")]
    Format {
        what: String,
        record: String,
        message: String,
    },
    #[error("each sample needs at least 2 points")]
    TooFewPoints,
    #[error("pooled standard deviation is zero")]
    DegenerateSample,
    #[error("unknown dataset `{0}` (expected tabfact, wikitq or fetaqa)")]
    UnknownDataset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Tabfact,
    Wikitq,
    Fetaqa,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Tabfact => "tabfact",
            DatasetKind::Wikitq => "wikitq",
            DatasetKind::Fetaqa => "fetaqa",
        }
    }

    /// Instruction on the shape of the leader's final answer.
    pub fn answer_format(self) -> &'static str {
        match self {
            DatasetKind::Tabfact => {
                "reply with exactly one word: entailed if the table supports the statement, refuted otherwise."
            }
            DatasetKind::Wikitq => "reply with only the answer value; separate several values with \" | \".",
            DatasetKind::Fetaqa => "reply with one or two complete sentences.",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tabfact" => Ok(DatasetKind::Tabfact),
            "wikitq" => Ok(DatasetKind::Wikitq),
            "fetaqa" => Ok(DatasetKind::Fetaqa),
            _ => Err(BenchError::UnknownDataset(s.to_string())),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Entailed,
    Refuted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gold {
    Label(Verdict),
    Answers(Vec<String>),
    Reference(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchInstance {
    pub id: String,
    pub dataset: DatasetKind,
    pub table: RawTable,
    /// The question, or for TabFact the statement to verify.
    pub question: String,
    pub gold: Gold,
}

impl BenchInstance {
    /// What the leader is asked.
    pub fn session_question(&self) -> String {
        match self.dataset {
            DatasetKind::Tabfact => format!(
                "Is the following statement entailed or refuted by the table? Statement: {}",
                self.question
            ),
            _ => self.question.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

fn read(path: &Path) -> Result<String, BenchError> {
    std::fs::read_to_string(path).map_err(|e| BenchError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn format_err(what: &str, record: impl std::fmt::Display, message: impl std::fmt::Display) -> BenchError {
    BenchError::Format {
        what: what.to_string(),
        record: record.to_string(),
        message: message.to_string(),
    }
}

fn table_from(path: &Path, name: &str, delimiter: u8) -> Result<RawTable, BenchError> {
    let data = std::fs::read(path).map_err(|e| BenchError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    RawTable::from_delimited(name, &data, delimiter).map_err(|e| format_err("table", path.display(), e))
}

/// Loads a dataset directory:
/// - tabfact: `statements.json` mapping table id to `[statements, labels,
///   caption]`, with `#`-delimited tables under `all_csv/<table id>`;
/// - wikitq: `data.tsv` with columns `id utterance context targetValue`,
///   where `context` is a CSV path relative to the directory and answers
///   are `|`-separated;
/// - fetaqa: `data.jsonl` records with `feta_id`, `table_array`,
///   `question`, `answer` and optionally `table_page_title`.
///
/// Order is deterministic; `limit` keeps the first `n` instances.
pub fn load_dataset(kind: DatasetKind, path: &Path, limit: Option<usize>) -> Result<Vec<BenchInstance>, BenchError> {
    if !path.is_dir() {
        return Err(BenchError::Io {
            path: path.display().to_string(),
            message: "not a dataset directory".into(),
        });
    }
    let limit = limit.unwrap_or(usize::MAX);
    match kind {
        DatasetKind::Tabfact => load_tabfact(path, limit),
        DatasetKind::Wikitq => load_wikitq(path, limit),
        DatasetKind::Fetaqa => load_fetaqa(path, limit),
    }
}

fn load_tabfact(dir: &Path, limit: usize) -> Result<Vec<BenchInstance>, BenchError> {
    let file = dir.join("statements.json");
    let doc: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(&read(&file)?).map_err(|e| format_err("statements.json", "document", e))?;
    let mut out = Vec::new();
    for (table_id, entry) in doc {
        if out.len() >= limit {
            break;
        }
        let bad = |m: &str| format_err("statements.json", &table_id, m);
        let parts = entry
            .as_array()
            .ok_or_else(|| bad("expected [statements, labels, caption]"))?;
        let (Some(statements), Some(labels)) = (
            parts.first().and_then(|v| v.as_array()),
            parts.get(1).and_then(|v| v.as_array()),
        ) else {
            return Err(bad("expected [statements, labels, caption]"));
        };
        if statements.len() != labels.len() {
            return Err(bad("statement and label counts differ"));
        }
        let caption = parts.get(2).and_then(|v| v.as_str()).unwrap_or("");
        let name = if caption.trim().is_empty() { "t" } else { caption };
        let table = table_from(&dir.join("all_csv").join(&table_id), name, b'#')?;
        for (i, (s, l)) in statements.iter().zip(labels).enumerate() {
            if out.len() >= limit {
                break;
            }
            let statement = s.as_str().ok_or_else(|| bad("statement is not a string"))?;
            let label = match l.as_i64() {
                Some(1) => Verdict::Entailed,
                Some(0) => Verdict::Refuted,
                _ => return Err(bad("label must be 0 or 1")),
            };
            out.push(BenchInstance {
                id: format!("{table_id}#{i}"),
                dataset: DatasetKind::Tabfact,
                table: table.clone(),
                question: statement.to_string(),
                gold: Gold::Label(label),
            });
        }
    }
    Ok(out)
}

fn load_wikitq(dir: &Path, limit: usize) -> Result<Vec<BenchInstance>, BenchError> {
    let file = dir.join("data.tsv");
    let text = read(&file)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().map(|(_, l)| l.split('\t').collect()).unwrap_or_default();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| format_err("data.tsv", "header", format!("missing column `{name}`")))
    };
    let (ci, cu, cc, ct) = (col("id")?, col("utterance")?, col("context")?, col("targetValue")?);
    let mut out = Vec::new();
    for (n, line) in lines.take(limit) {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != header.len() {
            return Err(format_err(
                "data.tsv",
                format!("line {}", n + 1),
                format!("expected {} fields, found {}", header.len(), cells.len()),
            ));
        }
        let context = cells[cc].trim();
        let stem = Path::new(context).file_stem().and_then(|s| s.to_str()).unwrap_or("t");
        let table = table_from(&dir.join(context), &format!("t_{stem}"), b',')?;
        out.push(BenchInstance {
            id: cells[ci].trim().to_string(),
            dataset: DatasetKind::Wikitq,
            table,
            question: cells[cu].trim().to_string(),
            gold: Gold::Answers(cells[ct].split('|').map(|s| s.trim().to_string()).collect()),
        });
    }
    Ok(out)
}

#[derive(Deserialize)]
struct FetaRecord {
    feta_id: serde_json::Value,
    table_array: Vec<Vec<String>>,
    question: String,
    answer: String,
    #[serde(default)]
    table_page_title: Option<String>,
}

fn load_fetaqa(dir: &Path, limit: usize) -> Result<Vec<BenchInstance>, BenchError> {
    let file = dir.join("data.jsonl");
    let text = read(&file)?;
    let mut out = Vec::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .take(limit)
    {
        let rec: FetaRecord =
            serde_json::from_str(line).map_err(|e| format_err("data.jsonl", format!("line {}", n + 1), e))?;
        let mut rows = rec.table_array.into_iter();
        let headers = rows
            .next()
            .ok_or_else(|| format_err("data.jsonl", format!("line {}", n + 1), "empty table_array"))?;
        let name = rec
            .table_page_title
            .filter(|t| !t.trim().is_empty())
            .unwrap_or_else(|| "t".into());
        let table = RawTable::new(name, headers, rows.collect())
            .map_err(|e| format_err("data.jsonl", format!("line {}", n + 1), e))?;
        let id = match rec.feta_id {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        out.push(BenchInstance {
            id,
            dataset: DatasetKind::Fetaqa,
            table,
            question: rec.question,
            gold: Gold::Reference(rec.answer),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// A normalized answer: numbers compare with a relative tolerance, the rest
/// as normalized text.
#[derive(Debug, Clone, PartialEq)]
pub enum NormAnswer {
    Number(f64),
    Text(String),
}

const NUMERIC_RTOL: f64 = 1e-6;
const DATE_FORMATS: &[&str] = &[
    "%Y-%m-%d",
    "%Y/%m/%d",
    "%B %d, %Y",
    "%B %d %Y",
    "%d %B %Y",
    "%b %d, %Y",
    "%b %d %Y",
    "%d %b %Y",
    "%m/%d/%Y",
];

impl NormAnswer {
    pub fn matches(&self, other: &NormAnswer) -> bool {
        match (self, other) {
            (NormAnswer::Number(a), NormAnswer::Number(b)) => {
                a == b || (a - b).abs() <= NUMERIC_RTOL * a.abs().max(b.abs())
            }
            (NormAnswer::Text(a), NormAnswer::Text(b)) => a == b,
            _ => false,
        }
    }
}

fn strip_thousands(s: &str) -> Option<String> {
    let (sign, body) = match s.strip_prefix('-') {
        Some(b) => ("-", b),
        None => ("", s),
    };
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let groups: Vec<&str> = int.split(',').collect();
    let ok = groups.len() > 1
        && (1..=3).contains(&groups[0].len())
        && groups[1..].iter().all(|g| g.len() == 3)
        && groups.iter().all(|g| g.chars().all(|c| c.is_ascii_digit()))
        && frac.is_none_or(|f| !f.is_empty() && f.chars().all(|c| c.is_ascii_digit()));
    ok.then(|| {
        format!(
            "{sign}{}{}",
            groups.concat(),
            frac.map(|f| format!(".{f}")).unwrap_or_default()
        )
    })
}

/// Lowercase, trim, strip surrounding quotes and a trailing period, drop
/// thousands separators, read numbers as numbers and dates as ISO dates.
pub fn normalize_answer(s: &str) -> NormAnswer {
    let mut t = s.trim().to_lowercase();
    loop {
        let before = t.len();
        for (open, close) in [
            ('"', '"'),
            ('\'', '\''),
            ('\u{201c}', '\u{201d}'),
            ('\u{2018}', '\u{2019}'),
            ('`', '`'),
        ] {
            if t.len() >= 2 && t.starts_with(open) && t.ends_with(close) {
                t = t[open.len_utf8()..t.len() - close.len_utf8()].trim().to_string();
            }
        }
        if t.ends_with('.') && !t.ends_with("..") {
            t.pop();
            t = t.trim_end().to_string();
        }
        if t.len() == before {
            break;
        }
    }
    let t = t.split_whitespace().collect::<Vec<_>>().join(" ");
    let numeric = strip_thousands(&t).unwrap_or_else(|| t.clone());
    if let Some(v) = parse_finite(&numeric) {
        return NormAnswer::Number(v);
    }
    for f in DATE_FORMATS {
        if let Ok(d) = NaiveDate::parse_from_str(&t, f) {
            return NormAnswer::Text(d.format("%Y-%m-%d").to_string());
        }
    }
    NormAnswer::Text(t)
}

fn dedup(items: Vec<NormAnswer>) -> Vec<NormAnswer> {
    let mut out: Vec<NormAnswer> = Vec::new();
    for i in items {
        if !out.iter().any(|o| o.matches(&i)) {
            out.push(i);
        }
    }
    out
}

/// Normalized set equality between the predicted answers (`|`-separated)
/// and the gold answers.
pub fn exact_match(pred: &str, gold: &[String]) -> bool {
    let p = dedup(pred.split('|').map(normalize_answer).collect());
    let g = dedup(gold.iter().map(|s| normalize_answer(s)).collect());
    p.len() == g.len() && p.iter().all(|x| g.iter().any(|y| x.matches(y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    #[serde(rename = "rouge1")]
    One,
    #[serde(rename = "rouge2")]
    Two,
    #[serde(rename = "rougeL")]
    L,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl Prf {
    fn from_overlap(overlap: usize, pred_total: usize, ref_total: usize) -> Self {
        if overlap == 0 || pred_total == 0 || ref_total == 0 {
            return Prf {
                precision: 0.0,
                recall: 0.0,
                f: 0.0,
            };
        }
        let p = overlap as f64 / pred_total as f64;
        let r = overlap as f64 / ref_total as f64;
        Prf {
            precision: p,
            recall: r,
            f: 2.0 * p * r / (p + r),
        }
    }
}

/// Lowercased words with punctuation replaced by spaces.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Precision, recall and F of `pred` against `reference`. Identical token
/// sequences score 1 for every variant, including texts too short to have
/// bigrams.
pub fn rouge_prf(pred: &str, reference: &str, variant: RougeVariant) -> Prf {
    let (p, r) = (rouge_tokens(pred), rouge_tokens(reference));
    if p == r {
        return Prf {
            precision: 1.0,
            recall: 1.0,
            f: 1.0,
        };
    }
    match variant {
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let (cp, cr) = (ngram_counts(&p, n), ngram_counts(&r, n));
            let overlap: usize = cp.iter().map(|(g, c)| (*c).min(cr.get(g).copied().unwrap_or(0))).sum();
            Prf::from_overlap(overlap, cp.values().sum(), cr.values().sum())
        }
        RougeVariant::L => Prf::from_overlap(lcs_len(&p, &r), p.len(), r.len()),
    }
}

pub fn rouge_score(pred: &str, reference: &str, variant: RougeVariant) -> f64 {
    rouge_prf(pred, reference, variant).f
}

/// `(mean_a - mean_b) / pooled_sd` with `n - 1` denominators.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64, BenchError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(BenchError::TooFewPoints);
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let ss = |x: &[f64], m: f64| x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = ((ss(a, ma) + ss(b, mb)) / (na + nb - 2.0)).sqrt();
    if pooled == 0.0 || !pooled.is_finite() {
        return Err(BenchError::DegenerateSample);
    }
    Ok((ma - mb) / pooled)
}

/// Reads a TabFact verdict from free text: exactly one of the two word
/// families must occur.
pub fn parse_verdict(answer: &str) -> Option<Verdict> {
    let words: HashSet<String> = rouge_tokens(answer).into_iter().collect();
    let any = |ws: &[&str]| ws.iter().any(|w| words.contains(*w));
    match (
        any(&["entailed", "entails", "true", "yes", "supported"]),
        any(&["refuted", "refutes", "false", "no", "unsupported"]),
    ) {
        (true, false) => Some(Verdict::Entailed),
        (false, true) => Some(Verdict::Refuted),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Invocation statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvocationClass {
    DbOnly,
    KgOnly,
    Both,
    None,
}

impl InvocationClass {
    pub fn of(db: u32, kg: u32) -> Self {
        match (db > 0, kg > 0) {
            (true, false) => InvocationClass::DbOnly,
            (false, true) => InvocationClass::KgOnly,
            (true, true) => InvocationClass::Both,
            (false, false) => InvocationClass::None,
        }
    }
}

pub const FREQUENCY_BINS: [&str; 5] = ["1", "2-3", "4-5", "6-10", "10+"];

/// Bin of a total team-call count; zero calls have no bin.
pub fn frequency_bin(total_calls: u32) -> Option<&'static str> {
    Some(match total_calls {
        0 => return None,
        1 => FREQUENCY_BINS[0],
        2..=3 => FREQUENCY_BINS[1],
        4..=5 => FREQUENCY_BINS[2],
        6..=10 => FREQUENCY_BINS[3],
        _ => FREQUENCY_BINS[4],
    })
}

/// Team calls of one session and, when gold is available, whether it was
/// answered correctly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub db: u32,
    pub kg: u32,
    pub correct: Option<bool>,
}

impl CallRecord {
    pub fn from_trace(t: &SessionTrace, correct: Option<bool>) -> Self {
        Self {
            db: t.team_calls(Team::DatabaseTeam),
            kg: t.team_calls(Team::KnowledgeGraphTeam),
            correct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: String,
    pub count: usize,
    /// Sessions in the bin with known correctness.
    pub scored: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationStats {
    pub total: usize,
    pub classes: BTreeMap<InvocationClass, ClassShare>,
    pub bins: Vec<BinRow>,
}

pub fn collect_stats(records: &[CallRecord]) -> InvocationStats {
    let total = records.len();
    let pct = |n: usize| {
        if total == 0 {
            0.0
        } else {
            100.0 * n as f64 / total as f64
        }
    };
    let mut classes = BTreeMap::new();
    for c in [
        InvocationClass::DbOnly,
        InvocationClass::KgOnly,
        InvocationClass::Both,
        InvocationClass::None,
    ] {
        let count = records.iter().filter(|r| InvocationClass::of(r.db, r.kg) == c).count();
        classes.insert(
            c,
            ClassShare {
                count,
                percent: pct(count),
            },
        );
    }
    let bins = FREQUENCY_BINS
        .iter()
        .map(|&bin| {
            let in_bin: Vec<&CallRecord> = records
                .iter()
                .filter(|r| frequency_bin(r.db + r.kg) == Some(bin))
                .collect();
            let scored = in_bin.iter().filter(|r| r.correct.is_some()).count();
            let correct = in_bin.iter().filter(|r| r.correct == Some(true)).count();
            BinRow {
                bin: bin.to_string(),
                count: in_bin.len(),
                scored,
                correct,
                accuracy: (scored > 0).then(|| correct as f64 / scored as f64),
            }
        })
        .collect();
    InvocationStats { total, classes, bins }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

/// How the per-instance graph is configured.
#[derive(Debug, Clone, PartialEq)]
pub enum KgStrategy {
    /// Ask the LLM; fall back to the default configuration if that fails.
    Suggest,
    Default,
    Fixed(KgConfig),
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub method: String,
    pub engine: EngineConfig,
    pub kg: KgStrategy,
    pub clock: Clock,
    pub parallel: bool,
    /// Keep full session traces in the report.
    pub keep_traces: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            method: "datafactory".into(),
            engine: EngineConfig::default(),
            kg: KgStrategy::Default,
            clock: Clock::System,
            parallel: true,
            keep_traces: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceResult {
    pub id: String,
    pub question: String,
    pub gold: Gold,
    pub prediction: Option<String>,
    /// `answer`, `timeout` or `clarification`; absent when the run failed.
    pub outcome: Option<String>,
    pub correct: Option<bool>,
    pub rouge: Option<RougeScores>,
    pub failed: bool,
    pub error: Option<String>,
    pub usage: Usage,
    pub llm_calls: u64,
    pub db_calls: u32,
    pub kg_calls: u32,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<SessionTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub rouge1: Option<f64>,
    pub rouge2: Option<f64>,
    #[serde(rename = "rougeL")]
    pub rouge_l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenAverages {
    pub input: f64,
    pub output: f64,
    pub total: f64,
    pub sum: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub method: String,
    pub dataset: DatasetKind,
    pub n: usize,
    pub failed: usize,
    pub metrics: Metrics,
    pub tokens: TokenAverages,
    pub invocation: InvocationStats,
    pub instances: Vec<InstanceResult>,
}

impl RunReport {
    /// Aggregates are a pure function of the instance rows.
    pub fn from_instances(method: &str, dataset: DatasetKind, instances: Vec<InstanceResult>) -> Self {
        let n = instances.len();
        let mean = |xs: Vec<f64>| {
            if xs.is_empty() {
                None
            } else {
                Some(xs.iter().sum::<f64>() / xs.len() as f64)
            }
        };
        let accuracy = match dataset {
            DatasetKind::Fetaqa => None,
            _ => mean(
                instances
                    .iter()
                    .map(|i| if i.correct == Some(true) { 1.0 } else { 0.0 })
                    .collect(),
            ),
        };
        let rouge = |f: fn(&RougeScores) -> f64| match dataset {
            DatasetKind::Fetaqa => mean(instances.iter().map(|i| i.rouge.as_ref().map_or(0.0, f)).collect()),
            _ => None,
        };
        let sum: Usage = instances.iter().map(|i| i.usage).sum();
        let avg = |x: u64| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        let calls: Vec<CallRecord> = instances
            .iter()
            .map(|i| CallRecord {
                db: i.db_calls,
                kg: i.kg_calls,
                correct: i.correct,
            })
            .collect();
        RunReport {
            method: method.to_string(),
            dataset,
            n,
            failed: instances.iter().filter(|i| i.failed).count(),
            metrics: Metrics {
                accuracy,
                rouge1: rouge(|r| r.rouge1),
                rouge2: rouge(|r| r.rouge2),
                rouge_l: rouge(|r| r.rouge_l),
            },
            tokens: TokenAverages {
                input: avg(sum.input_tokens),
                output: avg(sum.output_tokens),
                total: avg(sum.total()),
                sum,
            },
            invocation: collect_stats(&calls),
            instances,
        }
    }
}

/// Supplies the LLM for one instance.
pub type LlmProvider<'a> = dyn Fn(&BenchInstance) -> Result<Arc<dyn LlmPort>, LlmError> + Sync + 'a;

/// File stem used for an instance's replay transcript.
pub fn transcript_name(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{s}.json")
}

/// Provider serving `<dir>/<transcript_name(id)>` to each instance.
pub fn replay_provider(dir: PathBuf) -> impl Fn(&BenchInstance) -> Result<Arc<dyn LlmPort>, LlmError> + Sync {
    move |inst: &BenchInstance| {
        let llm = ReplayLlm::from_file(&dir.join(transcript_name(&inst.id)))?;
        Ok(Arc::new(llm) as Arc<dyn LlmPort>)
    }
}

/// Graph configuration stored next to replay transcripts, if any.
pub fn replay_kg_strategy(dir: &Path) -> Result<KgStrategy, BenchError> {
    let path = dir.join("kg_config.json");
    if !path.exists() {
        return Ok(KgStrategy::Default);
    }
    KgConfig::from_json(&read(&path)?)
        .map(KgStrategy::Fixed)
        .map_err(|e| format_err("kg_config.json", "document", e))
}

fn score(inst: &BenchInstance, answer: &str) -> (Option<bool>, Option<RougeScores>) {
    match &inst.gold {
        Gold::Label(v) => (Some(parse_verdict(answer) == Some(*v)), None),
        Gold::Answers(g) => (Some(exact_match(answer, g)), None),
        Gold::Reference(r) => (
            None,
            Some(RougeScores {
                rouge1: rouge_score(answer, r, RougeVariant::One),
                rouge2: rouge_score(answer, r, RougeVariant::Two),
                rouge_l: rouge_score(answer, r, RougeVariant::L),
            }),
        ),
    }
}

fn run_instance(inst: &BenchInstance, cfg: &BenchConfig, provider: &LlmProvider<'_>) -> InstanceResult {
    let mut res = InstanceResult {
        id: inst.id.clone(),
        question: inst.question.clone(),
        gold: inst.gold.clone(),
        prediction: None,
        outcome: None,
        correct: match inst.gold {
            Gold::Reference(_) => None,
            _ => Some(false),
        },
        rouge: None,
        failed: true,
        error: None,
        usage: Usage::default(),
        llm_calls: 0,
        db_calls: 0,
        kg_calls: 0,
        steps: 0,
        trace: None,
    };
    let llm = match provider(inst) {
        Ok(l) => l,
        Err(e) => {
            res.error = Some(e.to_string());
            return res;
        }
    };
    let metered = Metered::new(llm.as_ref());
    let outcome = (|| -> Result<SessionTrace, String> {
        let ws = Workspace::in_memory(cfg.engine.clone())
            .map_err(|e| e.to_string())?
            .with_clock(cfg.clock.clone());
        let report = ws.ingest(&inst.table, None).map_err(|e| e.to_string())?;
        match &cfg.kg {
            KgStrategy::Fixed(c) => ws.build_kg(&report.table, Some(c.clone()), None),
            KgStrategy::Default => ws.build_kg(&report.table, None, None),
            KgStrategy::Suggest => ws
                .build_kg(&report.table, None, Some(&metered))
                .or_else(|_| ws.build_kg(&report.table, None, None)),
        }
        .map_err(|e| e.to_string())?;
        let mut opts = SessionOptions::from_config(&ws.config);
        opts.answer_format = inst.dataset.answer_format().to_string();
        run_session_with(&inst.session_question(), &opts, &ws, &metered, &mut |_| {}).map_err(|e| e.to_string())
    })();
    res.usage = metered.total_usage();
    res.llm_calls = metered.calls();
    match outcome {
        Err(e) => res.error = Some(e),
        Ok(trace) => {
            let answer = trace.final_.text().to_string();
            let (correct, rouge) = score(inst, &answer);
            res.failed = false;
            res.correct = correct;
            res.rouge = rouge;
            res.outcome = Some(
                match trace.final_ {
                    SessionFinal::Answer { .. } => "answer",
                    SessionFinal::Timeout { .. } => "timeout",
                    SessionFinal::Clarification { .. } => "clarification",
                }
                .to_string(),
            );
            res.prediction = Some(answer);
            res.db_calls = trace.team_calls(Team::DatabaseTeam);
            res.kg_calls = trace.team_calls(Team::KnowledgeGraphTeam);
            res.steps = trace.steps.len();
            if cfg.keep_traces {
                res.trace = Some(trace);
            }
        }
    }
    if res.failed {
        res.rouge = match inst.gold {
            Gold::Reference(_) => Some(RougeScores {
                rouge1: 0.0,
                rouge2: 0.0,
                rouge_l: 0.0,
            }),
            _ => None,
        };
    }
    res
}

/// Runs every instance in a fresh workspace. Failures are scored 0 and
/// flagged; they never stop the run.
pub fn run_benchmark(
    dataset: DatasetKind,
    instances: &[BenchInstance],
    cfg: &BenchConfig,
    provider: &LlmProvider<'_>,
) -> RunReport {
    let results: Vec<InstanceResult> = if cfg.parallel {
        instances.par_iter().map(|i| run_instance(i, cfg, provider)).collect()
    } else {
        instances.iter().map(|i| run_instance(i, cfg, provider)).collect()
    };
    RunReport::from_instances(&cfg.method, dataset, results)
}
