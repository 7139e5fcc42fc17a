//! Click-log ingestion, per-campaign positive/negative sets and the
//! training/calibration splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::impression::Impression;

/// Skip reasons kept verbatim in a [`SkipReport`]; the rest are only counted.
const MAX_REPORTED_SKIPS: usize = 100;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("input contains no usable records")]
    EmptyInput,
    #[error("line {line}: record does not match the schema: {message}")]
    SchemaMismatch { line: u64, message: String },
    #[error("campaign {0:?} has no positives in the window")]
    NoPositives(String),
    #[error("campaign {0:?} has no negatives in the window")]
    NoNegatives(String),
    #[error("set too small to split: {0}")]
    TooSmall(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl InputFormat {
    /// Guesses the format from a file extension (`.csv`, else JSONL).
    pub fn from_path(path: &Path) -> InputFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => InputFormat::Csv,
            _ => InputFormat::Jsonl,
        }
    }
}

impl FromStr for InputFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(InputFormat::Jsonl),
            "csv" => Ok(InputFormat::Csv),
            other => Err(DatasetError::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputFormat::Jsonl => "jsonl",
            InputFormat::Csv => "csv",
        })
    }
}

/// Inclusive time window `[start, end]` in epoch seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: i64,
    pub end: i64,
}

impl Window {
    pub fn new(start: i64, end: i64) -> Result<Self, DatasetError> {
        if start > end {
            return Err(DatasetError::InvalidArgument(format!("window [{start}, {end}] is empty")));
        }
        Ok(Window { start, end })
    }

    pub fn contains(&self, ts: i64) -> bool {
        self.start <= ts && ts <= self.end
    }
}

/// All clicked impressions over a window, across campaigns.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickPool {
    clicks: Vec<Arc<Impression>>,
    campaigns: BTreeSet<String>,
    window: Window,
}

impl ClickPool {
    /// Window taken from the earliest and latest timestamps.
    pub fn new(clicks: Vec<Impression>) -> Result<Self, DatasetError> {
        let start = clicks.iter().map(|c| c.timestamp).min().ok_or(DatasetError::EmptyInput)?;
        let end = clicks.iter().map(|c| c.timestamp).max().unwrap_or(start);
        ClickPool::with_window(clicks, Window::new(start, end)?)
    }

    pub fn with_window(clicks: Vec<Impression>, window: Window) -> Result<Self, DatasetError> {
        if clicks.is_empty() {
            return Err(DatasetError::EmptyInput);
        }
        if let Some(c) = clicks.iter().find(|c| !c.clicked) {
            return Err(DatasetError::InvalidArgument(format!(
                "impression at ts {} is not a click",
                c.timestamp
            )));
        }
        if let Some(c) = clicks.iter().find(|c| !window.contains(c.timestamp)) {
            return Err(DatasetError::InvalidArgument(format!(
                "timestamp {} outside window",
                c.timestamp
            )));
        }
        let campaigns = clicks.iter().map(|c| c.campaign.clone()).collect();
        Ok(ClickPool { clicks: clicks.into_iter().map(Arc::new).collect(), campaigns, window })
    }

    pub fn clicks(&self) -> &[Arc<Impression>] {
        &self.clicks
    }

    pub fn campaigns(&self) -> &BTreeSet<String> {
        &self.campaigns
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    /// Click counts per campaign.
    pub fn campaign_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for c in &self.clicks {
            *counts.entry(c.campaign.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub line: u64,
    pub reason: String,
}

/// Accounting of records dropped during ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub records: usize,
    pub accepted: usize,
    pub skipped: usize,
    pub reason_counts: BTreeMap<String, usize>,
    /// The first few skipped records with their line numbers.
    pub examples: Vec<SkippedRecord>,
}

impl SkipReport {
    fn skip(&mut self, line: u64, kind: &str, reason: String) {
        self.skipped += 1;
        *self.reason_counts.entry(kind.to_string()).or_insert(0) += 1;
        if self.examples.len() < MAX_REPORTED_SKIPS {
            self.examples.push(SkippedRecord { line, reason });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub pool: ClickPool,
    pub report: SkipReport,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    exchange: String,
    hour: i64,
    day: i64,
    ad_format: String,
    ad_size: String,
    domain: String,
    zip: String,
    campaign: String,
    clicked: bool,
    ts: i64,
}

fn accept_record(raw: RawRecord, line: u64, clicks_only: bool, report: &mut SkipReport, out: &mut Vec<Impression>) {
    report.records += 1;
    if clicks_only && !raw.clicked {
        report.skip(line, "not_clicked", "record is not a click".into());
        return;
    }
    match Impression::new(
        &raw.exchange,
        raw.hour,
        raw.day,
        &raw.ad_format,
        &raw.ad_size,
        &raw.domain,
        &raw.zip,
        &raw.campaign,
        raw.clicked,
        raw.ts,
    ) {
        Ok(imp) => {
            report.accepted += 1;
            out.push(imp);
        }
        Err(e) => report.skip(line, "invalid_value", e.to_string()),
    }
}

/// Reads click records. Records whose values break an impression invariant
/// (hour out of range, bad ZIP, not a click, ...) are skipped and counted;
/// a record that does not parse against the schema aborts with its line number.
pub fn ingest<R: Read>(reader: R, format: InputFormat) -> Result<Ingested, DatasetError> {
    let (clicks, report) = read_records(reader, format, true)?;
    if clicks.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    Ok(Ingested { pool: ClickPool::new(clicks)?, report })
}

/// Reads every valid record, clicked or not, with the same skip rules as [`ingest`].
pub fn read_impressions<R: Read>(reader: R, format: InputFormat) -> Result<(Vec<Impression>, SkipReport), DatasetError> {
    read_records(reader, format, false)
}

fn read_records<R: Read>(
    reader: R,
    format: InputFormat,
    clicks_only: bool,
) -> Result<(Vec<Impression>, SkipReport), DatasetError> {
    let mut report = SkipReport::default();
    let mut clicks = Vec::new();
    match format {
        InputFormat::Jsonl => {
            for (i, line) in BufReader::new(reader).lines().enumerate() {
                let line_no = i as u64 + 1;
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let raw: RawRecord = serde_json::from_str(&line).map_err(|e| {
                    DatasetError::SchemaMismatch { line: line_no, message: e.to_string() }
                })?;
                accept_record(raw, line_no, clicks_only, &mut report, &mut clicks);
            }
        }
        InputFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
            let headers = rdr
                .headers()
                .map_err(|e| DatasetError::SchemaMismatch { line: 1, message: e.to_string() })?
                .clone();
            for required in
                ["exchange", "hour", "day", "ad_format", "ad_size", "domain", "zip", "campaign", "clicked", "ts"]
            {
                if !headers.iter().any(|h| h == required) {
                    return Err(DatasetError::SchemaMismatch {
                        line: 1,
                        message: format!("missing column {required:?}"),
                    });
                }
            }
            for result in rdr.deserialize::<RawRecord>() {
                match result {
                    Ok(raw) => {
                        let line = report.records as u64 + 2;
                        accept_record(raw, line, clicks_only, &mut report, &mut clicks);
                    }
                    Err(e) => {
                        let line = e.position().map(|p| p.line()).unwrap_or(0);
                        return Err(DatasetError::SchemaMismatch { line, message: e.to_string() });
                    }
                }
            }
        }
    }
    Ok((clicks, report))
}

pub fn ingest_path(path: &Path, format: Option<InputFormat>) -> Result<Ingested, DatasetError> {
    let format = format.unwrap_or_else(|| InputFormat::from_path(path));
    ingest(File::open(path)?, format)
}

/// Writes impressions in the ingestion schema.
pub fn emit<'a, W: Write>(
    impressions: impl IntoIterator<Item = &'a Impression>,
    writer: W,
    format: InputFormat,
) -> Result<(), DatasetError> {
    match format {
        InputFormat::Jsonl => {
            let mut w = io::BufWriter::new(writer);
            for imp in impressions {
                serde_json::to_writer(&mut w, imp).map_err(io::Error::other)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        InputFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            for imp in impressions {
                w.serialize(imp).map_err(io::Error::other)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRow {
    pub impression: Arc<Impression>,
    pub positive: bool,
}

/// One campaign's positives (its clicks) and negatives (other campaigns'
/// clicks in the same window).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    campaign: String,
    rows: Vec<LabeledRow>,
}

impl LabeledSet {
    pub fn new(campaign: impl Into<String>, rows: Vec<LabeledRow>) -> Result<Self, DatasetError> {
        let campaign = campaign.into();
        if let Some(r) = rows.iter().find(|r| r.positive != (r.impression.campaign == campaign)) {
            return Err(DatasetError::InvalidArgument(format!(
                "label of a {:?} click inconsistent with campaign {campaign:?}",
                r.impression.campaign
            )));
        }
        if !rows.iter().any(|r| r.positive) {
            return Err(DatasetError::NoPositives(campaign));
        }
        if !rows.iter().any(|r| !r.positive) {
            return Err(DatasetError::NoNegatives(campaign));
        }
        Ok(LabeledSet { campaign, rows })
    }

    pub fn campaign(&self) -> &str {
        &self.campaign
    }

    pub fn rows(&self) -> &[LabeledRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.rows.iter().filter(|r| r.positive).count()
    }

    pub fn negatives(&self) -> usize {
        self.rows.len() - self.positives()
    }
}

pub fn build_labeled_set(pool: &ClickPool, campaign: &str, window: Window) -> Result<LabeledSet, DatasetError> {
    let rows: Vec<LabeledRow> = pool
        .clicks
        .iter()
        .filter(|c| window.contains(c.timestamp))
        .map(|c| LabeledRow { impression: Arc::clone(c), positive: c.campaign == campaign })
        .collect();
    let set = LabeledSet::new(campaign, rows)?;
    tracing::debug!(
        campaign,
        positives = set.positives(),
        negatives = set.negatives(),
        "labeled set built"
    );
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum SplitMethod {
    Random { ratio: f64, seed: u64 },
    Time { fraction: f64, boundary: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub training: LabeledSet,
    pub calibration: LabeledSet,
    pub method: SplitMethod,
}

fn assemble(
    set: &LabeledSet,
    to_training: &[bool],
    method: SplitMethod,
) -> Result<Split, DatasetError> {
    let mut training = Vec::new();
    let mut calibration = Vec::new();
    for (row, &t) in set.rows.iter().zip(to_training) {
        if t {
            training.push(row.clone());
        } else {
            calibration.push(row.clone());
        }
    }
    let describe = |side: &str, e: DatasetError| DatasetError::TooSmall(format!("{side}: {e}"));
    let training = LabeledSet::new(set.campaign.clone(), training).map_err(|e| describe("training", e))?;
    let calibration =
        LabeledSet::new(set.campaign.clone(), calibration).map_err(|e| describe("calibration", e))?;
    Ok(Split { training, calibration, method })
}

/// Label-stratified random split with `|T| / |C| ≈ ratio`, deterministic in `seed`.
pub fn split_random(set: &LabeledSet, ratio: f64, seed: u64) -> Result<Split, DatasetError> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(DatasetError::InvalidArgument(format!("ratio {ratio} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut to_training = vec![false; set.rows.len()];
    for label in [true, false] {
        let mut idx: Vec<usize> = (0..set.rows.len()).filter(|&i| set.rows[i].positive == label).collect();
        let n = idx.len();
        let n_train = (n as f64 * ratio / (1.0 + ratio)).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(DatasetError::TooSmall(format!(
                "{n} {} rows cannot be stratified at ratio {ratio}",
                if label { "positive" } else { "negative" }
            )));
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..n_train] {
            to_training[i] = true;
        }
    }
    assemble(set, &to_training, SplitMethod::Random { ratio, seed })
}

/// Training gets `[t_A, t_B]`, calibration `(t_B, t_C]`, where
/// `(t_B − t_A) / (t_C − t_A) = fraction` over the set's own time span.
pub fn split_time(set: &LabeledSet, fraction: f64) -> Result<Split, DatasetError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::InvalidArgument(format!("fraction {fraction} outside (0, 1)")));
    }
    let ts = set.rows.iter().map(|r| r.impression.timestamp);
    let start = ts.clone().min().ok_or(DatasetError::EmptyInput)?;
    let end = ts.max().unwrap_or(start);
    let boundary = start as f64 + fraction * (end - start) as f64;
    let to_training: Vec<bool> = set.rows.iter().map(|r| r.impression.timestamp as f64 <= boundary).collect();
    assemble(set, &to_training, SplitMethod::Time { fraction, boundary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn click(campaign: &str, ts: i64, hour: i64) -> Impression {
        Impression::new("adx", hour, 1, "banner", "300x250", "a.com", "95131", campaign, true, ts).unwrap()
    }

    const ROW: &str = r#"{"exchange":"adx","hour":3,"day":1,"ad_format":"banner","ad_size":"300x250","domain":"a.com","zip":"95131","campaign":"A","clicked":true,"ts":10}"#;

    #[test]
    fn ingests_valid_jsonl() {
        let text = format!("{ROW}\n{ROW}\n\n{ROW}\n");
        let got = ingest(text.as_bytes(), InputFormat::Jsonl).unwrap();
        assert_eq!(got.pool.len(), 3);
        assert_eq!(got.report.skipped, 0);
    }

    #[test]
    fn skips_invalid_values() {
        let bad = ROW.replace("\"hour\":3", "\"hour\":24");
        let unclicked = ROW.replace("\"clicked\":true", "\"clicked\":false");
        let text = format!("{ROW}\n{bad}\n{unclicked}\n");
        let got = ingest(text.as_bytes(), InputFormat::Jsonl).unwrap();
        assert_eq!(got.pool.len(), 1);
        assert_eq!(got.report.skipped, 2);
        assert_eq!(got.report.examples[0].line, 2);
        assert_eq!(got.report.reason_counts["invalid_value"], 1);
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let missing = ROW.replace("\"zip\":\"95131\",", "");
        let text = format!("{ROW}\n{missing}\n");
        match ingest(text.as_bytes(), InputFormat::Jsonl) {
            Err(DatasetError::SchemaMismatch { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let csv = "exchange,hour\nadx,3\n";
        assert!(matches!(
            ingest(csv.as_bytes(), InputFormat::Csv),
            Err(DatasetError::SchemaMismatch { line: 1, .. })
        ));
        assert!(matches!(ingest("".as_bytes(), InputFormat::Jsonl), Err(DatasetError::EmptyInput)));
    }

    #[test]
    fn csv_round_trip_normalizes() {
        let csv = "exchange,hour,day,ad_format,ad_size,domain,zip,campaign,clicked,ts\n\
                   adx,3,1,banner,300x250,Finance.Yahoo.com/quotes,95131-0001,A,true,5\n\
                   adx,25,1,banner,300x250,a.com,95131,A,true,6\n";
        let got = ingest(csv.as_bytes(), InputFormat::Csv).unwrap();
        assert_eq!(got.pool.len(), 1);
        assert_eq!(got.report.skipped, 1);
        assert_eq!(got.report.examples[0].line, 3);
        let c = &got.pool.clicks()[0];
        assert_eq!(c.domain, "finance.yahoo.com");
        assert_eq!(c.zip, "95131");
        let mut out = Vec::new();
        emit(got.pool.clicks().iter().map(|c| c.as_ref()), &mut out, InputFormat::Csv).unwrap();
        let again = ingest(out.as_slice(), InputFormat::Csv).unwrap();
        assert_eq!(again.pool, got.pool);
    }

    #[test]
    fn labeled_set_counts() {
        let mut clicks: Vec<_> = (0..3).map(|i| click("A", i, 1)).collect();
        clicks.extend((0..5).map(|i| click("B", 10 + i, 2)));
        let pool = ClickPool::new(clicks).unwrap();
        let set = build_labeled_set(&pool, "A", pool.window()).unwrap();
        assert_eq!((set.positives(), set.negatives()), (3, 5));
        let late = Window::new(10, 20).unwrap();
        assert!(matches!(build_labeled_set(&pool, "A", late), Err(DatasetError::NoPositives(_))));
        let only_a = Window::new(0, 2).unwrap();
        assert!(matches!(build_labeled_set(&pool, "A", only_a), Err(DatasetError::NoNegatives(_))));
    }

    fn balanced(n_pos: usize, n_neg: usize) -> LabeledSet {
        let rows = (0..n_pos + n_neg)
            .map(|i| {
                let positive = i < n_pos;
                let c = if positive { "A" } else { "B" };
                LabeledRow { impression: Arc::new(click(c, i as i64, (i % 24) as i64)), positive }
            })
            .collect();
        LabeledSet::new("A", rows).unwrap()
    }

    #[test]
    fn random_split_small_example() {
        let set = balanced(4, 4);
        let split = split_random(&set, 3.0, 1).unwrap();
        assert_eq!(split.training.len(), 6);
        assert_eq!(split.training.positives(), 3);
        assert_eq!(split.calibration.len(), 2);
        assert_eq!(split.calibration.positives(), 1);
        assert_eq!(split_random(&set, 3.0, 1).unwrap(), split);
        assert!(matches!(split_random(&balanced(1, 4), 3.0, 1), Err(DatasetError::TooSmall(_))));
        assert!(split_random(&set, 0.0, 1).is_err());
    }

    #[test]
    fn random_split_proportions_at_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n_pos = rng.random_range(500..1500);
        let set = balanced(n_pos, 10_000 - n_pos);
        let split = split_random(&set, 3.0, 42).unwrap();
        for (in_train, total) in [
            (split.training.positives(), set.positives()),
            (split.training.negatives(), set.negatives()),
        ] {
            assert!((in_train as f64 - 0.75 * total as f64).abs() <= 1.0);
        }
        assert_eq!(split.training.len() + split.calibration.len(), set.len());
    }

    #[test]
    fn time_split_example() {
        let rows = (0..100)
            .map(|i| {
                let positive = i % 4 == 0;
                let c = if positive { "A" } else { "B" };
                LabeledRow { impression: Arc::new(click(c, i, 0)), positive }
            })
            .collect();
        let set = LabeledSet::new("A", rows).unwrap();
        let split = split_time(&set, 0.75).unwrap();
        let max_train = split.training.rows().iter().map(|r| r.impression.timestamp).max().unwrap();
        let min_cal = split.calibration.rows().iter().map(|r| r.impression.timestamp).min().unwrap();
        assert_eq!((max_train, min_cal), (74, 75));
        assert_eq!(split.training.len(), 75);
    }

    #[test]
    fn time_split_degenerate() {
        let rows = (0..10)
            .map(|i| {
                let positive = i < 5;
                let c = if positive { "A" } else { "B" };
                LabeledRow { impression: Arc::new(click(c, 7, 0)), positive }
            })
            .collect();
        let set = LabeledSet::new("A", rows).unwrap();
        assert!(matches!(split_time(&set, 0.75), Err(DatasetError::TooSmall(_))));
        assert!(split_time(&set, 1.0).is_err());
    }
}
