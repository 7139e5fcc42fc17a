//! Compiled scoring engine.
//!
//! Models are compiled into flat lookup tables keyed by interned level ids.
//! Hour and day use direct array indexing; the string dimensions use a
//! sorted `(id, beta)` table searched by bisection, or a hash map. The linear
//! predictor is accumulated in dimension order, the same order as
//! [`BinaryModel::linear_predictor`], so compiled and reference scores agree
//! bit for bit.

use std::collections::HashMap;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::impression::{Dimension, Impression};
use crate::model::BinaryModel;

/// Id given to levels no loaded model knows about.
pub const UNKNOWN_LEVEL: u32 = u32::MAX;
/// Runs shorter than this are too close to the clock resolution to report.
pub const MIN_WALL_SECONDS: f64 = 0.1;

const STRING_DIMS: [Dimension; 5] = [
    Dimension::Exchange,
    Dimension::AdFormat,
    Dimension::AdSize,
    Dimension::Domain,
    Dimension::Zip,
];

fn string_slot(dim: Dimension) -> Option<usize> {
    STRING_DIMS.iter().position(|d| *d == dim)
}

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("thread count must be at least 1")]
    InvalidThreads,
    #[error("repetitions must be at least 1")]
    InvalidRepetitions,
    #[error("timed region lasted {wall_time:.4}s, under {MIN_WALL_SECONDS}s; raise repetitions")]
    ClockResolution { wall_time: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Bsearch,
    Hash,
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bsearch" => Ok(Backend::Bsearch),
            "hash" => Ok(Backend::Hash),
            other => Err(format!("unknown backend {other:?}, expected bsearch or hash")),
        }
    }
}

/// Interned ids for the string dimensions, shared by every model of an ensemble.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    ids: [HashMap<String, u32>; 5],
}

impl Vocabulary {
    fn intern(&mut self, slot: usize, level: &str) -> u32 {
        let next = self.ids[slot].len() as u32;
        *self.ids[slot].entry(level.to_string()).or_insert(next)
    }

    pub fn id(&self, dim: Dimension, level: &str) -> u32 {
        string_slot(dim)
            .and_then(|s| self.ids[s].get(level).copied())
            .unwrap_or(UNKNOWN_LEVEL)
    }

    pub fn len(&self) -> usize {
        self.ids.iter().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An impression with its string levels replaced by vocabulary ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncodedImpression {
    pub hour: u8,
    pub day: u8,
    /// Exchange, ad format, ad size, domain, ZIP.
    pub ids: [u32; 5],
}

#[derive(Debug, Clone)]
enum LevelTable {
    Sorted(Vec<(u32, f64)>),
    Hash(HashMap<u32, f64>),
}

impl LevelTable {
    #[inline]
    fn get(&self, id: u32) -> Option<f64> {
        match self {
            LevelTable::Sorted(t) => t.binary_search_by_key(&id, |e| e.0).ok().map(|i| t[i].1),
            LevelTable::Hash(m) => m.get(&id).copied(),
        }
    }

    fn len(&self) -> usize {
        match self {
            LevelTable::Sorted(t) => t.len(),
            LevelTable::Hash(m) => m.len(),
        }
    }
}

/// Direct-indexed betas for a small numeric dimension.
#[derive(Debug, Clone)]
struct DenseTable {
    beta: [f64; 24],
    present: u32,
}

impl DenseTable {
    #[inline]
    fn get(&self, slot: u8) -> Option<f64> {
        let s = slot as usize % 24;
        (self.present >> s & 1 == 1).then(|| self.beta[s])
    }
}

#[derive(Debug, Clone)]
pub struct CompiledModel {
    campaign: String,
    intercept: f64,
    threshold: f64,
    hour: DenseTable,
    day: DenseTable,
    tables: [LevelTable; 5],
}

fn dense_table(model: &BinaryModel, dim: Dimension) -> DenseTable {
    let mut t = DenseTable { beta: [0.0; 24], present: 0 };
    for level in model.feature_index().levels_of(dim) {
        // Levels outside 0..24 can never match an impression.
        if let (Ok(slot), Some(b)) = (level.parse::<u8>(), model.beta(dim, level)) {
            // only the canonical spelling matches Impression::level
            if (slot as usize) < 24 && slot.to_string() == level {
                t.beta[slot as usize] = b;
                t.present |= 1 << slot;
            }
        }
    }
    t
}

impl CompiledModel {
    pub fn compile(model: &BinaryModel, vocabulary: &mut Vocabulary, backend: Backend) -> Self {
        let tables = std::array::from_fn(|slot| {
            let dim = STRING_DIMS[slot];
            let mut entries: Vec<(u32, f64)> = model
                .feature_index()
                .levels_of(dim)
                .filter_map(|level| model.beta(dim, level).map(|b| (vocabulary.intern(slot, level), b)))
                .collect();
            entries.sort_by_key(|e| e.0);
            match backend {
                Backend::Bsearch => LevelTable::Sorted(entries),
                Backend::Hash => LevelTable::Hash(entries.into_iter().collect()),
            }
        });
        CompiledModel {
            campaign: model.campaign().to_string(),
            intercept: model.intercept(),
            threshold: model.threshold(),
            hour: dense_table(model, Dimension::Hour),
            day: dense_table(model, Dimension::Day),
            tables,
        }
    }

    pub fn campaign(&self) -> &str {
        &self.campaign
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn n_features(&self) -> usize {
        (self.hour.present.count_ones() + self.day.present.count_ones()) as usize
            + self.tables.iter().map(LevelTable::len).sum::<usize>()
    }

    /// Beta for an encoded level; hour and day take the numeric level.
    pub fn lookup(&self, dim: Dimension, id: u32) -> Option<f64> {
        match dim {
            Dimension::Hour => u8::try_from(id).ok().and_then(|s| self.hour.get(s)),
            Dimension::Day => u8::try_from(id).ok().and_then(|s| self.day.get(s)),
            other => self.tables[string_slot(other).expect("string dimension")].get(id),
        }
    }

    /// Linear predictor, accumulated in dimension order.
    #[inline]
    pub fn eta(&self, imp: &EncodedImpression) -> f64 {
        let mut eta = self.intercept;
        let ids = &imp.ids;
        if let Some(b) = self.tables[0].get(ids[0]) {
            eta += b;
        }
        if let Some(b) = self.hour.get(imp.hour) {
            eta += b;
        }
        if let Some(b) = self.day.get(imp.day) {
            eta += b;
        }
        for slot in 1..5 {
            if let Some(b) = self.tables[slot].get(ids[slot]) {
                eta += b;
            }
        }
        eta
    }

    #[inline]
    pub fn accepts(&self, imp: &EncodedImpression) -> bool {
        self.eta(imp) > self.threshold
    }
}

/// Compiled models sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct CompiledEnsemble {
    vocabulary: Vocabulary,
    models: Vec<CompiledModel>,
    backend: Backend,
}

impl CompiledEnsemble {
    pub fn new<'a>(models: impl IntoIterator<Item = &'a BinaryModel>, backend: Backend) -> Self {
        let mut vocabulary = Vocabulary::default();
        let models = models
            .into_iter()
            .map(|m| CompiledModel::compile(m, &mut vocabulary, backend))
            .collect();
        CompiledEnsemble { vocabulary, models, backend }
    }

    pub fn models(&self) -> &[CompiledModel] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn encode(&self, imp: &Impression) -> EncodedImpression {
        EncodedImpression {
            hour: imp.hour,
            day: imp.day,
            ids: STRING_DIMS.map(|d| self.vocabulary.id(d, imp.level(d))),
        }
    }

    pub fn encode_batch(&self, batch: &[Impression]) -> Vec<EncodedImpression> {
        batch.iter().map(|imp| self.encode(imp)).collect()
    }

    /// Number of models accepting `imp`.
    #[inline]
    pub fn count_acceptors(&self, imp: &EncodedImpression) -> usize {
        self.models.iter().filter(|m| m.accepts(imp)).count()
    }
}

/// Row-major impression × model accept decisions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decisions {
    n_models: usize,
    accept: Vec<bool>,
}

impl Decisions {
    pub fn n_impressions(&self) -> usize {
        if self.n_models == 0 {
            0
        } else {
            self.accept.len() / self.n_models
        }
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn get(&self, impression: usize, model: usize) -> bool {
        self.accept[impression * self.n_models + model]
    }

    pub fn row(&self, impression: usize) -> &[bool] {
        &self.accept[impression * self.n_models..(impression + 1) * self.n_models]
    }
}

pub fn score_batch(ensemble: &CompiledEnsemble, batch: &[EncodedImpression]) -> Decisions {
    let mut accept = Vec::with_capacity(batch.len() * ensemble.len());
    for imp in batch {
        accept.extend(ensemble.models.iter().map(|m| m.accepts(imp)));
    }
    Decisions { n_models: ensemble.len(), accept }
}

/// Row-major linear predictors for the whole batch.
pub fn eta_batch(ensemble: &CompiledEnsemble, batch: &[EncodedImpression]) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch.len() * ensemble.len());
    for imp in batch {
        out.extend(ensemble.models.iter().map(|m| m.eta(imp)));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub threads: usize,
    pub repetitions: usize,
    pub models: usize,
    pub impressions_scored: u64,
    pub wall_time: f64,
    /// Impression-ensemble evaluations per second.
    pub qps: f64,
    /// Impression-model evaluations per second.
    pub pair_rate: f64,
    pub per_thread_qps: Vec<f64>,
    /// Accept decisions seen during the timed region; keeps the work observable.
    pub acceptances: u64,
}

/// Times `repetitions` passes over `batch` split statically into `threads`
/// contiguous chunks, after one untimed warm-up pass.
pub fn bench(
    ensemble: &CompiledEnsemble,
    batch: &[EncodedImpression],
    threads: usize,
    repetitions: usize,
) -> Result<BenchReport, BenchError> {
    if batch.is_empty() {
        return Err(BenchError::EmptyBatch);
    }
    if ensemble.is_empty() {
        return Err(BenchError::EmptyEnsemble);
    }
    if threads == 0 {
        return Err(BenchError::InvalidThreads);
    }
    if repetitions == 0 {
        return Err(BenchError::InvalidRepetitions);
    }
    let warm: usize = batch.iter().map(|imp| ensemble.count_acceptors(imp)).sum();
    black_box(warm);

    let chunk = batch.len().div_ceil(threads);
    let start = Instant::now();
    let per_thread: Vec<(u64, u64, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    let t0 = Instant::now();
                    let mut accepted = 0u64;
                    for _ in 0..repetitions {
                        for imp in black_box(part) {
                            accepted += ensemble.count_acceptors(imp) as u64;
                        }
                    }
                    ((part.len() * repetitions) as u64, accepted, t0.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });
    let wall_time = start.elapsed().as_secs_f64();
    if wall_time < MIN_WALL_SECONDS {
        return Err(BenchError::ClockResolution { wall_time });
    }
    let impressions_scored: u64 = per_thread.iter().map(|t| t.0).sum();
    let qps = impressions_scored as f64 / wall_time;
    Ok(BenchReport {
        threads,
        repetitions,
        models: ensemble.len(),
        impressions_scored,
        wall_time,
        qps,
        pair_rate: qps * ensemble.len() as f64,
        per_thread_qps: per_thread.iter().map(|t| t.0 as f64 / t.2).collect(),
        acceptances: per_thread.iter().map(|t| t.1).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub threads: usize,
    pub qps: f64,
    /// Relative to the first row.
    pub speedup: f64,
}

pub fn scaling_table(reports: &[BenchReport]) -> Vec<ScalingRow> {
    let base = reports.first().map(|r| r.qps).unwrap_or(f64::NAN);
    reports
        .iter()
        .map(|r| ScalingRow { threads: r.threads, qps: r.qps, speedup: r.qps / base })
        .collect()
}
