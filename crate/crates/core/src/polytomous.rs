//! Ensembles of per-campaign binary models.
//!
//! Every model votes independently with its own strict threshold. When more
//! than one model accepts an impression the top policy hands it to the largest
//! margin `η − threshold`, the set policy to a uniformly drawn acceptor.
//! Confusion counts are kept per campaign and summed for the ensemble.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ClickPool;
use crate::impression::Impression;
use crate::model::BinaryModel;
use crate::scoring::{Backend, CompiledEnsemble, EncodedImpression};

#[derive(Debug, Error, PartialEq)]
pub enum PolytomousError {
    #[error("ensemble has no models")]
    EmptyEnsemble,
    #[error("campaign {0:?} appears twice")]
    DuplicateCampaign(String),
    #[error("campaign {0:?} is not in the ensemble")]
    UnknownCampaign(String),
    #[error("no impressions to evaluate")]
    EmptyPool,
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    Top,
    Set,
}

/// Which models a set-policy impression counts for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetCredit {
    /// Every accepting model is credited with the impression.
    #[default]
    Acceptors,
    /// Only the randomly chosen acceptor is.
    Chosen,
}

/// What the top policy maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// `η − threshold`.
    #[default]
    Margin,
    /// Raw `η`; only comparable when every model carries its sampling correction.
    ExAnte,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub policy: Policy,
    pub seed: u64,
    pub set_credit: SetCredit,
    pub ranking: Ranking,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Assignment {
    /// Campaigns whose model accepts, in campaign order.
    pub accepted_by: Vec<String>,
    pub chosen: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PolytomousModel {
    models: Vec<BinaryModel>,
    weights: BTreeMap<String, f64>,
    config: EnsembleConfig,
    compiled: CompiledEnsemble,
}

impl PolytomousModel {
    pub fn new(
        models: impl IntoIterator<Item = BinaryModel>,
        config: EnsembleConfig,
    ) -> Result<Self, PolytomousError> {
        let mut models: Vec<BinaryModel> = models.into_iter().collect();
        if models.is_empty() {
            return Err(PolytomousError::EmptyEnsemble);
        }
        models.sort_by(|a, b| a.campaign().cmp(b.campaign()));
        if let Some(w) = models.windows(2).find(|w| w[0].campaign() == w[1].campaign()) {
            return Err(PolytomousError::DuplicateCampaign(w[0].campaign().to_string()));
        }
        let compiled = CompiledEnsemble::new(&models, Backend::Bsearch);
        Ok(PolytomousModel { models, weights: BTreeMap::new(), config, compiled })
    }

    /// Attaches reporting weights; they never influence decisions.
    pub fn with_weights(mut self, weights: BTreeMap<String, f64>) -> Result<Self, PolytomousError> {
        if let Some(c) = weights.keys().find(|c| self.position(c).is_none()) {
            return Err(PolytomousError::UnknownCampaign(c.clone()));
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn with_config(&self, config: EnsembleConfig) -> Self {
        PolytomousModel { config, ..self.clone() }
    }

    /// A new ensemble without `campaign`.
    pub fn without(&self, campaign: &str) -> Result<Self, PolytomousError> {
        let j = self.position(campaign).ok_or_else(|| PolytomousError::UnknownCampaign(campaign.into()))?;
        let models = self.models.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, m)| m.clone());
        let mut weights = self.weights.clone();
        weights.remove(campaign);
        PolytomousModel::new(models, self.config)?.with_weights(weights)
    }

    pub fn models(&self) -> &[BinaryModel] {
        &self.models
    }

    pub fn config(&self) -> EnsembleConfig {
        self.config
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    pub fn compiled(&self) -> &CompiledEnsemble {
        &self.compiled
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    fn position(&self, campaign: &str) -> Option<usize> {
        self.models.binary_search_by(|m| m.campaign().cmp(campaign)).ok()
    }

    /// Accepting model positions and the chosen one for an encoded impression.
    /// `ordinal` seeds the set-policy draw.
    pub fn assign_encoded(&self, imp: &EncodedImpression, ordinal: u64, accepted: &mut Vec<usize>) -> Option<usize> {
        accepted.clear();
        let mut best: Option<(usize, f64)> = None;
        for (j, m) in self.compiled.models().iter().enumerate() {
            let eta = m.eta(imp);
            if eta > m.threshold() {
                accepted.push(j);
                let key = match self.config.ranking {
                    Ranking::Margin => eta - m.threshold(),
                    Ranking::ExAnte => eta,
                };
                if best.is_none_or(|(_, k)| key > k) {
                    best = Some((j, key));
                }
            }
        }
        if accepted.is_empty() {
            return None;
        }
        match self.config.policy {
            Policy::Top => best.map(|b| b.0),
            Policy::Set => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(ordinal);
                Some(accepted[rng.random_range(0..accepted.len())])
            }
        }
    }

    pub fn assign(&self, imp: &Impression, ordinal: u64) -> Assignment {
        let mut accepted = Vec::new();
        let chosen = self.assign_encoded(&self.compiled.encode(imp), ordinal, &mut accepted);
        Assignment {
            accepted_by: accepted.iter().map(|&j| self.models[j].campaign().to_string()).collect(),
            chosen: chosen.map(|j| self.models[j].campaign().to_string()),
        }
    }

    /// Single streaming pass counting impressions no model accepts.
    pub fn coverage<I>(&self, pool: I) -> Result<Coverage, PolytomousError>
    where
        I: IntoIterator,
        I::Item: Borrow<Impression>,
    {
        let mut impressions = 0u64;
        let mut rejected_by_all = 0u64;
        let mut rejected = vec![0u64; self.len()];
        for imp in pool {
            let e = self.compiled.encode(imp.borrow());
            impressions += 1;
            let mut any = false;
            for (j, m) in self.compiled.models().iter().enumerate() {
                if m.accepts(&e) {
                    any = true;
                } else {
                    rejected[j] += 1;
                }
            }
            if !any {
                rejected_by_all += 1;
            }
        }
        if impressions == 0 {
            return Err(PolytomousError::EmptyPool);
        }
        let per_model = self
            .models
            .iter()
            .zip(rejected)
            .map(|(m, r)| (m.campaign().to_string(), r as f64 / impressions as f64))
            .collect();
        Ok(Coverage {
            impressions,
            rejected_by_all,
            fraction: rejected_by_all as f64 / impressions as f64,
            per_model_rejection: per_model,
        })
    }

    fn tally<'a, I>(&self, clicks: I, confusion: &mut [Confusion]) -> (u64, u64)
    where
        I: IntoIterator<Item = (u64, &'a Impression)>,
    {
        let mut evaluated = 0u64;
        let mut skipped = 0u64;
        let mut accepted = Vec::new();
        let mut own_counts = vec![(0u64, 0u64, 0u64); self.len()];
        for (ordinal, imp) in clicks {
            let Some(own) = self.position(&imp.campaign) else {
                skipped += 1;
                continue;
            };
            evaluated += 1;
            let chosen = self.assign_encoded(&self.compiled.encode(imp), ordinal, &mut accepted);
            let credit_all = self.config.policy == Policy::Set && self.config.set_credit == SetCredit::Acceptors;
            let credited: &[usize] = match (credit_all, &chosen) {
                (true, _) => &accepted,
                (false, Some(c)) => std::slice::from_ref(c),
                (false, None) => &[],
            };
            let mut own_credited = false;
            for &j in credited {
                if j == own {
                    own_counts[j].0 += 1;
                    own_credited = true;
                } else {
                    own_counts[j].1 += 1;
                }
            }
            if !own_credited {
                own_counts[own].2 += 1;
            }
        }
        for (c, (tp, fp, fn_)) in confusion.iter_mut().zip(own_counts) {
            c.tp += tp;
            c.fp += fp;
            c.fn_ += fn_;
            c.tn += evaluated - tp - fp - fn_;
        }
        (evaluated, skipped)
    }

    /// Confusion counts and metrics over `clicks`, which carry their campaign.
    /// Clicks of campaigns outside the ensemble are skipped and counted.
    pub fn evaluate_clicks<I>(&self, clicks: I) -> Result<MetricsReport, PolytomousError>
    where
        I: IntoIterator,
        I::Item: Borrow<Impression>,
    {
        let items: Vec<I::Item> = clicks.into_iter().collect();
        let mut confusion = vec![Confusion::default(); self.len()];
        let (evaluated, skipped) =
            self.tally(items.iter().enumerate().map(|(i, c)| (i as u64, c.borrow())), &mut confusion);
        if evaluated == 0 {
            return Err(PolytomousError::EmptyPool);
        }
        Ok(self.report(evaluated, skipped, confusion))
    }

    pub fn evaluate(&self, clicks: &ClickPool) -> Result<MetricsReport, PolytomousError> {
        self.evaluate_clicks(clicks.clicks().iter().map(|c| c.as_ref()))
    }

    /// Metrics over consecutive batches of `batch_size` clicks, in input order.
    pub fn evaluate_series<I>(&self, clicks: I, batch_size: usize) -> Result<Vec<SeriesPoint>, PolytomousError>
    where
        I: IntoIterator,
        I::Item: Borrow<Impression>,
    {
        if batch_size == 0 {
            return Err(PolytomousError::InvalidBatchSize);
        }
        let items: Vec<I::Item> = clicks.into_iter().collect();
        let mut points = Vec::new();
        for (b, chunk) in items.chunks(batch_size).enumerate() {
            let offset = (b * batch_size) as u64;
            let mut confusion = vec![Confusion::default(); self.len()];
            let (evaluated, _) = self.tally(
                chunk.iter().enumerate().map(|(i, c)| (offset + i as u64, c.borrow())),
                &mut confusion,
            );
            let total = confusion.iter().fold(Confusion::default(), |a, c| a.add(c));
            let ts = chunk.iter().map(|c| c.borrow().timestamp);
            points.push(SeriesPoint {
                batch: b,
                first_ts: ts.clone().min().unwrap_or(0),
                last_ts: ts.max().unwrap_or(0),
                evaluated,
                metrics: Metrics::from(&total),
            });
        }
        if points.iter().all(|p| p.evaluated == 0) {
            return Err(PolytomousError::EmptyPool);
        }
        Ok(points)
    }

    fn report(&self, evaluated: u64, skipped: u64, confusion: Vec<Confusion>) -> MetricsReport {
        let totals = confusion.iter().fold(Confusion::default(), |a, c| a.add(c));
        let per_campaign = self
            .models
            .iter()
            .zip(confusion)
            .map(|(m, c)| {
                let campaign = m.campaign().to_string();
                let report = CampaignReport {
                    weight: self.weights.get(&campaign).copied(),
                    metrics: Metrics::from(&c),
                    confusion: c,
                };
                (campaign, report)
            })
            .collect();
        MetricsReport {
            policy: self.config.policy,
            set_credit: self.config.set_credit,
            evaluated,
            skipped,
            totals,
            total: Metrics::from(&totals),
            per_campaign,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub impressions: u64,
    pub rejected_by_all: u64,
    pub fraction: f64,
    /// Rejection fraction of each model on its own.
    pub per_model_rejection: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn add(&self, o: &Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub negative_rate: Option<f64>,
}

impl From<&Confusion> for Metrics {
    fn from(c: &Confusion) -> Self {
        Metrics {
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            accuracy: ratio(c.tp + c.tn, c.total()),
            negative_rate: ratio(c.tn, c.tn + c.fn_),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub weight: Option<f64>,
    pub confusion: Confusion,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: Policy,
    pub set_credit: SetCredit,
    pub evaluated: u64,
    /// Clicks whose campaign has no model.
    pub skipped: u64,
    pub totals: Confusion,
    pub total: Metrics,
    pub per_campaign: BTreeMap<String, CampaignReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub batch: usize,
    pub first_ts: i64,
    pub last_ts: i64,
    pub evaluated: u64,
    pub metrics: Metrics,
}

/// CSV with one row per batch; undefined metrics are left empty.
pub fn write_series_csv<W: Write>(points: &[SeriesPoint], mut w: W) -> io::Result<()> {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(w, "batch,first_ts,last_ts,evaluated,precision,recall,accuracy,negative_rate")?;
    for p in points {
        let m = &p.metrics;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            p.batch,
            p.first_ts,
            p.last_ts,
            p.evaluated,
            cell(m.precision),
            cell(m.recall),
            cell(m.accuracy),
            cell(m.negative_rate)
        )?;
    }
    Ok(())
}
