//! Feature-space exploration for one campaign.
//!
//! The ladder is fixed: a base model over the five small dimensions, then for
//! every K in the ladder a model with the top-K domains, one with the top-K
//! ZIPs, and one with both. Top-K is the union of the K most frequent levels
//! among positives and the K most frequent among negatives. Every candidate
//! is fit on the training side and scored by ROC area on the calibration
//! side; there is no early stop. Domains and ZIPs only ever enter as separate
//! one-hot dimensions, never crossed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{rank, roc, select_threshold, RankKey, RocCurve, ThresholdChoice};
use crate::dataset::{
    build_labeled_set, split_random, split_time, ClickPool, DatasetError, LabeledSet, Split, Window,
};
use crate::impression::Dimension;
use crate::irls::{fit, DesignMatrix, FitConfig, FitError};
use crate::model::{BinaryModel, FeatureIndex, FeatureKey, LabeledVector, ModelDocument};

pub const DEFAULT_LADDER: [usize; 5] = [10, 20, 50, 100, 200];
/// Cap on domain plus ZIP levels in one candidate.
pub const MAX_EXPLORED_FEATURES: usize = 800;

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("no candidate produced a model for campaign {campaign:?}")]
    AllCandidatesFailed { campaign: String, candidates: Vec<Candidate> },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("invalid exploration config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreConfig {
    pub ladder: Vec<usize>,
    pub max_explored_features: usize,
    pub fit: FitConfig,
    pub parallel: bool,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            ladder: DEFAULT_LADDER.to_vec(),
            max_explored_features: MAX_EXPLORED_FEATURES,
            fit: FitConfig::default(),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CandidateStatus {
    Evaluated { auc: f64, converged: bool, iterations: usize },
    Skipped { reason: String },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub include_domains: bool,
    pub include_zips: bool,
    pub k: usize,
    /// Domain and ZIP levels chosen for this candidate.
    pub selected_levels: BTreeMap<Dimension, Vec<String>>,
    /// Non-intercept features, base dimensions included.
    pub n_features: usize,
    pub status: CandidateStatus,
}

impl Candidate {
    pub fn auc(&self) -> Option<f64> {
        match self.status {
            CandidateStatus::Evaluated { auc, .. } => Some(auc),
            _ => None,
        }
    }

    pub fn is_base(&self) -> bool {
        self.k == 0
    }

    pub fn label(&self) -> String {
        match (self.include_domains, self.include_zips) {
            (false, false) => "base".to_string(),
            (true, false) => format!("domains@{}", self.k),
            (false, true) => format!("zips@{}", self.k),
            (true, true) => format!("domains+zips@{}", self.k),
        }
    }
}

/// The ladder shape: `(include_domains, include_zips, k)` in evaluation order.
pub fn ladder(ks: &[usize]) -> Vec<(bool, bool, usize)> {
    let mut steps = vec![(false, false, 0)];
    for &k in ks {
        steps.extend([(true, false, k), (false, true, k), (true, true, k)]);
    }
    steps
}

#[derive(Debug, Clone)]
pub struct ExplorationReport {
    pub campaign: String,
    pub candidates: Vec<Candidate>,
    /// Position of the winner in `candidates`.
    pub best: usize,
    pub threshold: ThresholdChoice,
    /// The winner, carrying its calibration threshold and AUC.
    pub fitted_model: BinaryModel,
    pub curve: RocCurve,
}

impl ExplorationReport {
    pub fn best(&self) -> &Candidate {
        &self.candidates[self.best]
    }

    pub fn base(&self) -> &Candidate {
        &self.candidates[0]
    }

    pub fn to_document(&self) -> ReportDocument {
        ReportDocument {
            campaign: self.campaign.clone(),
            best: self.best,
            best_label: self.best().label(),
            threshold: self.threshold,
            candidates: self.candidates.clone(),
            model: self.fitted_model.to_document(),
        }
    }
}

/// JSON audit record of one exploration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub campaign: String,
    pub best: usize,
    pub best_label: String,
    pub threshold: ThresholdChoice,
    pub candidates: Vec<Candidate>,
    pub model: ModelDocument,
}

fn most_frequent(counts: &HashMap<&str, usize>, k: usize) -> Vec<String> {
    let mut by_freq: Vec<(&str, usize)> = counts.iter().map(|(l, c)| (*l, *c)).collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    by_freq.into_iter().take(k).map(|(l, _)| l.to_string()).collect()
}

/// Union of the `k` most frequent levels among positives and among negatives,
/// sorted. Frequency ties go to the lexicographically smaller level.
pub fn top_k_levels(train: &LabeledSet, dimension: Dimension, k: usize) -> Vec<String> {
    let mut pos: HashMap<&str, usize> = HashMap::new();
    let mut neg: HashMap<&str, usize> = HashMap::new();
    for row in train.rows() {
        let counts = if row.positive { &mut pos } else { &mut neg };
        *counts.entry(row.impression.level(dimension)).or_insert(0) += 1;
    }
    let union: BTreeSet<String> = most_frequent(&pos, k)
        .into_iter()
        .chain(most_frequent(&neg, k))
        .collect();
    union.into_iter().collect()
}

fn base_keys(train: &LabeledSet) -> BTreeSet<FeatureKey> {
    let mut keys = BTreeSet::new();
    for row in train.rows() {
        for dim in Dimension::BASE {
            keys.insert(FeatureKey::new(dim, row.impression.level(dim)));
        }
    }
    keys
}

struct Evaluated {
    model: BinaryModel,
    curve: RocCurve,
}

fn evaluate_candidate(
    split: &Split,
    base: &BTreeSet<FeatureKey>,
    step: (bool, bool, usize),
    config: &ExploreConfig,
) -> (Candidate, Option<Evaluated>) {
    let (include_domains, include_zips, k) = step;
    let mut selected_levels = BTreeMap::new();
    if include_domains {
        selected_levels.insert(Dimension::Domain, top_k_levels(&split.training, Dimension::Domain, k));
    }
    if include_zips {
        selected_levels.insert(Dimension::Zip, top_k_levels(&split.training, Dimension::Zip, k));
    }
    let explored: usize = selected_levels.values().map(Vec::len).sum();
    let mut candidate = Candidate {
        include_domains,
        include_zips,
        k,
        selected_levels,
        n_features: base.len() + explored,
        status: CandidateStatus::Skipped { reason: String::new() },
    };
    if explored > config.max_explored_features {
        candidate.status = CandidateStatus::Skipped {
            reason: format!(
                "{explored} domain/zip levels exceed the cap of {}",
                config.max_explored_features
            ),
        };
        return (candidate, None);
    }
    let keys = base.iter().cloned().chain(
        candidate
            .selected_levels
            .iter()
            .flat_map(|(d, levels)| levels.iter().map(|l| FeatureKey::new(*d, l.clone()))),
    );
    let index = match FeatureIndex::new(keys) {
        Ok(index) => index,
        Err(e) => {
            candidate.status = CandidateStatus::Skipped { reason: e.to_string() };
            return (candidate, None);
        }
    };
    let fitted = (|| -> Result<(Evaluated, bool, usize), String> {
        let rows = split
            .training
            .rows()
            .iter()
            .map(|r| LabeledVector::bernoulli(r.positive, index.encode(&r.impression)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let design = DesignMatrix::new(rows, index.n_columns()).map_err(|e| e.to_string())?;
        let result = fit(&design, &config.fit).map_err(|e| e.to_string())?;
        let model = BinaryModel::from_coefficients(split.training.campaign(), &result.beta, index.clone())
            .map_err(|e| e.to_string())?;
        let curve = roc(&model, &split.calibration).map_err(|e| e.to_string())?;
        Ok((Evaluated { model, curve }, result.converged, result.iterations))
    })();
    match fitted {
        Ok((evaluated, converged, iterations)) => {
            candidate.status = CandidateStatus::Evaluated { auc: evaluated.curve.auc(), converged, iterations };
            (candidate, Some(evaluated))
        }
        Err(reason) => {
            candidate.status = CandidateStatus::Failed { reason };
            (candidate, None)
        }
    }
}

/// Runs the whole ladder for the split's campaign and keeps the ROC-best model.
pub fn explore(split: &Split, config: &ExploreConfig) -> Result<ExplorationReport, ExploreError> {
    config.fit.validate()?;
    if config.ladder.contains(&0) {
        return Err(ExploreError::InvalidConfig("ladder values must be at least 1".into()));
    }
    let base = base_keys(&split.training);
    let steps = ladder(&config.ladder);
    let outcomes: Vec<(Candidate, Option<Evaluated>)> = if config.parallel {
        steps.par_iter().map(|&s| evaluate_candidate(split, &base, s, config)).collect()
    } else {
        steps.iter().map(|&s| evaluate_candidate(split, &base, s, config)).collect()
    };

    let names: Vec<Option<String>> = outcomes
        .iter()
        .map(|(_, e)| e.as_ref().map(|e| e.model.feature_set_name()))
        .collect();
    let mut best: Option<usize> = None;
    for (i, (_, evaluated)) in outcomes.iter().enumerate() {
        let Some(e) = evaluated else { continue };
        let key = RankKey {
            auc: e.curve.auc(),
            n_features: e.model.n_features(),
            feature_set_name: names[i].as_deref().unwrap_or(""),
        };
        let better = match best {
            None => true,
            Some(b) => {
                let eb = outcomes[b].1.as_ref().expect("best is evaluated");
                let bkey = RankKey {
                    auc: eb.curve.auc(),
                    n_features: eb.model.n_features(),
                    feature_set_name: names[b].as_deref().unwrap_or(""),
                };
                rank(&key, &bkey) == Ordering::Greater
            }
        };
        if better {
            best = Some(i);
        }
    }

    let campaign = split.training.campaign().to_string();
    let Some(best) = best else {
        let candidates = outcomes.into_iter().map(|(c, _)| c).collect();
        return Err(ExploreError::AllCandidatesFailed { campaign, candidates });
    };
    let mut candidates = Vec::with_capacity(outcomes.len());
    let mut winner = None;
    for (i, (c, e)) in outcomes.into_iter().enumerate() {
        candidates.push(c);
        if i == best {
            winner = e;
        }
    }
    let Evaluated { model, curve } = winner.expect("best is evaluated");
    let threshold = select_threshold(&curve);
    let fitted_model = model
        .with_calibration(threshold.decision_threshold, curve.auc())
        .expect("finite threshold from calibration scores");
    tracing::info!(
        campaign = campaign.as_str(),
        best = candidates[best].label().as_str(),
        auc = curve.auc(),
        "exploration finished"
    );
    Ok(ExplorationReport { campaign, candidates, best, threshold, fitted_model, curve })
}

/// How a campaign's labeled set is divided into training and calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitPlan {
    Random { ratio: f64, seed: u64 },
    Time { fraction: f64 },
}

impl SplitPlan {
    pub fn apply(&self, set: &LabeledSet) -> Result<Split, DatasetError> {
        match *self {
            SplitPlan::Random { ratio, seed } => split_random(set, ratio, seed),
            SplitPlan::Time { fraction } => split_time(set, fraction),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Explore(#[from] ExploreError),
}

/// Labels, splits and explores one campaign of `pool`.
pub fn train_campaign(
    pool: &ClickPool,
    campaign: &str,
    window: Window,
    plan: SplitPlan,
    config: &ExploreConfig,
) -> Result<ExplorationReport, TrainError> {
    let set = build_labeled_set(pool, campaign, window)?;
    let split = plan.apply(&set)?;
    Ok(explore(&split, config)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledRow;
    use crate::impression::Impression;
    use std::sync::Arc;

    fn row(campaign: &str, target: &str, domain: &str, zip: &str) -> LabeledRow {
        let imp = Impression::new("adx", 1, 1, "banner", "300x250", domain, zip, campaign, true, 0).unwrap();
        LabeledRow { impression: Arc::new(imp), positive: campaign == target }
    }

    #[test]
    fn ladder_has_sixteen_steps() {
        let steps = ladder(&DEFAULT_LADDER);
        assert_eq!(steps.len(), 16);
        assert_eq!(steps[0], (false, false, 0));
        assert!(steps[1..].iter().all(|&(d, z, k)| (d || z) && k > 0));
    }

    #[test]
    fn disjoint_top_lists() {
        let rows = (0..6)
            .map(|_| row("A", "A", "a.com", "00001"))
            .chain((0..6).map(|_| row("B", "A", "b.com", "00002")))
            .collect();
        let set = LabeledSet::new("A", rows).unwrap();
        assert_eq!(top_k_levels(&set, Dimension::Domain, 10), vec!["a.com", "b.com"]);
    }

    #[test]
    fn identical_top_lists_and_ties() {
        let mut rows = Vec::new();
        for (i, d) in ["a.com", "b.com", "c.com", "d.com"].iter().enumerate() {
            for _ in 0..(4 - i) {
                rows.push(row("A", "A", d, ""));
                rows.push(row("B", "A", d, ""));
            }
        }
        // e.com and f.com tie with d.com at one click each among negatives
        rows.push(row("B", "A", "f.com", ""));
        rows.push(row("B", "A", "e.com", ""));
        let set = LabeledSet::new("A", rows).unwrap();
        assert_eq!(top_k_levels(&set, Dimension::Domain, 3), vec!["a.com", "b.com", "c.com"]);
        assert_eq!(top_k_levels(&set, Dimension::Domain, 4), vec!["a.com", "b.com", "c.com", "d.com"]);
        assert_eq!(top_k_levels(&set, Dimension::Domain, 5).len(), 5);
    }
}
