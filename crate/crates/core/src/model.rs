//! Binary response models: feature indexing, the logit link, likelihood
//! evaluation and the ex-ante intercept correction.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::impression::{Dimension, Impression};

/// Upper bound on non-intercept coefficients in one model.
pub const MAX_FEATURES: usize = 999;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("argument outside the domain: {0}")]
    Domain(String),
    #[error("{0} features exceed the cap of {MAX_FEATURES}")]
    TooManyFeatures(usize),
    #[error("beta index {0} has no feature")]
    UnknownBetaIndex(usize),
    #[error("{0} must be finite")]
    NonFinite(&'static str),
    #[error("auc {0} outside [0, 1]")]
    AucRange(f64),
    #[error("invalid row: {0}")]
    InvalidRow(String),
    #[error("active index {index} outside coefficient vector of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("model document: {0}")]
    Json(#[from] serde_json::Error),
}

/// A (dimension, level) pair; the unit a beta is attached to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureKey {
    pub dimension: Dimension,
    pub level: String,
}

impl FeatureKey {
    pub fn new(dimension: Dimension, level: impl Into<String>) -> Self {
        FeatureKey { dimension, level: level.into() }
    }
}

/// Bijection between feature keys and dense coefficient indices `1..=len`.
/// Index 0 is the intercept. Keys are held sorted by (dimension, level), so
/// the indices of one impression's active features increase in dimension order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<FeatureKey>", into = "Vec<FeatureKey>")]
pub struct FeatureIndex {
    levels: Vec<FeatureKey>,
    lookup: [HashMap<String, usize>; 7],
}

impl PartialEq for FeatureIndex {
    fn eq(&self, other: &Self) -> bool {
        self.levels == other.levels
    }
}

impl FeatureIndex {
    pub fn new(keys: impl IntoIterator<Item = FeatureKey>) -> Result<Self, ModelError> {
        let mut levels: Vec<FeatureKey> = keys.into_iter().collect();
        levels.sort();
        levels.dedup();
        if levels.len() > MAX_FEATURES {
            return Err(ModelError::TooManyFeatures(levels.len()));
        }
        let mut lookup: [HashMap<String, usize>; 7] = Default::default();
        for (i, key) in levels.iter().enumerate() {
            lookup[key.dimension.ordinal()].insert(key.level.clone(), i + 1);
        }
        Ok(FeatureIndex { levels, lookup })
    }

    /// Number of non-intercept features.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Coefficient vector length, intercept included.
    pub fn n_columns(&self) -> usize {
        self.levels.len() + 1
    }

    pub fn index_of(&self, dimension: Dimension, level: &str) -> Option<usize> {
        self.lookup[dimension.ordinal()].get(level).copied()
    }

    pub fn key(&self, index: usize) -> Option<&FeatureKey> {
        index.checked_sub(1).and_then(|i| self.levels.get(i))
    }

    pub fn keys(&self) -> &[FeatureKey] {
        &self.levels
    }

    pub fn levels_of(&self, dimension: Dimension) -> impl Iterator<Item = &str> {
        self.levels
            .iter()
            .filter(move |k| k.dimension == dimension)
            .map(|k| k.level.as_str())
    }

    /// Active dense indices of `imp`, strictly increasing.
    pub fn encode(&self, imp: &Impression) -> Vec<usize> {
        Dimension::ALL
            .iter()
            .filter_map(|&d| self.index_of(d, imp.level(d)))
            .collect()
    }
}

impl TryFrom<Vec<FeatureKey>> for FeatureIndex {
    type Error = ModelError;

    fn try_from(keys: Vec<FeatureKey>) -> Result<Self, Self::Error> {
        FeatureIndex::new(keys)
    }
}

impl From<FeatureIndex> for Vec<FeatureKey> {
    fn from(index: FeatureIndex) -> Self {
        index.levels
    }
}

/// One row of the design: `response` successes out of `trials`, with the
/// listed one-hot columns set. The intercept column is implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledVector {
    response: u32,
    trials: u32,
    active: Vec<usize>,
}

impl LabeledVector {
    pub fn new(response: u32, trials: u32, active: Vec<usize>) -> Result<Self, ModelError> {
        if trials == 0 || response > trials {
            return Err(ModelError::InvalidRow(format!(
                "response {response} with {trials} trials"
            )));
        }
        if active.first() == Some(&0) {
            return Err(ModelError::InvalidRow("index 0 is the implicit intercept".into()));
        }
        if active.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::InvalidRow("active indices not strictly increasing".into()));
        }
        Ok(LabeledVector { response, trials, active })
    }

    /// A single Bernoulli trial.
    pub fn bernoulli(clicked: bool, active: Vec<usize>) -> Result<Self, ModelError> {
        LabeledVector::new(clicked as u32, 1, active)
    }

    pub fn response(&self) -> u32 {
        self.response
    }

    pub fn trials(&self) -> u32 {
        self.trials
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Largest column index this row touches.
    pub fn max_index(&self) -> usize {
        self.active.last().copied().unwrap_or(0)
    }

    /// `x_iᵀβ`, intercept included. Caller guarantees the indices fit `beta`.
    pub fn eta(&self, beta: &[f64]) -> f64 {
        let mut eta = beta[0];
        for &j in &self.active {
            eta += beta[j];
        }
        eta
    }
}

pub fn logit(p: f64) -> Result<f64, ModelError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ModelError::Domain(format!("logit needs 0 < p < 1, got {p}")));
    }
    Ok(p.ln() - (-p).ln_1p())
}

pub fn inverse_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Kahan-Babuska compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

pub(crate) fn check_rows(len: usize, rows: &[LabeledVector]) -> Result<(), ModelError> {
    if len == 0 {
        return Err(ModelError::IndexOutOfRange { index: 0, len });
    }
    match rows.iter().map(LabeledVector::max_index).max() {
        Some(index) if index >= len => Err(ModelError::IndexOutOfRange { index, len }),
        _ => Ok(()),
    }
}

/// Binomial log-likelihood `yᵀXβ − Σ mᵢ log(1 + e^{xᵢᵀβ})`, without the
/// constant `Σ log C(mᵢ, yᵢ)` term.
pub fn log_likelihood(beta: &[f64], rows: &[LabeledVector]) -> Result<f64, ModelError> {
    check_rows(beta.len(), rows)?;
    let mut total = CompensatedSum::default();
    for row in rows {
        let eta = row.eta(beta);
        total.add(row.response as f64 * eta - row.trials as f64 * softplus(eta));
    }
    let ll = total.value();
    if ll.is_finite() {
        Ok(ll)
    } else {
        Err(ModelError::NonFinite("log-likelihood"))
    }
}

/// The per-campaign model: intercept, sparse betas and an accept threshold on
/// the linear-predictor scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryModel {
    campaign: String,
    intercept: f64,
    betas: BTreeMap<usize, f64>,
    threshold: f64,
    auc: f64,
    sampling_ratio: f64,
    feature_index: FeatureIndex,
}

impl BinaryModel {
    pub fn new(
        campaign: impl Into<String>,
        intercept: f64,
        betas: BTreeMap<usize, f64>,
        threshold: f64,
        auc: f64,
        sampling_ratio: f64,
        feature_index: FeatureIndex,
    ) -> Result<Self, ModelError> {
        if !intercept.is_finite() {
            return Err(ModelError::NonFinite("intercept"));
        }
        if !threshold.is_finite() {
            return Err(ModelError::NonFinite("threshold"));
        }
        if !(0.0..=1.0).contains(&auc) {
            return Err(ModelError::AucRange(auc));
        }
        if !(sampling_ratio.is_finite() && sampling_ratio > 0.0) {
            return Err(ModelError::Domain(format!("sampling ratio {sampling_ratio}")));
        }
        for (&index, value) in &betas {
            if index == 0 || index > feature_index.len() {
                return Err(ModelError::UnknownBetaIndex(index));
            }
            if !value.is_finite() {
                return Err(ModelError::NonFinite("beta"));
            }
        }
        Ok(BinaryModel {
            campaign: campaign.into(),
            intercept,
            betas,
            threshold,
            auc,
            sampling_ratio,
            feature_index,
        })
    }

    /// Builds a model from a dense coefficient vector `[β₀, β₁, …]` laid out by `feature_index`.
    pub fn from_coefficients(
        campaign: impl Into<String>,
        coefficients: &[f64],
        feature_index: FeatureIndex,
    ) -> Result<Self, ModelError> {
        if coefficients.len() != feature_index.n_columns() {
            return Err(ModelError::Domain(format!(
                "{} coefficients for {} columns",
                coefficients.len(),
                feature_index.n_columns()
            )));
        }
        let betas = coefficients.iter().copied().enumerate().skip(1).collect();
        BinaryModel::new(campaign, coefficients[0], betas, 0.0, 0.5, 1.0, feature_index)
    }

    pub fn campaign(&self) -> &str {
        &self.campaign
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn betas(&self) -> &BTreeMap<usize, f64> {
        &self.betas
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn auc(&self) -> f64 {
        self.auc
    }

    pub fn sampling_ratio(&self) -> f64 {
        self.sampling_ratio
    }

    pub fn feature_index(&self) -> &FeatureIndex {
        &self.feature_index
    }

    pub fn n_features(&self) -> usize {
        self.feature_index.len()
    }

    pub fn beta(&self, dimension: Dimension, level: &str) -> Option<f64> {
        self.feature_index
            .index_of(dimension, level)
            .and_then(|i| self.betas.get(&i).copied())
    }

    /// Canonical `dimension=level` listing used to order otherwise equal models.
    pub fn feature_set_name(&self) -> String {
        self.feature_index
            .keys()
            .iter()
            .map(|k| format!("{}={}", k.dimension, k.level))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn with_calibration(&self, threshold: f64, auc: f64) -> Result<Self, ModelError> {
        BinaryModel::new(
            self.campaign.clone(),
            self.intercept,
            self.betas.clone(),
            threshold,
            auc,
            self.sampling_ratio,
            self.feature_index.clone(),
        )
    }

    /// `β₀ + Σ βᵢ` over the betas the impression matches, summed in dimension order.
    pub fn linear_predictor(&self, imp: &Impression) -> f64 {
        let mut eta = self.intercept;
        for dim in Dimension::ALL {
            if let Some(b) = self.beta(dim, imp.level(dim)) {
                eta += b;
            }
        }
        eta
    }

    pub fn predict_probability(&self, imp: &Impression) -> f64 {
        inverse_logit(self.linear_predictor(imp))
    }

    /// Strict accept rule `η > threshold`.
    pub fn accepts(&self, imp: &Impression) -> bool {
        self.linear_predictor(imp) > self.threshold
    }

    /// Moves the model from the retrospective (training) scale to the
    /// prospective one: `β₀ − ln(τ₊/τ₋)`. The threshold moves with the
    /// intercept, so accept decisions and margins are unchanged.
    pub fn adjust_intercept_ex_ante(&self, tau_pos: f64, tau_neg: f64) -> Result<Self, ModelError> {
        if !(tau_pos.is_finite() && tau_pos > 0.0 && tau_neg.is_finite() && tau_neg > 0.0) {
            return Err(ModelError::Domain(format!(
                "sampling rates must be positive, got {tau_pos} and {tau_neg}"
            )));
        }
        let ratio = tau_pos / tau_neg;
        let shift = ratio.ln();
        BinaryModel::new(
            self.campaign.clone(),
            self.intercept - shift,
            self.betas.clone(),
            self.threshold - shift,
            self.auc,
            self.sampling_ratio * ratio,
            self.feature_index.clone(),
        )
    }

    pub fn to_document(&self) -> ModelDocument {
        let betas = self
            .betas
            .iter()
            .map(|(&i, &value)| {
                let key = self.feature_index.key(i).expect("beta index validated at construction");
                BetaEntry { dimension: key.dimension, level: key.level.clone(), value }
            })
            .collect();
        ModelDocument {
            campaign: self.campaign.clone(),
            intercept: self.intercept,
            threshold: self.threshold,
            auc: self.auc,
            sampling_ratio: self.sampling_ratio,
            betas,
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self, ModelError> {
        let index = FeatureIndex::new(
            doc.betas.iter().map(|b| FeatureKey::new(b.dimension, b.level.clone())),
        )?;
        if index.len() != doc.betas.len() {
            return Err(ModelError::Domain("duplicate beta entries".into()));
        }
        let betas = doc
            .betas
            .iter()
            .map(|b| (index.index_of(b.dimension, &b.level).expect("just indexed"), b.value))
            .collect();
        BinaryModel::new(
            doc.campaign,
            doc.intercept,
            betas,
            doc.threshold,
            doc.auc,
            doc.sampling_ratio,
            index,
        )
    }

    /// Pretty JSON with betas sorted by (dimension, level); byte-stable.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_document())
            .expect("model documents always serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        BinaryModel::from_document(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaEntry {
    pub dimension: Dimension,
    pub level: String,
    pub value: f64,
}

/// On-disk form of a [`BinaryModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub campaign: String,
    pub intercept: f64,
    pub threshold: f64,
    pub auc: f64,
    pub sampling_ratio: f64,
    pub betas: Vec<BetaEntry>,
}
