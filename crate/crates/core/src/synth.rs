//! Synthetic click logs with planted campaign affinities.
//!
//! Each campaign prefers a handful of domains, hours and ZIPs. A click for a
//! campaign draws each of those dimensions from the preferred set with a fixed
//! share and uniformly otherwise; exchange, format and size are uniform.
//! Everything is driven by a seeded ChaCha8 stream.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::impression::{Dimension, Impression};
use crate::model::{BinaryModel, FeatureIndex, FeatureKey};

pub const EXCHANGES: [&str; 4] = ["adx", "appnexus", "openx", "rubicon"];
pub const FORMATS: [&str; 3] = ["banner", "native", "video"];
pub const SIZES: [&str; 4] = ["160x600", "300x250", "320x50", "728x90"];

/// Campaign field of impressions not drawn from any campaign's audience.
pub const BACKGROUND: &str = "background";

pub fn domain_name(i: usize) -> String {
    format!("site{i:04}.com")
}

pub fn zip_code(i: usize) -> String {
    format!("{:05}", 10_000 + 7 * i)
}

pub fn campaign_id(j: usize) -> String {
    format!("c{j:03}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub campaigns: usize,
    pub domains: usize,
    pub zips: usize,
    pub affinity_domains: usize,
    pub affinity_hours: usize,
    pub affinity_zips: usize,
    /// Probability that a click's domain comes from the campaign's preferred set.
    pub domain_share: f64,
    pub hour_share: f64,
    pub zip_share: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            campaigns: 10,
            domains: 60,
            zips: 30,
            affinity_domains: 5,
            affinity_hours: 4,
            affinity_zips: 3,
            domain_share: 0.5,
            hour_share: 0.3,
            zip_share: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub campaigns: Vec<String>,
    pub domains: Vec<Vec<usize>>,
    pub hours: Vec<Vec<u8>>,
    pub zips: Vec<Vec<usize>>,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.campaigns;
        let mut pick = |universe: usize, k: usize| -> Vec<usize> {
            let mut v = sample(&mut rng, universe, k.min(universe)).into_vec();
            v.sort_unstable();
            v
        };
        let domains = (0..n).map(|_| pick(config.domains, config.affinity_domains)).collect();
        let zips = (0..n).map(|_| pick(config.zips, config.affinity_zips)).collect();
        let hours = (0..n)
            .map(|_| pick(24, config.affinity_hours).into_iter().map(|h| h as u8).collect())
            .collect();
        Scenario { campaigns: (0..n).map(campaign_id).collect(), domains, hours, zips, config }
    }

    pub fn preferred_domains(&self, campaign: usize) -> Vec<String> {
        self.domains[campaign].iter().map(|&d| domain_name(d)).collect()
    }

    /// One impression drawn from `campaign`'s audience, or uniformly when `None`.
    /// Only campaign draws are marked clicked.
    pub fn impression(&self, campaign: Option<usize>, timestamp: i64, rng: &mut ChaCha8Rng) -> Impression {
        let c = &self.config;
        let prefer = |rng: &mut ChaCha8Rng, share: f64, set: Option<&Vec<usize>>, universe: usize| match set {
            Some(s) if !s.is_empty() && rng.random_bool(share) => *s.choose(rng).expect("non-empty"),
            _ => rng.random_range(0..universe),
        };
        let domain = prefer(rng, c.domain_share, campaign.map(|j| &self.domains[j]), c.domains);
        let zip = prefer(rng, c.zip_share, campaign.map(|j| &self.zips[j]), c.zips);
        let hour = match campaign.map(|j| &self.hours[j]) {
            Some(h) if !h.is_empty() && rng.random_bool(c.hour_share) => *h.choose(rng).expect("non-empty"),
            _ => rng.random_range(0..24),
        };
        Impression::new(
            EXCHANGES.choose(rng).expect("non-empty"),
            hour as i64,
            rng.random_range(0..7),
            FORMATS.choose(rng).expect("non-empty"),
            SIZES.choose(rng).expect("non-empty"),
            &domain_name(domain),
            &zip_code(zip),
            campaign.map(|j| self.campaigns[j].as_str()).unwrap_or(BACKGROUND),
            campaign.is_some(),
            timestamp,
        )
        .expect("generated values are valid")
    }

    /// `per_campaign` clicks for every campaign, interleaved, timestamps 0, 1, ...
    pub fn clicks(&self, per_campaign: usize, seed: u64) -> Vec<Impression> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.campaigns.len();
        (0..per_campaign * n)
            .map(|i| self.impression(Some(i % n), i as i64, &mut rng))
            .collect()
    }

    /// Unclicked traffic: each impression resembles a random campaign's
    /// audience, except a `background` share drawn uniformly. The campaign
    /// field names the source audience.
    pub fn pool(&self, n: usize, background: f64, seed: u64) -> impl Iterator<Item = Impression> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(move |i| {
            let source = if rng.random_bool(background) {
                None
            } else {
                Some(rng.random_range(0..self.campaigns.len()))
            };
            let mut imp = self.impression(source, i as i64, &mut rng);
            imp.clicked = false;
            imp
        })
    }

    /// Hand-built models that accept exactly the impressions on a campaign's
    /// preferred domains; preferred hours and ZIPs only raise the margin.
    pub fn planted_models(&self) -> Vec<BinaryModel> {
        (0..self.campaigns.len())
            .map(|j| {
                let mut weights = Vec::new();
                for &d in &self.domains[j] {
                    weights.push((FeatureKey::new(Dimension::Domain, domain_name(d)), 2.0));
                }
                for &h in &self.hours[j] {
                    weights.push((FeatureKey::new(Dimension::Hour, h.to_string()), 0.25));
                }
                for &z in &self.zips[j] {
                    weights.push((FeatureKey::new(Dimension::Zip, zip_code(z)), 0.5));
                }
                let index = FeatureIndex::new(weights.iter().map(|w| w.0.clone())).expect("small index");
                let betas: BTreeMap<usize, f64> = weights
                    .iter()
                    .map(|(k, b)| (index.index_of(k.dimension, &k.level).expect("indexed"), *b))
                    .collect();
                BinaryModel::new(self.campaigns[j].clone(), -1.0, betas, 0.0, 0.5, 1.0, index)
                    .expect("valid planted model")
            })
            .collect()
    }

    /// One model per campaign with random betas over most base levels and
    /// `explored` random domains and ZIPs, and a random finite threshold.
    pub fn random_models(&self, explored: usize, seed: u64) -> Vec<BinaryModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.config;
        self.campaigns
            .iter()
            .map(|campaign| {
                let mut keys = Vec::new();
                let hours: Vec<String> = (0..24).map(|h: u8| h.to_string()).collect();
                let days: Vec<String> = (0..7).map(|d: u8| d.to_string()).collect();
                let base: [(Dimension, Vec<&str>); 5] = [
                    (Dimension::Exchange, EXCHANGES.to_vec()),
                    (Dimension::Hour, hours.iter().map(String::as_str).collect()),
                    (Dimension::Day, days.iter().map(String::as_str).collect()),
                    (Dimension::AdFormat, FORMATS.to_vec()),
                    (Dimension::AdSize, SIZES.to_vec()),
                ];
                for (dim, levels) in base {
                    for level in levels {
                        if rng.random_bool(0.8) {
                            keys.push(FeatureKey::new(dim, level));
                        }
                    }
                }
                let n_domains = rng.random_range(0..=explored.min(c.domains));
                for d in sample(&mut rng, c.domains, n_domains) {
                    keys.push(FeatureKey::new(Dimension::Domain, domain_name(d)));
                }
                for z in sample(&mut rng, c.zips, (explored - n_domains).min(c.zips)) {
                    keys.push(FeatureKey::new(Dimension::Zip, zip_code(z)));
                }
                let index = FeatureIndex::new(keys).expect("bounded index");
                let betas: BTreeMap<usize, f64> =
                    (1..=index.len()).map(|i| (i, rng.random_range(-1.5..1.5))).collect();
                let intercept = rng.random_range(-2.0..0.0);
                let threshold = rng.random_range(-1.0..1.0);
                BinaryModel::new(campaign.clone(), intercept, betas, threshold, 0.5, 1.0, index)
                    .expect("valid random model")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let s = Scenario::new(ScenarioConfig { seed: 4, ..Default::default() });
        let t = Scenario::new(ScenarioConfig { seed: 4, ..Default::default() });
        assert_eq!(s.domains, t.domains);
        assert_eq!(s.clicks(20, 1), t.clicks(20, 1));
        assert_ne!(s.clicks(20, 1), s.clicks(20, 2));
    }

    #[test]
    fn planted_models_accept_their_domains_only() {
        let s = Scenario::new(ScenarioConfig::default());
        let models = s.planted_models();
        for imp in s.pool(2000, 0.2, 3) {
            for (j, m) in models.iter().enumerate() {
                let own = s.preferred_domains(j).contains(&imp.domain);
                assert_eq!(m.accepts(&imp), own);
            }
        }
    }
}
