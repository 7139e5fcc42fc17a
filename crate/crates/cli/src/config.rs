use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use adtarget::dataset::{InputFormat, Window};
use adtarget::explorer::{ExploreConfig, SplitPlan};
use adtarget::polytomous::EnsembleConfig;
use adtarget::scoring::Backend;
use serde::Deserialize;

/// Rejected configuration or arguments. Exits with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: Vec<PathBuf>,
    /// Forced input format; otherwise taken from each file's extension.
    pub format: Option<InputFormat>,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub window: Option<Window>,
    pub split: SplitPlan,
    pub explore: ExploreConfig,
    pub sampling: SamplingConfig,
    pub ensemble: EnsembleConfig,
    pub evaluate: EvaluateConfig,
    pub bench: BenchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            inputs: Vec::new(),
            format: None,
            output_dir: PathBuf::from("out"),
            workers: 1,
            window: None,
            split: SplitPlan::Random { ratio: 2.0, seed: 0 },
            explore: ExploreConfig::default(),
            sampling: SamplingConfig::default(),
            ensemble: EnsembleConfig::default(),
            evaluate: EvaluateConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingRates {
    pub tau_pos: f64,
    pub tau_neg: f64,
}

/// Rates for the ex-ante intercept correction. A campaign entry overrides
/// the global pair; with neither, models stay on the training scale.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub tau_pos: Option<f64>,
    pub tau_neg: Option<f64>,
    pub campaigns: BTreeMap<String, SamplingRates>,
}

impl SamplingConfig {
    pub fn rates_for(&self, campaign: &str) -> Option<SamplingRates> {
        if let Some(r) = self.campaigns.get(campaign) {
            return Some(*r);
        }
        match (self.tau_pos, self.tau_neg) {
            (Some(tau_pos), Some(tau_neg)) => Some(SamplingRates { tau_pos, tau_neg }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Clicks per point of the time series.
    pub batch_size: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig { batch_size: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub threads: Vec<usize>,
    pub repetitions: usize,
    pub backend: Backend,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { threads: vec![1], repetitions: 10, backend: Backend::Bsearch }
    }
}

impl PipelineConfig {
    /// Reads a TOML file. Relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: PipelineConfig =
            toml::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for input in &mut config.inputs {
            *input = base.join(&*input);
        }
        config.output_dir = base.join(&config.output_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.workers == 0 {
            return Err(invalid("workers must be at least 1"));
        }
        if let Some(w) = self.window {
            Window::new(w.start, w.end).map_err(|e| invalid(e.to_string()))?;
        }
        match self.split {
            SplitPlan::Random { ratio, .. } if !(ratio.is_finite() && ratio > 0.0) => {
                return Err(invalid(format!("split ratio must be positive, got {ratio}")));
            }
            SplitPlan::Time { fraction } if !(fraction > 0.0 && fraction < 1.0) => {
                return Err(invalid(format!("split fraction must lie in (0, 1), got {fraction}")));
            }
            _ => {}
        }
        if self.explore.ladder.is_empty() || self.explore.ladder.contains(&0) {
            return Err(invalid("explore.ladder must be non-empty with values of at least 1"));
        }
        self.explore.fit.validate().map_err(|e| invalid(e.to_string()))?;
        let s = &self.sampling;
        if s.tau_pos.is_some() != s.tau_neg.is_some() {
            return Err(invalid("sampling.tau_pos and sampling.tau_neg must be given together"));
        }
        let global = s.tau_pos.zip(s.tau_neg).map(|(tau_pos, tau_neg)| ("global".to_string(), SamplingRates { tau_pos, tau_neg }));
        for (who, r) in s.campaigns.iter().map(|(c, r)| (c.clone(), *r)).chain(global) {
            let ok = |t: f64| t > 0.0 && t <= 1.0;
            if !(ok(r.tau_pos) && ok(r.tau_neg)) {
                return Err(invalid(format!("sampling rates for {who} must lie in (0, 1]")));
            }
        }
        if self.evaluate.batch_size == 0 {
            return Err(invalid("evaluate.batch_size must be at least 1"));
        }
        if self.bench.threads.is_empty() || self.bench.threads.contains(&0) {
            return Err(invalid("bench.threads must be non-empty with values of at least 1"));
        }
        if self.bench.repetitions == 0 {
            return Err(invalid("bench.repetitions must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<PipelineConfig>("inputs = []\nworkerz = 2\n").unwrap_err();
        assert!(err.to_string().contains("workerz"));
        let err = toml::from_str::<PipelineConfig>("[explore]\nladders = [1]\n").unwrap_err();
        assert!(err.to_string().contains("ladders"));
    }

    #[test]
    fn full_config_parses() {
        let text = r#"
            inputs = ["clicks.jsonl"]
            output_dir = "out"
            workers = 4
            window = { start = 0, end = 1000 }
            split = { method = "time", fraction = 0.7 }

            [explore]
            ladder = [10, 20]
            fit = { ridge = 1e-6 }

            [sampling]
            tau_pos = 1.0
            tau_neg = 0.01
            campaigns = { c001 = { tau_pos = 0.5, tau_neg = 0.5 } }

            [ensemble]
            policy = "set"
            seed = 9
        "#;
        let config: PipelineConfig = toml::from_str(text).unwrap();
        config.validate().unwrap();
        assert_eq!(config.split, SplitPlan::Time { fraction: 0.7 });
        assert_eq!(config.explore.ladder, vec![10, 20]);
        assert_eq!(config.sampling.rates_for("c001").unwrap().tau_pos, 0.5);
        assert_eq!(config.sampling.rates_for("c002").unwrap().tau_neg, 0.01);
        assert_eq!(config.ensemble.seed, 9);
    }

    #[test]
    fn validation_catches_bad_values() {
        let bad = [
            "workers = 0",
            "split = { method = \"random\", ratio = -1.0, seed = 0 }",
            "window = { start = 10, end = 0 }",
            "[sampling]\ntau_pos = 0.5",
            "[sampling]\ntau_pos = 2.0\ntau_neg = 1.0",
            "[explore]\nladder = []",
        ];
        for text in bad {
            let config: PipelineConfig = toml::from_str(text).unwrap();
            let err = config.validate().unwrap_err();
            assert!(err.downcast_ref::<ConfigError>().is_some(), "{text}");
        }
    }
}
