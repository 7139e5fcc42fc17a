use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use adtarget::calibration::roc;
use adtarget::dataset::{build_labeled_set, ingest_path, read_impressions, ClickPool, InputFormat, SkipReport, Window};
use adtarget::explorer::{train_campaign, SplitPlan};
use adtarget::polytomous::{write_series_csv, EnsembleConfig, PolytomousModel};
use adtarget::scoring::{bench as run_bench, scaling_table, CompiledEnsemble};
use adtarget::{BinaryModel, Impression};
use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use tracing::{info, warn};

use crate::config::{ConfigError, PipelineConfig};
use crate::store::{file_stems, load_models, sha256_hex, write_atomic, write_json, FailedCampaign, Manifest, ManifestEntry, MANIFEST};
use crate::{BenchArgs, EnsembleArgs, EvaluateArgs, RocExportArgs, ScoreArgs, TrainArgs};

#[derive(Serialize)]
struct InputReport<'a> {
    input: String,
    #[serde(flatten)]
    report: &'a SkipReport,
}

/// Reads and merges click logs; the skip report of each input is returned with it.
fn read_pool(inputs: &[PathBuf], format: Option<InputFormat>) -> Result<(ClickPool, Vec<(PathBuf, SkipReport)>)> {
    let mut clicks = Vec::new();
    let mut reports = Vec::new();
    for path in inputs {
        let ingested = ingest_path(path, format).with_context(|| format!("ingesting {}", path.display()))?;
        if ingested.report.skipped > 0 {
            warn!(input = %path.display(), skipped = ingested.report.skipped, "records skipped");
        }
        clicks.extend(ingested.pool.clicks().iter().map(|c| Impression::clone(c)));
        reports.push((path.clone(), ingested.report));
    }
    // stable time order so that series and seeded draws follow the log
    clicks.sort_by_key(|c| c.timestamp);
    Ok((ClickPool::new(clicks)?, reports))
}

fn read_batch(path: &Path, format: Option<InputFormat>) -> Result<Vec<Impression>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let format = format.unwrap_or_else(|| InputFormat::from_path(path));
    let (impressions, report) = read_impressions(BufReader::new(file), format)?;
    if report.skipped > 0 {
        warn!(input = %path.display(), skipped = report.skipped, "records skipped");
    }
    Ok(impressions)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut config = PipelineConfig::load(&args.config)?;
    if !args.inputs.is_empty() {
        config.inputs = args.inputs;
    }
    if let Some(dir) = args.output_dir {
        config.output_dir = dir;
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    if let Some(s) = args.split_seed {
        match &mut config.split {
            SplitPlan::Random { seed, .. } => *seed = s,
            SplitPlan::Time { .. } => bail!(ConfigError("--split-seed needs a random split".into())),
        }
    }
    config.validate()?;
    if config.inputs.is_empty() {
        bail!(ConfigError("no inputs configured".into()));
    }

    let (pool, reports) = read_pool(&config.inputs, config.format)?;
    let out = &config.output_dir;
    let skip: Vec<InputReport> =
        reports.iter().map(|(p, r)| InputReport { input: p.display().to_string(), report: r }).collect();
    write_json(&out.join("skip_report.json"), &skip)?;

    let window = config.window.unwrap_or(pool.window());
    let campaigns: Vec<&str> = pool
        .campaigns()
        .iter()
        .filter(|c| pool.clicks().iter().any(|i| &i.campaign == *c && window.contains(i.timestamp)))
        .map(String::as_str)
        .collect();
    let stems = file_stems(campaigns.iter().copied());
    info!(clicks = pool.len(), campaigns = campaigns.len(), workers = config.workers, "training");

    let workers = rayon::ThreadPoolBuilder::new().num_threads(config.workers).build()?;
    let outcomes: Vec<_> = workers.install(|| {
        campaigns
            .par_iter()
            .zip(stems.par_iter())
            .map(|(campaign, stem)| {
                train_one(&config, &pool, window, campaign, stem).map_err(|e| {
                    warn!(campaign, error = format!("{e:#}"), "campaign failed");
                    FailedCampaign { campaign: campaign.to_string(), reason: format!("{e:#}") }
                })
            })
            .collect()
    });

    let mut manifest = Manifest::default();
    for outcome in outcomes {
        match outcome {
            Ok(entry) => manifest.models.push(entry),
            Err(failure) => manifest.failed.push(failure),
        }
    }
    let models_dir = out.join("models");
    write_json(&models_dir.join(MANIFEST), &manifest)?;
    info!(trained = manifest.models.len(), failed = manifest.failed.len(), "training finished");
    if manifest.models.is_empty() {
        bail!("no campaign produced a model");
    }
    println!(
        "trained {} of {} campaigns into {}",
        manifest.models.len(),
        campaigns.len(),
        models_dir.display()
    );
    Ok(())
}

fn train_one(config: &PipelineConfig, pool: &ClickPool, window: Window, campaign: &str, stem: &str) -> Result<ManifestEntry> {
    let report = train_campaign(pool, campaign, window, config.split, &config.explore)?;
    let mut model = report.fitted_model.clone();
    if let Some(r) = config.sampling.rates_for(campaign) {
        model = model.adjust_intercept_ex_ante(r.tau_pos, r.tau_neg)?;
    }
    let file = format!("{stem}.json");
    let text = model.to_json();
    write_atomic(&config.output_dir.join("models").join(&file), text.as_bytes())?;

    let reports_dir = config.output_dir.join("reports");
    write_json(&reports_dir.join(&file), &report.to_document())?;
    let mut csv = Vec::new();
    report.curve.write_csv(&mut csv)?;
    write_atomic(&reports_dir.join(format!("{stem}.roc.csv")), &csv)?;

    let best = report.best().label();
    info!(campaign, feature_set = %best, auc = model.auc(), threshold = model.threshold(), "trained");
    Ok(ManifestEntry { campaign: campaign.to_string(), file, sha256: sha256_hex(text.as_bytes()), feature_set: best, auc: model.auc() })
}

fn load_ensemble(args: &EnsembleArgs) -> Result<(PipelineConfig, PolytomousModel)> {
    let config = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let mut ensemble: EnsembleConfig = config.ensemble;
    if let Some(p) = args.policy {
        ensemble.policy = p;
    }
    if let Some(s) = args.seed {
        ensemble.seed = s;
    }
    if let Some(c) = args.set_credit {
        ensemble.set_credit = c;
    }
    let models = load_models(&args.models)?;
    info!(models = models.len(), policy = ?ensemble.policy, "ensemble loaded");
    Ok((config, PolytomousModel::new(models, ensemble)?))
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (config, ensemble) = load_ensemble(&args.ensemble)?;
    let format = args.ensemble.format.or(config.format);
    let batch_size = args.batch_size.unwrap_or(config.evaluate.batch_size);
    if batch_size == 0 {
        bail!(ConfigError("--batch-size must be at least 1".into()));
    }
    let (pool, reports) = read_pool(std::slice::from_ref(&args.clicks), format)?;
    let clicks: Vec<&Impression> = pool.clicks().iter().map(|c| c.as_ref()).collect();

    let metrics = ensemble.evaluate_clicks(clicks.iter().copied())?;
    let coverage = match &args.pool {
        Some(path) => ensemble.coverage(read_batch(path, format)?)?,
        None => ensemble.coverage(clicks.iter().copied())?,
    };
    let series = ensemble.evaluate_series(clicks.iter().copied(), batch_size)?;

    let out = args.out.unwrap_or_else(|| config.output_dir.join("evaluation"));
    write_json(
        &out.join("evaluation.json"),
        &json!({ "metrics": metrics, "coverage": coverage, "skip_report": reports[0].1 }),
    )?;
    let mut csv = Vec::new();
    write_series_csv(&series, &mut csv)?;
    write_atomic(&out.join("series.csv"), &csv)?;
    info!(evaluated = metrics.evaluated, skipped = metrics.skipped, out = %out.display(), "evaluation written");
    println!("{}", serde_json::to_string(&json!({ "evaluated": metrics.evaluated, "total": metrics.total }))?);
    Ok(())
}

pub fn score(args: ScoreArgs) -> Result<()> {
    let (config, ensemble) = load_ensemble(&args.ensemble)?;
    let impressions = read_batch(&args.input, args.ensemble.format.or(config.format))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "ts", "accepted_by", "chosen"])?;
    for (i, imp) in impressions.iter().enumerate() {
        let a = ensemble.assign(imp, i as u64);
        w.write_record([
            i.to_string(),
            imp.timestamp.to_string(),
            a.accepted_by.join(";"),
            a.chosen.unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    match &args.output {
        Some(path) => write_atomic(path, &bytes)?,
        None => io::stdout().lock().write_all(&bytes)?,
    }
    info!(impressions = impressions.len(), "scored");
    Ok(())
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let config = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let threads = if args.threads.is_empty() { config.bench.threads.clone() } else { args.threads };
    let reps = args.reps.unwrap_or(config.bench.repetitions);
    let backend = args.backend.unwrap_or(config.bench.backend);
    if threads.contains(&0) || reps == 0 {
        bail!(ConfigError("--threads and --reps must be at least 1".into()));
    }
    let models: Vec<BinaryModel> = load_models(&args.models)?;
    let ensemble = CompiledEnsemble::new(&models, backend);
    // interning happens here, outside the timed region
    let batch = ensemble.encode_batch(&read_batch(&args.batch, args.format.or(config.format))?);
    let mut reports = Vec::new();
    for &t in &threads {
        let report = run_bench(&ensemble, &batch, t, reps)?;
        info!(threads = t, qps = report.qps, wall_time = report.wall_time, "bench run");
        reports.push(report);
    }
    let doc = json!({
        "backend": backend,
        "models": models.len(),
        "batch": batch.len(),
        "reports": reports,
        "scaling": scaling_table(&reports),
    });
    match &args.out {
        Some(path) => write_json(path, &doc)?,
        None => println!("{}", serde_json::to_string_pretty(&doc)?),
    }
    Ok(())
}

pub fn roc_export(args: RocExportArgs) -> Result<()> {
    let mut models = load_models(&args.models)?;
    if let Some(c) = &args.campaign {
        models.retain(|m| m.campaign() == c);
        if models.is_empty() {
            bail!("no model for campaign {c:?} in {}", args.models.display());
        }
    }
    let (pool, _) = read_pool(std::slice::from_ref(&args.clicks), args.format)?;
    let stems = file_stems(models.iter().map(|m| m.campaign()));
    let mut summary = Vec::new();
    for (model, stem) in models.iter().zip(&stems) {
        let curve = build_labeled_set(&pool, model.campaign(), pool.window())
            .map_err(anyhow::Error::from)
            .and_then(|set| Ok(roc(model, &set)?));
        let curve = match curve {
            Ok(c) => c,
            Err(e) => {
                warn!(campaign = model.campaign(), error = format!("{e:#}"), "no curve");
                summary.push(json!({ "campaign": model.campaign(), "error": format!("{e:#}") }));
                continue;
            }
        };
        let file = format!("{stem}.roc.csv");
        let mut csv = Vec::new();
        curve.write_csv(&mut csv)?;
        write_atomic(&args.out.join(&file), &csv)?;
        summary.push(json!({
            "campaign": model.campaign(),
            "file": file,
            "auc": curve.auc(),
            "positives": curve.positives(),
            "negatives": curve.negatives(),
        }));
    }
    write_json(&args.out.join("roc_summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
