use std::collections::BTreeMap;

use adtarget::dataset::{build_labeled_set, emit, ingest, ClickPool, InputFormat};
use adtarget::explorer::{explore, train_campaign, ExploreConfig, ReportDocument, SplitPlan};
use adtarget::polytomous::{EnsembleConfig, Policy, PolytomousModel, SetCredit};
use adtarget::scoring::{score_batch, Backend, CompiledEnsemble};
use adtarget::synth::{Scenario, ScenarioConfig};

#[test]
fn jsonl_round_trip_at_scale() {
    let scenario = Scenario::new(ScenarioConfig { campaigns: 20, seed: 1, ..Default::default() });
    let clicks = scenario.clicks(500, 3);
    let mut buf = Vec::new();
    emit(&clicks, &mut buf, InputFormat::Jsonl).unwrap();
    let back = ingest(buf.as_slice(), InputFormat::Jsonl).unwrap();
    assert_eq!(back.report.skipped, 0);
    assert_eq!(back.pool, ClickPool::new(clicks).unwrap());
}

#[test]
fn every_click_is_positive_exactly_once() {
    let scenario = Scenario::new(ScenarioConfig { campaigns: 100, seed: 2, ..Default::default() });
    let pool = ClickPool::new(scenario.clicks(20, 4)).unwrap();
    let mut positive = vec![0usize; pool.len()];
    let mut negative = vec![0usize; pool.len()];
    let ordinal: BTreeMap<i64, usize> = pool.clicks().iter().enumerate().map(|(i, c)| (c.timestamp, i)).collect();
    for campaign in pool.campaigns() {
        let set = build_labeled_set(&pool, campaign, pool.window()).unwrap();
        assert_eq!(set.len(), pool.len());
        for row in set.rows() {
            let i = ordinal[&row.impression.timestamp];
            if row.positive {
                positive[i] += 1;
            } else {
                negative[i] += 1;
            }
        }
    }
    assert!(positive.iter().all(|&p| p == 1));
    assert!(negative.iter().all(|&n| n == 99));
}

#[test]
fn hour_only_signal_keeps_the_base_model() {
    let scenario = Scenario::new(ScenarioConfig {
        campaigns: 6,
        domain_share: 0.0,
        zip_share: 0.0,
        hour_share: 0.8,
        affinity_hours: 6,
        seed: 5,
        ..Default::default()
    });
    let pool = ClickPool::new(scenario.clicks(300, 6)).unwrap();
    let report = train_campaign(
        &pool,
        &scenario.campaigns[0],
        pool.window(),
        SplitPlan::Random { ratio: 2.0, seed: 1 },
        &ExploreConfig::default(),
    )
    .unwrap();
    let base = report.base().auc().unwrap();
    let best = report.best().auc().unwrap();
    assert!(base > 0.6, "hour signal should be visible: {base}");
    assert!(best - base <= 0.02, "base {base}, best {best} ({})", report.best().label());
}

#[test]
fn exploration_report_serializes_and_is_deterministic() {
    let scenario = Scenario::new(ScenarioConfig { campaigns: 4, seed: 8, ..Default::default() });
    let pool = ClickPool::new(scenario.clicks(150, 9)).unwrap();
    let set = build_labeled_set(&pool, &scenario.campaigns[1], pool.window()).unwrap();
    let split = SplitPlan::Random { ratio: 2.0, seed: 3 }.apply(&set).unwrap();
    let config = ExploreConfig { ladder: vec![5, 10], ..Default::default() };
    let a = explore(&split, &config).unwrap();
    let b = explore(&split, &ExploreConfig { parallel: false, ..config }).unwrap();
    assert_eq!(a.candidates.len(), 7);
    let text = serde_json::to_string_pretty(&a.to_document()).unwrap();
    assert_eq!(text, serde_json::to_string_pretty(&b.to_document()).unwrap());
    let doc: ReportDocument = serde_json::from_str(&text).unwrap();
    assert_eq!(doc, a.to_document());
    assert_eq!(a.fitted_model.threshold(), a.threshold.decision_threshold);
}

fn standard_models() -> (Scenario, Vec<adtarget::BinaryModel>) {
    let scenario = Scenario::new(ScenarioConfig { campaigns: 5, seed: 12, ..Default::default() });
    let pool = ClickPool::new(scenario.clicks(200, 1)).unwrap();
    let config = ExploreConfig { ladder: vec![10, 20], ..Default::default() };
    let models = scenario
        .campaigns
        .iter()
        .map(|c| {
            train_campaign(&pool, c, pool.window(), SplitPlan::Random { ratio: 2.0, seed: 2 }, &config)
                .unwrap()
                .fitted_model
        })
        .collect();
    (scenario, models)
}

#[test]
fn policies_and_decomposability() {
    let (scenario, models) = standard_models();
    let clicks = scenario.clicks(400, 2);
    let top = PolytomousModel::new(models.clone(), EnsembleConfig::default()).unwrap();
    let set = top.with_config(EnsembleConfig { policy: Policy::Set, seed: 4, set_credit: SetCredit::Acceptors, ..Default::default() });
    let (rt, rs) = (top.evaluate_clicks(&clicks).unwrap(), set.evaluate_clicks(&clicks).unwrap());
    assert!(rt.total.recall.unwrap() <= rs.total.recall.unwrap());

    let reduced = set.without(&scenario.campaigns[2]).unwrap();
    let rr = reduced.evaluate_clicks(&clicks).unwrap();
    let removed = &rs.per_campaign[&scenario.campaigns[2]].confusion;
    // clicks of the removed campaign are skipped, the rest are unchanged
    let removed_clicks = removed.tp + removed.fn_;
    assert_eq!(rr.per_campaign.len(), 4);
    for (campaign, report) in &rr.per_campaign {
        let full = &rs.per_campaign[campaign];
        assert_eq!(report.confusion.tp, full.confusion.tp);
        assert_eq!(report.confusion.fn_, full.confusion.fn_);
        assert_eq!(report.confusion.total() + removed_clicks, full.confusion.total());
    }
}

#[test]
fn concurrent_scoring_matches_sequential() {
    let (scenario, models) = standard_models();
    let ensemble = CompiledEnsemble::new(&models, Backend::Hash);
    let batch = ensemble.encode_batch(&scenario.pool(20_000, 0.2, 3).collect::<Vec<_>>());
    let sequential = score_batch(&ensemble, &batch);
    let parts: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = batch.chunks(5000).map(|c| s.spawn(|| score_batch(&ensemble, c))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut i = 0;
    for part in parts {
        for r in 0..part.n_impressions() {
            assert_eq!(part.row(r), sequential.row(i));
            i += 1;
        }
    }
    assert_eq!(i, batch.len());
}
