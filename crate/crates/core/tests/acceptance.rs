//! End-to-end acceptance checks, one test per criterion. Every tolerance is
//! a named constant below.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use saboteur_core::analyzer::{analyze_pair, classify_value_domain};
use saboteur_core::campaign::{
    load_inputs, plan_campaign, run_campaign, run_campaign_to_file, CampaignConfig, SitePolicy,
};
use saboteur_core::corpus::{
    build_error_db, scan_corpus, synthetic_golden, write_synthetic_corpus, MineOptions, SynthSpec,
};
use saboteur_core::error_model::{
    bind_domain, load_db, normalize, DomainFreq, ErrorModelDb, KindModel, Provenance,
    SampleOptions, SpatialFreq,
};
use saboteur_core::ops::{OpKind, Operator};
use saboteur_core::pattern::{DomainClass, SpatialVariant};
use saboteur_core::saboteur::{corrupt_value, corrupt_values, draw_pattern, GeneratorConfig};
use saboteur_core::{rng, zoo, MapShape};
use statrs::distribution::{ContinuousCDF, Normal};

use common::*;

const CLOSURE_EVENTS: usize = 10_000;
const CLOSURE_BUDGET: Duration = Duration::from_secs(60);

const ROUND_TRIP_PAIRS: usize = 10_000;
/// Percentage points.
const ROUND_TRIP_TOLERANCE: f64 = 2.0;

const DOMAIN_SAMPLES: usize = 10_000;
const IN_BALL_MIN_RECOVERY: f64 = 0.99;

const DETERMINISM_EXPERIMENTS: u64 = 1_000;

const CACHE_MIN_PER_SITE: u64 = 100;
const CACHE_MIN_NODES: usize = 10;
const CACHE_MAX_RATIO: f64 = 0.67;

const CONV_INSTANCES: u64 = 1_000;
const CONV_REL_TOLERANCE: f64 = 1e-5;

const DESK_EXPERIMENTS: u64 = 10_000;
const DESK_BUDGET: Duration = Duration::from_secs(300);

const DIRECTIONAL_N: u64 = 2_000;
const DIRECTIONAL_ALPHA: f64 = 0.01;

fn shipped_db() -> ErrorModelDb {
    load_db(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/default_db.json")).unwrap()
}

#[test]
fn spatial_closure() {
    let start = Instant::now();
    let cfg = GeneratorConfig::default();
    let mut misses = Vec::new();
    let mut per_variant = BTreeMap::<&str, usize>::new();
    for i in 0..CLOSURE_EVENTS as u64 {
        let r = &mut rng::stream(rng::derive_seed(1, i));
        let (c, h, w) = (r.random_range(2..=32), r.random_range(2..=32), r.random_range(2..=32));
        let variant = SpatialVariant::STRUCTURED[r.random_range(0..4)];
        let pattern = draw_pattern(variant, MapShape::new(c, h, w), r, &cfg).unwrap();
        let targets = pattern.targets();
        let domains: Vec<_> = targets
            .iter()
            .map(|_| bind_domain(DomainClass::ALL[r.random_range(0..5)], &cfg, r))
            .collect();
        let golden = synthetic_golden(&[c, h, w], i);
        let faulty = corrupt_values(&golden, &targets, &domains, r).unwrap();
        let got = analyze_pair(&golden, &faulty).unwrap().map(|p| p.pattern.variant());
        *per_variant.entry(variant.name()).or_default() += 1;
        if got != Some(variant) {
            misses.push((i, variant, got));
        }
    }
    let elapsed = start.elapsed();
    eprintln!("spatial closure: {per_variant:?}, {} misses, {elapsed:.2?}", misses.len());
    assert!(misses.is_empty(), "first misses: {:?}", &misses[..misses.len().min(5)]);
    assert!(elapsed < CLOSURE_BUDGET, "took {elapsed:.2?}");
}

#[test]
fn frequency_round_trip() {
    // A reference Conv2D row with no Random mass.
    let source = normalize([42.7, 18.7, 0.0, 20.6, 16.2, 0.0]);
    let mut db = ErrorModelDb::new();
    db.insert(
        "Conv2D",
        KindModel {
            spatial_freq: SpatialFreq::from_array(source),
            domain_freq: DomainFreq::from_array([0.01, 0.01, 0.03, 0.80, 0.15]),
            cardinality_hist: None,
            provenance: Provenance { corpus: "conv1-row".into(), samples: 0 },
        },
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        kind: OpKind::Conv2d,
        shape: vec![16, 8, 8],
        pairs: ROUND_TRIP_PAIRS,
        seed: 2,
        batch_size: 2_000,
    };
    write_synthetic_corpus(dir.path(), &db, &spec, &SampleOptions::default()).unwrap();
    let scan = scan_corpus(dir.path()).unwrap();
    assert_eq!(scan.entries.len(), ROUND_TRIP_PAIRS);
    let (mined, _) = build_error_db(&scan.entries, &MineOptions::default()).unwrap();
    let got = mined.get("Conv2D").unwrap().spatial_freq.to_array();
    for (i, v) in SpatialVariant::ALL.iter().enumerate() {
        let (want, have) = (100.0 * source[i], 100.0 * got[i]);
        eprintln!("{:<15} source {want:6.2}%  recovered {have:6.2}%", v.name());
        assert!(
            (want - have).abs() <= ROUND_TRIP_TOLERANCE,
            "{}: source {want:.2}% recovered {have:.2}%",
            v.name()
        );
    }
}

#[test]
fn domain_closure() {
    let cfg = GeneratorConfig::default();
    let mut confusion = BTreeMap::<(DomainClass, DomainClass), usize>::new();
    for class in DomainClass::ALL {
        let r = &mut rng::stream(class as u64 + 100);
        for _ in 0..DOMAIN_SAMPLES {
            let golden = {
                let v: f32 = r.random_range(0.05f32..4.0);
                if r.random_bool(0.5) { v } else { -v }
            };
            let domain = bind_domain(class, &cfg, r);
            let faulty = corrupt_value(golden, &domain, r);
            *confusion.entry((class, classify_value_domain(golden, faulty))).or_default() += 1;
        }
    }
    let count = |a, b| *confusion.get(&(a, b)).unwrap_or(&0);
    eprintln!("domain confusion (generated, recovered): {confusion:?}");
    use DomainClass::*;
    assert_eq!(count(NaN, NaN), DOMAIN_SAMPLES);
    assert_eq!(count(Zero, Zero), DOMAIN_SAMPLES);
    let in_ball = count(InUnitBall, InUnitBall) as f64 / DOMAIN_SAMPLES as f64;
    assert!(in_ball >= IN_BALL_MIN_RECOVERY, "InUnitBall recovered {in_ball:.4}");
    for wrong in [InUnitBall, Zero, NaN] {
        assert_eq!(count(Random, wrong), 0);
    }
}

#[test]
fn determinism_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let g = zoo::lenet5(7);
    let db = shipped_db();
    let mut cfg = CampaignConfig::new(DETERMINISM_EXPERIMENTS, 7);
    cfg.synthetic_inputs = Some(3);
    let inputs = load_inputs(&cfg, &g).unwrap();
    let mut files = Vec::new();
    for (run, workers) in [1, 8, 1, 8].into_iter().enumerate() {
        cfg.workers = workers;
        let out = dir.path().join(format!("records{run}.jsonl"));
        run_campaign_to_file(&cfg, &g, &db, &inputs, &out).unwrap();
        files.push(fs::read(&out).unwrap());
    }
    assert_eq!(files[0].iter().filter(|b| **b == b'\n').count() as u64, DETERMINISM_EXPERIMENTS);
    assert!(files.iter().all(|f| *f == files[0]), "records differ between runs");
}

#[test]
fn cache_transparency_and_benefit() {
    let g = zoo::lenet5(5);
    assert!(g.len() >= CACHE_MIN_NODES);
    let db = shipped_db();
    let mut cfg = CampaignConfig::new(CACHE_MIN_PER_SITE * g.len() as u64 * 2, 5);
    cfg.workers = 1;
    let inputs = load_inputs(&cfg, &g).unwrap();
    let plan = plan_campaign(&cfg, &g, &db, inputs.len()).unwrap();
    let mut per_site = vec![0u64; g.len()];
    plan.iter().for_each(|p| per_site[p.site] += 1);
    assert!(per_site.iter().all(|n| *n >= CACHE_MIN_PER_SITE), "{per_site:?}");

    let mut timed = |cache: bool| {
        cfg.cache = cache;
        let mut best = Duration::MAX;
        let mut records = None;
        for _ in 0..3 {
            let start = Instant::now();
            let (r, _) = run_campaign(&cfg, &g, &db, &inputs).unwrap();
            best = best.min(start.elapsed());
            records = Some(r);
        }
        (records.unwrap(), best)
    };
    let (uncached, t_uncached) = timed(false);
    let (cached, t_cached) = timed(true);
    assert!(cached == uncached, "cache changed the records");
    let ratio = t_cached.as_secs_f64() / t_uncached.as_secs_f64();
    eprintln!("cached {t_cached:.2?} / uncached {t_uncached:.2?} = {ratio:.3}");
    assert!(ratio <= CACHE_MAX_RATIO, "ratio {ratio:.3}");
}

#[test]
fn conv_matches_oracle_on_random_instances() {
    let mut worst = 0.0f64;
    for seed in 0..CONV_INSTANCES {
        let (x, op, p) = random_conv(&mut rng::stream(rng::derive_seed(6, seed)));
        let Operator::Conv2d { weight, bias, .. } = &op else { unreachable!() };
        let got = op.apply("conv", &[&x]).unwrap();
        let (shape, want, mag) = conv_oracle(&x, weight, bias.as_ref(), p);
        assert_eq!(got.shape(), shape.as_slice(), "instance {seed}");
        let err = conv_rel_error(&got, &want, &mag);
        assert!(err <= CONV_REL_TOLERANCE, "instance {seed}: relative error {err:e}");
        worst = worst.max(err);
    }
    eprintln!("conv oracle: worst relative error {worst:e}");
}

#[test]
fn desk_campaign() {
    let g = zoo::lenet5(1);
    let db = shipped_db();
    let mut cfg = CampaignConfig::new(DESK_EXPERIMENTS, 2024);
    cfg.synthetic_inputs = Some(10);
    let inputs = load_inputs(&cfg, &g).unwrap();
    let start = Instant::now();
    let (records, report) = run_campaign(&cfg, &g, &db, &inputs).unwrap();
    let elapsed = start.elapsed();
    eprintln!("{} in {elapsed:.2?}", report.summary_line());
    let t = report.totals;
    assert_eq!(records.len() as u64, DESK_EXPERIMENTS);
    assert_eq!(t.masked + t.usable + t.unusable + t.engine_error, DESK_EXPERIMENTS);
    assert_eq!(t.engine_error, 0);
    assert!(elapsed < DESK_BUDGET, "took {elapsed:.2?}");
}

#[test]
fn nan_events_hurt_more_than_unit_ball_events() {
    let g = zoo::lenet5(3);
    let db = shipped_db();
    let mut cfg = CampaignConfig::new(DIRECTIONAL_N, 8);
    cfg.synthetic_inputs = Some(4);
    let inputs = load_inputs(&cfg, &g).unwrap();
    let mut run = |class| {
        cfg.domain_override = Some(class);
        let (records, report) = run_campaign(&cfg, &g, &db, &inputs).unwrap();
        let sites: Vec<String> = records.iter().map(|r| r.site.clone()).collect();
        (report.totals, sites)
    };
    let (nan, nan_sites) = run(DomainClass::NaN);
    let (ball, ball_sites) = run(DomainClass::InUnitBall);
    assert_eq!(nan_sites, ball_sites, "both campaigns must hit the same sites");

    let n = DIRECTIONAL_N as f64;
    let (p1, p2) = (nan.unusable as f64 / n, ball.unusable as f64 / n);
    let pooled = (nan.unusable + ball.unusable) as f64 / (2.0 * n);
    let se = (pooled * (1.0 - pooled) * 2.0 / n).sqrt();
    let z = (p1 - p2) / se;
    let p_value = 1.0 - Normal::standard().cdf(z);
    eprintln!("unusable: NaN {p1:.3} vs InUnitBall {p2:.3}; z = {z:.2}, one-sided p = {p_value:.2e}");
    assert!(p1 > p2);
    assert!(p_value < DIRECTIONAL_ALPHA, "p = {p_value}");
    assert_eq!(nan.engine_error + ball.engine_error, 0);
    assert!(nan.unusable + nan.usable + nan.masked == DIRECTIONAL_N);
}

#[test]
fn fallback_disabled_names_missing_kinds() {
    let g = zoo::lenet5(1);
    let mut cfg = CampaignConfig::new(10, 1);
    cfg.fallback = false;
    cfg.site_policy = SitePolicy::Uniform;
    let err = plan_campaign(&cfg, &g, &shipped_db(), 1).unwrap_err().to_string();
    assert!(err.contains("Dense") && err.contains("Softmax"), "{err}");
}
