//! Error-simulation campaigns.
//!
//! A campaign runs many independent experiments. Each one picks an injection
//! site (a node output) and an input set, samples a corruption event from the
//! error-model database, corrupts the site's golden output, re-executes the
//! downstream part of the graph and classifies the final outputs.
//!
//! Every experiment draws from its own stream, seeded from the master seed
//! and its index, so results do not depend on scheduling or worker count.
//! The golden tensor at a site is cached per `(input, site)` so upstream
//! nodes run once per site rather than once per experiment.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use lru::LruCache;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::{
    classify_output, Outcome, OutcomeDetail, PolicyRegistry, PolicySpec, UsabilityPolicy,
};
use crate::error::{Error, Result};
use crate::error_model::{sample_error, ErrorModelDb, Provenance, SampleOptions};
use crate::graph::{Graph, Inputs};
use crate::ops::OpKind;
use crate::par;
use crate::pattern::DomainClass;
use crate::report::{aggregate, Report};
use crate::rng;
use crate::saboteur::{corrupt_values, CorruptionEvent, GeneratorConfig};
use crate::tensor::Tensor;
use crate::zoo;

pub const DEFAULT_CACHE_CAPACITY: usize = 64;
const CHUNK: usize = 512;

/// How injection sites are chosen.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SitePolicy {
    /// Every node equally likely.
    #[default]
    Uniform,
    /// Relative weights per node id; unlisted nodes are never chosen.
    Nodes { weights: BTreeMap<String, f64> },
    /// Relative weights per operator kind; unlisted kinds are never chosen.
    Kinds { weights: BTreeMap<String, f64> },
    /// Weight proportional to the number of output elements, a proxy for
    /// how much work, and so how many fault opportunities, a node carries.
    OutputSize,
}

impl SitePolicy {
    /// One weight per node, in execution order.
    pub fn weights(&self, graph: &Graph) -> Result<Vec<f64>> {
        let check = |name: &str, w: f64| {
            if w.is_finite() && w >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("site weight for `{name}` must be finite and >= 0")))
            }
        };
        let w = match self {
            SitePolicy::Uniform => vec![1.0; graph.len()],
            SitePolicy::Nodes { weights } => {
                for (id, w) in weights {
                    graph.node_index(id)?;
                    check(id, *w)?;
                }
                graph
                    .nodes()
                    .iter()
                    .map(|n| weights.get(&n.id).copied().unwrap_or(0.0))
                    .collect()
            }
            SitePolicy::Kinds { weights } => {
                for (k, w) in weights {
                    k.parse::<OpKind>()?;
                    check(k, *w)?;
                }
                graph
                    .nodes()
                    .iter()
                    .map(|n| weights.get(n.kind().name()).copied().unwrap_or(0.0))
                    .collect()
            }
            SitePolicy::OutputSize => (0..graph.len())
                .map(|i| graph.shape_at(i).iter().product::<usize>() as f64)
                .collect(),
        };
        if !(w.iter().sum::<f64>() > 0.0) {
            return Err(Error::Config("site policy selects no node".into()));
        }
        Ok(w)
    }
}

/// Where a campaign's input sets come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputSource {
    /// Raw tensor for a single-input model.
    File(PathBuf),
    /// Raw tensor per model input name.
    Named(BTreeMap<String, PathBuf>),
}

fn yes() -> bool {
    true
}

fn default_capacity() -> usize {
    DEFAULT_CACHE_CAPACITY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub experiments: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub site_policy: SitePolicy,
    /// Input sets; experiment `i` uses set `i mod n`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<InputSource>,
    /// Number of seeded random input sets, used when `inputs` is empty.
    /// Defaults to one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_inputs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub db: Option<PathBuf>,
    /// Use the database's default entry for kinds it does not cover.
    #[serde(default = "yes")]
    pub fallback: bool,
    #[serde(default)]
    pub policy: PolicySpec,
    /// 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "yes")]
    pub cache: bool,
    #[serde(default = "default_capacity")]
    pub cache_capacity: usize,
    /// Adds per-experiment wall time to records, which makes them
    /// run-dependent.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub generator: GeneratorConfig,
    /// Restricts every corrupted location to one value-domain class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_override: Option<DomainClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl CampaignConfig {
    pub fn new(experiments: u64, seed: u64) -> Self {
        CampaignConfig {
            experiments,
            seed,
            site_policy: SitePolicy::Uniform,
            inputs: Vec::new(),
            synthetic_inputs: None,
            db: None,
            fallback: true,
            policy: PolicySpec::default(),
            workers: 0,
            cache: true,
            cache_capacity: DEFAULT_CACHE_CAPACITY,
            record_wall_time: false,
            generator: GeneratorConfig::default(),
            domain_override: None,
            out: None,
        }
    }

    /// TOML unless the file ends in `.json`. Relative paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let what = path.display().to_string();
        let mut cfg: CampaignConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::malformed(&what, e))?
        } else {
            toml::from_str(&text).map_err(|e| Error::malformed(&what, e))?
        };
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for src in &mut self.inputs {
            match src {
                InputSource::File(p) => fix(p),
                InputSource::Named(m) => m.values_mut().for_each(fix),
            }
        }
        self.db.iter_mut().for_each(fix);
        self.out.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiments == 0 {
            return Err(Error::Config("experiments must be at least 1".into()));
        }
        if self.cache && self.cache_capacity == 0 {
            return Err(Error::Config("cache_capacity must be at least 1".into()));
        }
        if self.synthetic_inputs == Some(0) {
            return Err(Error::Config("synthetic_inputs must be at least 1".into()));
        }
        self.generator.validate()?;
        PolicyRegistry::with_builtins().build(&self.policy)?;
        Ok(())
    }

    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions {
            fallback: self.fallback,
            generator: self.generator.clone(),
            domain_override: self.domain_override,
        }
    }
}

/// Reads the configured input sets, or draws seeded random ones.
pub fn load_inputs(cfg: &CampaignConfig, graph: &Graph) -> Result<Vec<Inputs>> {
    if cfg.inputs.is_empty() {
        let n = cfg.synthetic_inputs.unwrap_or(1);
        return Ok((0..n)
            .map(|i| zoo::random_inputs(graph, rng::derive_seed(cfg.seed ^ 0x1A2B_3C4D, i)))
            .collect());
    }
    let spec = graph.input_spec();
    cfg.inputs
        .iter()
        .map(|src| match src {
            InputSource::File(p) => {
                let [(name, shape)] = spec else {
                    return Err(Error::Config(format!(
                        "model has {} inputs; name them in `inputs`",
                        spec.len()
                    )));
                };
                Ok(Inputs::from([(name.clone(), Tensor::read_raw(p, shape.clone())?)]))
            }
            InputSource::Named(m) => {
                let mut ins = Inputs::new();
                for (name, shape) in spec {
                    let p = m.get(name).ok_or_else(|| Error::MissingInput(name.clone()))?;
                    ins.insert(name.clone(), Tensor::read_raw(p, shape.clone())?);
                }
                if let Some(extra) = m.keys().find(|k| !spec.iter().any(|(n, _)| n == *k)) {
                    return Err(Error::Config(format!("model has no input named `{extra}`")));
                }
                Ok(ins)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlannedExperiment {
    pub index: u64,
    /// Node index in execution order.
    pub site: usize,
    pub input: usize,
    pub seed: u64,
}

/// Deterministic experiment list. Fails, naming them, when selectable kinds
/// have no model and fallback is off.
pub fn plan_campaign(
    cfg: &CampaignConfig,
    graph: &Graph,
    db: &ErrorModelDb,
    n_inputs: usize,
) -> Result<Vec<PlannedExperiment>> {
    cfg.validate()?;
    if n_inputs == 0 {
        return Err(Error::Config("campaign has no inputs".into()));
    }
    let weights = cfg.site_policy.weights(graph)?;
    let mut missing: Vec<String> = Vec::new();
    for (n, w) in graph.nodes().iter().zip(&weights) {
        let kind = n.kind();
        if *w > 0.0 && db.model_for(kind, cfg.fallback).is_err() && !missing.contains(&kind.name().into()) {
            missing.push(kind.name().into());
        }
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::MissingKinds(missing));
    }
    let total: f64 = weights.iter().sum();
    Ok((0..cfg.experiments)
        .map(|index| {
            let r = &mut rng::stream(rng::derive_seed(cfg.seed, index));
            let mut u = r.random::<f64>() * total;
            let mut site = weights.iter().rposition(|w| *w > 0.0).expect("positive total");
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    site = i;
                    break;
                }
                u -= w;
            }
            PlannedExperiment {
                index,
                site,
                input: (index % n_inputs as u64) as usize,
                seed: r.next_u64(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignRecord {
    pub index: u64,
    pub site: String,
    pub kind: OpKind,
    pub input: usize,
    /// Absent when sampling itself failed.
    pub event: Option<CorruptionEvent>,
    pub outcome: Outcome,
    pub detail: OutcomeDetail,
    /// Digest of the faulty final outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_us: Option<u64>,
}

/// Everything that identifies a campaign's results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignMeta {
    pub seed: u64,
    pub experiments: u64,
    pub model_digest: String,
    pub policy: PolicySpec,
    pub site_policy: SitePolicy,
    pub inputs: usize,
    pub generator: GeneratorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_override: Option<DomainClass>,
    /// Provenance of the model used for each kind present in the graph.
    pub db: BTreeMap<String, Provenance>,
    /// Kinds served by the default entry.
    pub fallback_kinds: Vec<String>,
    /// Random-pattern mass per kind, which the generator cannot produce.
    pub dropped_random_mass: BTreeMap<String, f64>,
}

fn campaign_meta(cfg: &CampaignConfig, graph: &Graph, db: &ErrorModelDb, inputs: usize) -> CampaignMeta {
    let mut meta = CampaignMeta {
        seed: cfg.seed,
        experiments: cfg.experiments,
        model_digest: graph.digest(),
        policy: cfg.policy.clone(),
        site_policy: cfg.site_policy.clone(),
        inputs,
        generator: cfg.generator.clone(),
        domain_override: cfg.domain_override,
        db: BTreeMap::new(),
        fallback_kinds: Vec::new(),
        dropped_random_mass: BTreeMap::new(),
    };
    for n in graph.nodes() {
        let kind = n.kind().name().to_string();
        if meta.db.contains_key(&kind) {
            continue;
        }
        if let Ok(m) = db.model_for(n.kind(), cfg.fallback) {
            if db.get(&kind).is_none() {
                meta.fallback_kinds.push(kind.clone());
            }
            meta.dropped_random_mass.insert(kind.clone(), m.spatial_freq.random_mass());
            meta.db.insert(kind, m.provenance.clone());
        }
    }
    meta
}

fn outputs_digest(outputs: &[Tensor]) -> String {
    match outputs {
        [one] => one.digest(),
        many => {
            let mut h = Sha256::new();
            for t in many {
                h.update(t.digest());
            }
            crate::tensor::hex(&h.finalize())
        }
    }
}

type PrefixCache = Mutex<LruCache<(usize, usize), Arc<Tensor>>>;

struct Runner<'a> {
    cfg: &'a CampaignConfig,
    graph: &'a Graph,
    db: &'a ErrorModelDb,
    inputs: &'a [Inputs],
    golden: Vec<Vec<Tensor>>,
    policy: Box<dyn UsabilityPolicy>,
    opts: SampleOptions,
    cache: Option<PrefixCache>,
}

impl Runner<'_> {
    fn prefix(&self, input: usize, site: usize) -> Result<Arc<Tensor>> {
        let Some(cache) = &self.cache else {
            return Ok(Arc::new(self.graph.execute_prefix(&self.inputs[input], site)?));
        };
        if let Some(t) = cache.lock().expect("cache lock").get(&(input, site)) {
            return Ok(t.clone());
        }
        // Computed outside the lock; a racing worker produces the same tensor.
        let t = Arc::new(self.graph.execute_prefix(&self.inputs[input], site)?);
        cache.lock().expect("cache lock").put((input, site), t.clone());
        Ok(t)
    }

    fn run(&self, p: &PlannedExperiment) -> CampaignRecord {
        let start = Instant::now();
        let node = &self.graph.nodes()[p.site];
        let mut rec = CampaignRecord {
            index: p.index,
            site: node.id.clone(),
            kind: node.kind(),
            input: p.input,
            event: None,
            outcome: Outcome::EngineError,
            detail: OutcomeDetail::default(),
            digest: None,
            wall_time_us: None,
        };
        if let Err(e) = self.experiment(p, &mut rec) {
            rec.outcome = Outcome::EngineError;
            rec.detail = OutcomeDetail {
                message: Some(e.to_string()),
                ..Default::default()
            };
            rec.digest = None;
        }
        if self.cfg.record_wall_time {
            rec.wall_time_us = Some(start.elapsed().as_micros() as u64);
        }
        rec
    }

    fn experiment(&self, p: &PlannedExperiment, rec: &mut CampaignRecord) -> Result<()> {
        let r = &mut rng::stream(p.seed);
        let shape = self.graph.shape_at(p.site);
        let mut event = sample_error(self.db, &rec.site, rec.kind, shape, r, &self.opts)?;
        event.seed = Some(p.seed);
        let golden_site = self.prefix(p.input, p.site)?;
        let corrupted = corrupt_values(&golden_site, &event.targets, &event.domains, r);
        rec.event = Some(event);
        let trace = self.graph.execute_from_index(
            p.site,
            Arc::new(corrupted?),
            &self.inputs[p.input],
            None,
        )?;
        let golden = &self.golden[p.input];
        let faulty: Vec<Tensor> = self
            .graph
            .output_indices()
            .iter()
            .zip(golden)
            .map(|(&i, g)| trace.at(i).cloned().unwrap_or_else(|| g.clone()))
            .collect();
        let c = classify_output(golden, &faulty, self.policy.as_ref())?;
        rec.outcome = c.outcome;
        rec.detail = c.detail;
        rec.digest = Some(outputs_digest(&faulty));
        Ok(())
    }
}

/// Runs a planned campaign, handing records to `sink` in index order, and
/// returns the aggregated report.
pub fn run_campaign_with(
    cfg: &CampaignConfig,
    graph: &Graph,
    db: &ErrorModelDb,
    inputs: &[Inputs],
    registry: &PolicyRegistry,
    sink: &mut dyn FnMut(&CampaignRecord) -> Result<()>,
) -> Result<Report> {
    let plan = plan_campaign(cfg, graph, db, inputs.len())?;
    let golden = inputs
        .iter()
        .map(|ins| graph.execute_outputs(ins))
        .collect::<Result<Vec<_>>>()?;
    let runner = Runner {
        cfg,
        graph,
        db,
        inputs,
        golden,
        policy: registry.build(&cfg.policy)?,
        opts: cfg.sample_options(),
        cache: cfg.cache.then(|| {
            Mutex::new(LruCache::new(
                NonZeroUsize::new(cfg.cache_capacity).expect("validated"),
            ))
        }),
    };

    let mut report = Report::default();
    let workers = par::Workers::new(cfg.workers);
    for batch in plan.chunks(CHUNK.max(cfg.workers * 64)) {
        let records = workers.install(|| par::map_slice(batch, |p| runner.run(p)));
        for r in &records {
            sink(r)?;
        }
        report.merge(&aggregate(&records));
    }
    report.metadata = Some(campaign_meta(cfg, graph, db, inputs.len()));
    Ok(report)
}

pub fn run_campaign(
    cfg: &CampaignConfig,
    graph: &Graph,
    db: &ErrorModelDb,
    inputs: &[Inputs],
) -> Result<(Vec<CampaignRecord>, Report)> {
    let mut records = Vec::with_capacity(cfg.experiments as usize);
    let report = run_campaign_with(
        cfg,
        graph,
        db,
        inputs,
        &PolicyRegistry::with_builtins(),
        &mut |r| {
            records.push(r.clone());
            Ok(())
        },
    )?;
    Ok((records, report))
}

/// Streams records as JSON lines to `out` and writes the campaign metadata
/// next to it as `<out>.meta.json`.
pub fn run_campaign_to_file(
    cfg: &CampaignConfig,
    graph: &Graph,
    db: &ErrorModelDb,
    inputs: &[Inputs],
    out: &Path,
) -> Result<Report> {
    let file = fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = std::io::BufWriter::new(file);
    let report = run_campaign_with(cfg, graph, db, inputs, &PolicyRegistry::with_builtins(), &mut |r| {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        w.write_all(b"\n").map_err(|e| Error::io(out, e))
    })?;
    w.flush().map_err(|e| Error::io(out, e))?;
    let meta_path = meta_path(out);
    let meta = serde_json::to_string_pretty(&report.metadata).expect("meta serializes") + "\n";
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(report)
}

pub fn meta_path(records: &Path) -> PathBuf {
    let mut s = records.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error_model::{DomainFreq, KindModel, SpatialFreq};
    use crate::graph::Node;
    use crate::ops::{LeakyReluParams, Operator};
    use crate::pattern::{SpatialPattern, ValueDomain};

    fn chain(n: usize) -> Graph {
        let mut nodes = Vec::new();
        let mut prev = "x".to_string();
        for i in 0..n {
            let id = format!("n{i}");
            nodes.push(Node::new(&id, Operator::LeakyRelu(LeakyReluParams { slope: 0.1 }), &[&prev]));
            prev = id;
        }
        Graph::new(vec![("x".into(), vec![1, 4, 4])], nodes, vec![prev]).unwrap()
    }

    #[test]
    fn uniform_plan_is_balanced_and_replayable() {
        let g = chain(10);
        let db = ErrorModelDb::builtin();
        let cfg = CampaignConfig::new(100, 3);
        let plan = plan_campaign(&cfg, &g, &db, 1).unwrap();
        assert_eq!(plan.len(), 100);
        assert_eq!(plan, plan_campaign(&cfg, &g, &db, 1).unwrap());
        let mut counts = [0usize; 10];
        plan.iter().for_each(|p| counts[p.site] += 1);
        assert!(counts.iter().all(|c| (2..=18).contains(c)), "{counts:?}");
        let other = plan_campaign(&CampaignConfig::new(100, 4), &g, &db, 1).unwrap();
        assert_ne!(plan, other);
    }

    #[test]
    fn kind_policy_restricts_sites() {
        let g = zoo::lenet5(1);
        let mut cfg = CampaignConfig::new(200, 1);
        cfg.site_policy = SitePolicy::Kinds {
            weights: BTreeMap::from([("Conv2D".into(), 1.0)]),
        };
        let plan = plan_campaign(&cfg, &g, &ErrorModelDb::builtin(), 1).unwrap();
        assert!(plan.iter().all(|p| g.nodes()[p.site].kind() == OpKind::Conv2d));
    }

    #[test]
    fn missing_kinds_are_named() {
        let g = zoo::lenet5(1);
        let mut cfg = CampaignConfig::new(10, 1);
        cfg.fallback = false;
        match plan_campaign(&cfg, &g, &ErrorModelDb::builtin(), 1) {
            Err(Error::MissingKinds(k)) => {
                assert_eq!(k, vec!["Dense", "Flatten", "MaxPool", "Softmax"]);
            }
            other => panic!("expected missing kinds, got {other:?}"),
        }
    }

    #[test]
    fn zero_experiments_rejected() {
        let g = chain(2);
        let r = plan_campaign(&CampaignConfig::new(0, 1), &g, &ErrorModelDb::builtin(), 1);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn zero_on_zero_output_is_masked() {
        // A zero input through two LeakyReLUs stays zero everywhere, so a
        // Zero event at the last node cannot change anything.
        let g = chain(2);
        let mut db = ErrorModelDb::new();
        db.insert(
            "LeakyReLU",
            KindModel {
                spatial_freq: SpatialFreq::from_array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
                domain_freq: DomainFreq::only(DomainClass::Zero),
                cardinality_hist: None,
                provenance: Provenance { corpus: "test".into(), samples: 1 },
            },
        )
        .unwrap();
        let mut cfg = CampaignConfig::new(20, 5);
        cfg.site_policy = SitePolicy::Nodes {
            weights: BTreeMap::from([("n1".into(), 1.0)]),
        };
        cfg.policy = "tolerance(0)".parse().unwrap();
        let inputs = vec![Inputs::from([("x".to_string(), Tensor::zeros(&[1, 4, 4]))])];
        let (records, report) = run_campaign(&cfg, &g, &db, &inputs).unwrap();
        assert_eq!(records.len(), 20);
        assert!(records.iter().all(|r| r.outcome == Outcome::Masked));
        assert_eq!(report.totals.masked, 20);
        let ev = records[0].event.as_ref().unwrap();
        assert!(matches!(ev.pattern, SpatialPattern::SinglePoint { .. }));
        assert_eq!(ev.domains, vec![ValueDomain::Zero]);
    }

    #[test]
    fn records_ignore_worker_count_and_cache() {
        let g = zoo::lenet5(2);
        let db = ErrorModelDb::builtin();
        let mut cfg = CampaignConfig::new(60, 9);
        cfg.synthetic_inputs = Some(2);
        let inputs = load_inputs(&cfg, &g).unwrap();
        cfg.workers = 1;
        let (a, _) = run_campaign(&cfg, &g, &db, &inputs).unwrap();
        cfg.workers = 4;
        cfg.cache = false;
        let (b, _) = run_campaign(&cfg, &g, &db, &inputs).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.outcome != Outcome::EngineError));
    }

    #[test]
    fn config_parses_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        fs::write(
            &toml_path,
            r#"
experiments = 5
seed = 7
inputs = ["img.bin", { image = "other.bin" }]
policy = { id = "topk", params = { k = 3 } }
[site_policy]
type = "kinds"
weights = { Conv2D = 2.0, Dense = 1.0 }
[generator]
random_scale = 100.0
"#,
        )
        .unwrap();
        let c = CampaignConfig::load(&toml_path).unwrap();
        c.validate().unwrap();
        assert_eq!(c.inputs[0], InputSource::File(dir.path().join("img.bin")));
        assert!(matches!(c.site_policy, SitePolicy::Kinds { .. }));
        assert_eq!(c.generator.random_scale, 100.0);

        let json_path = dir.path().join("c.json");
        fs::write(&json_path, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(CampaignConfig::load(&json_path).unwrap(), c);

        fs::write(&toml_path, "experiments = 5\nbogus = 1\n").unwrap();
        assert!(CampaignConfig::load(&toml_path).is_err());
    }
}
