//! Corpora of golden/corrupted tensor dumps and error-model mining.
//!
//! A corpus is a directory of batches. Each batch directory holds a
//! `meta.json`, the golden tensor and any number of `faulty_*.bin` dumps, all
//! raw little-endian binary32:
//!
//! ```text
//! corpus/
//!   conv1-batch0/
//!     meta.json        {"kind": "Conv2D", "shape": [256, 13, 13], "golden": "golden.bin"}
//!     golden.bin
//!     faulty_00000.bin
//!     faulty_00001.bin
//! ```
//!
//! `meta.json` may also carry `"layout": "flat"` to analyze a tensor as one
//! long row. Unknown fields are tolerated with a warning.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analyzer::{analyze_pair_as, PairClassification};
use crate::error::{Error, Result};
use crate::error_model::{
    sample_error, DomainFreq, ErrorModelDb, KindModel, Provenance, SampleOptions, SpatialFreq,
};
use crate::ops::OpKind;
use crate::par;
use crate::pattern::{DomainClass, SpatialVariant};
use crate::rng;
use crate::saboteur::corrupt_values;
use crate::tensor::{MapShape, Tensor};

pub const META_FILE: &str = "meta.json";
pub const DEFAULT_MIN_SAMPLES: u64 = 100;

/// Corruptions with fewer erroneous values than this mostly stay inside one
/// feature map; larger ones mostly spread. Reported, never used to classify.
pub const SINGLE_MAP_THRESHOLD: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Chw,
    Flat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchMeta {
    pub kind: String,
    pub shape: Vec<usize>,
    pub golden: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<Layout>,
}

impl BatchMeta {
    pub fn map_shape(&self) -> Result<MapShape> {
        match self.layout {
            Some(Layout::Flat) => Ok(MapShape::flat(self.shape.iter().product())),
            _ => MapShape::of(&self.shape),
        }
    }
}

/// One golden/corrupted pair to analyze.
#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub kind: String,
    pub shape: Vec<usize>,
    pub layout: MapShape,
    pub golden: PathBuf,
    pub corrupted: PathBuf,
}

#[derive(Debug, Default)]
pub struct CorpusScan {
    pub entries: Vec<CorpusEntry>,
    pub warnings: Vec<String>,
    /// Batches that could not be read at all.
    pub unreadable: u64,
}

const KNOWN_META_FIELDS: [&str; 4] = ["kind", "shape", "golden", "layout"];

fn read_meta(dir: &Path, warnings: &mut Vec<String>) -> Result<BatchMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::malformed(path.display().to_string(), e))?;
    if let Some(obj) = value.as_object() {
        for k in obj.keys().filter(|k| !KNOWN_META_FIELDS.contains(&k.as_str())) {
            warnings.push(format!("{}: ignoring unknown field `{k}`", path.display()));
        }
    }
    serde_json::from_value(value).map_err(|e| Error::malformed(path.display().to_string(), e))
}

fn scan_batch(dir: &Path, scan: &mut CorpusScan) {
    let meta = match read_meta(dir, &mut scan.warnings) {
        Ok(m) => m,
        Err(e) => {
            scan.warnings.push(format!("skipping batch: {e}"));
            scan.unreadable += 1;
            return;
        }
    };
    let layout = match meta.map_shape() {
        Ok(l) => l,
        Err(e) => {
            scan.warnings.push(format!("skipping batch {}: {e}", dir.display()));
            scan.unreadable += 1;
            return;
        }
    };
    let Ok(listing) = fs::read_dir(dir) else {
        scan.warnings.push(format!("skipping unreadable batch {}", dir.display()));
        scan.unreadable += 1;
        return;
    };
    let mut faulty: Vec<PathBuf> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("faulty_") && n.ends_with(".bin"))
        })
        .collect();
    faulty.sort();
    let golden = dir.join(&meta.golden);
    scan.entries.extend(faulty.into_iter().map(|corrupted| CorpusEntry {
        kind: meta.kind.clone(),
        shape: meta.shape.clone(),
        layout,
        golden: golden.clone(),
        corrupted,
    }));
}

/// Lists every pair under `root`, which is either a batch directory itself
/// or a directory of batches.
pub fn scan_corpus(root: &Path) -> Result<CorpusScan> {
    let mut scan = CorpusScan::default();
    if root.join(META_FILE).exists() {
        scan_batch(root, &mut scan);
    } else {
        let listing = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut dirs: Vec<PathBuf> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for d in dirs {
            if d.join(META_FILE).exists() {
                scan_batch(&d, &mut scan);
            }
        }
    }
    if scan.entries.is_empty() && scan.unreadable == 0 {
        return Err(Error::Corpus(format!("no corpus entries in {}", root.display())));
    }
    Ok(scan)
}

/// Per-kind tallies. `merge` is associative and commutative, so partial
/// tallies can be combined in any order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindTally {
    pub pairs: u64,
    pub masked: u64,
    pub unreadable: u64,
    pub spatial: [u64; 6],
    pub domains: [u64; 5],
    pub cardinality: BTreeMap<u64, u64>,
    pub small: u64,
    pub small_single_map: u64,
    pub large: u64,
    pub large_multi_map: u64,
    /// Corrupted dumps that fell in a random bucket, for manual review.
    pub residue: Vec<String>,
}

impl KindTally {
    pub fn corrupted(&self) -> u64 {
        self.pairs - self.masked - self.unreadable
    }

    pub fn add(&mut self, c: &PairClassification, source: &str) {
        self.pairs += 1;
        let v = c.pattern.variant();
        let vi = SpatialVariant::ALL.iter().position(|x| *x == v).expect("known");
        self.spatial[vi] += 1;
        for d in &c.domains {
            let di = DomainClass::ALL.iter().position(|x| x == d).expect("known");
            self.domains[di] += 1;
        }
        *self.cardinality.entry(c.cardinality as u64).or_default() += 1;
        if c.cardinality < SINGLE_MAP_THRESHOLD {
            self.small += 1;
            self.small_single_map += c.single_map as u64;
        } else if c.cardinality > SINGLE_MAP_THRESHOLD {
            self.large += 1;
            self.large_multi_map += !c.single_map as u64;
        }
        if v.is_random() {
            self.residue.push(source.to_string());
        }
    }

    pub fn merge(&mut self, other: &KindTally) {
        self.pairs += other.pairs;
        self.masked += other.masked;
        self.unreadable += other.unreadable;
        for (a, b) in self.spatial.iter_mut().zip(other.spatial) {
            *a += b;
        }
        for (a, b) in self.domains.iter_mut().zip(other.domains) {
            *a += b;
        }
        for (k, v) in &other.cardinality {
            *self.cardinality.entry(*k).or_default() += v;
        }
        self.small += other.small;
        self.small_single_map += other.small_single_map;
        self.large += other.large;
        self.large_multi_map += other.large_multi_map;
        self.residue.extend(other.residue.iter().cloned());
        self.residue.sort();
    }

    fn model(&self, corpus: &str) -> KindModel {
        let n = self.corrupted() as f64;
        let locs: u64 = self.domains.iter().sum();
        KindModel {
            spatial_freq: SpatialFreq::from_array(self.spatial.map(|c| c as f64 / n)),
            domain_freq: DomainFreq::from_array(self.domains.map(|c| c as f64 / locs as f64)),
            cardinality_hist: Some(self.cardinality.clone()),
            provenance: Provenance {
                corpus: corpus.to_string(),
                samples: self.corrupted(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub tally: KindTally,
    pub masked_rate: f64,
    pub spatial_freq: SpatialFreq,
    pub residue_rate: f64,
    /// Share of corruptions with fewer than 16 values that stay in one map.
    pub small_single_map_rate: Option<f64>,
    /// Share of corruptions with more than 16 values that span maps.
    pub large_multi_map_rate: Option<f64>,
    pub included: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded_reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub corpus: String,
    pub min_samples: u64,
    pub pairs: u64,
    pub masked: u64,
    pub unreadable: u64,
    pub kinds: BTreeMap<String, KindReport>,
    pub warnings: Vec<String>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl AnalysisReport {
    pub fn masked_rate(&self) -> f64 {
        ratio(self.masked, self.pairs)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Fixed-width table, one row per kind, columns in spatial-table order.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "corpus {}: {} pairs, {} masked ({:.1}%), {} unreadable",
            self.corpus,
            self.pairs,
            self.masked,
            100.0 * self.masked_rate(),
            self.unreadable
        );
        let _ = writeln!(
            s,
            "{:<12} {:>8} | {:<23} | {:<23} |",
            "", "", "single map", "multi map"
        );
        let _ = writeln!(
            s,
            "{:<12} {:>8} | {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7} | {:>7}",
            "operator", "samples", "single", "row", "random", "bullet", "shatter", "random", "status"
        );
        for (kind, r) in &self.kinds {
            let f = r.spatial_freq.to_array();
            let _ = writeln!(
                s,
                "{:<12} {:>8} | {:>6.1}% {:>6.1}% {:>6.1}% | {:>6.1}% {:>6.1}% {:>6.1}% | {:>7}",
                kind,
                r.tally.corrupted(),
                100.0 * f[0],
                100.0 * f[1],
                100.0 * f[2],
                100.0 * f[3],
                100.0 * f[4],
                100.0 * f[5],
                if r.included { "ok" } else { "excluded" }
            );
        }
        for (kind, r) in &self.kinds {
            if let Some(reason) = &r.excluded_reason {
                let _ = writeln!(s, "excluded {kind}: {reason}");
            }
            if !r.tally.residue.is_empty() {
                let _ = writeln!(
                    s,
                    "{kind}: {} unclassifiable pair(s) for review ({:.2}%)",
                    r.tally.residue.len(),
                    100.0 * r.residue_rate
                );
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct MineOptions {
    pub min_samples: u64,
    pub corpus_id: String,
}

impl Default for MineOptions {
    fn default() -> Self {
        MineOptions {
            min_samples: DEFAULT_MIN_SAMPLES,
            corpus_id: "corpus".into(),
        }
    }
}

/// Analyzes every pair and aggregates per kind. Kinds with fewer than
/// `min_samples` corrupted pairs are reported but left out of the database.
pub fn build_error_db(
    entries: &[CorpusEntry],
    opts: &MineOptions,
) -> Result<(ErrorModelDb, AnalysisReport)> {
    let mut warnings = Vec::new();

    // Each golden tensor is read once and shared by its pairs.
    let mut goldens: BTreeMap<&Path, Option<Arc<Tensor>>> = BTreeMap::new();
    for e in entries {
        goldens.entry(e.golden.as_path()).or_insert_with(|| {
            match Tensor::read_raw(&e.golden, e.shape.clone()) {
                Ok(t) => Some(Arc::new(t)),
                Err(err) => {
                    warnings.push(format!("unreadable golden: {err}"));
                    None
                }
            }
        });
    }

    let results: Vec<(String, KindTally, Option<String>)> = par::map_slice(entries, |e| {
        let mut t = KindTally::default();
        let golden = goldens.get(e.golden.as_path()).cloned().flatten();
        let outcome = golden
            .ok_or_else(|| format!("{}: golden unavailable", e.corrupted.display()))
            .and_then(|g| {
                let c = Tensor::read_raw(&e.corrupted, e.shape.clone()).map_err(|x| x.to_string())?;
                analyze_pair_as(&g, &c, e.layout).map_err(|x| x.to_string())
            });
        let warn = match outcome {
            Ok(Some(class)) => {
                t.add(&class, &e.corrupted.display().to_string());
                None
            }
            Ok(None) => {
                t.pairs += 1;
                t.masked += 1;
                None
            }
            Err(msg) => {
                t.pairs += 1;
                t.unreadable += 1;
                Some(msg)
            }
        };
        (e.kind.clone(), t, warn)
    });

    let mut tallies: BTreeMap<String, KindTally> = BTreeMap::new();
    for (kind, t, warn) in results {
        tallies.entry(kind).or_default().merge(&t);
        warnings.extend(warn);
    }

    let mut db = ErrorModelDb::new();
    let mut kinds = BTreeMap::new();
    for (kind, tally) in tallies {
        let n = tally.corrupted();
        let mut excluded_reason = None;
        if kind.parse::<OpKind>().is_err() {
            warnings.push(format!("corpus kind `{kind}` is not a known operator kind"));
        }
        if n < opts.min_samples {
            excluded_reason = Some(format!("{n} corrupted pairs < min_samples {}", opts.min_samples));
        } else if let Err(e) = db.insert(&kind, tally.model(&opts.corpus_id)) {
            excluded_reason = Some(e.to_string());
        }
        let spatial_freq = if n == 0 {
            SpatialFreq::default()
        } else {
            SpatialFreq::from_array(tally.spatial.map(|c| c as f64 / n as f64))
        };
        let residue = tally.spatial[2] + tally.spatial[5];
        kinds.insert(
            kind,
            KindReport {
                masked_rate: ratio(tally.masked, tally.pairs),
                spatial_freq,
                residue_rate: ratio(residue, n),
                small_single_map_rate: (tally.small > 0)
                    .then(|| ratio(tally.small_single_map, tally.small)),
                large_multi_map_rate: (tally.large > 0)
                    .then(|| ratio(tally.large_multi_map, tally.large)),
                included: excluded_reason.is_none(),
                excluded_reason,
                tally,
            },
        );
    }

    let report = AnalysisReport {
        schema_version: 1,
        corpus: opts.corpus_id.clone(),
        min_samples: opts.min_samples,
        pairs: kinds.values().map(|k| k.tally.pairs).sum(),
        masked: kinds.values().map(|k| k.tally.masked).sum(),
        unreadable: kinds.values().map(|k| k.tally.unreadable).sum(),
        kinds,
        warnings,
    };
    Ok((db, report))
}

/// Parameters for writing a synthetic corpus batch with the saboteur.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub kind: OpKind,
    pub shape: Vec<usize>,
    pub pairs: usize,
    pub seed: u64,
    pub batch_size: usize,
}

/// Golden values are uniform in `[-4, 4]` away from zero, so no generated
/// corruption lands on a value it cannot change.
pub fn synthetic_golden(shape: &[usize], seed: u64) -> Tensor {
    let r = &mut rng::stream(seed);
    Tensor::from_fn(shape, |_| {
        let v: f32 = r.random_range(0.05f32..4.0);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Writes `spec.pairs` corrupted dumps under `dir`, in batches that share a
/// golden tensor. Returns the batch directories.
pub fn write_synthetic_corpus(
    dir: &Path,
    db: &ErrorModelDb,
    spec: &SynthSpec,
    opts: &SampleOptions,
) -> Result<Vec<PathBuf>> {
    let batch_size = spec.batch_size.max(1);
    let n_batches = spec.pairs.div_ceil(batch_size);
    let mut out = Vec::new();
    for b in 0..n_batches {
        let bdir = dir.join(format!("{}-batch{b:03}", spec.kind.name().to_lowercase()));
        fs::create_dir_all(&bdir).map_err(|e| Error::io(&bdir, e))?;
        let golden = synthetic_golden(&spec.shape, rng::derive_seed(spec.seed, u64::MAX - b as u64));
        golden.write_raw(&bdir.join("golden.bin"))?;
        let meta = BatchMeta {
            kind: spec.kind.name().into(),
            shape: spec.shape.clone(),
            golden: "golden.bin".into(),
            layout: None,
        };
        let meta_path = bdir.join(META_FILE);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("meta serializes"))
            .map_err(|e| Error::io(&meta_path, e))?;

        let lo = b * batch_size;
        let hi = (lo + batch_size).min(spec.pairs);
        let written: Vec<Result<()>> = par::map_range(hi - lo, |k| {
            let i = lo + k;
            let r = &mut rng::stream(rng::derive_seed(spec.seed, i as u64));
            let ev = sample_error(db, "synthetic", spec.kind, &spec.shape, r, opts)?;
            let c = corrupt_values(&golden, &ev.targets, &ev.domains, r)?;
            c.write_raw(&bdir.join(format!("faulty_{i:06}.bin")))
        });
        written.into_iter().collect::<Result<Vec<()>>>()?;
        out.push(bdir);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tally_merge_is_order_free() {
        let a = KindTally {
            pairs: 3,
            spatial: [2, 0, 0, 0, 0, 0],
            cardinality: BTreeMap::from([(1, 2)]),
            residue: vec!["b".into()],
            ..Default::default()
        };
        let b = KindTally {
            pairs: 5,
            masked: 1,
            spatial: [0, 0, 0, 4, 0, 0],
            cardinality: BTreeMap::from([(1, 1)]),
            residue: vec!["a".into()],
            ..Default::default()
        };
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
        assert_eq!(ab.cardinality[&1], 3);
    }

    #[test]
    fn synthetic_golden_avoids_zero() {
        let g = synthetic_golden(&[4, 8, 8], 3);
        assert!(g.data().iter().all(|v| v.abs() >= 0.05 && v.abs() <= 4.0));
    }
}
