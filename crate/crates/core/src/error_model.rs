//! The error-model database and sampling from it.
//!
//! The database maps operator kinds to frequency tables over spatial patterns
//! and value domains. On disk it is a JSON object keyed by kind name, with a
//! `schema_version` field and an optional `default` entry used for kinds that
//! have no model of their own (only when a campaign enables the fallback):
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "Conv2D": {
//!     "spatial_freq": { "SinglePoint": 0.427, "SameRow": 0.187, "RandomSFM": 0.0,
//!                       "BulletWake": 0.206, "ShatteredGlass": 0.162, "RandomMFM": 0.018 },
//!     "domain_freq":  { "NaN": 0.01, "Zero": 0.01, "BitFlip": 0.03, "InUnitBall": 0.8, "Random": 0.15 },
//!     "cardinality_hist": { "1": 120, "2": 31 },
//!     "provenance": { "corpus": "lab-run-3", "samples": 151 }
//!   }
//! }
//! ```
//!
//! Frequencies are fractions; missing variants count as zero.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::OpKind;
use crate::pattern::{DomainClass, SpatialVariant, ValueDomain};
use crate::saboteur::{self, CorruptionEvent, GeneratorConfig};
use crate::tensor::MapShape;

pub const SCHEMA_VERSION: u32 = 1;
pub const FREQ_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_ENTRY: &str = "default";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialFreq {
    #[serde(rename = "SinglePoint", default)]
    pub single_point: f64,
    #[serde(rename = "SameRow", default)]
    pub same_row: f64,
    #[serde(rename = "RandomSFM", default)]
    pub random_sfm: f64,
    #[serde(rename = "BulletWake", default)]
    pub bullet_wake: f64,
    #[serde(rename = "ShatteredGlass", default)]
    pub shattered_glass: f64,
    #[serde(rename = "RandomMFM", default)]
    pub random_mfm: f64,
}

impl SpatialFreq {
    /// From values in [`SpatialVariant::ALL`] order.
    pub fn from_array(v: [f64; 6]) -> Self {
        SpatialFreq {
            single_point: v[0],
            same_row: v[1],
            random_sfm: v[2],
            bullet_wake: v[3],
            shattered_glass: v[4],
            random_mfm: v[5],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.single_point,
            self.same_row,
            self.random_sfm,
            self.bullet_wake,
            self.shattered_glass,
            self.random_mfm,
        ]
    }

    pub fn get(&self, v: SpatialVariant) -> f64 {
        let i = SpatialVariant::ALL.iter().position(|x| *x == v).expect("known variant");
        self.to_array()[i]
    }

    /// Mass that the generator cannot reproduce and drops.
    pub fn random_mass(&self) -> f64 {
        self.random_sfm + self.random_mfm
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainFreq {
    #[serde(rename = "NaN", default)]
    pub nan: f64,
    #[serde(rename = "Zero", default)]
    pub zero: f64,
    #[serde(rename = "BitFlip", default)]
    pub bit_flip: f64,
    #[serde(rename = "InUnitBall", default)]
    pub in_unit_ball: f64,
    #[serde(rename = "Random", default)]
    pub random: f64,
}

impl DomainFreq {
    pub fn from_array(v: [f64; 5]) -> Self {
        DomainFreq {
            nan: v[0],
            zero: v[1],
            bit_flip: v[2],
            in_unit_ball: v[3],
            random: v[4],
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.nan, self.zero, self.bit_flip, self.in_unit_ball, self.random]
    }

    pub fn only(class: DomainClass) -> Self {
        let mut v = [0.0; 5];
        v[DomainClass::ALL.iter().position(|c| *c == class).expect("known class")] = 1.0;
        Self::from_array(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub corpus: String,
    pub samples: u64,
}

/// Error model for one operator kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindModel {
    pub spatial_freq: SpatialFreq,
    pub domain_freq: DomainFreq,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality_hist: Option<BTreeMap<u64, u64>>,
    pub provenance: Provenance,
}

impl KindModel {
    pub fn validate(&self, kind: &str) -> Result<()> {
        check_vector(kind, "spatial_freq", &self.spatial_freq.to_array())?;
        check_vector(kind, "domain_freq", &self.domain_freq.to_array())?;
        let structured: f64 = SpatialVariant::STRUCTURED
            .iter()
            .map(|v| self.spatial_freq.get(*v))
            .sum();
        if !(structured > 0.0) {
            return Err(Error::Db(format!(
                "`{kind}`: no probability mass on generatable spatial patterns"
            )));
        }
        Ok(())
    }
}

fn check_vector(kind: &str, field: &str, v: &[f64]) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::Db(format!("`{kind}`: {field} has invalid entry {x}")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > FREQ_TOLERANCE {
        return Err(Error::Db(format!(
            "`{kind}`: {field} sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorModelDb {
    pub schema_version: u32,
    entries: BTreeMap<String, KindModel>,
    default: Option<KindModel>,
}

#[derive(Serialize, Deserialize)]
struct DbFile {
    schema_version: u32,
    #[serde(flatten)]
    entries: BTreeMap<String, serde_json::Value>,
}

impl ErrorModelDb {
    pub fn new() -> Self {
        ErrorModelDb {
            schema_version: SCHEMA_VERSION,
            entries: BTreeMap::new(),
            default: None,
        }
    }

    pub fn insert(&mut self, kind: &str, model: KindModel) -> Result<()> {
        model.validate(kind)?;
        if kind == DEFAULT_ENTRY {
            self.default = Some(model);
        } else {
            self.entries.insert(kind.to_string(), model);
        }
        Ok(())
    }

    pub fn set_default(&mut self, model: Option<KindModel>) -> Result<()> {
        if let Some(m) = &model {
            m.validate(DEFAULT_ENTRY)?;
        }
        self.default = model;
        Ok(())
    }

    pub fn get(&self, kind: &str) -> Option<&KindModel> {
        self.entries.get(kind)
    }

    pub fn default_entry(&self) -> Option<&KindModel> {
        self.default.as_ref()
    }

    /// Kind names with an entry, sorted.
    pub fn kinds(&self) -> impl Iterator<Item = (&str, &KindModel)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose key is not a known operator kind. They are kept so a
    /// newer database round-trips, but never used for sampling.
    pub fn unknown_kinds(&self) -> Vec<&str> {
        self.entries
            .keys()
            .filter(|k| k.parse::<OpKind>().is_err())
            .map(String::as_str)
            .collect()
    }

    /// The model used for `kind`, falling back to the default entry when
    /// `fallback` is set.
    pub fn model_for(&self, kind: OpKind, fallback: bool) -> Result<&KindModel> {
        self.entries
            .get(kind.name())
            .or(if fallback { self.default.as_ref() } else { None })
            .ok_or_else(|| Error::MissingKinds(vec![kind.name().to_string()]))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DbFile =
            serde_json::from_str(text).map_err(|e| Error::malformed("error model db", e))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Db(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        let mut db = ErrorModelDb::new();
        for (kind, value) in file.entries {
            let model: KindModel = serde_json::from_value(value)
                .map_err(|e| Error::Db(format!("`{kind}`: {e}")))?;
            db.insert(&kind, model)?;
        }
        for k in db.unknown_kinds() {
            log::warn!("error model db: entry `{k}` is not a known operator kind");
        }
        Ok(db)
    }

    pub fn to_json(&self) -> String {
        let mut entries: BTreeMap<String, serde_json::Value> = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::to_value(v).expect("model serializes")))
            .collect();
        if let Some(d) = &self.default {
            entries.insert(
                DEFAULT_ENTRY.to_string(),
                serde_json::to_value(d).expect("model serializes"),
            );
        }
        let file = DbFile {
            schema_version: self.schema_version,
            entries,
        };
        serde_json::to_string_pretty(&file).expect("db serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Built-in database with spatial frequencies from the reference GPU
    /// fault-injection campaign. Rows that do not add up to exactly 100% are
    /// renormalized. Value-domain shares are coarse approximations of the
    /// published per-operator distributions.
    pub fn builtin() -> Self {
        // (kind, spatial % in table order, domain shares, corrupted tensors)
        const CONV_LIKE: [f64; 5] = [0.01, 0.01, 0.03, 0.80, 0.15];
        const ZERO_HEAVY: [f64; 5] = [0.01, 0.70, 0.02, 0.17, 0.10];
        const DIV_LIKE: [f64; 5] = [0.02, 0.03, 0.40, 0.10, 0.45];
        const SIGMOID_LIKE: [f64; 5] = [0.01, 0.01, 0.03, 0.50, 0.45];
        let rows: [(&str, [f64; 6], [f64; 5], u64); 9] = [
            ("Conv2D", [42.7, 18.7, 0.0, 20.6, 16.2, 1.8], CONV_LIKE, 24_273),
            ("Add", [90.3, 1.8, 0.8, 0.0, 0.0, 7.1], ZERO_HEAVY, 5_900),
            ("BatchNorm", [77.8, 2.5, 1.1, 12.7, 1.1, 3.0], CONV_LIKE, 26_182),
            ("BiasAdd", [90.1, 1.2, 1.0, 0.2, 0.0, 7.5], CONV_LIKE, 7_400),
            ("Div", [84.9, 6.7, 8.4, 0.0, 0.0, 0.0], DIV_LIKE, 4_400),
            ("Exp", [91.9, 0.5, 0.0, 0.0, 0.0, 7.5], ZERO_HEAVY, 6_400),
            ("LeakyReLU", [84.5, 1.5, 1.1, 0.0, 0.0, 10.3], CONV_LIKE, 5_100),
            ("Mul", [88.4, 0.3, 0.0, 0.0, 0.0, 11.3], CONV_LIKE, 5_700),
            ("Sigmoid", [89.7, 1.4, 0.0, 0.0, 0.0, 9.0], SIGMOID_LIKE, 4_500),
        ];
        let model = |spatial: [f64; 6], domain: [f64; 5], samples: u64| KindModel {
            spatial_freq: SpatialFreq::from_array(normalize(spatial)),
            domain_freq: DomainFreq::from_array(normalize(domain)),
            cardinality_hist: None,
            provenance: Provenance {
                corpus: "builtin".into(),
                samples,
            },
        };
        let mut db = ErrorModelDb::new();
        for (kind, spatial, domain, samples) in rows {
            db.insert(kind, model(spatial, domain, samples))
                .expect("builtin rows are valid");
        }
        db.set_default(Some(model(
            [89.7, 1.4, 0.0, 0.0, 0.0, 9.0],
            SIGMOID_LIKE,
            0,
        )))
        .expect("builtin default is valid");
        db
    }
}

impl Default for ErrorModelDb {
    fn default() -> Self {
        Self::new()
    }
}

pub fn normalize<const N: usize>(v: [f64; N]) -> [f64; N] {
    let sum: f64 = v.iter().sum();
    v.map(|x| x / sum)
}

pub fn load_db(path: &Path) -> Result<ErrorModelDb> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ErrorModelDb::from_json(&text)
}

/// Knobs for turning a database entry into concrete corruption events.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleOptions {
    /// Use the database's `default` entry for kinds without a model.
    pub fallback: bool,
    #[serde(flatten)]
    pub generator: GeneratorConfig,
    /// Force every corrupted location into this domain class.
    pub domain_override: Option<DomainClass>,
}


/// Spatial variants the generator may produce on `shape`, weighted by the
/// model and renormalized. Falls back to certain `SinglePoint` when nothing
/// else remains.
pub fn generatable_weights(freq: &SpatialFreq, shape: MapShape) -> Vec<(SpatialVariant, f64)> {
    let kept: Vec<(SpatialVariant, f64)> = SpatialVariant::STRUCTURED
        .into_iter()
        .filter(|v| v.admits(shape))
        .map(|v| (v, freq.get(v)))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    let total: f64 = kept.iter().map(|(_, w)| w).sum();
    if kept.is_empty() || !(total > 0.0) {
        return vec![(SpatialVariant::SinglePoint, 1.0)];
    }
    kept.into_iter().map(|(v, w)| (v, w / total)).collect()
}

fn pick<T: Copy>(weighted: &[(T, f64)], rng: &mut impl Rng) -> T {
    let total: f64 = weighted.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for &(v, w) in weighted {
        if u < w {
            return v;
        }
        u -= w;
    }
    // Rounding left `u` past the last bucket.
    weighted
        .iter()
        .rev()
        .find(|(_, w)| *w > 0.0)
        .map(|(v, _)| *v)
        .unwrap_or(weighted[0].0)
}

pub fn sample_domain_class(freq: &DomainFreq, rng: &mut impl Rng) -> DomainClass {
    let weighted: Vec<(DomainClass, f64)> = DomainClass::ALL
        .into_iter()
        .zip(freq.to_array())
        .collect();
    pick(&weighted, rng)
}

/// Binds a generation parameter to a domain class.
pub fn bind_domain(class: DomainClass, cfg: &GeneratorConfig, rng: &mut impl Rng) -> ValueDomain {
    match class {
        DomainClass::NaN => ValueDomain::NaN,
        DomainClass::Zero => ValueDomain::Zero,
        DomainClass::BitFlip => ValueDomain::BitFlip {
            bit: rng.random_range(0..32),
        },
        DomainClass::InUnitBall => ValueDomain::InUnitBall {
            delta: rng.random_range(-1.0f32..=1.0),
        },
        DomainClass::Random => ValueDomain::Random {
            scale: cfg.random_scale,
        },
    }
}

/// Draws one corruption event for an operator of `kind` whose output has
/// `shape`. The event is a pure function of the arguments and the state of
/// `rng`.
pub fn sample_error(
    db: &ErrorModelDb,
    site: &str,
    kind: OpKind,
    shape: &[usize],
    rng: &mut impl Rng,
    opts: &SampleOptions,
) -> Result<CorruptionEvent> {
    let model = db.model_for(kind, opts.fallback)?;
    let map = MapShape::of(shape)?;
    let variant = pick(&generatable_weights(&model.spatial_freq, map), rng);
    let pattern = saboteur::draw_pattern(variant, map, rng, &opts.generator)?;
    let targets = pattern.targets();
    let domains = targets
        .iter()
        .map(|_| {
            let class = opts
                .domain_override
                .unwrap_or_else(|| sample_domain_class(&model.domain_freq, rng));
            bind_domain(class, &opts.generator, rng)
        })
        .collect();
    Ok(CorruptionEvent {
        site: site.to_string(),
        shape: shape.to_vec(),
        pattern,
        targets,
        domains,
        seed: None,
    })
}
