//! Usability-based classification of corrupted network outputs.
//!
//! An experiment is `Masked` when every final output is bit-identical to the
//! golden run. Otherwise a [`UsabilityPolicy`] decides whether the consumer
//! of the output could still act on it. Policies are built from a string id
//! plus a JSON parameter record through a [`PolicyRegistry`]; the built-ins
//! register through the same interface as custom ones.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Masked,
    Usable,
    Unusable,
    EngineError,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [
        Outcome::Masked,
        Outcome::Usable,
        Outcome::Unusable,
        Outcome::EngineError,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Masked => "masked",
            Outcome::Usable => "usable",
            Outcome::Unusable => "unusable",
            Outcome::EngineError => "engine_error",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Metrics gathered while classifying; which fields are set depends on the
/// policy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDetail {
    /// Output elements whose bits differ from golden.
    pub mismatches: u64,
    /// Largest |faulty - golden| over differing elements that are both
    /// finite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_abs_diff: Option<f64>,
    /// Non-finite elements in the faulty outputs.
    pub non_finite: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faulty_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub outcome: Outcome,
    pub detail: OutcomeDetail,
}

/// Judges outputs that are known to differ from golden.
pub trait UsabilityPolicy: Send + Sync {
    /// `Ok(true)` for usable. May fill label fields of `detail`.
    fn usable(&self, golden: &[Tensor], faulty: &[Tensor], detail: &mut OutcomeDetail)
        -> Result<bool>;
}

/// Policy id plus parameters. Deserializes from either the shorthand string
/// (see [`FromStr`]) or `{ id, params }`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolicySpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub params: Value,
}

impl<'de> Deserialize<'de> for PolicySpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Full {
            id: String,
            #[serde(default)]
            params: Value,
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Short(String),
            Full(Full),
        }
        match Repr::deserialize(d)? {
            Repr::Short(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::Full(f) => Ok(PolicySpec::new(&f.id, f.params)),
        }
    }
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec {
            id: "top1".into(),
            params: Value::Null,
        }
    }
}

impl PolicySpec {
    pub fn new(id: &str, params: Value) -> Self {
        PolicySpec {
            id: id.into(),
            params,
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.params {
            Value::Null => f.write_str(&self.id),
            p => write!(f, "{}({p})", self.id),
        }
    }
}

/// Shorthand used on the command line: `top1`, `topk(5)`, `label-set(0.5)`,
/// `tolerance(1e-3)`, or `id({"json": "params"})`.
impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let Some(open) = s.find('(') else {
            return Ok(PolicySpec::new(s, Value::Null));
        };
        let arg = s[open + 1..]
            .strip_suffix(')')
            .ok_or_else(|| Error::Policy(format!("unbalanced parentheses in `{s}`")))?
            .trim();
        let id = s[..open].trim();
        let value: Value = serde_json::from_str(arg)
            .map_err(|e| Error::Policy(format!("bad argument in `{s}`: {e}")))?;
        let params = match (id, value) {
            (_, v @ Value::Object(_)) => v,
            ("topk", v) => json!({ "k": v }),
            ("label-set", v) => json!({ "threshold": v }),
            ("tolerance", v) => json!({ "epsilon": v }),
            (_, v) => v,
        };
        Ok(PolicySpec::new(id, params))
    }
}

type Factory = Box<dyn Fn(&Value) -> Result<Box<dyn UsabilityPolicy>> + Send + Sync>;

pub struct PolicyRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

fn params<T: for<'de> Deserialize<'de>>(id: &str, v: &Value) -> Result<T> {
    let v = if v.is_null() { json!({}) } else { v.clone() };
    serde_json::from_value(v).map_err(|e| Error::Policy(format!("{id}: {e}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TopKParams {
    k: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdParams {
    threshold: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EpsilonParams {
    epsilon: f64,
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        PolicyRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("top1", |p| {
            params::<NoParams>("top1", p)?;
            Ok(Box::new(TopK { k: 1 }))
        });
        r.register("topk", |p| {
            let TopKParams { k } = params("topk", p)?;
            if k == 0 {
                return Err(Error::Policy("topk: k must be at least 1".into()));
            }
            Ok(Box::new(TopK { k }))
        });
        r.register("label-set", |p| {
            let ThresholdParams { threshold } = params("label-set", p)?;
            if !threshold.is_finite() {
                return Err(Error::Policy("label-set: threshold must be finite".into()));
            }
            Ok(Box::new(LabelSet { threshold }))
        });
        r.register("tolerance", |p| {
            let EpsilonParams { epsilon } = params("tolerance", p)?;
            if !(epsilon >= 0.0 && epsilon.is_finite()) {
                return Err(Error::Policy("tolerance: epsilon must be finite and >= 0".into()));
            }
            Ok(Box::new(Tolerance { epsilon }))
        });
        r
    }

    pub fn register<F>(&mut self, id: &str, factory: F)
    where
        F: Fn(&Value) -> Result<Box<dyn UsabilityPolicy>> + Send + Sync + 'static,
    {
        self.factories.insert(id.to_string(), Box::new(factory));
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, spec: &PolicySpec) -> Result<Box<dyn UsabilityPolicy>> {
        let f = self.factories.get(&spec.id).ok_or_else(|| {
            let known: Vec<&str> = self.ids().collect();
            Error::Policy(format!("unknown policy `{}` (known: {})", spec.id, known.join(", ")))
        })?;
        f(&spec.params)
    }
}

/// Views a classification head as a flat probability vector: rank 1, or
/// rank 2 with a single row.
fn flat<'a>(t: &'a Tensor, policy: &str) -> Result<&'a [f32]> {
    match t.shape() {
        [_] | [1, _] => Ok(t.data()),
        s => Err(Error::Policy(format!(
            "{policy} needs a flat output, got shape {s:?}"
        ))),
    }
}

/// Indices of the `k` largest values, ties to the lower index.
fn top_indices(v: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn argmax(v: &[f32]) -> Option<usize> {
    top_indices(v, 1).first().copied()
}

struct TopK {
    k: usize,
}

impl UsabilityPolicy for TopK {
    fn usable(&self, golden: &[Tensor], faulty: &[Tensor], detail: &mut OutcomeDetail) -> Result<bool> {
        let name = if self.k == 1 { "top1" } else { "topk" };
        let mut ok = true;
        for (g, f) in golden.iter().zip(faulty) {
            let (g, f) = (flat(g, name)?, flat(f, name)?);
            let gl = argmax(g);
            detail.golden_label = detail.golden_label.or(gl);
            if f.iter().any(|v| v.is_nan()) || g.iter().any(|v| v.is_nan()) {
                ok = false;
                continue;
            }
            let top = top_indices(f, self.k);
            detail.faulty_label = detail.faulty_label.or(top.first().copied());
            ok &= gl.is_some_and(|l| top.contains(&l));
        }
        Ok(ok)
    }
}

struct LabelSet {
    threshold: f64,
}

impl UsabilityPolicy for LabelSet {
    fn usable(&self, golden: &[Tensor], faulty: &[Tensor], detail: &mut OutcomeDetail) -> Result<bool> {
        let labels = |v: &[f32]| -> Vec<usize> {
            (0..v.len()).filter(|&i| v[i] as f64 >= self.threshold).collect()
        };
        let mut ok = true;
        for (g, f) in golden.iter().zip(faulty) {
            let (g, f) = (flat(g, "label-set")?, flat(f, "label-set")?);
            detail.golden_label = detail.golden_label.or(argmax(g));
            detail.faulty_label = detail.faulty_label.or(argmax(f));
            ok &= labels(g) == labels(f);
        }
        Ok(ok)
    }
}

/// Element-wise |Δ| ≤ ε over finite values. With ε = 0 any bit difference,
/// including `-0.0` against `+0.0`, is unusable.
struct Tolerance {
    epsilon: f64,
}

impl UsabilityPolicy for Tolerance {
    fn usable(&self, golden: &[Tensor], faulty: &[Tensor], _: &mut OutcomeDetail) -> Result<bool> {
        if self.epsilon == 0.0 {
            return Ok(false);
        }
        Ok(golden.iter().zip(faulty).all(|(g, f)| {
            g.data().iter().zip(f.data()).all(|(a, b)| {
                a.to_bits() == b.to_bits()
                    || (a.is_finite()
                        && b.is_finite()
                        && (*b as f64 - *a as f64).abs() <= self.epsilon)
            })
        }))
    }
}

/// Mismatch count, largest finite |Δ| and non-finite count.
pub fn compare_outputs(golden: &[Tensor], faulty: &[Tensor]) -> Result<OutcomeDetail> {
    if golden.len() != faulty.len() {
        return Err(Error::Policy(format!(
            "{} golden outputs but {} faulty",
            golden.len(),
            faulty.len()
        )));
    }
    let mut d = OutcomeDetail::default();
    for (g, f) in golden.iter().zip(faulty) {
        if g.shape() != f.shape() {
            return Err(Error::ShapeMismatch {
                node: "output".into(),
                expected: g.shape().to_vec(),
                actual: f.shape().to_vec(),
            });
        }
        for (a, b) in g.data().iter().zip(f.data()) {
            d.non_finite += !b.is_finite() as u64;
            if a.to_bits() != b.to_bits() {
                d.mismatches += 1;
                if a.is_finite() && b.is_finite() {
                    let delta = (*b as f64 - *a as f64).abs();
                    d.max_abs_diff = Some(d.max_abs_diff.map_or(delta, |m| m.max(delta)));
                }
            }
        }
    }
    Ok(d)
}

/// `Masked` on bit equality; otherwise the policy's verdict.
pub fn classify_output(
    golden: &[Tensor],
    faulty: &[Tensor],
    policy: &dyn UsabilityPolicy,
) -> Result<Classification> {
    let mut detail = compare_outputs(golden, faulty)?;
    let outcome = if detail.mismatches == 0 {
        Outcome::Masked
    } else if policy.usable(golden, faulty, &mut detail)? {
        Outcome::Usable
    } else {
        Outcome::Unusable
    };
    Ok(Classification { outcome, detail })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(v: &[f32]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    fn build(s: &str) -> Box<dyn UsabilityPolicy> {
        PolicyRegistry::with_builtins().build(&s.parse().unwrap()).unwrap()
    }

    fn outcome(g: &[f32], f: &[f32], policy: &str) -> Outcome {
        classify_output(&[probs(g)], &[probs(f)], build(policy).as_ref())
            .unwrap()
            .outcome
    }

    #[test]
    fn identical_is_masked_under_every_policy() {
        let g = [0.1, 0.2, 0.7];
        for p in ["top1", "topk(2)", "label-set(0.5)", "tolerance(0)"] {
            assert_eq!(outcome(&g, &g, p), Outcome::Masked);
        }
    }

    #[test]
    fn same_argmax_is_usable_under_top1() {
        let g = [0.05, 0.05, 0.1, 0.7, 0.1];
        let f = [0.1, 0.05, 0.1, 0.6, 0.15];
        assert_eq!(outcome(&g, &f, "top1"), Outcome::Usable);
        let f = [0.1, 0.05, 0.1, 0.3, 0.45];
        assert_eq!(outcome(&g, &f, "top1"), Outcome::Unusable);
        assert_eq!(outcome(&g, &f, "topk(2)"), Outcome::Usable);
    }

    #[test]
    fn missing_label_is_unusable() {
        // Classes 0 and 1 stand for two detected objects.
        let g = [0.9, 0.8, 0.1];
        let f = [0.9, 0.3, 0.1];
        assert_eq!(outcome(&g, &f, "label-set(0.5)"), Outcome::Unusable);
        let f = [0.7, 0.6, 0.2];
        assert_eq!(outcome(&g, &f, "label-set(0.5)"), Outcome::Usable);
    }

    #[test]
    fn nan_head_is_unusable() {
        let g = [0.1, 0.9];
        let f = [f32::NAN, 0.9];
        assert_eq!(outcome(&g, &f, "top1"), Outcome::Unusable);
        assert_eq!(outcome(&g, &f, "topk(2)"), Outcome::Unusable);
    }

    #[test]
    fn tolerance_zero_is_bit_exact() {
        assert_eq!(outcome(&[0.0, 1.0], &[-0.0, 1.0], "tolerance(0)"), Outcome::Unusable);
        assert_eq!(outcome(&[0.0, 1.0], &[-0.0, 1.0], "tolerance(1e-6)"), Outcome::Usable);
        assert_eq!(outcome(&[0.0, 1.0], &[0.5, 1.0], "tolerance(0.25)"), Outcome::Unusable);
    }

    #[test]
    fn detail_metrics() {
        let c = classify_output(
            &[probs(&[1.0, 2.0, 3.0])],
            &[probs(&[1.0, 2.5, f32::INFINITY])],
            build("tolerance(1)").as_ref(),
        )
        .unwrap();
        assert_eq!(c.outcome, Outcome::Unusable);
        assert_eq!(c.detail.mismatches, 2);
        assert_eq!(c.detail.non_finite, 1);
        assert_eq!(c.detail.max_abs_diff, Some(0.5));
    }

    #[test]
    fn errors() {
        let reg = PolicyRegistry::with_builtins();
        assert!(matches!(reg.build(&PolicySpec::new("iou", Value::Null)), Err(Error::Policy(_))));
        assert!(reg.build(&"topk(0)".parse().unwrap()).is_err());
        assert!(reg.build(&PolicySpec::new("top1", json!({"k": 3}))).is_err());
        let t = Tensor::zeros(&[2, 2, 2]);
        let mut u = t.clone();
        u.data_mut()[0] = 1.0;
        let r = classify_output(&[t], &[u], build("top1").as_ref());
        assert!(matches!(r, Err(Error::Policy(_))));
        let r = classify_output(&[probs(&[1.0])], &[probs(&[1.0, 2.0])], build("top1").as_ref());
        assert!(r.is_err());
    }

    #[test]
    fn custom_policy_registers_like_builtins() {
        struct Never;
        impl UsabilityPolicy for Never {
            fn usable(&self, _: &[Tensor], _: &[Tensor], _: &mut OutcomeDetail) -> Result<bool> {
                Ok(false)
            }
        }
        let mut reg = PolicyRegistry::with_builtins();
        reg.register("never", |_| Ok(Box::new(Never)));
        let p = reg.build(&PolicySpec::new("never", Value::Null)).unwrap();
        let c = classify_output(&[probs(&[0.0, 1.0])], &[probs(&[0.0, 0.9])], p.as_ref()).unwrap();
        assert_eq!(c.outcome, Outcome::Unusable);
    }

    #[test]
    fn spec_shorthand_round_trips() {
        let p: PolicySpec = "topk(3)".parse().unwrap();
        assert_eq!(p, PolicySpec::new("topk", json!({"k": 3})));
        assert_eq!(p.to_string(), r#"topk({"k":3})"#);
        assert_eq!(p.to_string().parse::<PolicySpec>().unwrap(), p);
        assert_eq!("top1".parse::<PolicySpec>().unwrap(), PolicySpec::default());
    }

    #[test]
    fn spec_deserializes_from_both_forms() {
        let short: PolicySpec = serde_json::from_str("\"topk(3)\"").unwrap();
        let full: PolicySpec = serde_json::from_str(r#"{"id":"topk","params":{"k":3}}"#).unwrap();
        assert_eq!(short, full);
        let back: PolicySpec = serde_json::from_str(&serde_json::to_string(&full).unwrap()).unwrap();
        assert_eq!(back, full);
        assert!(serde_json::from_str::<PolicySpec>(r#"{"id":"top1","k":1}"#).is_err());
    }
}
