//! On-disk model format.
//!
//! A model is a `model.json` manifest plus one raw weight file per named
//! weight (little-endian `f32`, row-major). Weight paths are relative to the
//! manifest's directory.
//!
//! ```json
//! {
//!   "inputs":  [{ "name": "image", "shape": [1, 28, 28] }],
//!   "outputs": ["prob"],
//!   "nodes": [
//!     { "id": "conv1", "kind": "Conv2D", "inputs": ["image"],
//!       "hyperparams": { "kernel": 5, "stride": 1, "padding": 2, "out_channels": 6 },
//!       "weights": { "weight": { "file": "conv1.weight.bin", "shape": [6, 1, 5, 5] } } }
//!   ]
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Node};
use crate::ops::{OpKind, Operator};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub inputs: Vec<InputSpec>,
    pub outputs: Vec<String>,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub kind: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub hyperparams: serde_json::Value,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub weights: BTreeMap<String, WeightRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightRef {
    pub file: PathBuf,
    pub shape: Vec<usize>,
}

pub fn load_model(manifest_path: &Path) -> Result<Graph> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::malformed(manifest_path.display().to_string(), e))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    build_graph(manifest, |w| Tensor::read_raw(&dir.join(&w.file), w.shape.clone()))
}

/// Builds a graph from a manifest, resolving weights through `load`.
pub fn build_graph(
    manifest: Manifest,
    mut load: impl FnMut(&WeightRef) -> Result<Tensor>,
) -> Result<Graph> {
    let mut nodes = Vec::with_capacity(manifest.nodes.len());
    for spec in manifest.nodes {
        let kind: OpKind = spec.kind.parse()?;
        let mut weights = BTreeMap::new();
        for (name, wref) in &spec.weights {
            weights.insert(name.clone(), load(wref)?);
        }
        let op = build_operator(&spec.id, kind, spec.hyperparams, weights)?;
        nodes.push(Node {
            id: spec.id,
            inputs: spec.inputs,
            op,
        });
    }
    let inputs = manifest
        .inputs
        .into_iter()
        .map(|i| (i.name, i.shape))
        .collect();
    Graph::new(inputs, nodes, manifest.outputs)
}

fn params<T: DeserializeOwned>(node: &str, kind: OpKind, v: serde_json::Value) -> Result<T> {
    serde_json::from_value(v)
        .map_err(|e| Error::node(node, format!("bad {kind} hyperparams: {e}")))
}

fn build_operator(
    node: &str,
    kind: OpKind,
    hyper: serde_json::Value,
    mut w: BTreeMap<String, Tensor>,
) -> Result<Operator> {
    let mut take = |name: &str| {
        w.remove(name)
            .ok_or_else(|| Error::node(node, format!("missing weight `{name}`")))
    };
    let op = match kind {
        OpKind::Conv2d => Operator::Conv2d {
            params: params(node, kind, hyper)?,
            weight: take("weight")?,
            bias: w.remove("bias"),
        },
        OpKind::Dense => Operator::Dense {
            params: params(node, kind, hyper)?,
            weight: take("weight")?,
            bias: w.remove("bias"),
        },
        OpKind::BatchNorm => Operator::BatchNorm {
            params: params(node, kind, hyper)?,
            mean: take("mean")?,
            variance: take("variance")?,
            gamma: take("gamma")?,
            beta: take("beta")?,
        },
        OpKind::BiasAdd => Operator::BiasAdd { bias: take("bias")? },
        OpKind::LeakyRelu => Operator::LeakyRelu(params(node, kind, hyper)?),
        OpKind::MaxPool => Operator::MaxPool(params(node, kind, hyper)?),
        OpKind::Add => Operator::Add,
        OpKind::Mul => Operator::Mul,
        OpKind::Div => Operator::Div,
        OpKind::Exp => Operator::Exp,
        OpKind::Sigmoid => Operator::Sigmoid,
        OpKind::Flatten => Operator::Flatten,
        OpKind::Softmax => Operator::Softmax,
    };
    if let Some(extra) = w.keys().next() {
        return Err(Error::node(node, format!("unexpected weight `{extra}` for {kind}")));
    }
    Ok(op)
}

/// Writes `model.json` and the weight files into `dir`, returning the
/// manifest path.
pub fn save_model(graph: &Graph, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut nodes = Vec::new();
    for n in graph.nodes() {
        let mut weights = BTreeMap::new();
        for (name, t) in n.op.weights() {
            let file = PathBuf::from(format!("{}.{name}.bin", n.id));
            t.write_raw(&dir.join(&file))?;
            weights.insert(
                name.to_string(),
                WeightRef {
                    file,
                    shape: t.shape().to_vec(),
                },
            );
        }
        nodes.push(NodeSpec {
            id: n.id.clone(),
            kind: n.kind().name().to_string(),
            inputs: n.inputs.clone(),
            hyperparams: n.op.hyperparams(),
            weights,
        });
    }
    let manifest = Manifest {
        inputs: graph
            .input_spec()
            .iter()
            .map(|(name, shape)| InputSpec {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
        outputs: graph.output_ids().iter().map(|s| s.to_string()).collect(),
        nodes,
    };
    let path = dir.join("model.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
