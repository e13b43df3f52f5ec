//! Dataflow graphs and their interpreter.
//!
//! A [`Graph`] is validated once at construction: references resolve, the
//! nodes are sorted topologically, and every output shape is inferred. After
//! that it is immutable and all execution entry points take `&self`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops::{OpKind, Operator};
use crate::tensor::{check_shape, hex, Tensor};

/// Named model inputs.
pub type Inputs = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: String,
    pub inputs: Vec<String>,
    pub op: Operator,
}

impl Node {
    pub fn new(id: impl Into<String>, op: Operator, inputs: &[&str]) -> Self {
        Node {
            id: id.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            op,
        }
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Input(usize),
    Node(usize),
}

#[derive(Debug)]
pub struct Graph {
    inputs: Vec<(String, Vec<usize>)>,
    nodes: Vec<Node>,
    ids: Arc<Vec<String>>,
    shapes: Vec<Vec<usize>>,
    sources: Vec<Vec<Source>>,
    index: HashMap<String, usize>,
    outputs: Vec<usize>,
}

impl Graph {
    /// Builds and validates a graph. `nodes` may be given in any order; the
    /// execution order is a topological sort that keeps declaration order
    /// among independent nodes.
    pub fn new(
        inputs: Vec<(String, Vec<usize>)>,
        nodes: Vec<Node>,
        outputs: Vec<String>,
    ) -> Result<Self> {
        let mut names: HashMap<&str, Source> = HashMap::new();
        for (i, (name, shape)) in inputs.iter().enumerate() {
            check_shape(shape)?;
            if names.insert(name, Source::Input(i)).is_some() {
                return Err(Error::malformed("graph", format!("duplicate name `{name}`")));
            }
        }
        for (i, n) in nodes.iter().enumerate() {
            if names.insert(&n.id, Source::Node(i)).is_some() {
                return Err(Error::malformed("graph", format!("duplicate name `{}`", n.id)));
            }
        }

        // Resolve references against declaration indices.
        let mut decl_sources = Vec::with_capacity(nodes.len());
        for n in &nodes {
            let srcs = n
                .inputs
                .iter()
                .map(|r| names.get(r.as_str()).copied().ok_or_else(|| Error::UnknownNode(r.clone())))
                .collect::<Result<Vec<_>>>()?;
            decl_sources.push(srcs);
        }

        // Kahn's algorithm, always taking the lowest ready declaration index.
        let mut indegree: Vec<usize> = decl_sources
            .iter()
            .map(|s| s.iter().filter(|x| matches!(x, Source::Node(_))).count())
            .collect();
        let mut consumers = vec![Vec::new(); nodes.len()];
        for (i, srcs) in decl_sources.iter().enumerate() {
            for s in srcs {
                if let Source::Node(j) = s {
                    consumers[*j].push(i);
                }
            }
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != nodes.len() {
            let stuck = (0..nodes.len()).find(|&i| indegree[i] > 0).unwrap_or(0);
            return Err(Error::Cycle(nodes[stuck].id.clone()));
        }

        let mut position = vec![0; nodes.len()];
        for (pos, &decl) in order.iter().enumerate() {
            position[decl] = pos;
        }
        let mut slots: Vec<Option<Node>> = nodes.into_iter().map(Some).collect();
        let mut sorted = Vec::with_capacity(order.len());
        let mut sources = Vec::with_capacity(order.len());
        for &decl in &order {
            sorted.push(slots[decl].take().expect("each node placed once"));
            sources.push(
                decl_sources[decl]
                    .iter()
                    .map(|s| match *s {
                        Source::Node(j) => Source::Node(position[j]),
                        other => other,
                    })
                    .collect::<Vec<_>>(),
            );
        }

        let index: HashMap<String, usize> = sorted
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();

        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(sorted.len());
        for (i, n) in sorted.iter().enumerate() {
            n.op.validate(&n.id)?;
            let in_shapes: Vec<&[usize]> = sources[i]
                .iter()
                .map(|s| match *s {
                    Source::Input(k) => inputs[k].1.as_slice(),
                    Source::Node(j) => shapes[j].as_slice(),
                })
                .collect();
            let shape = n.op.infer_shape(&n.id, &in_shapes)?;
            shapes.push(shape);
        }

        if outputs.is_empty() {
            return Err(Error::malformed("graph", "no outputs declared"));
        }
        let outputs = outputs
            .iter()
            .map(|o| index.get(o).copied().ok_or_else(|| Error::UnknownNode(o.clone())))
            .collect::<Result<Vec<_>>>()?;

        let ids = Arc::new(sorted.iter().map(|n| n.id.clone()).collect());
        Ok(Graph {
            inputs,
            nodes: sorted,
            ids,
            shapes,
            sources,
            index,
            outputs,
        })
    }

    /// Nodes in execution order.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn input_spec(&self) -> &[(String, Vec<usize>)] {
        &self.inputs
    }

    pub fn output_ids(&self) -> Vec<&str> {
        self.outputs.iter().map(|&i| self.nodes[i].id.as_str()).collect()
    }

    pub fn output_indices(&self) -> &[usize] {
        &self.outputs
    }

    /// Statically inferred output shape of node `i` (execution order).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn shape_of(&self, id: &str) -> Result<&[usize]> {
        Ok(&self.shapes[self.node_index(id)?])
    }

    /// Hex SHA-256 over structure, hyper-parameters and weights.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape) in &self.inputs {
            h.update(name.as_bytes());
            h.update(format!("{shape:?}").as_bytes());
        }
        for n in &self.nodes {
            h.update(n.id.as_bytes());
            h.update(n.kind().name().as_bytes());
            h.update(n.op.hyperparams().to_string().as_bytes());
            for i in &n.inputs {
                h.update(i.as_bytes());
            }
            for (name, w) in n.op.weights() {
                h.update(name.as_bytes());
                h.update(w.digest().as_bytes());
            }
        }
        for &o in &self.outputs {
            h.update(self.nodes[o].id.as_bytes());
        }
        hex(&h.finalize())
    }

    fn check_inputs<'a>(&self, inputs: &'a Inputs) -> Result<Vec<&'a Tensor>> {
        self.inputs
            .iter()
            .map(|(name, shape)| {
                let t = inputs
                    .get(name)
                    .ok_or_else(|| Error::MissingInput(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        node: name.clone(),
                        expected: shape.clone(),
                        actual: t.shape().to_vec(),
                    });
                }
                Ok(t)
            })
            .collect()
    }

    fn eval(&self, i: usize, inputs: &[&Tensor], values: &[Option<Arc<Tensor>>]) -> Result<Tensor> {
        let args: Vec<&Tensor> = self.sources[i]
            .iter()
            .map(|s| match *s {
                Source::Input(k) => inputs[k],
                Source::Node(j) => values[j]
                    .as_deref()
                    .expect("sources are evaluated before their consumers"),
            })
            .collect();
        self.nodes[i].op.apply(&self.nodes[i].id, &args)
    }

    /// Runs every node and returns the full trace.
    pub fn execute(&self, inputs: &Inputs) -> Result<Trace> {
        let ins = self.check_inputs(inputs)?;
        let mut values: Vec<Option<Arc<Tensor>>> = vec![None; self.nodes.len()];
        for i in 0..self.nodes.len() {
            values[i] = Some(Arc::new(self.eval(i, &ins, &values)?));
        }
        Ok(self.trace(values))
    }

    /// Runs only the ancestors of `site` and returns its output.
    pub fn execute_prefix(&self, inputs: &Inputs, site: usize) -> Result<Tensor> {
        let ins = self.check_inputs(inputs)?;
        let mut needed = vec![false; self.nodes.len()];
        needed[site] = true;
        for i in (0..=site).rev() {
            if needed[i] {
                for s in &self.sources[i] {
                    if let Source::Node(j) = *s {
                        needed[j] = true;
                    }
                }
            }
        }
        let mut values: Vec<Option<Arc<Tensor>>> = vec![None; self.nodes.len()];
        for i in 0..site {
            if needed[i] {
                values[i] = Some(Arc::new(self.eval(i, &ins, &values)?));
            }
        }
        self.eval(site, &ins, &values)
    }

    /// Final outputs only, in declaration order.
    pub fn execute_outputs(&self, inputs: &Inputs) -> Result<Vec<Tensor>> {
        let trace = self.execute(inputs)?;
        Ok(trace.outputs(self))
    }

    /// Re-executes the graph downstream of `start`, with `replaced` standing in
    /// for `start`'s output.
    ///
    /// Only `start` and its descendants are recomputed. Other values that the
    /// descendants read are served from `base` when given, and recomputed from
    /// `inputs` otherwise. With `base` the returned trace also carries every
    /// untouched value of `base`.
    pub fn execute_from(
        &self,
        start: &str,
        replaced: Tensor,
        inputs: &Inputs,
        base: Option<&Trace>,
    ) -> Result<Trace> {
        let s = self.node_index(start)?;
        self.execute_from_index(s, Arc::new(replaced), inputs, base)
    }

    pub fn execute_from_index(
        &self,
        start: usize,
        replaced: Arc<Tensor>,
        inputs: &Inputs,
        base: Option<&Trace>,
    ) -> Result<Trace> {
        if replaced.shape() != self.shapes[start].as_slice() {
            return Err(Error::ShapeMismatch {
                node: self.nodes[start].id.clone(),
                expected: self.shapes[start].clone(),
                actual: replaced.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let ins = self.check_inputs(inputs)?;

        let mut dirty = vec![false; n];
        dirty[start] = true;
        for i in start + 1..n {
            dirty[i] = self.sources[i]
                .iter()
                .any(|s| matches!(*s, Source::Node(j) if dirty[j]));
        }

        let from_base = |j: usize| base.and_then(|b| b.values.get(j).cloned().flatten());

        // Clean values the dirty region reads that the base cannot supply.
        let mut needed = vec![false; n];
        for i in (0..n).rev() {
            if (dirty[i] && i != start) || needed[i] {
                for src in &self.sources[i] {
                    if let Source::Node(j) = *src {
                        if !dirty[j] && from_base(j).is_none() {
                            needed[j] = true;
                        }
                    }
                }
            }
        }

        let mut values: Vec<Option<Arc<Tensor>>> = vec![None; n];
        for i in 0..n {
            if i == start {
                values[i] = Some(replaced.clone());
            } else if dirty[i] || needed[i] {
                for src in &self.sources[i] {
                    if let Source::Node(j) = *src {
                        if values[j].is_none() {
                            values[j] = from_base(j);
                        }
                    }
                }
                values[i] = Some(Arc::new(self.eval(i, &ins, &values)?));
            }
        }
        if base.is_some() {
            for (j, v) in values.iter_mut().enumerate() {
                if v.is_none() {
                    *v = from_base(j);
                }
            }
        }
        Ok(self.trace(values))
    }

    fn trace(&self, values: Vec<Option<Arc<Tensor>>>) -> Trace {
        Trace {
            ids: self.ids.clone(),
            values,
        }
    }
}

/// Node outputs produced by one execution, indexed in execution order.
#[derive(Clone, Debug)]
pub struct Trace {
    ids: Arc<Vec<String>>,
    values: Vec<Option<Arc<Tensor>>>,
}

impl Trace {
    pub fn get(&self, id: &str) -> Option<&Tensor> {
        let i = self.ids.iter().position(|x| x == id)?;
        self.at(i)
    }

    pub fn at(&self, i: usize) -> Option<&Tensor> {
        self.values.get(i).and_then(|v| v.as_deref())
    }

    pub fn shared(&self, i: usize) -> Option<Arc<Tensor>> {
        self.values.get(i).cloned().flatten()
    }

    /// Number of nodes with a value in this trace.
    pub fn len(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.ids
            .iter()
            .zip(&self.values)
            .filter_map(|(id, v)| v.as_deref().map(|t| (id.as_str(), t)))
    }

    /// The graph's declared outputs. Panics if one is absent from the trace.
    pub fn outputs(&self, graph: &Graph) -> Vec<Tensor> {
        graph
            .outputs
            .iter()
            .map(|&o| self.at(o).expect("output present in trace").clone())
            .collect()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.ids
            .iter()
            .zip(self.values)
            .filter_map(|(id, v)| v.map(|t| (id.clone(), Arc::unwrap_or_clone(t))))
            .collect()
    }
}
