//! Primitive graphs of Partition / Map / SumReduce nodes and the lowering of
//! layer graphs into them.

mod func;
mod lowering;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub use func::{compose_affine, ElemOp, MapFunction, PairOp};
pub use lowering::{lower, lower_pool, lower_softmax, PartitionPolicy, PoolKind};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Where a primitive reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Input,
    Node(NodeId),
    Segment(NodeId, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    /// Splits the concatenation of `sources` into index-list segments.
    Partition {
        sources: Vec<Source>,
        segments: Vec<Vec<usize>>,
    },
    Map {
        input: Source,
        func: MapFunction,
        out_len: usize,
    },
    /// Element-wise sum of equally sized inputs.
    SumReduce { inputs: Vec<Source>, len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveNode {
    pub kind: NodeKind,
    /// Names of the layers this node was lowered from.
    pub provenance: Vec<String>,
}

impl PrimitiveNode {
    pub fn is_map(&self) -> bool {
        matches!(self.kind, NodeKind::Map { .. })
    }

    pub fn is_reduce(&self) -> bool {
        matches!(self.kind, NodeKind::SumReduce { .. })
    }

    pub fn sources(&self) -> Vec<Source> {
        match &self.kind {
            NodeKind::Partition { sources, .. } => sources.clone(),
            NodeKind::Map { input, .. } => vec![*input],
            NodeKind::SumReduce { inputs, .. } => inputs.clone(),
        }
    }

    fn sources_mut(&mut self) -> Vec<&mut Source> {
        match &mut self.kind {
            NodeKind::Partition { sources, .. } => sources.iter_mut().collect(),
            NodeKind::Map { input, .. } => vec![input],
            NodeKind::SumReduce { inputs, .. } => inputs.iter_mut().collect(),
        }
    }
}

/// Nodes are stored in topological order: every source refers to an earlier
/// node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveGraph {
    pub input_len: usize,
    pub nodes: Vec<PrimitiveNode>,
    /// Concatenated to form the graph output.
    pub outputs: Vec<Source>,
}

/// Values of every node for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub input: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub segments: Vec<Vec<Vec<f64>>>,
}

impl Trace {
    pub fn read(&self, s: Source) -> &[f64] {
        match s {
            Source::Input => &self.input,
            Source::Node(id) => &self.values[id],
            Source::Segment(id, i) => &self.segments[id][i],
        }
    }
}

/// A graph value that is not a Partition view: the input or a node output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Base {
    Input,
    Node(NodeId),
}

impl PrimitiveGraph {
    pub fn new(input_len: usize) -> PrimitiveGraph {
        PrimitiveGraph {
            input_len,
            nodes: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn push(&mut self, kind: NodeKind, provenance: Vec<String>) -> NodeId {
        self.nodes.push(PrimitiveNode { kind, provenance });
        self.nodes.len() - 1
    }

    pub fn node_len(&self, id: NodeId) -> usize {
        match &self.nodes[id].kind {
            NodeKind::Partition { segments, .. } => segments.iter().map(Vec::len).sum(),
            NodeKind::Map { out_len, .. } => *out_len,
            NodeKind::SumReduce { len, .. } => *len,
        }
    }

    pub fn source_len(&self, s: Source) -> usize {
        match s {
            Source::Input => self.input_len,
            Source::Node(id) => self.node_len(id),
            Source::Segment(id, i) => match &self.nodes[id].kind {
                NodeKind::Partition { segments, .. } => segments[i].len(),
                _ => 0,
            },
        }
    }

    pub fn output_len(&self) -> usize {
        self.outputs.iter().map(|&s| self.source_len(s)).sum()
    }

    pub fn map_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_map()).count()
    }

    pub fn reduce_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_reduce()).count()
    }

    pub fn map_ids(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_map()).collect()
    }

    /// Consumers of each node's output (or any of its segments).
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for s in n.sources() {
                if let Source::Node(p) | Source::Segment(p, _) = s {
                    if !out[p].contains(&i) {
                        out[p].push(i);
                    }
                }
            }
        }
        out
    }

    pub fn is_output(&self, id: NodeId) -> bool {
        self.outputs
            .iter()
            .any(|s| matches!(s, Source::Node(p) | Source::Segment(p, _) if *p == id))
    }

    /// Maps element `idx` of `s` back to the underlying non-partition value.
    pub fn resolve(&self, s: Source, idx: usize) -> (Base, usize) {
        match s {
            Source::Input => (Base::Input, idx),
            Source::Node(id) => match &self.nodes[id].kind {
                NodeKind::Partition { sources, .. } => self.resolve_concat(sources, idx),
                _ => (Base::Node(id), idx),
            },
            Source::Segment(id, seg) => match &self.nodes[id].kind {
                NodeKind::Partition { sources, segments } => {
                    self.resolve_concat(sources, segments[seg][idx])
                }
                _ => (Base::Node(id), idx),
            },
        }
    }

    fn resolve_concat(&self, sources: &[Source], mut idx: usize) -> (Base, usize) {
        for &s in sources {
            let n = self.source_len(s);
            if idx < n {
                return self.resolve(s, idx);
            }
            idx -= n;
        }
        panic!("index outside partition sources")
    }

    pub fn trace(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.input_len {
            return Err(Error::Argument(format!(
                "input has {} values, graph expects {}",
                input.len(),
                self.input_len
            )));
        }
        let mut t = Trace {
            input: input.to_vec(),
            values: vec![Vec::new(); self.nodes.len()],
            segments: vec![Vec::new(); self.nodes.len()],
        };
        for (id, node) in self.nodes.iter().enumerate() {
            match &node.kind {
                NodeKind::Partition { sources, segments } => {
                    let concat: Vec<f64> =
                        sources.iter().flat_map(|&s| t.read(s).to_vec()).collect();
                    t.segments[id] = segments
                        .iter()
                        .map(|seg| seg.iter().map(|&i| concat[i]).collect())
                        .collect();
                }
                NodeKind::Map { input, func, .. } => {
                    t.values[id] = func.eval(t.read(*input))?;
                }
                NodeKind::SumReduce { inputs, len } => {
                    let mut acc = vec![0.0; *len];
                    for &s in inputs {
                        for (a, v) in acc.iter_mut().zip(t.read(s)) {
                            *a += v;
                        }
                    }
                    t.values[id] = acc;
                }
            }
        }
        Ok(t)
    }

    /// Full-precision evaluation.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        let t = self.trace(input)?;
        Ok(self.outputs.iter().flat_map(|&s| t.read(s).to_vec()).collect())
    }

    /// Structural invariants: topological storage, disjoint covering
    /// partitions, equal-sized reduce inputs, consistent Map arities.
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(vec![msg]));
        for (id, node) in self.nodes.iter().enumerate() {
            for s in node.sources() {
                if let Source::Node(p) | Source::Segment(p, _) = s {
                    if p >= id {
                        return bad(format!("node {id} reads from later node {p}"));
                    }
                    if matches!(s, Source::Segment(..))
                        && !matches!(self.nodes[p].kind, NodeKind::Partition { .. })
                    {
                        return bad(format!("node {id} reads a segment of non-partition {p}"));
                    }
                }
            }
            match &node.kind {
                NodeKind::Partition { sources, segments } => {
                    let total: usize = sources.iter().map(|&s| self.source_len(s)).sum();
                    let mut seen = vec![false; total];
                    for &i in segments.iter().flatten() {
                        if i >= total || seen[i] {
                            return bad(format!("partition {id} segments overlap or overflow"));
                        }
                        seen[i] = true;
                    }
                    if seen.iter().any(|s| !s) || segments.iter().any(Vec::is_empty) {
                        return bad(format!("partition {id} segments do not cover its input"));
                    }
                }
                NodeKind::Map {
                    input,
                    func,
                    out_len,
                } => {
                    if func.out_len(self.source_len(*input)) != *out_len {
                        return bad(format!("map {id} output arity mismatch"));
                    }
                }
                NodeKind::SumReduce { inputs, len } => {
                    if inputs.is_empty() || inputs.iter().any(|&s| self.source_len(s) != *len) {
                        return bad(format!("sum-reduce {id} inputs differ in arity"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Drops nodes that do not reach an output and renumbers the rest in a
    /// deterministic topological order (lowest old id first).
    pub fn compact(&mut self) {
        let n = self.nodes.len();
        let mut live = vec![false; n];
        let mut stack: Vec<NodeId> = self
            .outputs
            .iter()
            .filter_map(|s| match s {
                Source::Node(p) | Source::Segment(p, _) => Some(*p),
                Source::Input => None,
            })
            .collect();
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut live[id], true) {
                continue;
            }
            for s in self.nodes[id].sources() {
                if let Source::Node(p) | Source::Segment(p, _) = s {
                    stack.push(p);
                }
            }
        }
        let mut indegree = vec![0usize; n];
        let mut consumers = vec![Vec::new(); n];
        for id in (0..n).filter(|&i| live[i]) {
            let parents: BTreeSet<NodeId> = self.nodes[id]
                .sources()
                .into_iter()
                .filter_map(|s| match s {
                    Source::Node(p) | Source::Segment(p, _) => Some(p),
                    Source::Input => None,
                })
                .collect();
            indegree[id] = parents.len();
            for p in parents {
                consumers[p].push(id);
            }
        }
        let mut ready: BTreeSet<NodeId> =
            (0..n).filter(|&i| live[i] && indegree[i] == 0).collect();
        let mut order = Vec::new();
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for &c in &consumers[id] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        let remap: HashMap<NodeId, NodeId> =
            order.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let fix = |s: &mut Source| match s {
            Source::Node(p) => *p = remap[p],
            Source::Segment(p, _) => *p = remap[p],
            Source::Input => {}
        };
        let mut nodes = Vec::with_capacity(order.len());
        for &old in &order {
            let mut node = self.nodes[old].clone();
            for s in node.sources_mut() {
                fix(s);
            }
            nodes.push(node);
        }
        self.nodes = nodes;
        for s in &mut self.outputs {
            fix(s);
        }
    }

    /// Distinct `(maps, reduces)` counts over every input-to-output path.
    pub fn path_profiles(&self) -> BTreeSet<(usize, usize)> {
        let mut at: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); self.nodes.len()];
        let input: BTreeSet<(usize, usize)> = [(0, 0)].into();
        let read = |at: &Vec<BTreeSet<(usize, usize)>>, s: Source| match s {
            Source::Input => input.clone(),
            Source::Node(p) | Source::Segment(p, _) => at[p].clone(),
        };
        for (id, node) in self.nodes.iter().enumerate() {
            let mut set = BTreeSet::new();
            for s in node.sources() {
                set.extend(read(&at, s));
            }
            at[id] = match node.kind {
                NodeKind::Map { .. } => set.into_iter().map(|(m, r)| (m + 1, r)).collect(),
                NodeKind::SumReduce { .. } => set.into_iter().map(|(m, r)| (m, r + 1)).collect(),
                NodeKind::Partition { .. } => set,
            };
        }
        let mut out = BTreeSet::new();
        for &s in &self.outputs {
            out.extend(read(&at, s));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
