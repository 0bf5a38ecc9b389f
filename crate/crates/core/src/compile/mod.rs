//! Quantization of a fused primitive graph: fixed-point formats for every
//! value, a lookup table for every Map, and a direct integer evaluator that
//! serves as the reference for the scheduled pipeline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuzzy::{fit_tree, refine_centroids, ClusterFitConfig};
use crate::lower::{Base, NodeKind, PrimitiveGraph, Source};
use crate::model::{widen, Range, DEFAULT_MARGIN};
use crate::tables::{
    align, build_exact_table, build_fuzzy_table, choose_fixed_point, lane_bound, KeyField,
    KeySpec, MappingTable, QuantSpec, TableKind, DEFAULT_EXACT_KEY_CAP, DEFAULT_KEY_BITS,
    DEFAULT_RULE_CAP, DEFAULT_VALUE_BITS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableStrategy {
    /// Exact when the table fits the exact caps, fuzzy otherwise.
    Auto,
    Exact,
    /// Fuzzy for every Map that does not take integer indices.
    Fuzzy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub value_bits: u32,
    pub key_bits: u32,
    pub margin: f64,
    pub strategy: TableStrategy,
    pub exact_key_cap: u32,
    /// Largest exact table, in payload bits, that `Auto` accepts.
    pub exact_sram_cap: u64,
    pub rule_cap: usize,
    pub default_tree: ClusterFitConfig,
    /// Tree settings for Maps originating from the named layers.
    pub trees: BTreeMap<String, ClusterFitConfig>,
    /// Re-fit fuzzy centroids on the inputs the quantized pipeline produces.
    pub refine: bool,
    /// Input elements sharing a format with period `n` (packet channels in
    /// windowed inputs, so stored packets can be reused across windows).
    pub input_period: Option<usize>,
    /// Cap on points used to fit each tree.
    pub max_fit_points: usize,
    /// Per-element input ranges the formats must cover in addition to the
    /// observed ones (token inputs, whose full index domain may not appear
    /// in the data).
    pub input_ranges: Option<Vec<Range>>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            value_bits: DEFAULT_VALUE_BITS,
            key_bits: DEFAULT_KEY_BITS,
            margin: DEFAULT_MARGIN,
            strategy: TableStrategy::Auto,
            exact_key_cap: DEFAULT_EXACT_KEY_CAP,
            exact_sram_cap: 1 << 20,
            rule_cap: DEFAULT_RULE_CAP,
            default_tree: ClusterFitConfig::default(),
            trees: BTreeMap::new(),
            refine: true,
            input_period: None,
            max_fit_points: 4000,
            input_ranges: None,
        }
    }
}

impl QuantConfig {
    fn tree_for(&self, provenance: &[String]) -> ClusterFitConfig {
        provenance
            .iter()
            .find_map(|p| self.trees.get(p).copied())
            .unwrap_or(self.default_tree)
    }
}

/// Observed per-element ranges of every graph value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRanges {
    pub input: Vec<Range>,
    pub nodes: Vec<Vec<Range>>,
}

impl GraphRanges {
    pub fn of(&self, base: Base) -> &[Range] {
        match base {
            Base::Input => &self.input,
            Base::Node(id) => &self.nodes[id],
        }
    }
}

/// Runs the graph at full precision over `rows` and records value ranges.
pub fn graph_ranges(graph: &PrimitiveGraph, rows: &[Vec<f64>]) -> Result<GraphRanges> {
    if rows.is_empty() {
        return Err(Error::Argument("range inference needs a non-empty dataset".into()));
    }
    let mut input: Vec<Range> = rows[0].iter().map(|&v| Range::point(v)).collect();
    let mut nodes: Vec<Vec<Range>> = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let t = graph.trace(row)?;
        if i == 0 {
            nodes = t.values.iter().map(|v| v.iter().map(|&x| Range::point(x)).collect()).collect();
        }
        for (r, &v) in input.iter_mut().zip(row) {
            r.include(v);
        }
        for (rs, vs) in nodes.iter_mut().zip(&t.values) {
            for (r, &v) in rs.iter_mut().zip(vs) {
                r.include(v);
            }
        }
    }
    Ok(GraphRanges { input, nodes })
}

/// A primitive graph with fixed-point formats and tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledGraph {
    pub graph: PrimitiveGraph,
    pub input_q: Vec<QuantSpec>,
    /// Output formats of every Map and SumReduce; empty for Partitions.
    pub node_q: Vec<Vec<QuantSpec>>,
    /// Widened ranges the formats were chosen from.
    pub ranges: GraphRanges,
    /// One table per Map node, in node order.
    pub tables: Vec<MappingTable>,
}

/// Integer values of every node for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTrace {
    pub input: Vec<i64>,
    pub values: Vec<Vec<i64>>,
    pub output: Vec<i64>,
}

impl CompiledGraph {
    /// Builds a compiled graph from hand-chosen formats and tables. Ranges
    /// are taken to be the representable ranges of the formats.
    pub fn assemble(
        graph: PrimitiveGraph,
        input_q: Vec<QuantSpec>,
        node_q: Vec<Vec<QuantSpec>>,
        tables: Vec<MappingTable>,
    ) -> Result<CompiledGraph> {
        graph.check()?;
        if input_q.len() != graph.input_len || node_q.len() != graph.nodes.len() {
            return Err(Error::Argument("format lists do not match the graph".into()));
        }
        for (id, node) in graph.nodes.iter().enumerate() {
            let expect = if matches!(node.kind, NodeKind::Partition { .. }) { 0 } else { graph.node_len(id) };
            if node_q[id].len() != expect {
                return Err(Error::Argument(format!("node {id} needs {expect} formats")));
            }
            if node.is_map() && !tables.iter().any(|t| t.node == id) {
                return Err(Error::Argument(format!("map {id} has no table")));
            }
        }
        let ranges = GraphRanges {
            input: input_q.iter().map(QuantSpec::representable).collect(),
            nodes: node_q.iter().map(|qs| qs.iter().map(QuantSpec::representable).collect()).collect(),
        };
        Ok(CompiledGraph {
            graph,
            input_q,
            node_q,
            ranges,
            tables,
        })
    }

    pub fn table_for(&self, node: usize) -> Option<&MappingTable> {
        self.tables.iter().find(|t| t.node == node)
    }

    pub fn base_q(&self, base: Base) -> &[QuantSpec] {
        match base {
            Base::Input => &self.input_q,
            Base::Node(id) => &self.node_q[id],
        }
    }

    /// Format of element `i` of `source`.
    pub fn source_q(&self, source: Source, i: usize) -> QuantSpec {
        let (b, j) = self.graph.resolve(source, i);
        self.base_q(b)[j]
    }

    pub fn output_q(&self) -> Vec<QuantSpec> {
        self.graph
            .outputs
            .iter()
            .flat_map(|&s| (0..self.graph.source_len(s)).map(move |i| (s, i)))
            .map(|(s, i)| self.source_q(s, i))
            .collect()
    }

    pub fn quantize_input(&self, x: &[f64]) -> Vec<i64> {
        x.iter().zip(&self.input_q).map(|(&v, q)| q.quantize(v)).collect()
    }

    pub fn dequantize_output(&self, raw: &[i64]) -> Vec<f64> {
        raw.iter().zip(self.output_q()).map(|(&r, q)| q.dequantize(r)).collect()
    }

    fn read(&self, t: &QuantTrace, s: Source, i: usize) -> i64 {
        match self.graph.resolve(s, i) {
            (Base::Input, j) => t.input[j],
            (Base::Node(id), j) => t.values[id][j],
        }
    }

    /// Integer-only evaluation straight from the graph. Fuzzy tables are
    /// resolved by walking the tree on the extracted keys, not by matching
    /// ternary rules.
    pub fn trace_quantized(&self, raw: &[i64]) -> Result<QuantTrace> {
        if raw.len() != self.graph.input_len {
            return Err(Error::Argument(format!(
                "input has {} values, program expects {}",
                raw.len(),
                self.graph.input_len
            )));
        }
        let mut t = QuantTrace {
            input: raw.to_vec(),
            values: vec![Vec::new(); self.graph.nodes.len()],
            output: Vec::new(),
        };
        for (id, node) in self.graph.nodes.iter().enumerate() {
            match &node.kind {
                NodeKind::Partition { .. } => {}
                NodeKind::Map { input, .. } => {
                    let table = self
                        .table_for(id)
                        .ok_or_else(|| Error::SimFault(format!("map {id} has no table")))?;
                    let keys: Vec<u64> = table
                        .key
                        .iter()
                        .enumerate()
                        .map(|(j, f)| f.extract(self.read(&t, *input, j)))
                        .collect();
                    let row = match table.kind {
                        TableKind::Exact => table.lookup(&keys).map(<[i64]>::to_vec),
                        TableKind::Ternary => table.route(&keys).map(|leaf| table.rows[leaf].clone()),
                    };
                    t.values[id] =
                        row.ok_or_else(|| Error::SimFault(format!("map {id}: key {keys:?} unmatched")))?;
                }
                NodeKind::SumReduce { inputs, len } => {
                    let bound = lane_bound(inputs.len());
                    let out = &self.node_q[id];
                    t.values[id] = (0..*len)
                        .map(|e| {
                            let sum: i64 = inputs
                                .iter()
                                .map(|&s| {
                                    let q = self.source_q(s, e);
                                    align(self.read(&t, s, e), q.frac, out[e].frac).clamp(-bound, bound)
                                })
                                .sum();
                            out[e].saturate(sum)
                        })
                        .collect();
                }
            }
        }
        let outputs = self.graph.outputs.clone();
        t.output = outputs
            .iter()
            .flat_map(|&s| (0..self.graph.source_len(s)).map(move |i| (s, i)))
            .map(|(s, i)| self.read(&t, s, i))
            .collect();
        Ok(t)
    }

    pub fn eval_quantized(&self, raw: &[i64]) -> Result<Vec<i64>> {
        Ok(self.trace_quantized(raw)?.output)
    }

    /// Quantize, evaluate, dequantize.
    pub fn infer(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.dequantize_output(&self.eval_quantized(&self.quantize_input(x))?))
    }

    /// Dequantized input vector of Map `id` in a quantized trace.
    fn map_input(&self, t: &QuantTrace, id: usize) -> Vec<f64> {
        let NodeKind::Map { input, .. } = &self.graph.nodes[id].kind else {
            return Vec::new();
        };
        (0..self.graph.source_len(*input))
            .map(|j| self.source_q(*input, j).dequantize(self.read(t, *input, j)))
            .collect()
    }

    pub fn fuzzy_count(&self) -> usize {
        self.tables.iter().filter(|t| t.kind == TableKind::Ternary).count()
    }
}

fn pick_formats(ranges: &[Range], margin: f64, bits: u32) -> (Vec<Range>, Vec<QuantSpec>) {
    let wide: Vec<Range> = ranges.iter().map(|&r| widen(r, margin)).collect();
    let q = wide.iter().map(|&r| choose_fixed_point(r, bits)).collect();
    (wide, q)
}

/// Chooses formats from data, fits trees on each fuzzy Map's observed inputs
/// and builds all tables.
pub fn compile_graph(graph: &PrimitiveGraph, rows: &[Vec<f64>], config: &QuantConfig) -> Result<CompiledGraph> {
    graph.check()?;
    let observed = graph_ranges(graph, rows)?;
    let mut input_ranges = observed.input.clone();
    if let Some(period) = config.input_period.filter(|&p| p > 0) {
        for c in 0..period.min(input_ranges.len()) {
            let merged = input_ranges
                .iter()
                .skip(c)
                .step_by(period)
                .fold(input_ranges[c], |a, b| a.union(b));
            for r in input_ranges.iter_mut().skip(c).step_by(period) {
                *r = merged;
            }
        }
    }
    if let Some(extra) = &config.input_ranges {
        if extra.len() != input_ranges.len() {
            return Err(Error::Argument(format!(
                "{} input ranges given for {} inputs",
                extra.len(),
                input_ranges.len()
            )));
        }
        for (r, e) in input_ranges.iter_mut().zip(extra) {
            *r = r.union(e);
        }
    }
    let (input_wide, input_q) = pick_formats(&input_ranges, config.margin, config.value_bits);
    let mut node_wide = Vec::with_capacity(graph.nodes.len());
    let mut node_q = Vec::with_capacity(graph.nodes.len());
    for r in &observed.nodes {
        let (w, q) = pick_formats(r, config.margin, config.value_bits);
        node_wide.push(w);
        node_q.push(q);
    }
    let mut compiled = CompiledGraph {
        graph: graph.clone(),
        input_q,
        node_q,
        ranges: GraphRanges {
            input: input_wide,
            nodes: node_wide,
        },
        tables: Vec::new(),
    };

    // Full-precision Map inputs, collected only for Maps that go fuzzy.
    let plans: Vec<(usize, Vec<KeyField>, bool)> = graph
        .map_ids()
        .into_iter()
        .map(|id| {
            let (key, fuzzy) = plan_table(&compiled, id, config)?;
            Ok((id, key, fuzzy))
        })
        .collect::<Result<_>>()?;
    let fuzzy_ids: Vec<usize> = plans.iter().filter(|p| p.2).map(|p| p.0).collect();
    let stride = (rows.len() / config.max_fit_points.max(1)).max(1);
    let fit_rows: Vec<&Vec<f64>> = rows.iter().step_by(stride).collect();
    let mut points: BTreeMap<usize, Vec<Vec<f64>>> = fuzzy_ids.iter().map(|&id| (id, Vec::new())).collect();
    if !fuzzy_ids.is_empty() {
        for row in &fit_rows {
            let t = graph.trace(row)?;
            for &id in &fuzzy_ids {
                if let NodeKind::Map { input, .. } = &graph.nodes[id].kind {
                    points.get_mut(&id).unwrap().push(t.read(*input).to_vec());
                }
            }
        }
    }

    for (id, key, fuzzy) in plans {
        let NodeKind::Map { func, .. } = &graph.nodes[id].kind else {
            unreachable!()
        };
        let out = compiled.node_q[id].clone();
        let table = if fuzzy {
            let cfg = config.tree_for(&graph.nodes[id].provenance);
            let tree = fit_tree(&points[&id], cfg)?;
            build_fuzzy_table(id, func, &tree, key, out, config.rule_cap)?
        } else {
            build_exact_table(id, func, key, out, config.exact_key_cap)?
        };
        compiled.tables.push(table);
    }

    if config.refine && !fuzzy_ids.is_empty() {
        // Upstream tables are already final when each Map is refined.
        for &id in &fuzzy_ids {
            let mut pts = Vec::with_capacity(fit_rows.len());
            for row in &fit_rows {
                let t = compiled.trace_quantized(&compiled.quantize_input(row))?;
                pts.push(compiled.map_input(&t, id));
            }
            let pos = compiled.tables.iter().position(|t| t.node == id).unwrap();
            let table = &compiled.tables[pos];
            let tree = refine_centroids(table.tree.as_ref().unwrap(), &pts);
            let NodeKind::Map { func, .. } = &graph.nodes[id].kind else {
                unreachable!()
            };
            let rebuilt = build_fuzzy_table(id, func, &tree, table.key.clone(), table.out.clone(), config.rule_cap)?;
            compiled.tables[pos] = rebuilt;
        }
    }
    Ok(compiled)
}

/// Key fields for Map `id` and whether its table must be fuzzy.
fn plan_table(c: &CompiledGraph, id: usize, config: &QuantConfig) -> Result<(Vec<KeyField>, bool)> {
    let NodeKind::Map { input, func, out_len } = &c.graph.nodes[id].kind else {
        unreachable!()
    };
    let n = c.graph.source_len(*input);
    let index = func.takes_indices();
    let key: Vec<KeyField> = (0..n)
        .map(|j| {
            let (b, e) = c.graph.resolve(*input, j);
            let src = c.base_q(b)[e];
            match index {
                Some((lo, hi)) => KeyField {
                    spec: KeySpec::for_index(lo, hi),
                    src,
                    index_hi: Some(hi),
                },
                None => KeyField {
                    spec: KeySpec::for_range(c.ranges.of(b)[e], config.key_bits, src),
                    src,
                    index_hi: None,
                },
            }
        })
        .collect();
    let bits: u32 = key.iter().map(|k| k.spec.bits).sum();
    let payload = (*out_len as u64) * config.value_bits as u64;
    let fits = bits <= config.exact_key_cap
        && (1u64 << bits.min(63)).saturating_mul(payload) <= config.exact_sram_cap;
    let fuzzy = match (config.strategy, index.is_some()) {
        (_, true) => false,
        (TableStrategy::Exact, false) => false,
        (TableStrategy::Fuzzy, false) => true,
        (TableStrategy::Auto, false) => !fits,
    };
    if !fuzzy && bits > config.exact_key_cap {
        return Err(Error::TableTooLarge(format!(
            "map {id} ({}) needs a {bits}-bit exact key",
            func.name()
        )));
    }
    Ok((key, fuzzy))
}

#[cfg(test)]
mod tests;
