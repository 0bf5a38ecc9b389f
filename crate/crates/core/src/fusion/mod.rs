//! Graph rewrites that reduce the number of table lookups.
//!
//! Basic fusion preserves semantics: affine Maps move in front of the
//! SumReduce that feeds them and consecutive Maps merge into one. Advanced
//! fusion changes the model: activations can be removed so the whole network
//! collapses to one affine lookup per input segment, or the network can be
//! restructured into additive per-segment sub-models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lower::{MapFunction, NodeKind, PrimitiveGraph, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    None,
    Basic,
    AdvancedLinear,
    AdvancedNam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvancedMode {
    DropNonlinear,
    Nam,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionReport {
    pub mode: FusionMode,
    pub lookups_before: usize,
    pub lookups_after: usize,
    pub passes: Vec<String>,
}

/// A Map reading directly from a SumReduce it alone consumes, with an affine
/// function. Under `strict`, every reduce input must also be a Map consumed
/// only by that reduce, so the rewrite is guaranteed to merge away.
fn reorder_candidate(g: &PrimitiveGraph, strict: bool) -> Option<usize> {
    let consumers = g.consumers();
    g.nodes.iter().enumerate().find_map(|(id, node)| {
        let NodeKind::Map {
            input: Source::Node(r),
            func,
            ..
        } = &node.kind
        else {
            return None;
        };
        let NodeKind::SumReduce { inputs, .. } = &g.nodes[*r].kind else {
            return None;
        };
        if consumers[*r] != [id] || g.is_output(*r) || !func.is_affine() {
            return None;
        }
        if strict {
            let fusable = inputs.iter().all(|s| match s {
                Source::Node(p) => {
                    g.nodes[*p].is_map() && consumers[*p] == [*r] && !g.is_output(*p)
                }
                _ => false,
            });
            if !fusable {
                return None;
            }
        }
        Some(id)
    })
}

fn reorder_at(g: &mut PrimitiveGraph, id: usize) {
    let NodeKind::Map {
        input: Source::Node(r),
        func,
        out_len,
    } = g.nodes[id].kind.clone()
    else {
        unreachable!("reorder target is a map over a reduce")
    };
    let NodeKind::SumReduce { inputs, .. } = g.nodes[r].kind.clone() else {
        unreachable!("reorder target reads a reduce")
    };
    let (weight, offset) = func.as_affine().expect("affine map");
    let provenance = g.nodes[id].provenance.clone();
    let mut branches = Vec::with_capacity(inputs.len());
    for (i, s) in inputs.into_iter().enumerate() {
        // The constant term goes to the first branch only, so the sum adds it once.
        let c = if i == 0 {
            offset.clone()
        } else {
            vec![0.0; offset.len()]
        };
        branches.push(Source::Node(g.push(
            NodeKind::Map {
                input: s,
                func: MapFunction::Affine {
                    weight: weight.clone(),
                    offset: c,
                },
                out_len,
            },
            provenance.clone(),
        )));
    }
    let mut prov = g.nodes[r].provenance.clone();
    for p in provenance {
        if !prov.contains(&p) {
            prov.push(p);
        }
    }
    g.nodes[id].kind = NodeKind::SumReduce {
        inputs: branches,
        len: out_len,
    };
    g.nodes[id].provenance = prov;
    g.compact();
}

/// Moves every affine Map that follows a SumReduce onto the reduce's
/// branches.
pub fn reorder_linear(graph: &PrimitiveGraph) -> PrimitiveGraph {
    let mut g = graph.clone();
    while let Some(id) = reorder_candidate(&g, false) {
        reorder_at(&mut g, id);
    }
    g
}

fn merge_candidate(g: &PrimitiveGraph) -> Option<usize> {
    let consumers = g.consumers();
    g.nodes.iter().enumerate().find_map(|(id, node)| match &node.kind {
        NodeKind::Map {
            input: Source::Node(p),
            ..
        } if g.nodes[*p].is_map() && consumers[*p] == [id] && !g.is_output(*p) => Some(id),
        _ => None,
    })
}

/// Merges chains `Map(f) -> Map(g)` into `Map(g ∘ f)` until none remain.
pub fn merge_maps(graph: &PrimitiveGraph) -> PrimitiveGraph {
    let mut g = graph.clone();
    while let Some(id) = merge_candidate(&g) {
        let NodeKind::Map {
            input: Source::Node(p),
            func: outer,
            out_len,
        } = g.nodes[id].kind.clone()
        else {
            unreachable!()
        };
        let NodeKind::Map {
            input: inner_input,
            func: inner,
            ..
        } = g.nodes[p].kind.clone()
        else {
            unreachable!()
        };
        let mut prov = g.nodes[p].provenance.clone();
        for name in &g.nodes[id].provenance {
            if !prov.contains(name) {
                prov.push(name.clone());
            }
        }
        g.nodes[id].kind = NodeKind::Map {
            input: inner_input,
            func: inner.then(outer),
            out_len,
        };
        g.nodes[id].provenance = prov;
        // The absorbed map has no consumer left; compaction drops it.
        g.compact();
    }
    g
}

/// True when basic fusion has something to merge or reorder; each such
/// site removes at least one lookup.
pub fn has_fusable_pattern(graph: &PrimitiveGraph) -> bool {
    merge_candidate(graph).is_some() || reorder_candidate(graph, true).is_some()
}

/// Alternates guarded reordering and merging to a fixpoint.
pub fn fuse_basic(graph: &PrimitiveGraph) -> (PrimitiveGraph, FusionReport) {
    let before = graph.map_count();
    let mut g = graph.clone();
    let mut passes = Vec::new();
    loop {
        let merged = merge_maps(&g);
        if merged != g {
            passes.push("merge_maps".to_string());
            g = merged;
        }
        match reorder_candidate(&g, true) {
            Some(id) => {
                reorder_at(&mut g, id);
                passes.push("reorder_linear".to_string());
            }
            None => break,
        }
    }
    let report = FusionReport {
        mode: FusionMode::Basic,
        lookups_before: before,
        lookups_after: g.map_count(),
        passes,
    };
    (g, report)
}

/// Index lists of the input consumed by the graph's single entry point: one
/// Partition over the input alone, or a single primitive reading the whole
/// input.
pub fn input_segments(g: &PrimitiveGraph) -> Result<Vec<Vec<usize>>> {
    let readers: Vec<usize> = (0..g.nodes.len())
        .filter(|&i| g.nodes[i].sources().contains(&Source::Input))
        .collect();
    if g.outputs.contains(&Source::Input) {
        return Err(Error::UnsupportedTopology("graph output reads the raw input".into()));
    }
    match readers.as_slice() {
        [one] => match &g.nodes[*one].kind {
            NodeKind::Partition { sources, segments } if sources == &[Source::Input] => {
                Ok(segments.clone())
            }
            NodeKind::Partition { .. } => Err(Error::UnsupportedTopology(
                "input partition mixes the input with other values".into(),
            )),
            _ => Ok(vec![(0..g.input_len).collect()]),
        },
        [] => Err(Error::UnsupportedTopology("graph does not read its input".into())),
        _ => Err(Error::UnsupportedTopology(format!(
            "input is consumed by {} primitives, not one partition",
            readers.len()
        ))),
    }
}

/// Builds `Partition(input) -> Map_i -> SumReduce` with the given per-segment
/// functions.
fn additive_graph(input_len: usize, segments: &[Vec<usize>], funcs: Vec<MapFunction>, out_len: usize, provenance: &[String]) -> PrimitiveGraph {
    let mut g = PrimitiveGraph::new(input_len);
    let prov = provenance.to_vec();
    let inputs: Vec<Source> = if segments.len() == 1 && segments[0] == (0..input_len).collect::<Vec<_>>() {
        vec![Source::Input]
    } else {
        let p = g.push(
            NodeKind::Partition {
                sources: vec![Source::Input],
                segments: segments.to_vec(),
            },
            prov.clone(),
        );
        (0..segments.len()).map(|i| Source::Segment(p, i)).collect()
    };
    let maps: Vec<Source> = inputs
        .into_iter()
        .zip(funcs)
        .map(|(s, func)| {
            Source::Node(g.push(
                NodeKind::Map {
                    input: s,
                    func,
                    out_len,
                },
                prov.clone(),
            ))
        })
        .collect();
    let r = g.push(NodeKind::SumReduce { inputs: maps, len: out_len }, prov);
    g.outputs = vec![Source::Node(r)];
    g
}

fn all_provenance(g: &PrimitiveGraph) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for n in &g.nodes {
        for p in &n.provenance {
            if !out.contains(p) {
                out.push(p.clone());
            }
        }
    }
    out
}

/// Architecture-changing fusion; apply before fitting tables.
pub fn fuse_advanced(graph: &PrimitiveGraph, mode: AdvancedMode) -> Result<(PrimitiveGraph, FusionReport)> {
    let before = graph.map_count();
    let segments = input_segments(graph)?;
    let out_len = graph.output_len();
    let prov = all_provenance(graph);
    let (g, passes, mode) = match mode {
        AdvancedMode::DropNonlinear => {
            let mut linear = graph.clone();
            for id in 0..linear.nodes.len() {
                let in_len = match &linear.nodes[id].kind {
                    NodeKind::Map { input, .. } => linear.source_len(*input),
                    _ => continue,
                };
                if let NodeKind::Map { func, .. } = &mut linear.nodes[id].kind {
                    let stripped = func.without_activations()?;
                    *func = if stripped.is_affine() {
                        stripped
                    } else {
                        MapFunction::identity(in_len)
                    };
                }
            }
            // The graph is now affine: probe the constant and every column.
            let c = linear.eval(&vec![0.0; linear.input_len])?;
            let mut cols = Vec::with_capacity(linear.input_len);
            let mut e = vec![0.0; linear.input_len];
            for j in 0..linear.input_len {
                e[j] = 1.0;
                let y = linear.eval(&e)?;
                cols.push(y.iter().zip(&c).map(|(a, b)| a - b).collect::<Vec<f64>>());
                e[j] = 0.0;
            }
            let funcs = segments
                .iter()
                .enumerate()
                .map(|(i, seg)| MapFunction::Affine {
                    weight: (0..out_len)
                        .map(|o| seg.iter().map(|&j| cols[j][o]).collect())
                        .collect(),
                    offset: if i == 0 { c.clone() } else { vec![0.0; out_len] },
                })
                .collect();
            let collapsed = additive_graph(graph.input_len, &segments, funcs, out_len, &prov);
            let (fused, report) = fuse_basic(&collapsed);
            let mut passes = vec!["strip_activations".to_string(), "collapse_affine".to_string()];
            passes.extend(report.passes);
            (fused, passes, FusionMode::AdvancedLinear)
        }
        AdvancedMode::Nam => {
            let k = segments.len() as f64;
            let g0 = graph.eval(&vec![0.0; graph.input_len])?;
            let offset: Vec<f64> = g0.iter().map(|v| -v * (k - 1.0) / k).collect();
            let funcs = segments
                .iter()
                .map(|seg| MapFunction::Submodel {
                    graph: Box::new(graph.clone()),
                    positions: seg.clone(),
                    offset: offset.clone(),
                })
                .collect();
            let g = additive_graph(graph.input_len, &segments, funcs, out_len, &prov);
            (g, vec!["additive_restructure".to_string()], FusionMode::AdvancedNam)
        }
    };
    g.check()?;
    let report = FusionReport {
        mode,
        lookups_before: before,
        lookups_after: g.map_count(),
        passes,
    };
    Ok((g, report))
}
