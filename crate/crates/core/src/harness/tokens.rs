//! Packet tokenization for flows that store fuzzy indexes instead of raw
//! features: tree fitting, tokenizer tables, and the graph rewrite that
//! lets a raw-feature model read tokens.

use crate::error::{Error, Result};
use crate::fuzzy::{fit_tree, fuzzy_index, ClusterFitConfig, ClusterTree, TreeNode};
use crate::lower::{MapFunction, NodeKind, PrimitiveGraph, Source};
use crate::model::{widen, Range};
use crate::pipeline::Tokenizer;
use crate::tables::{build_index_table, choose_fixed_point, KeyField, KeySpec, QuantSpec};

use super::dsl::{StreamDecl, TokenGranularity};

/// Fitted tokenizer trees. Token `i` of a packet is
/// `offsets[i] + fuzzy_index(trees[i], features[features_of[i]])`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTrees {
    pub trees: Vec<ClusterTree>,
    pub features_of: Vec<Vec<usize>>,
    pub offsets: Vec<usize>,
}

impl TokenTrees {
    pub fn fit(packet_features: &[Vec<f64>], decl: &StreamDecl, min_leaf: usize) -> Result<TokenTrees> {
        let c = decl.features.len();
        let groups: Vec<Vec<usize>> = match decl.tokens {
            TokenGranularity::PerPacket => vec![(0..c).collect()],
            TokenGranularity::PerFeature => (0..c).map(|f| vec![f]).collect(),
        };
        let cfg = ClusterFitConfig {
            depth: decl.token_depth,
            min_leaf: min_leaf.max(1),
        };
        let mut trees = Vec::new();
        let mut offsets = Vec::new();
        let mut next = 0;
        for g in &groups {
            let pts: Vec<Vec<f64>> = packet_features.iter().map(|p| g.iter().map(|&f| p[f]).collect()).collect();
            // Split on standardized features so large-valued features do not
            // dominate the SSE, then map the tree back to feature units.
            let (mean, sd) = moments(&pts);
            let scaled: Vec<Vec<f64>> = pts
                .iter()
                .map(|p| p.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect())
                .collect();
            let mut tree = fit_tree(&scaled, cfg)?;
            unscale(&mut tree.root, &mean, &sd);
            offsets.push(next);
            next += 1 << decl.token_depth;
            trees.push(tree);
        }
        Ok(TokenTrees {
            trees,
            features_of: groups,
            offsets,
        })
    }

    /// Size of the shared token domain `[0, domain)`.
    pub fn domain(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0)
            + self.trees.last().map(|t| 1usize << t.depth).unwrap_or(0)
    }

    pub fn tokenize(&self, features: &[f64]) -> Vec<f64> {
        self.trees
            .iter()
            .zip(&self.features_of)
            .zip(&self.offsets)
            .map(|((t, fs), &o)| {
                let pick: Vec<f64> = fs.iter().map(|&f| features[f]).collect();
                (o + fuzzy_index(t, &pick).0) as f64
            })
            .collect()
    }

    /// Replaces each packet's features in time-major window rows by tokens.
    pub fn tokenize_rows(&self, rows: &[Vec<f64>], per_packet: usize) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.chunks(per_packet).flat_map(|p| self.tokenize(p)).collect())
            .collect()
    }

    /// Per-tokenizer leaf centroids, indexed by token value.
    pub fn centroid_table(&self) -> Result<Vec<Vec<f64>>> {
        if self.trees.len() != 1 {
            return Err(Error::UnsupportedTopology(
                "raw-feature models need one tokenizer over the whole packet".into(),
            ));
        }
        Ok(self.trees[0].centroids())
    }

    /// Packet-feature formats and the tokenizer tables keyed on them.
    pub fn tables(
        &self,
        packet_features: &[Vec<f64>],
        value_bits: u32,
        key_bits: u32,
        margin: f64,
        token_q: &[QuantSpec],
        rule_cap: usize,
    ) -> Result<(Vec<QuantSpec>, Vec<Tokenizer>)> {
        let c = packet_features.first().map(Vec::len).unwrap_or(0);
        let ranges: Vec<Range> = (0..c)
            .map(|f| {
                packet_features.iter().fold(Range::point(packet_features[0][f]), |mut r, p| {
                    r.include(p[f]);
                    r
                })
            })
            .map(|r| widen(r, margin))
            .collect();
        let feature_q: Vec<QuantSpec> = ranges.iter().map(|&r| choose_fixed_point(r, value_bits)).collect();
        let mut toks = Vec::new();
        for (i, ((tree, fs), &offset)) in self.trees.iter().zip(&self.features_of).zip(&self.offsets).enumerate() {
            let key: Vec<KeyField> = fs
                .iter()
                .map(|&f| KeyField {
                    spec: KeySpec::for_range(ranges[f], key_bits, feature_q[f]),
                    src: feature_q[f],
                    index_hi: None,
                })
                .collect();
            let out = token_q[i];
            let mut table = build_index_table(usize::MAX, tree, key, out, rule_cap).map_err(|e| match e {
                Error::TableTooLarge(m) => Error::TableTooLarge(format!(
                    "tokenizer {i}: {}",
                    m.split_once(": ").map(|p| p.1).unwrap_or(&m)
                )),
                other => other,
            })?;
            for (leaf, row) in table.rows.iter_mut().enumerate() {
                row[0] = out.quantize((offset + leaf) as f64);
            }
            toks.push(Tokenizer {
                features: fs.clone(),
                table,
            });
        }
        Ok((feature_q, toks))
    }
}

fn moments(pts: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = pts.first().map(Vec::len).unwrap_or(0);
    let n = pts.len().max(1) as f64;
    let mean: Vec<f64> = (0..d).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let sd = (0..d)
        .map(|j| {
            let v = pts.iter().map(|p| (p[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 { v.sqrt() } else { 1.0 }
        })
        .collect();
    (mean, sd)
}

fn unscale(node: &mut TreeNode, mean: &[f64], sd: &[f64]) {
    match node {
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            *threshold = *threshold * sd[*feature] + mean[*feature];
            unscale(left, mean, sd);
            unscale(right, mean, sd);
        }
        TreeNode::Leaf { centroid, .. } => {
            for ((c, m), s) in centroid.iter_mut().zip(mean).zip(sd) {
                *c = *c * s + m;
            }
        }
    }
}

/// Rewrites a graph over raw packet features (`per_packet` values per
/// packet, time-major) into one over one token per packet. Every first-level
/// Map must read whole packets; it is prefixed with a lookup from token to
/// the leaf centroid.
pub fn rewrite_to_tokens(graph: &PrimitiveGraph, per_packet: usize, centroids: &[Vec<f64>]) -> Result<PrimitiveGraph> {
    if per_packet == 0 || !graph.input_len.is_multiple_of(per_packet) {
        return Err(Error::Argument(format!(
            "input of {} values is not a whole number of {per_packet}-value packets",
            graph.input_len
        )));
    }
    let packets_of = |idx: &[usize]| -> Result<Vec<usize>> {
        let pk: Vec<usize> = idx.chunks(per_packet).map(|c| c[0] / per_packet).collect();
        let whole = idx.len().is_multiple_of(per_packet)
            && idx
                .chunks(per_packet)
                .zip(&pk)
                .all(|(c, &p)| c.iter().enumerate().all(|(j, &e)| e == p * per_packet + j));
        if !whole {
            return Err(Error::UnsupportedTopology(format!(
                "segment {idx:?} does not cover whole packets in order"
            )));
        }
        Ok(pk)
    };
    let lookup = MapFunction::Lookup {
        table: centroids.to_vec(),
        index_min: 0,
    };
    let mut g = graph.clone();
    g.input_len = graph.input_len / per_packet;
    let mut partitions = Vec::new();
    for (id, node) in graph.nodes.iter().enumerate() {
        match &node.kind {
            NodeKind::Partition { sources, segments } if sources.contains(&Source::Input) => {
                if sources != &[Source::Input] {
                    return Err(Error::UnsupportedTopology("input partition mixes other values".into()));
                }
                let segs = segments.iter().map(|s| packets_of(s)).collect::<Result<Vec<_>>>()?;
                g.nodes[id].kind = NodeKind::Partition {
                    sources: vec![Source::Input],
                    segments: segs,
                };
                partitions.push(id);
            }
            other => {
                if node.sources().contains(&Source::Input) && !matches!(other, NodeKind::Map { .. }) {
                    return Err(Error::UnsupportedTopology(format!("node {id} reads raw features directly")));
                }
            }
        }
    }
    for (id, node) in graph.nodes.iter().enumerate() {
        match &node.kind {
            NodeKind::Map { input, func, out_len } => {
                let first_level = match input {
                    Source::Input => true,
                    Source::Segment(p, _) => partitions.contains(p),
                    Source::Node(_) => false,
                };
                if first_level {
                    g.nodes[id].kind = NodeKind::Map {
                        input: *input,
                        func: lookup.clone().then(func.clone()),
                        out_len: *out_len,
                    };
                }
            }
            _ => {
                for s in node.sources() {
                    if let Source::Segment(p, _) = s {
                        if partitions.contains(&p) {
                            return Err(Error::UnsupportedTopology(format!(
                                "node {id} reads raw feature segments without a Map"
                            )));
                        }
                    }
                }
            }
        }
    }
    if g.outputs.iter().any(|s| matches!(s, Source::Input | Source::Segment(..))) {
        return Err(Error::UnsupportedTopology("graph output reads raw features".into()));
    }
    Ok(g)
}
