use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{ElemOp, MapFunction, NodeKind, PairOp, PrimitiveGraph, Source};
use crate::error::{Error, Result};
use crate::model::{output_dims, validate_model, LayerOp, LayerSpec, ModelGraph, SequentialBuilder};

/// Segment sizes per operator class, with per-layer overrides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPolicy {
    /// FC and Conv1d inputs.
    pub weighted: usize,
    /// BatchNorm, Bias, activations, embeddings, exponentials.
    pub elementwise: usize,
    /// Element pairs per Map for Hadamard, max pooling, softmax
    /// normalization and absolute differences.
    pub pairwise: usize,
    #[serde(default)]
    pub layers: BTreeMap<String, usize>,
}

impl Default for PartitionPolicy {
    fn default() -> Self {
        PartitionPolicy {
            weighted: 2,
            elementwise: 2,
            pairwise: 1,
            layers: BTreeMap::new(),
        }
    }
}

impl PartitionPolicy {
    pub fn uniform(size: usize) -> PartitionPolicy {
        PartitionPolicy {
            weighted: size,
            elementwise: size,
            pairwise: size,
            layers: BTreeMap::new(),
        }
    }

    fn size_for(&self, layer: &LayerSpec) -> usize {
        if let Some(&s) = self.layers.get(&layer.name) {
            return s;
        }
        match layer.op {
            LayerOp::Fc { .. } | LayerOp::Conv1d { .. } => self.weighted,
            LayerOp::Hadamard | LayerOp::MaxPool { .. } | LayerOp::AbsDiffSum => self.pairwise,
            _ => self.elementwise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

/// A tensor bound to the concatenation of graph values.
type Pieces = Vec<(Source, usize)>;

struct Lowerer {
    g: PrimitiveGraph,
    bound: HashMap<String, Pieces>,
}

fn chunks(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .step_by(size)
        .map(|s| (s..(s + size).min(n)).collect())
        .collect()
}

impl Lowerer {
    /// Views `groups` (index lists over the concatenated pieces) as sources.
    /// A group that is exactly one whole piece aliases it; the others share
    /// one Partition over the pieces they touch.
    fn split(&mut self, pieces: &[(Source, usize)], groups: &[Vec<usize>], prov: &str) -> Vec<Source> {
        let mut offsets = Vec::with_capacity(pieces.len());
        let mut acc = 0;
        for &(_, len) in pieces {
            offsets.push(acc);
            acc += len;
        }
        let piece_of = |i: usize| offsets.partition_point(|&o| o <= i) - 1;
        let mut out: Vec<Option<Source>> = vec![None; groups.len()];
        let mut touched = vec![false; pieces.len()];
        for (gi, group) in groups.iter().enumerate() {
            let p = piece_of(group[0]);
            let whole = group.len() == pieces[p].1
                && group.iter().enumerate().all(|(j, &i)| i == offsets[p] + j);
            if whole {
                out[gi] = Some(pieces[p].0);
            } else {
                for &i in group {
                    touched[piece_of(i)] = true;
                }
            }
        }
        if out.iter().any(Option::is_none) {
            let mut remap = vec![usize::MAX; acc];
            let mut sources = Vec::new();
            let mut next = 0;
            for (p, &(s, len)) in pieces.iter().enumerate() {
                if touched[p] {
                    sources.push(s);
                    for j in 0..len {
                        remap[offsets[p] + j] = next + j;
                    }
                    next += len;
                }
            }
            let pending: Vec<usize> = (0..groups.len()).filter(|&g| out[g].is_none()).collect();
            let segments = pending
                .iter()
                .map(|&g| groups[g].iter().map(|&i| remap[i]).collect())
                .collect();
            let id = self.g.push(
                NodeKind::Partition { sources, segments },
                vec![prov.to_string()],
            );
            for (k, &g) in pending.iter().enumerate() {
                out[g] = Some(Source::Segment(id, k));
            }
        }
        out.into_iter().map(Option::unwrap).collect()
    }

    fn map(&mut self, input: Source, func: MapFunction, prov: &str) -> Source {
        let out_len = func.out_len(self.g.source_len(input));
        Source::Node(self.g.push(
            NodeKind::Map {
                input,
                func,
                out_len,
            },
            vec![prov.to_string()],
        ))
    }

    fn reduce(&mut self, inputs: Vec<Source>, prov: &str) -> Source {
        let len = self.g.source_len(inputs[0]);
        Source::Node(self.g.push(NodeKind::SumReduce { inputs, len }, vec![prov.to_string()]))
    }

    fn pieces_of(&self, sources: &[Source]) -> Pieces {
        sources.iter().map(|&s| (s, self.g.source_len(s))).collect()
    }

    /// One Map per segment; the output is the concatenation of the Maps.
    fn elementwise(
        &mut self,
        x: &Pieces,
        size: usize,
        prov: &str,
        f: impl Fn(&[usize]) -> MapFunction,
    ) -> Pieces {
        let n = x.iter().map(|p| p.1).sum();
        let groups = chunks(n, size);
        let segs = self.split(x, &groups, prov);
        let outs: Vec<Source> = segs
            .into_iter()
            .zip(&groups)
            .map(|(s, idx)| self.map(s, f(idx), prov))
            .collect();
        self.pieces_of(&outs)
    }

    /// Partition into segments, one partial-product Map each, one SumReduce.
    fn weighted(&mut self, x: &Pieces, weight: &[Vec<f64>], bias: &[f64], size: usize, prov: &str) -> Pieces {
        let n = x.iter().map(|p| p.1).sum();
        let groups = chunks(n, size);
        let segs = self.split(x, &groups, prov);
        let partials: Vec<Source> = segs
            .into_iter()
            .zip(&groups)
            .enumerate()
            .map(|(i, (s, idx))| {
                let w = weight
                    .iter()
                    .map(|row| idx.iter().map(|&j| row[j]).collect())
                    .collect();
                let offset = if i == 0 { bias.to_vec() } else { vec![0.0; bias.len()] };
                self.map(s, MapFunction::Affine { weight: w, offset }, prov)
            })
            .collect();
        let r = self.reduce(partials, prov);
        self.pieces_of(&[r])
    }

    /// Pairs element `i` of `a` with element `i` of `b`, `size` pairs per Map.
    fn pairwise(
        &mut self,
        a: &Pieces,
        b: &Pieces,
        size: usize,
        prov: &str,
        f: &dyn Fn(usize) -> MapFunction,
    ) -> Vec<Source> {
        let n: usize = a.iter().map(|p| p.1).sum();
        let mut both = a.clone();
        both.extend(b.iter().cloned());
        let groups: Vec<Vec<usize>> = chunks(n, size)
            .into_iter()
            .map(|c| {
                let mut g = c.clone();
                g.extend(c.iter().map(|i| i + n));
                g
            })
            .collect();
        let segs = self.split(&both, &groups, prov);
        segs.into_iter()
            .zip(&groups)
            .map(|(s, g)| self.map(s, f(g.len() / 2), prov))
            .collect()
    }

    fn layer(&mut self, model: &ModelGraph, layer: &LayerSpec, size: usize) -> Result<Pieces> {
        let prov = layer.name.as_str();
        let x = self.bound[&layer.inputs[0]].clone();
        let spec = model
            .tensor(&layer.inputs[0])
            .ok_or_else(|| Error::Lowering {
                layer: layer.name.clone(),
                reason: "unknown input tensor".into(),
            })?;
        let n = spec.len();
        let out = match &layer.op {
            LayerOp::Fc { weight, bias } => self.weighted(&x, weight, bias, size, prov),
            LayerOp::Conv1d {
                kernels,
                bias,
                stride,
            } => {
                let (c, len) = (spec.channels(), spec.length());
                let k = kernels[0][0].len();
                let out_len = (len - k) / stride + 1;
                let oc = kernels.len();
                let mut w = vec![vec![0.0; n]; out_len * oc];
                let mut b = vec![0.0; out_len * oc];
                for t in 0..out_len {
                    for (o, kernel) in kernels.iter().enumerate() {
                        b[t * oc + o] = bias[o];
                        for (ci, taps) in kernel.iter().enumerate() {
                            for (j, &tap) in taps.iter().enumerate() {
                                w[t * oc + o][(t * stride + j) * c + ci] = tap;
                            }
                        }
                    }
                }
                self.weighted(&x, &w, &b, size, prov)
            }
            LayerOp::BatchNorm {
                gamma,
                beta,
                mean,
                sigma,
            } => self.elementwise(&x, size, prov, |idx| {
                let scale: Vec<f64> = idx.iter().map(|&i| gamma[i] / sigma[i]).collect();
                let offset: Vec<f64> = idx
                    .iter()
                    .map(|&i| beta[i] - gamma[i] * mean[i] / sigma[i])
                    .collect();
                MapFunction::diagonal(&scale, &offset)
            }),
            LayerOp::Bias { bias } => self.elementwise(&x, size, prov, |idx| {
                let offset: Vec<f64> = idx.iter().map(|&i| bias[i]).collect();
                MapFunction::diagonal(&vec![1.0; idx.len()], &offset)
            }),
            LayerOp::Relu => self.elementwise(&x, size, prov, |_| MapFunction::Elementwise { op: ElemOp::Relu }),
            LayerOp::Tanh => self.elementwise(&x, size, prov, |_| MapFunction::Elementwise { op: ElemOp::Tanh }),
            LayerOp::Sigmoid => {
                self.elementwise(&x, size, prov, |_| MapFunction::Elementwise { op: ElemOp::Sigmoid })
            }
            LayerOp::Embedding { table, index_min } => self.elementwise(&x, size, prov, |_| MapFunction::Lookup {
                table: table.clone(),
                index_min: *index_min,
            }),
            LayerOp::Softmax => {
                let groups = chunks(n, size);
                let segs = self.split(&x, &groups, prov);
                let mut exps = Vec::new();
                let mut partial_sums = Vec::new();
                for (s, idx) in segs.into_iter().zip(&groups) {
                    let exp = MapFunction::Elementwise { op: ElemOp::Exp };
                    exps.push(self.map(s, exp.clone(), prov));
                    let ones = MapFunction::Affine {
                        weight: vec![vec![1.0; idx.len()]],
                        offset: vec![0.0],
                    };
                    partial_sums.push(self.map(s, exp.then(ones), prov));
                }
                let total = self.reduce(partial_sums, prov);
                let broadcast = MapFunction::Elementwise {
                    op: ElemOp::Reciprocal,
                }
                .then(MapFunction::Affine {
                    weight: vec![vec![1.0]; n],
                    offset: vec![0.0; n],
                });
                let inv = self.map(total, broadcast, prov);
                let e = self.pieces_of(&exps);
                let r = self.pieces_of(&[inv]);
                let outs = self.pairwise(&e, &r, size, prov, &|_| MapFunction::Pairwise { op: PairOp::Mul });
                self.pieces_of(&outs)
            }
            LayerOp::AvgPool { window } | LayerOp::MaxPool { window } => {
                let (c, len) = (spec.channels(), spec.length());
                let steps: Vec<Vec<usize>> = (0..len).map(|t| (t * c..(t + 1) * c).collect()).collect();
                let segs = self.split(&x, &steps, prov);
                let mut outs = Vec::new();
                for t in 0..len / window {
                    let items: Vec<Source> = segs[t * window..(t + 1) * window].to_vec();
                    if let LayerOp::AvgPool { .. } = layer.op {
                        let sum = self.reduce(items, prov);
                        let scale = MapFunction::diagonal(&vec![1.0 / *window as f64; c], &vec![0.0; c]);
                        outs.push(self.map(sum, scale, prov));
                    } else {
                        outs.push(self.max_tree(items, c, prov));
                    }
                }
                self.pieces_of(&outs)
            }
            LayerOp::Hadamard => {
                let b = self.bound[&layer.inputs[1]].clone();
                let outs = self.pairwise(&x, &b, size, prov, &|_| MapFunction::Pairwise { op: PairOp::Mul });
                self.pieces_of(&outs)
            }
            LayerOp::AbsDiffSum => {
                let b = self.bound[&layer.inputs[1]].clone();
                let outs = self.pairwise(&x, &b, size, prov, &|p| {
                    MapFunction::Pairwise { op: PairOp::AbsDiff }.then(MapFunction::Affine {
                        weight: vec![vec![1.0; p]],
                        offset: vec![0.0],
                    })
                });
                let r = self.reduce(outs, prov);
                self.pieces_of(&[r])
            }
        };
        Ok(out)
    }

    /// Pairwise-max levels until one value remains; odd items carry over.
    fn max_tree(&mut self, mut items: Vec<Source>, c: usize, prov: &str) -> Source {
        let f = MapFunction::Pairwise { op: PairOp::Max };
        while items.len() > 1 {
            let mut next = Vec::new();
            for pair in items.chunks(2) {
                if let [a, b] = pair {
                    let pieces = vec![(*a, c), (*b, c)];
                    let seg = self.split(&pieces, &[(0..2 * c).collect()], prov);
                    next.push(self.map(seg[0], f.clone(), prov));
                } else {
                    next.push(pair[0]);
                }
            }
            items = next;
        }
        items[0]
    }
}

/// Lowers every layer of a valid model by operator class.
pub fn lower(model: &ModelGraph, policy: &PartitionPolicy) -> Result<PrimitiveGraph> {
    let violations = validate_model(model);
    if !violations.is_empty() {
        return Err(Error::InvalidModel(violations.iter().map(|v| v.to_string()).collect()));
    }
    let input = model.input().expect("validated model has an input");
    let mut lw = Lowerer {
        g: PrimitiveGraph::new(input.len()),
        bound: HashMap::new(),
    };
    lw.bound.insert(input.name.clone(), vec![(Source::Input, input.len())]);
    for idx in model.topo_order()? {
        let layer = &model.layers[idx];
        let size = policy.size_for(layer);
        if size == 0 {
            return Err(Error::Lowering {
                layer: layer.name.clone(),
                reason: "segment size must be at least 1".into(),
            });
        }
        let out = lw.layer(model, layer, size)?;
        lw.bound.insert(layer.output.clone(), out);
    }
    let output = model.output().expect("validated model has an output");
    lw.g.outputs = lw.bound[&output.name].iter().map(|p| p.0).collect();
    lw.g.check()?;
    Ok(lw.g)
}

/// Softmax over `dim` inputs as a standalone fragment.
pub fn lower_softmax(dim: usize, policy: &PartitionPolicy) -> Result<PrimitiveGraph> {
    let m = SequentialBuilder::new("x", vec![dim])
        .push("softmax", LayerOp::Softmax, vec![dim])
        .build();
    lower(&m, policy)
}

/// Pooling over a `[length, channels]` input as a standalone fragment.
pub fn lower_pool(kind: PoolKind, window: usize, length: usize, channels: usize) -> Result<PrimitiveGraph> {
    let op = match kind {
        PoolKind::Avg => LayerOp::AvgPool { window },
        PoolKind::Max => LayerOp::MaxPool { window },
    };
    let dims = vec![length, channels];
    let out = output_dims(&op, &dims).map_err(|e| Error::Lowering {
        layer: "pool".into(),
        reason: e.to_string(),
    })?;
    let m = SequentialBuilder::new("x", dims).push("pool", op, out).build();
    lower(&m, &PartitionPolicy::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reference_infer, Head};

    fn fc(out: usize, inp: usize) -> LayerOp {
        LayerOp::Fc {
            weight: (0..out)
                .map(|o| (0..inp).map(|i| ((o * 7 + i * 3) % 5) as f64 - 2.0).collect())
                .collect(),
            bias: (0..out).map(|o| o as f64 * 0.5).collect(),
        }
    }

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn fc_node_counts() {
        let m = SequentialBuilder::new("x", vec![8]).push("fc", fc(4, 8), vec![4]).build();
        let g = lower(&m, &PartitionPolicy::uniform(2)).unwrap();
        assert_eq!(g.map_count(), 4);
        assert_eq!(g.reduce_count(), 1);
        let parts: Vec<_> = g
            .nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Partition { segments, .. } => Some(segments.len()),
                _ => None,
            })
            .collect();
        assert_eq!(parts, vec![4]);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        close(&g.eval(&x).unwrap(), &reference_infer(&m, &x).unwrap());
    }

    #[test]
    fn degenerate_fc_and_relu() {
        let m = SequentialBuilder::new("x", vec![2]).push("fc", fc(2, 2), vec![2]).build();
        let g = lower(&m, &PartitionPolicy::uniform(2)).unwrap();
        assert_eq!((g.map_count(), g.reduce_count()), (1, 1));
        let m = SequentialBuilder::new("x", vec![4]).push("r", LayerOp::Relu, vec![4]).build();
        let g = lower(&m, &PartitionPolicy::uniform(4)).unwrap();
        assert_eq!((g.map_count(), g.reduce_count()), (1, 0));
    }

    #[test]
    fn softmax_fragment() {
        let p = PartitionPolicy::default();
        close(&lower_softmax(2, &p).unwrap().eval(&[0.0, 0.0]).unwrap(), &[0.5, 0.5]);
        close(
            &lower_softmax(3, &p).unwrap().eval(&[1.0, 1.0, 1.0]).unwrap(),
            &[1.0 / 3.0; 3],
        );
        close(
            &lower_softmax(2, &p).unwrap().eval(&[3f64.ln(), 0.0]).unwrap(),
            &[0.75, 0.25],
        );
    }

    #[test]
    fn pool_fragments() {
        let g = lower_pool(PoolKind::Avg, 4, 4, 1).unwrap();
        close(&g.eval(&[1.0, 2.0, 3.0, 6.0]).unwrap(), &[3.0]);
        let g = lower_pool(PoolKind::Max, 2, 2, 1).unwrap();
        assert_eq!(g.eval(&[-1.0, 5.0]).unwrap(), vec![5.0]);
        let g = lower_pool(PoolKind::Max, 4, 4, 1).unwrap();
        assert_eq!(g.map_count(), 3);
        assert_eq!(g.path_profiles().into_iter().map(|p| p.0).max(), Some(2));
        assert_eq!(g.eval(&[1.0, 7.0, -3.0, 2.0]).unwrap(), vec![7.0]);
        assert!(lower_pool(PoolKind::Avg, 3, 4, 1).is_err());
    }

    #[test]
    fn mixed_model_matches_reference() {
        let mut b = SequentialBuilder::new("x", vec![6, 2])
            .push(
                "conv",
                LayerOp::Conv1d {
                    kernels: vec![
                        vec![vec![0.5, -1.0], vec![0.25, 2.0]],
                        vec![vec![1.0, 0.0], vec![-0.5, 0.75]],
                    ],
                    bias: vec![0.1, -0.2],
                    stride: 1,
                },
                vec![5, 2],
            )
            .push("t", LayerOp::Tanh, vec![5, 2])
            .push("mp", LayerOp::MaxPool { window: 5 }, vec![1, 2]);
        b.push_with("had", LayerOp::Hadamard, &["mp.out"], vec![1, 2]);
        let m = b
            .push("fc", fc(3, 2), vec![3])
            .push("sm", LayerOp::Softmax, vec![3])
            .build();
        let g = lower(&m, &PartitionPolicy::default()).unwrap();
        for k in 0..10 {
            let x: Vec<f64> = (0..12).map(|i| ((i * 5 + k * 3) % 11) as f64 * 0.2 - 1.0).collect();
            close(&g.eval(&x).unwrap(), &reference_infer(&m, &x).unwrap());
        }
    }

    #[test]
    fn autoencoder_and_embedding() {
        let mut b = SequentialBuilder::new("x", vec![3])
            .push("fc", fc(3, 3), vec![3])
            .push("r", LayerOp::Relu, vec![3]);
        b.push_with("mae", LayerOp::AbsDiffSum, &["x"], vec![1]);
        let m = b.head(Head::Autoencoder).build();
        let g = lower(&m, &PartitionPolicy::default()).unwrap();
        let x = [0.3, -1.2, 2.0];
        close(&g.eval(&x).unwrap(), &reference_infer(&m, &x).unwrap());

        let m = SequentialBuilder::new("x", vec![3])
            .push(
                "emb",
                LayerOp::Embedding {
                    table: vec![vec![1.0, -1.0], vec![0.5, 2.0], vec![3.0, 0.0]],
                    index_min: 1,
                },
                vec![3, 2],
            )
            .push("fc", fc(2, 6), vec![2])
            .build();
        let g = lower(&m, &PartitionPolicy::default()).unwrap();
        close(&g.eval(&[1.0, 3.0, 2.0]).unwrap(), &reference_infer(&m, &[1.0, 3.0, 2.0]).unwrap());
        assert!(g.eval(&[0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn compact_is_stable() {
        let m = SequentialBuilder::new("x", vec![4])
            .push("fc", fc(2, 4), vec![2])
            .push("r", LayerOp::Relu, vec![2])
            .build();
        let g = lower(&m, &PartitionPolicy::default()).unwrap();
        let mut h = g.clone();
        h.compact();
        assert_eq!(g, h);
    }
}
