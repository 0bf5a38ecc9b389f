use serde::{Deserialize, Serialize};

use super::PrimitiveGraph;
use crate::error::{Error, Result};
use crate::fuzzy::{fuzzy_index, ClusterTree};
use crate::model::{embedding_row_value, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElemOp {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Reciprocal,
}

impl ElemOp {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ElemOp::Relu => x.max(0.0),
            ElemOp::Tanh => x.tanh(),
            ElemOp::Sigmoid => sigmoid(x),
            ElemOp::Exp => x.exp(),
            ElemOp::Reciprocal => 1.0 / x,
        }
    }
}

/// Binary element-wise operation over an input laid out as `[a.., b..]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOp {
    Mul,
    Max,
    AbsDiff,
}

impl PairOp {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            PairOp::Mul => a * b,
            PairOp::Max => a.max(b),
            PairOp::AbsDiff => (a - b).abs(),
        }
    }
}

/// The function a Map primitive computes, kept symbolic at full precision
/// until tables are built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum MapFunction {
    /// `y = W x + c`, `W` stored as `out x in` rows.
    Affine { weight: Vec<Vec<f64>>, offset: Vec<f64> },
    Elementwise { op: ElemOp },
    Pairwise { op: PairOp },
    /// Replaces every input element by a table row.
    Lookup { table: Vec<Vec<f64>>, index_min: i64 },
    /// Returns the fuzzy index of the whole input.
    TreeIndex { tree: ClusterTree },
    /// Evaluates a whole graph with the input scattered into `positions` of an
    /// otherwise zero input vector, then adds `offset`.
    Submodel {
        graph: Box<PrimitiveGraph>,
        positions: Vec<usize>,
        offset: Vec<f64>,
    },
    /// Applied left to right.
    Composite { parts: Vec<MapFunction> },
}

impl MapFunction {
    pub fn identity(n: usize) -> MapFunction {
        MapFunction::diagonal(&vec![1.0; n], &vec![0.0; n])
    }

    pub fn diagonal(scale: &[f64], offset: &[f64]) -> MapFunction {
        let n = scale.len();
        let weight = (0..n)
            .map(|i| {
                let mut row = vec![0.0; n];
                row[i] = scale[i];
                row
            })
            .collect();
        MapFunction::Affine {
            weight,
            offset: offset.to_vec(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            MapFunction::Affine { weight, .. } => {
                format!("affine{}x{}", weight.len(), weight.first().map_or(0, Vec::len))
            }
            MapFunction::Elementwise { op } => format!("{op:?}").to_lowercase(),
            MapFunction::Pairwise { op } => format!("pair_{op:?}").to_lowercase(),
            MapFunction::Lookup { .. } => "lookup".into(),
            MapFunction::TreeIndex { .. } => "tree_index".into(),
            MapFunction::Submodel { .. } => "submodel".into(),
            MapFunction::Composite { parts } => {
                parts.iter().map(|p| p.name()).collect::<Vec<_>>().join("∘")
            }
        }
    }

    pub fn out_len(&self, in_len: usize) -> usize {
        match self {
            MapFunction::Affine { weight, .. } => weight.len(),
            MapFunction::Elementwise { .. } => in_len,
            MapFunction::Pairwise { .. } => in_len / 2,
            MapFunction::Lookup { table, .. } => in_len * table.first().map_or(0, Vec::len),
            MapFunction::TreeIndex { .. } => 1,
            MapFunction::Submodel { graph, .. } => graph.output_len(),
            MapFunction::Composite { parts } => parts.iter().fold(in_len, |n, p| p.out_len(n)),
        }
    }

    /// True when `f(a + b) = f(a) + f(b)`.
    pub fn is_linear(&self) -> bool {
        self.as_affine()
            .is_some_and(|(_, c)| c.iter().all(|&v| v == 0.0))
    }

    pub fn is_affine(&self) -> bool {
        self.as_affine().is_some()
    }

    /// Collapses affine functions and chains of them to a single `(W, c)`.
    pub fn as_affine(&self) -> Option<(Vec<Vec<f64>>, Vec<f64>)> {
        match self {
            MapFunction::Affine { weight, offset } => Some((weight.clone(), offset.clone())),
            MapFunction::Composite { parts } => {
                let mut acc: Option<(Vec<Vec<f64>>, Vec<f64>)> = None;
                for p in parts {
                    let (w, c) = p.as_affine()?;
                    acc = Some(match acc {
                        None => (w, c),
                        Some((w0, c0)) => compose_affine(&w0, &c0, &w, &c),
                    });
                }
                acc
            }
            _ => None,
        }
    }

    /// Element-wise non-linear activation that has no table-free form.
    pub fn is_activation(&self) -> bool {
        matches!(
            self,
            MapFunction::Elementwise {
                op: ElemOp::Relu | ElemOp::Tanh | ElemOp::Sigmoid
            }
        )
    }

    /// True when the first stage consumes integer indices (an exact index key).
    pub fn takes_indices(&self) -> Option<(i64, i64)> {
        match self {
            MapFunction::Lookup { table, index_min } => {
                Some((*index_min, *index_min + table.len() as i64 - 1))
            }
            MapFunction::Composite { parts } => parts.first().and_then(MapFunction::takes_indices),
            _ => None,
        }
    }

    /// `then ∘ self`, collapsing adjacent affine parts.
    pub fn then(self, next: MapFunction) -> MapFunction {
        let mut parts = match self {
            MapFunction::Composite { parts } => parts,
            f => vec![f],
        };
        let next_parts = match next {
            MapFunction::Composite { parts } => parts,
            f => vec![f],
        };
        for p in next_parts {
            let merged = match (parts.last(), &p) {
                (Some(MapFunction::Affine { weight: w0, offset: c0 }), MapFunction::Affine { weight, offset }) => {
                    let (w, c) = compose_affine(w0, c0, weight, offset);
                    Some(MapFunction::Affine { weight: w, offset: c })
                }
                _ => None,
            };
            match merged {
                Some(m) => {
                    parts.pop();
                    parts.push(m);
                }
                None => parts.push(p),
            }
        }
        if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            MapFunction::Composite { parts }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(match self {
            MapFunction::Affine { weight, offset } => weight
                .iter()
                .zip(offset)
                .map(|(row, c)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + c)
                .collect(),
            MapFunction::Elementwise { op } => x.iter().map(|&v| op.apply(v)).collect(),
            MapFunction::Pairwise { op } => {
                let n = x.len() / 2;
                (0..n).map(|i| op.apply(x[i], x[n + i])).collect()
            }
            MapFunction::Lookup { table, index_min } => {
                let mut out = Vec::new();
                for &v in x {
                    out.extend_from_slice(embedding_row_value(table, v, *index_min)?);
                }
                out
            }
            MapFunction::TreeIndex { tree } => vec![fuzzy_index(tree, x).0 as f64],
            MapFunction::Submodel {
                graph,
                positions,
                offset,
            } => {
                let mut full = vec![0.0; graph.input_len];
                for (&p, &v) in positions.iter().zip(x) {
                    full[p] = v;
                }
                let y = graph.eval(&full)?;
                y.iter().zip(offset).map(|(a, b)| a + b).collect()
            }
            MapFunction::Composite { parts } => {
                let mut v = x.to_vec();
                for p in parts {
                    v = p.eval(&v)?;
                }
                v
            }
        })
    }

    /// Drops element-wise activations; errors on any other non-affine part.
    pub fn without_activations(&self) -> Result<MapFunction> {
        match self {
            f if f.is_activation() => Ok(MapFunction::Composite { parts: Vec::new() }),
            MapFunction::Affine { .. } => Ok(self.clone()),
            MapFunction::Composite { parts } => {
                let mut out = MapFunction::Composite { parts: Vec::new() };
                for p in parts {
                    out = out.then(p.without_activations()?);
                }
                Ok(out)
            }
            other => Err(Error::UnsupportedTopology(format!(
                "`{}` has no linear replacement",
                other.name()
            ))),
        }
    }
}

/// `(W2, c2) ∘ (W1, c1)`: `W2 (W1 x + c1) + c2`.
pub fn compose_affine(
    w1: &[Vec<f64>],
    c1: &[f64],
    w2: &[Vec<f64>],
    c2: &[f64],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let inner = w1.first().map_or(0, Vec::len);
    let weight = w2
        .iter()
        .map(|row| {
            (0..inner)
                .map(|j| row.iter().zip(w1).map(|(a, r)| a * r[j]).sum())
                .collect()
        })
        .collect();
    let offset = w2
        .iter()
        .zip(c2)
        .map(|(row, c)| row.iter().zip(c1).map(|(a, b)| a * b).sum::<f64>() + c)
        .collect();
    (weight, offset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scale(s: f64, c: f64) -> MapFunction {
        MapFunction::diagonal(&[s], &[c])
    }

    #[test]
    fn affine_merge_matches_hand_composition() {
        let f = scale(0.4, 0.0).then(scale(1.0, 1.0));
        assert!(matches!(f, MapFunction::Affine { .. }));
        let y = f.eval(&[3.0]).unwrap()[0];
        assert!((y - 2.2).abs() < 1e-12);
    }

    #[test]
    fn relu_then_tanh() {
        let f = MapFunction::Elementwise { op: ElemOp::Relu }
            .then(MapFunction::Elementwise { op: ElemOp::Tanh });
        assert_eq!(f.eval(&[-2.0]).unwrap(), vec![0.0]);
        assert!(!f.is_affine());
    }

    #[test]
    fn linearity_flags() {
        assert!(scale(2.0, 0.0).is_linear());
        assert!(!scale(2.0, 1.0).is_linear());
        assert!(scale(2.0, 1.0).is_affine());
        assert!(!MapFunction::Elementwise { op: ElemOp::Relu }.is_linear());
    }

    #[test]
    fn pairwise_and_lookup() {
        let f = MapFunction::Pairwise { op: PairOp::Max };
        assert_eq!(f.eval(&[-1.0, 2.0, 5.0, 0.0]).unwrap(), vec![5.0, 2.0]);
        let e = MapFunction::Lookup {
            table: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            index_min: 0,
        };
        assert_eq!(e.eval(&[1.0, 0.0]).unwrap(), vec![3.0, 4.0, 1.0, 2.0]);
        assert_eq!(e.out_len(2), 4);
        assert!(e.eval(&[2.0]).is_err());
    }

    #[test]
    fn strip_activations() {
        let f = scale(2.0, 0.0)
            .then(MapFunction::Elementwise { op: ElemOp::Relu })
            .then(scale(3.0, 1.0));
        let g = f.without_activations().unwrap();
        assert_eq!(g.eval(&[-1.0]).unwrap(), vec![-5.0]);
        assert!(MapFunction::Pairwise { op: PairOp::Mul }.without_activations().is_err());
    }
}
