use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{reference_trace, ModelGraph};
use crate::error::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn point(v: f64) -> Range {
        Range { min: v, max: v }
    }

    pub fn include(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    pub fn contains(&self, v: f64) -> bool {
        self.min <= v && v <= self.max
    }

    pub fn union(&self, other: &Range) -> Range {
        Range {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }
}

/// Element-wise ranges for one tensor.
pub type RangeMap = BTreeMap<String, Vec<Range>>;

/// Pushes each bound away from zero by `margin` of its own magnitude.
pub fn widen(r: Range, margin: f64) -> Range {
    Range {
        min: r.min - margin * r.min.abs(),
        max: r.max + margin * r.max.abs(),
    }
}

/// Observes every tensor over `rows` with the reference interpreter and
/// returns per-element ranges widened by `margin`.
pub fn infer_ranges(model: &ModelGraph, rows: &[Vec<f64>], margin: f64) -> Result<RangeMap> {
    if rows.is_empty() {
        return Err(Error::Argument("range inference needs a non-empty dataset".into()));
    }
    let mut map: RangeMap = BTreeMap::new();
    for row in rows {
        for (name, values) in reference_trace(model, row)? {
            match map.get_mut(&name) {
                Some(ranges) => {
                    for (r, &v) in ranges.iter_mut().zip(&values) {
                        r.include(v);
                    }
                }
                None => {
                    map.insert(name, values.iter().map(|&v| Range::point(v)).collect());
                }
            }
        }
    }
    for ranges in map.values_mut() {
        for r in ranges.iter_mut() {
            *r = widen(*r, margin);
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerOp, SequentialBuilder};

    #[test]
    fn single_point_identity() {
        let m = SequentialBuilder::new("x", vec![2])
            .push(
                "fc",
                LayerOp::Fc {
                    weight: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                    bias: vec![0.0; 2],
                },
                vec![2],
            )
            .build();
        let r = infer_ranges(&m, &[vec![1.0, 1.0]], 0.1).unwrap();
        for ranges in r.values() {
            for x in ranges {
                assert!((x.min - 0.9).abs() < 1e-12 && (x.max - 1.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_range_is_nonnegative_and_covers_data() {
        let m = SequentialBuilder::new("x", vec![1])
            .push("r", LayerOp::Relu, vec![1])
            .build();
        let rows: Vec<Vec<f64>> = (-5..=5).map(|i| vec![i as f64 * 20.0]).collect();
        let r = infer_ranges(&m, &rows, DEFAULT_MARGIN).unwrap();
        assert!(r["r.out"][0].min >= 0.0);
        assert!(r["x"][0].contains(-100.0) && r["x"][0].contains(100.0));
    }

    #[test]
    fn empty_dataset_is_argument_error() {
        let m = SequentialBuilder::new("x", vec![1])
            .push("r", LayerOp::Relu, vec![1])
            .build();
        assert!(matches!(infer_ranges(&m, &[], 0.1), Err(Error::Argument(_))));
    }
}
