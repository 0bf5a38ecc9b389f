use serde::{Deserialize, Serialize};

/// Axis-aligned split: points with `p[feature] <= threshold` go left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub sse: f64,
}

/// Sum of squared distances to the mean.
pub fn sse<'a>(points: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let pts: Vec<&[f64]> = points.into_iter().collect();
    let Some(first) = pts.first() else {
        return 0.0;
    };
    let n = pts.len() as f64;
    let mut mean = vec![0.0; first.len()];
    for p in &pts {
        for (m, v) in mean.iter_mut().zip(p.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    pts.iter()
        .map(|p| p.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum()
}

/// The `(feature, threshold)` pair minimizing the summed SSE of both sides
/// over midpoints of consecutive distinct values. Ties keep the lowest
/// feature, then the lowest threshold. `None` when all points coincide or no
/// candidate leaves `min_leaf` points on each side.
pub fn best_split_with(points: &[Vec<f64>], min_leaf: usize) -> Option<Split> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let dim = points[0].len();
    let min_leaf = min_leaf.max(1);
    let total_sq: f64 = points.iter().flatten().map(|v| v * v).sum();
    let mut total = vec![0.0; dim];
    for p in points {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }

    // Candidates are scored with the prefix-sum identity
    // SSE = sum |p|^2 - |sum p|^2 / n, then the winner is rescored directly.
    let mut best: Option<(usize, f64, f64)> = None;
    let mut order: Vec<usize> = (0..n).collect();
    let mut left = vec![0.0; dim];
    for f in 0..dim {
        order.sort_by(|&a, &b| points[a][f].total_cmp(&points[b][f]));
        left.iter_mut().for_each(|v| *v = 0.0);
        let mut left_sq = 0.0;
        for i in 0..n - 1 {
            let p = &points[order[i]];
            for (l, v) in left.iter_mut().zip(p) {
                *l += v;
            }
            left_sq += p.iter().map(|v| v * v).sum::<f64>();
            let a = p[f];
            let b = points[order[i + 1]][f];
            let nl = i + 1;
            let nr = n - nl;
            if a == b || nl < min_leaf || nr < min_leaf {
                continue;
            }
            let l_norm: f64 = left.iter().map(|v| v * v).sum();
            let r_norm: f64 = left.iter().zip(&total).map(|(l, t)| (t - l) * (t - l)).sum();
            let cost = (left_sq - l_norm / nl as f64)
                + ((total_sq - left_sq) - r_norm / nr as f64);
            let threshold = a + (b - a) / 2.0;
            let better = match best {
                None => true,
                Some((_, _, c)) => cost < c - 1e-12 * c.abs().max(1.0),
            };
            if better {
                best = Some((f, threshold, cost));
            }
        }
    }
    let (feature, threshold, _) = best?;
    let (l, r): (Vec<&Vec<f64>>, Vec<&Vec<f64>>) =
        points.iter().partition(|p| p[feature] <= threshold);
    let cost = sse(l.iter().map(|p| p.as_slice())) + sse(r.iter().map(|p| p.as_slice()));
    Some(Split {
        feature,
        threshold,
        sse: cost,
    })
}

pub fn best_split(points: &[Vec<f64>]) -> Option<Split> {
    best_split_with(points, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_two_split() {
        let s = best_split(&[vec![0.0, 0.0], vec![0.0, 10.0]]).unwrap();
        assert_eq!((s.feature, s.threshold, s.sse), (1, 5.0, 0.0));
    }

    #[test]
    fn identical_points_do_not_split() {
        assert!(best_split(&[vec![1.0, 2.0], vec![1.0, 2.0]]).is_none());
        assert!(best_split(&[vec![1.0]]).is_none());
    }

    #[test]
    fn min_leaf_blocks_unbalanced_splits() {
        let pts = vec![vec![0.0], vec![10.0], vec![11.0], vec![12.0]];
        assert_eq!(best_split_with(&pts, 1).unwrap().threshold, 5.0);
        assert_eq!(best_split_with(&pts, 2).unwrap().threshold, 10.5);
        assert!(best_split_with(&pts, 3).is_none());
    }
}
