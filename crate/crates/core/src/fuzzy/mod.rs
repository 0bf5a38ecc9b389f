//! Clustering trees: greedy SSE-minimizing axis-aligned splits whose leaves
//! carry centroids, used to replace an exact lookup with a region lookup.

mod regions;
mod split;

use serde::{Deserialize, Serialize};

pub use regions::{leaf_regions, route_keys, LeafRegion};
pub use split::{best_split, best_split_with, sse, Split};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterFitConfig {
    pub depth: usize,
    pub min_leaf: usize,
}

impl Default for ClusterFitConfig {
    fn default() -> Self {
        ClusterFitConfig {
            depth: 4,
            min_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        index: usize,
        centroid: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub dim: usize,
    pub depth: usize,
    pub leaves: usize,
    pub root: TreeNode,
}

impl ClusterTree {
    /// A tree with a single leaf.
    pub fn constant(centroid: Vec<f64>) -> ClusterTree {
        ClusterTree {
            dim: centroid.len(),
            depth: 0,
            leaves: 1,
            root: TreeNode::Leaf { index: 0, centroid },
        }
    }

    /// Builds a tree from hand-written nodes, renumbering leaves left to right.
    pub fn from_root(dim: usize, mut root: TreeNode) -> ClusterTree {
        let mut next = 0;
        number_leaves(&mut root, &mut next);
        let depth = node_depth(&root);
        ClusterTree {
            dim,
            depth,
            leaves: next,
            root,
        }
    }

    /// Centroids in fuzzy-index order.
    pub fn centroids(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.leaves];
        visit_leaves(&self.root, &mut |i, c| out[i] = c.to_vec());
        out
    }

    pub fn total_sse(&self, points: &[Vec<f64>]) -> f64 {
        let centroids = self.centroids();
        points
            .iter()
            .map(|p| {
                let (i, _) = fuzzy_index(self, p);
                p.iter()
                    .zip(&centroids[i])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    }
}

fn number_leaves(node: &mut TreeNode, next: &mut usize) {
    match node {
        TreeNode::Split { left, right, .. } => {
            number_leaves(left, next);
            number_leaves(right, next);
        }
        TreeNode::Leaf { index, .. } => {
            *index = *next;
            *next += 1;
        }
    }
}

fn node_depth(node: &TreeNode) -> usize {
    match node {
        TreeNode::Split { left, right, .. } => 1 + node_depth(left).max(node_depth(right)),
        TreeNode::Leaf { .. } => 0,
    }
}

fn visit_leaves(node: &TreeNode, f: &mut impl FnMut(usize, &[f64])) {
    match node {
        TreeNode::Split { left, right, .. } => {
            visit_leaves(left, f);
            visit_leaves(right, f);
        }
        TreeNode::Leaf { index, centroid } => f(*index, centroid),
    }
}

fn mean(points: &[&Vec<f64>], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for p in points {
        for (a, v) in m.iter_mut().zip(p.iter()) {
            *a += v;
        }
    }
    let n = points.len().max(1) as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Greedy top-down fit: split the cluster with the best SSE split until the
/// configured depth, stopping early on clusters that cannot split.
pub fn fit_tree(points: &[Vec<f64>], config: ClusterFitConfig) -> Result<ClusterTree> {
    if points.is_empty() {
        return Err(Error::Argument("cannot fit a clustering tree on no points".into()));
    }
    if config.depth == 0 {
        return Err(Error::Argument("tree depth must be at least 1".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Argument("points have inconsistent dimensions".into()));
    }
    fn grow(points: Vec<&Vec<f64>>, depth: usize, cfg: &ClusterFitConfig, dim: usize) -> TreeNode {
        if depth == 0 || points.len() < 2 * cfg.min_leaf.max(1) {
            return TreeNode::Leaf {
                index: 0,
                centroid: mean(&points, dim),
            };
        }
        let owned: Vec<Vec<f64>> = points.iter().map(|p| (*p).clone()).collect();
        match best_split_with(&owned, cfg.min_leaf) {
            None => TreeNode::Leaf {
                index: 0,
                centroid: mean(&points, dim),
            },
            Some(s) => {
                let (l, r): (Vec<&Vec<f64>>, Vec<&Vec<f64>>) =
                    points.into_iter().partition(|p| p[s.feature] <= s.threshold);
                TreeNode::Split {
                    feature: s.feature,
                    threshold: s.threshold,
                    left: Box::new(grow(l, depth - 1, cfg, dim)),
                    right: Box::new(grow(r, depth - 1, cfg, dim)),
                }
            }
        }
    }
    let root = grow(points.iter().collect(), config.depth, &config, dim);
    let mut tree = ClusterTree::from_root(dim, root);
    tree.depth = config.depth;
    Ok(tree)
}

/// Routes by comparisons, left iff `value <= threshold`.
pub fn fuzzy_index<'a>(tree: &'a ClusterTree, segment: &[f64]) -> (usize, &'a [f64]) {
    let mut node = &tree.root;
    loop {
        match node {
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => node = if segment[*feature] <= *threshold { left } else { right },
            TreeNode::Leaf { index, centroid } => return (*index, centroid),
        }
    }
}

/// Recomputes every centroid as the mean of the points routed to it; leaves
/// that receive no points keep their centroid.
pub fn refine_centroids(tree: &ClusterTree, points: &[Vec<f64>]) -> ClusterTree {
    let mut sums = vec![vec![0.0; tree.dim]; tree.leaves];
    let mut counts = vec![0usize; tree.leaves];
    for p in points {
        let (i, _) = fuzzy_index(tree, p);
        counts[i] += 1;
        for (s, v) in sums[i].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut out = tree.clone();
    fn apply(node: &mut TreeNode, sums: &[Vec<f64>], counts: &[usize]) {
        match node {
            TreeNode::Split { left, right, .. } => {
                apply(left, sums, counts);
                apply(right, sums, counts);
            }
            TreeNode::Leaf { index, centroid } => {
                if counts[*index] > 0 {
                    let n = counts[*index] as f64;
                    *centroid = sums[*index].iter().map(|s| s / n).collect();
                }
            }
        }
    }
    apply(&mut out.root, &sums, &counts);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(feature: usize, threshold: f64, left: TreeNode, right: TreeNode) -> TreeNode {
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    fn leaf(c: &[f64]) -> TreeNode {
        TreeNode::Leaf {
            index: 0,
            centroid: c.to_vec(),
        }
    }

    fn worked_dataset() -> Vec<Vec<f64>> {
        [(1., 1.), (3., 2.), (6., 3.), (8., 4.), (1., 6.), (2., 7.), (4., 9.), (5., 10.)]
            .iter()
            .map(|&(a, b)| vec![a, b])
            .collect()
    }

    #[test]
    fn root_split_and_leaf_centroid() {
        let pts = worked_dataset();
        let s = best_split(&pts).unwrap();
        assert_eq!((s.feature, s.threshold), (1, 5.0));
        let tree = fit_tree(&pts, ClusterFitConfig { depth: 2, min_leaf: 1 }).unwrap();
        assert_eq!(tree.leaves, 4);
        let (_, c) = fuzzy_index(&tree, &[4.0, 9.0]);
        assert_eq!(c, &[4.5, 9.5]);
        let (_, c) = fuzzy_index(&tree, &[1.0, 6.0]);
        assert_eq!(c, &[1.5, 6.5]);
    }

    #[test]
    fn single_leaf_is_dataset_mean() {
        let pts = worked_dataset();
        let tree = fit_tree(&pts, ClusterFitConfig { depth: 3, min_leaf: 8 }).unwrap();
        assert_eq!(tree.leaves, 1);
        assert_eq!(tree.centroids()[0], vec![3.75, 5.25]);
        assert_eq!(fuzzy_index(&tree, &[100.0, -3.0]).0, 0);
    }

    #[test]
    fn hand_built_tree_routes() {
        let tree = ClusterTree::from_root(
            2,
            split(
                1,
                5.0,
                split(0, 4.0, leaf(&[2.0, 2.0]), leaf(&[7.0, 3.0])),
                split(0, 3.0, leaf(&[2.0, 7.5]), leaf(&[4.5, 9.5])),
            ),
        );
        assert_eq!(tree.leaves, 4);
        assert_eq!(fuzzy_index(&tree, &[3.0, 7.0]), (2, &[2.0, 7.5][..]));
        // threshold ties go left
        assert_eq!(fuzzy_index(&tree, &[3.0, 5.0]).0, 0);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(fit_tree(&[], ClusterFitConfig::default()).is_err());
    }

    #[test]
    fn refine_is_fixed_point_on_fit_data() {
        let pts = worked_dataset();
        let tree = fit_tree(&pts, ClusterFitConfig { depth: 2, min_leaf: 1 }).unwrap();
        assert_eq!(refine_centroids(&tree, &pts), tree);
    }

    #[test]
    fn refine_tracks_small_shift() {
        let pts = worked_dataset();
        let tree = fit_tree(&pts, ClusterFitConfig { depth: 1, min_leaf: 1 }).unwrap();
        // Shifting x0 keeps every point on its side of the x1 split.
        let shifted: Vec<Vec<f64>> = pts.iter().map(|p| vec![p[0] + 0.25, p[1]]).collect();
        let refined = refine_centroids(&tree, &shifted);
        for (a, b) in tree.centroids().iter().zip(refined.centroids()) {
            assert!((b[0] - a[0] - 0.25).abs() < 1e-12 && b[1] == a[1]);
        }
    }

    #[test]
    fn json_roundtrip() {
        let tree = fit_tree(&worked_dataset(), ClusterFitConfig { depth: 2, min_leaf: 1 }).unwrap();
        let s = serde_json::to_string(&tree).unwrap();
        assert_eq!(serde_json::from_str::<ClusterTree>(&s).unwrap(), tree);
    }
}
