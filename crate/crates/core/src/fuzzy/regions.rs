use serde::{Deserialize, Serialize};

use super::{ClusterTree, TreeNode};
use crate::tables::KeySpec;

/// Axis-aligned box of integer keys, inclusive per feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafRegion {
    pub index: usize,
    pub bounds: Vec<(u64, u64)>,
}

impl LeafRegion {
    pub fn contains(&self, keys: &[u64]) -> bool {
        self.bounds
            .iter()
            .zip(keys)
            .all(|(&(lo, hi), &k)| lo <= k && k <= hi)
    }
}

/// Walks every root-to-leaf path with thresholds snapped to the key grid.
/// Leaves whose box is empty on the grid are omitted; the rest tile the
/// domain.
pub fn leaf_regions(tree: &ClusterTree, keys: &[KeySpec]) -> Vec<LeafRegion> {
    fn walk(
        node: &TreeNode,
        keys: &[KeySpec],
        bounds: &mut Vec<(i64, i64)>,
        out: &mut Vec<LeafRegion>,
    ) {
        match node {
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let t = keys[*feature].snap(*threshold);
                let saved = bounds[*feature];
                bounds[*feature].1 = saved.1.min(t);
                walk(left, keys, bounds, out);
                bounds[*feature] = (saved.0.max(t.saturating_add(1)), saved.1);
                walk(right, keys, bounds, out);
                bounds[*feature] = saved;
            }
            TreeNode::Leaf { index, .. } => {
                if bounds.iter().all(|(lo, hi)| lo <= hi) {
                    out.push(LeafRegion {
                        index: *index,
                        bounds: bounds.iter().map(|&(lo, hi)| (lo as u64, hi as u64)).collect(),
                    });
                }
            }
        }
    }
    let mut bounds: Vec<(i64, i64)> = keys.iter().map(|k| (0, k.max_key() as i64)).collect();
    let mut out = Vec::new();
    walk(&tree.root, keys, &mut bounds, &mut out);
    out
}

/// Routes integer keys through the tree with snapped thresholds.
pub fn route_keys(tree: &ClusterTree, keys: &[KeySpec], values: &[u64]) -> usize {
    let mut node = &tree.root;
    loop {
        match node {
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let t = keys[*feature].snap(*threshold);
                node = if (values[*feature] as i64) <= t { left } else { right };
            }
            TreeNode::Leaf { index, .. } => return *index,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuzzy::{fuzzy_index, ClusterTree};

    fn grid4() -> KeySpec {
        KeySpec {
            bits: 4,
            frac: 0,
            lo: 0,
        }
    }

    fn worked_tree() -> ClusterTree {
        let leaf = |c: [f64; 2]| TreeNode::Leaf {
            index: 0,
            centroid: c.to_vec(),
        };
        let split = |f, t, l, r| TreeNode::Split {
            feature: f,
            threshold: t,
            left: Box::new(l),
            right: Box::new(r),
        };
        ClusterTree::from_root(
            2,
            split(
                1,
                5.0,
                split(0, 4.0, leaf([2.0, 2.0]), leaf([7.0, 3.0])),
                split(0, 3.0, leaf([2.0, 7.5]), leaf([4.5, 9.5])),
            ),
        )
    }

    #[test]
    fn single_leaf_covers_domain() {
        let tree = ClusterTree::constant(vec![0.0, 0.0]);
        let r = leaf_regions(&tree, &[grid4(), grid4()]);
        assert_eq!(r, vec![LeafRegion { index: 0, bounds: vec![(0, 15), (0, 15)] }]);
    }

    #[test]
    fn worked_leaf_box() {
        let r = leaf_regions(&worked_tree(), &[grid4(), grid4()]);
        let leaf2 = r.iter().find(|r| r.index == 2).unwrap();
        assert_eq!(leaf2.bounds, vec![(0, 3), (6, 15)]);
    }

    #[test]
    fn boxes_tile_grid_and_agree_with_routing() {
        let tree = worked_tree();
        let keys = [grid4(), grid4()];
        let regions = leaf_regions(&tree, &keys);
        for a in 0..16u64 {
            for b in 0..16u64 {
                let hits: Vec<_> = regions.iter().filter(|r| r.contains(&[a, b])).collect();
                assert_eq!(hits.len(), 1);
                let (idx, _) = fuzzy_index(&tree, &[a as f64, b as f64]);
                assert_eq!(hits[0].index, idx);
                assert_eq!(route_keys(&tree, &keys, &[a, b]), idx);
            }
        }
    }
}
