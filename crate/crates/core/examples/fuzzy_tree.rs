//! Fits a clustering tree on eight 2-D points, then turns it into a ternary
//! table and checks that the table and the tree agree on every key.

use matnet::fuzzy::{fit_tree, fuzzy_index, ClusterFitConfig};
use matnet::model::Range;
use matnet::sim::match_table;
use matnet::tables::{build_index_table, KeyField, KeySpec, QuantSpec};

fn main() -> anyhow::Result<()> {
    let points: Vec<Vec<f64>> = [(1., 1.), (3., 2.), (6., 3.), (8., 4.), (1., 6.), (2., 7.), (4., 9.), (5., 10.)]
        .iter()
        .map(|&(a, b)| vec![a, b])
        .collect();
    let tree = fit_tree(&points, ClusterFitConfig { depth: 2, min_leaf: 1 })?;
    println!("{} leaves, SSE {:.2}", tree.leaves, tree.total_sse(&points));
    for (i, c) in tree.centroids().iter().enumerate() {
        println!("  leaf {i}: centroid {c:?}");
    }
    let (leaf, centroid) = fuzzy_index(&tree, &[4.0, 9.0]);
    println!("(4, 9) -> leaf {leaf}, centroid {centroid:?}");

    // 4-bit integer keys over [0, 15] on both features.
    let q = QuantSpec::new(16, 0);
    let spec = KeySpec::for_range(Range { min: 0.0, max: 15.0 }, 4, q);
    let key = vec![KeyField { spec, src: q, index_hi: None }; 2];
    let table = build_index_table(0, &tree, key, q, 4096)?;
    println!("{} ternary rules for {} leaves", table.rules.len(), table.rows.len());
    let mut agree = 0;
    for a in 0..16u64 {
        for b in 0..16u64 {
            let (row, _) = match_table(&table, &[a, b]).expect("every key matches a rule");
            agree += usize::from(row == fuzzy_index(&tree, &[a as f64, b as f64]).0);
        }
    }
    println!("ternary rules and tree agree on {agree} of 256 keys");
    Ok(())
}
