//! Builds a one-table pipeline for `0.4 x + 1` on a fuzzy 2-D key and runs
//! the quantized input (3, 7) through the integer simulator.

use matnet::compile::CompiledGraph;
use matnet::fuzzy::{ClusterTree, TreeNode};
use matnet::lower::{MapFunction, NodeKind, PrimitiveGraph, Source};
use matnet::pipeline::{schedule, ResourceModel};
use matnet::sim::execute_traced;
use matnet::tables::{build_fuzzy_table, KeyField, KeySpec, QuantSpec};

fn leaf(c: [f64; 2]) -> TreeNode {
    TreeNode::Leaf { index: 0, centroid: c.to_vec() }
}

fn split(feature: usize, threshold: f64, left: TreeNode, right: TreeNode) -> TreeNode {
    TreeNode::Split { feature, threshold, left: Box::new(left), right: Box::new(right) }
}

fn main() -> anyhow::Result<()> {
    let tree = ClusterTree::from_root(
        2,
        split(1, 5.0, split(0, 4.0, leaf([2.0, 2.0]), leaf([7.0, 3.0])), split(0, 3.0, leaf([2.0, 7.5]), leaf([4.5, 9.5]))),
    );
    let q = QuantSpec::new(16, 8);
    let f = MapFunction::diagonal(&[0.4, 0.4], &[1.0, 1.0]);
    let mut g = PrimitiveGraph::new(2);
    let m = g.push(NodeKind::Map { input: Source::Input, func: f.clone(), out_len: 2 }, vec!["fc".into()]);
    g.outputs.push(Source::Node(m));
    let key = KeyField { spec: KeySpec { bits: 4, frac: 0, lo: 0 }, src: q, index_hi: None };
    let table = build_fuzzy_table(m, &f, &tree, vec![key; 2], vec![q; 2], 4096)?;
    let compiled = CompiledGraph::assemble(g, vec![q; 2], vec![vec![q; 2]], vec![table])?;
    let program = schedule(&compiled, &ResourceModel::default(), None)?;

    let input = compiled.quantize_input(&[3.0, 7.0]);
    let trace = execute_traced(&program, &input)?;
    for l in &trace.lookups {
        println!("stage {} node {} keys {:?} -> row {} (rule {:?})", l.stage, l.node, l.keys, l.row, l.rule);
    }
    println!("raw output {:?} = {:?}", trace.output, compiled.dequantize_output(&trace.output));
    println!("instruction set {:?}", program.instruction_set());
    Ok(())
}
