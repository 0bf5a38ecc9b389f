//! Lowers a BN-FC-Bias-ReLU-BN-FC-Bias block into primitives and shows basic
//! fusion collapsing its seven lookups into two without changing outputs.

use matnet::fusion::fuse_basic;
use matnet::lower::{lower, PartitionPolicy};
use matnet::model::{reference_infer, LayerOp, SequentialBuilder};

fn fc(out: usize, inp: usize) -> LayerOp {
    LayerOp::Fc {
        weight: (0..out)
            .map(|o| (0..inp).map(|i| ((o * 3 + i * 5) % 7) as f64 * 0.25 - 0.75).collect())
            .collect(),
        bias: vec![0.0; out],
    }
}

fn bn(n: usize, sigma: f64) -> LayerOp {
    LayerOp::BatchNorm {
        gamma: vec![1.0; n],
        beta: vec![0.1; n],
        mean: vec![0.2; n],
        sigma: vec![sigma; n],
    }
}

fn main() -> anyhow::Result<()> {
    let model = SequentialBuilder::new("x", vec![4])
        .push("bn1", bn(4, 2.0), vec![4])
        .push("fc1", fc(4, 4), vec![4])
        .push("bias1", LayerOp::Bias { bias: vec![0.5; 4] }, vec![4])
        .push("relu1", LayerOp::Relu, vec![4])
        .push("bn2", bn(4, 0.5), vec![4])
        .push("fc2", fc(3, 4), vec![3])
        .push("bias2", LayerOp::Bias { bias: vec![-0.5; 3] }, vec![3])
        .build();
    let lowered = lower(&model, &PartitionPolicy::uniform(4))?;
    let (fused, report) = fuse_basic(&lowered);
    println!("lookups {} -> {} via {:?}", report.lookups_before, report.lookups_after, report.passes);
    for (i, node) in fused.nodes.iter().enumerate() {
        if let matnet::lower::NodeKind::Map { func, .. } = &node.kind {
            println!("  map {i}: {} from {:?}", func.name(), node.provenance);
        }
    }
    let x = [0.3, -1.2, 2.0, 0.7];
    println!("reference {:?}", reference_infer(&model, &x)?);
    println!("fused     {:?}", fused.eval(&x)?);
    Ok(())
}
