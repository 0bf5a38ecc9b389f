use super::*;
use crate::fusion::fuse_basic;
use crate::lower::{lower, PartitionPolicy};
use crate::model::{reference_infer, LayerOp, ModelGraph, SequentialBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mlp(rng: &mut ChaCha8Rng, dims: &[usize]) -> ModelGraph {
    let mut b = SequentialBuilder::new("x", vec![dims[0]]);
    for (i, w) in dims.windows(2).enumerate() {
        let weight = (0..w[1])
            .map(|_| (0..w[0]).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let bias = (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
        b = b.push(&format!("fc{i}"), LayerOp::Fc { weight, bias }, vec![w[1]]);
        if i + 2 < dims.len() {
            b = b.push(&format!("relu{i}"), LayerOp::Relu, vec![w[1]]);
        }
    }
    b.build()
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

#[test]
fn exact_tables_track_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = mlp(&mut rng, &[4, 6, 3]);
    let g = fuse_basic(&lower(&m, &PartitionPolicy::uniform(1)).unwrap()).0;
    let data = rows(&mut rng, 300, 4);
    let c = compile_graph(&g, &data, &QuantConfig::default()).unwrap();
    assert_eq!(c.fuzzy_count(), 0);
    let mut worst: f64 = 0.0;
    for x in &data {
        let y = c.infer(x).unwrap();
        let r = reference_infer(&m, x).unwrap();
        for (a, b) in y.iter().zip(&r) {
            worst = worst.max((a - b).abs());
        }
    }
    // 8-bit keys over a ~4.4 wide range: step 1/64 per input, weights below 1.
    assert!(worst < 0.5, "worst error {worst}");
}

#[test]
fn fuzzy_routing_matches_ternary_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = mlp(&mut rng, &[6, 8, 3]);
    let g = fuse_basic(&lower(&m, &PartitionPolicy::uniform(3)).unwrap()).0;
    let data = rows(&mut rng, 400, 6);
    let cfg = QuantConfig {
        strategy: TableStrategy::Fuzzy,
        ..QuantConfig::default()
    };
    let c = compile_graph(&g, &data, &cfg).unwrap();
    assert!(c.fuzzy_count() > 0);
    for x in data.iter().take(100) {
        let t = c.trace_quantized(&c.quantize_input(x)).unwrap();
        for table in &c.tables {
            let NodeKind::Map { input, .. } = &c.graph.nodes[table.node].kind else {
                panic!()
            };
            let keys: Vec<u64> = table
                .key
                .iter()
                .enumerate()
                .map(|(j, f)| f.extract(c.read(&t, *input, j)))
                .collect();
            assert_eq!(table.lookup(&keys).unwrap(), t.values[table.node].as_slice());
        }
    }
}

#[test]
fn sum_reduce_is_order_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = mlp(&mut rng, &[6, 2]);
    let g = fuse_basic(&lower(&m, &PartitionPolicy::uniform(2)).unwrap()).0;
    let data = rows(&mut rng, 200, 6);
    let c = compile_graph(&g, &data, &QuantConfig::default()).unwrap();
    let mut flipped = c.clone();
    for node in &mut flipped.graph.nodes {
        if let NodeKind::SumReduce { inputs, .. } = &mut node.kind {
            inputs.reverse();
        }
    }
    for x in &data {
        let raw = c.quantize_input(x);
        assert_eq!(c.eval_quantized(&raw).unwrap(), flipped.eval_quantized(&raw).unwrap());
    }
}

#[test]
fn periodic_inputs_share_formats() {
    let g = PrimitiveGraph::new(6);
    let mut g2 = g.clone();
    g2.outputs.push(Source::Input);
    let data: Vec<Vec<f64>> = (0..20)
        .map(|i| vec![i as f64, 0.1, 2.0 * i as f64, 0.2, 0.5, 0.3])
        .collect();
    let cfg = QuantConfig {
        input_period: Some(2),
        ..QuantConfig::default()
    };
    let c = compile_graph(&g2, &data, &cfg).unwrap();
    assert_eq!(c.input_q[0], c.input_q[2]);
    assert_eq!(c.input_q[0], c.input_q[4]);
    assert_eq!(c.input_q[1], c.input_q[3]);
}

#[test]
fn oversized_exact_key_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = mlp(&mut rng, &[4, 2]);
    let g = fuse_basic(&lower(&m, &PartitionPolicy::uniform(4)).unwrap()).0;
    let data = rows(&mut rng, 50, 4);
    let cfg = QuantConfig {
        strategy: TableStrategy::Exact,
        ..QuantConfig::default()
    };
    assert!(matches!(compile_graph(&g, &data, &cfg), Err(Error::TableTooLarge(_))));
}
