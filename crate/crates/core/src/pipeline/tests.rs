use super::*;
use crate::compile::{compile_graph, QuantConfig, TableStrategy};
use crate::fusion::{fuse_advanced, fuse_basic, AdvancedMode};
use crate::fuzzy::{fit_tree, ClusterFitConfig, ClusterTree, TreeNode};
use crate::lower::{lower, MapFunction, PartitionPolicy, PrimitiveGraph};
use crate::model::{LayerOp, SequentialBuilder};
use crate::sim::execute;
use crate::tables::{build_exact_table, build_fuzzy_table, build_index_table, KeyField, KeySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn field(bits: u32, lo: i64, src: QuantSpec) -> KeyField {
    KeyField {
        spec: KeySpec { bits, frac: 0, lo },
        src,
        index_hi: None,
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

/// One fuzzy Map over a two-field input: `0.4 x + 1` at the leaf centroid.
fn worked_program() -> (CompiledGraph, PipelineProgram) {
    let q = QuantSpec::new(16, 8);
    let f = MapFunction::diagonal(&[0.4, 0.4], &[1.0, 1.0]);
    let mut g = PrimitiveGraph::new(2);
    let m = g.push(
        NodeKind::Map {
            input: Source::Input,
            func: f.clone(),
            out_len: 2,
        },
        vec!["fc".into()],
    );
    g.outputs.push(Source::Node(m));
    let table = build_fuzzy_table(m, &f, &worked_tree(), vec![field(4, 0, q); 2], vec![q; 2], 4096).unwrap();
    let c = CompiledGraph::assemble(g, vec![q; 2], vec![vec![q; 2]], vec![table]).unwrap();
    let p = schedule(&c, &ResourceModel::default(), None).unwrap();
    (c, p)
}

#[test]
fn worked_fuzzy_map_takes_one_stage() {
    let (_, p) = worked_program();
    assert_eq!(p.stages.len(), 1);
    assert_eq!(p.stages[0].tables.len(), 1);
    assert_eq!(p.stages[0].tables[0].results.len(), 2);
    assert_eq!(p.tables[0].kind, crate::tables::TableKind::Ternary);
    let q = p.input_q[0];
    let out = execute(&p, &[q.quantize(3.0), q.quantize(7.0)]).unwrap();
    let y: Vec<f64> = out.iter().zip(&p.output_q).map(|(&r, q)| q.dequantize(r)).collect();
    assert!((y[0] - 1.8).abs() <= q.step() && (y[1] - 4.0).abs() <= q.step(), "{y:?}");
}

fn chain(len: usize) -> CompiledGraph {
    let q = QuantSpec::new(8, 0);
    let mut g = PrimitiveGraph::new(1);
    let mut src = Source::Input;
    let mut tables = Vec::new();
    let mut node_q = Vec::new();
    for _ in 0..len {
        let f = MapFunction::Elementwise {
            op: crate::lower::ElemOp::Relu,
        };
        let id = g.push(
            NodeKind::Map {
                input: src,
                func: f.clone(),
                out_len: 1,
            },
            vec![],
        );
        tables.push(build_exact_table(id, &f, vec![field(8, -128, q)], vec![q], 16).unwrap());
        node_q.push(vec![q]);
        src = Source::Node(id);
    }
    g.outputs.push(src);
    CompiledGraph::assemble(g, vec![q], node_q, tables).unwrap()
}

#[test]
fn long_chain_runs_out_of_stages() {
    let c = chain(25);
    match schedule(&c, &ResourceModel::default(), None) {
        Err(Error::InsufficientStages { needed, available, .. }) => {
            assert_eq!((needed, available), (25, 20));
        }
        other => panic!("expected insufficient stages, got {other:?}"),
    }
    let p = schedule(&c, &ResourceModel { stages: 25, ..ResourceModel::default() }, None).unwrap();
    assert_eq!(p.stages.len(), 25);
    // A chain only ever needs the input plus two live values.
    assert!(p.slots.len() <= 3, "{} containers", p.slots.len());
    for v in -128..128 {
        assert_eq!(execute(&p, &[v]).unwrap(), vec![v.max(0)]);
    }
    let one = ResourceModel {
        stages: 1,
        ..ResourceModel::default()
    };
    assert!(matches!(schedule(&chain(2), &one, None), Err(Error::InsufficientStages { .. })));
}

#[test]
fn identity_exact_table_returns_its_key() {
    let c = chain(0);
    let q = QuantSpec::new(8, 0);
    let f = MapFunction::identity(1);
    let mut g = PrimitiveGraph::new(1);
    let m = g.push(
        NodeKind::Map {
            input: Source::Input,
            func: f.clone(),
            out_len: 1,
        },
        vec![],
    );
    g.outputs.push(Source::Node(m));
    let t = build_exact_table(m, &f, vec![field(8, -128, q)], vec![q], 16).unwrap();
    let c2 = CompiledGraph::assemble(g, vec![q], vec![vec![q]], vec![t]).unwrap();
    let p = schedule(&c2, &ResourceModel::default(), None).unwrap();
    for k in -128..128 {
        assert_eq!(execute(&p, &[k]).unwrap(), vec![k]);
    }
    assert_eq!(c.graph.nodes.len(), 0);
}

#[test]
fn sum_saturates_at_output_width() {
    let q = QuantSpec::new(16, 0);
    let mut g = PrimitiveGraph::new(2);
    let part = g.push(
        NodeKind::Partition {
            sources: vec![Source::Input],
            segments: vec![vec![0], vec![1]],
        },
        vec![],
    );
    let sr = g.push(
        NodeKind::SumReduce {
            inputs: vec![Source::Segment(part, 0), Source::Segment(part, 1)],
            len: 1,
        },
        vec![],
    );
    g.outputs.push(Source::Node(sr));
    let c = CompiledGraph::assemble(g, vec![q; 2], vec![vec![], vec![q]], vec![]).unwrap();
    let p = schedule(&c, &ResourceModel::default(), None).unwrap();
    assert_eq!(execute(&p, &[30000, 30000]).unwrap(), vec![32767]);
    assert_eq!(execute(&p, &[-30000, -30000]).unwrap(), vec![-32768]);
    assert_eq!(c.eval_quantized(&[30000, 30000]).unwrap(), vec![32767]);
}

#[test]
fn depth_d_tree_has_two_to_the_d_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts: Vec<Vec<f64>> = (0..400)
        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let q = QuantSpec::new(16, 12);
    for depth in 1..=6 {
        let tree = fit_tree(&pts, ClusterFitConfig { depth, min_leaf: 1 }).unwrap();
        let f = MapFunction::identity(2);
        let mut g = PrimitiveGraph::new(2);
        let m = g.push(
            NodeKind::Map {
                input: Source::Input,
                func: f.clone(),
                out_len: 2,
            },
            vec![],
        );
        g.outputs.push(Source::Node(m));
        let key = vec![
            KeyField {
                spec: KeySpec::for_range(crate::model::Range { min: -1.0, max: 1.0 }, 8, q),
                src: q,
                index_hi: None
            };
            2
        ];
        let t = build_fuzzy_table(m, &f, &tree, key, vec![q; 2], 4096).unwrap();
        let c = CompiledGraph::assemble(g, vec![q; 2], vec![vec![q; 2]], vec![t]).unwrap();
        let p = schedule(&c, &ResourceModel::default(), None).unwrap();
        let r = account(&p, &ResourceModel::default());
        assert_eq!(r.payload_rows, 1 << depth);
        assert!(r.ternary_rules >= 1 << depth);
        assert_eq!(r.total_sram_bits, (1 << depth) * 32);
    }
}

#[test]
fn exact_table_sram_is_rows_times_payload() {
    let q = QuantSpec::new(16, 0);
    let f = MapFunction::identity(2);
    let mut g = PrimitiveGraph::new(1);
    let part = g.push(
        NodeKind::Partition {
            sources: vec![Source::Input],
            segments: vec![vec![0]],
        },
        vec![],
    );
    let _ = part;
    let m = g.push(
        NodeKind::Map {
            input: Source::Input,
            func: MapFunction::Affine {
                weight: vec![vec![1.0], vec![2.0]],
                offset: vec![0.0, 0.0],
            },
            out_len: 2,
        },
        vec![],
    );
    g.outputs.push(Source::Node(m));
    let NodeKind::Map { func, .. } = &g.nodes[m].kind else { unreachable!() };
    let t = build_exact_table(m, func, vec![field(8, -128, q)], vec![q; 2], 16).unwrap();
    let c = CompiledGraph::assemble(g, vec![q], vec![vec![], vec![q; 2]], vec![t]).unwrap();
    let p = schedule(&c, &ResourceModel::default(), None).unwrap();
    assert_eq!(account(&p, &ResourceModel::default()).total_sram_bits, 8192);
    assert_eq!(f.out_len(2), 2);
}

#[test]
fn windowed_index_layout_is_48_bits() {
    let q = QuantSpec::new(16, 0);
    let tree = fit_tree(
        &(0..64).map(|i| vec![i as f64, (i * 7 % 64) as f64]).collect::<Vec<_>>(),
        ClusterFitConfig { depth: 4, min_leaf: 1 },
    )
    .unwrap();
    let table = build_index_table(0, &tree, vec![field(8, 0, q); 2], QuantSpec::new(16, 0), 4096).unwrap();
    let spec = StreamSpec {
        window: 8,
        features: vec![PacketFeature::Len, PacketFeature::Ipd],
        feature_q: vec![q; 2],
        store: FlowStore::Index,
        tokenizers: vec![Tokenizer {
            features: vec![0, 1],
            table,
        }],
    };
    assert_eq!(spec.tokenizers[0].index_bits(), 4);
    let layout = spec.layout();
    assert_eq!(layout.bits_per_flow(), 48);
    assert_eq!(layout.fields[0].bits, 16);
    let raw = StreamSpec {
        store: FlowStore::Raw,
        tokenizers: vec![],
        ..spec
    };
    assert_eq!(raw.layout().bits_per_flow(), 16 + 7 * 2 * 16);
}

fn random_mlp(rng: &mut ChaCha8Rng, dims: &[usize]) -> crate::model::ModelGraph {
    let mut b = SequentialBuilder::new("x", vec![dims[0]]);
    for (i, w) in dims.windows(2).enumerate() {
        let weight = (0..w[1])
            .map(|_| (0..w[0]).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let bias = (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
        b = b.push(&format!("fc{i}"), LayerOp::Fc { weight, bias }, vec![w[1]]);
        if i + 2 < dims.len() {
            b = b.push(&format!("act{i}"), LayerOp::Tanh, vec![w[1]]);
        }
    }
    b.build()
}

#[test]
fn program_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (case, strategy) in [TableStrategy::Auto, TableStrategy::Fuzzy, TableStrategy::Exact]
        .into_iter()
        .enumerate()
    {
        let m = random_mlp(&mut rng, &[6, 8, 8, 3]);
        let width = if strategy == TableStrategy::Exact { 1 } else { 2 };
        let g = fuse_basic(&lower(&m, &PartitionPolicy::uniform(width)).unwrap()).0;
        let data: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let cfg = QuantConfig {
            strategy,
            ..QuantConfig::default()
        };
        let c = compile_graph(&g, &data, &cfg).unwrap();
        let p = schedule(&c, &ResourceModel::default(), None).unwrap();
        assert_eq!(p.map_count(), c.graph.map_count());
        let allowed = [
            Instruction::Compare,
            Instruction::Match,
            Instruction::AddSaturate,
            Instruction::Shift,
            Instruction::Copy,
        ];
        assert!(p.instruction_set().iter().all(|i| allowed.contains(i)));
        for _ in 0..200 {
            let raw: Vec<i64> = c
                .input_q
                .iter()
                .map(|q| rng.random_range(q.min_raw()..=q.max_raw()))
                .collect();
            assert_eq!(execute(&p, &raw).unwrap(), c.eval_quantized(&raw).unwrap(), "case {case}");
        }
        let again = schedule(&c, &ResourceModel::default(), None).unwrap();
        assert_eq!(p.to_json().unwrap(), again.to_json().unwrap());
        let back = PipelineProgram::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }
}

#[test]
fn nam_program_fits_two_stages() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = random_mlp(&mut rng, &[8, 4]);
    let g = lower(&m, &PartitionPolicy::uniform(2)).unwrap();
    let (f, _) = fuse_advanced(&g, AdvancedMode::Nam).unwrap();
    let data: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let c = compile_graph(&f, &data, &QuantConfig::default()).unwrap();
    let p = schedule(&c, &ResourceModel::default(), None).unwrap();
    assert_eq!(p.map_count(), 4);
    assert!(p.stages.len() <= 2);
}

#[test]
fn tight_tcam_budget_is_reported() {
    let (c, _) = worked_program();
    let res = ResourceModel {
        tcam_bits_per_stage: 8,
        ..ResourceModel::default()
    };
    match schedule(&c, &res, None) {
        Err(Error::Budget { resource, .. }) => assert_eq!(resource, "tcam"),
        other => panic!("{other:?}"),
    }
    let res = ResourceModel {
        phv_bits: 32,
        ..ResourceModel::default()
    };
    assert!(matches!(schedule(&c, &res, None), Err(Error::Budget { resource: "phv", .. })));
}

#[test]
fn table_limit_spills_to_next_stage() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = random_mlp(&mut rng, &[8, 2]);
    let g = fuse_basic(&lower(&m, &PartitionPolicy::uniform(1)).unwrap()).0;
    let data: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let c = compile_graph(&g, &data, &QuantConfig::default()).unwrap();
    let res = ResourceModel {
        per_stage_table_limit: 3,
        ..ResourceModel::default()
    };
    let p = schedule(&c, &res, None).unwrap();
    assert!(p.stages.iter().all(|s| s.tables.len() <= 3));
    assert_eq!(p.map_count(), 8);
    assert_eq!(p.stages.len(), 3);
    let r = account(&p, &res);
    assert_eq!(r.total_sram_bits, r.stages.iter().map(|s| s.sram_bits).sum::<u64>());
    assert!(r.to_table().contains("total: 3 stages"));
    for x in &data {
        let raw = c.quantize_input(x);
        assert_eq!(execute(&p, &raw).unwrap(), c.eval_quantized(&raw).unwrap());
    }
}
