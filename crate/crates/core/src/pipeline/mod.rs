//! Stage scheduling of compiled graphs onto a match-action pipeline, and the
//! resource accounting of the resulting program.

mod account;
mod stream;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compile::CompiledGraph;
use crate::error::{Error, Result};
use crate::lower::{Base, NodeKind, Source};
use crate::model::Head;
use crate::tables::{lane_bound, MappingTable, QuantSpec};

pub use account::{account, ResourceReport, StageUsage};
pub use stream::{FlowField, FlowLayout, FlowStore, PacketFeature, StreamSpec, Tokenizer};

/// Width of accumulator containers.
pub const ACCUMULATOR_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResourceModel {
    pub stages: usize,
    pub sram_bits_per_stage: u64,
    pub tcam_bits_per_stage: u64,
    pub action_bus_bits: u64,
    pub phv_bits: u64,
    pub per_stage_table_limit: usize,
    pub stateful_sram_bits: u64,
}

impl Default for ResourceModel {
    fn default() -> Self {
        ResourceModel {
            stages: 20,
            sram_bits_per_stage: 10 << 20,
            tcam_bits_per_stage: 1 << 19,
            action_bus_bits: 1024,
            phv_bits: 4096,
            per_stage_table_limit: 16,
            stateful_sram_bits: 10 << 20,
        }
    }
}

impl ResourceModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("stages", self.stages as u64),
            ("sram_bits_per_stage", self.sram_bits_per_stage),
            ("tcam_bits_per_stage", self.tcam_bits_per_stage),
            ("action_bus_bits", self.action_bus_bits),
            ("phv_bits", self.phv_bits),
            ("per_stage_table_limit", self.per_stage_table_limit as u64),
            ("stateful_sram_bits", self.stateful_sram_bits),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Argument(format!("resource model field `{name}` must be positive")));
            }
        }
        Ok(())
    }

    fn unbounded() -> ResourceModel {
        ResourceModel {
            stages: usize::MAX / 2,
            sram_bits_per_stage: u64::MAX,
            tcam_bits_per_stage: u64::MAX,
            action_bus_bits: u64::MAX,
            phv_bits: u64::MAX,
            per_stage_table_limit: usize::MAX,
            stateful_sram_bits: u64::MAX,
        }
    }
}

/// One PHV container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: u32,
    pub width: u32,
}

/// A table application: extract keys from slots, match, write payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableApply {
    /// Index into the program's table list.
    pub table: usize,
    /// Graph node the table realizes.
    pub node: usize,
    pub keys: Vec<usize>,
    pub results: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AluAction {
    /// `acc = (first ? 0 : acc) + clamp(src << shift, -bound, bound)`, the
    /// sum saturating at the accumulator width.
    Accumulate {
        acc: usize,
        src: usize,
        shift: i32,
        bound: i64,
        first: bool,
    },
    /// `slot = clamp(slot, lo, hi)`.
    Clamp { slot: usize, lo: i64, hi: i64 },
}

/// The operations a program may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Instruction {
    Compare,
    Match,
    AddSaturate,
    Shift,
    Copy,
}

impl AluAction {
    pub fn instructions(&self) -> Vec<Instruction> {
        match self {
            AluAction::Accumulate { first, .. } => {
                let mut v = vec![Instruction::Shift, Instruction::Compare];
                v.push(if *first { Instruction::Copy } else { Instruction::AddSaturate });
                v
            }
            AluAction::Clamp { .. } => vec![Instruction::Compare],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    /// Applied first; keys come from values written in earlier stages.
    pub tables: Vec<TableApply>,
    /// Executed in order after the table payloads are written.
    pub alu: Vec<AluAction>,
}

/// A scheduled program: the document the simulator executes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineProgram {
    pub resources: ResourceModel,
    pub head: Head,
    pub input_q: Vec<QuantSpec>,
    pub output_q: Vec<QuantSpec>,
    pub slots: Vec<Slot>,
    pub input_slots: Vec<usize>,
    pub output_slots: Vec<usize>,
    /// First stage of the window program; earlier stages hold tokenizers.
    pub base_stage: usize,
    pub stages: Vec<Stage>,
    pub tables: Vec<MappingTable>,
    pub stream: Option<StreamSpec>,
    /// Anomaly threshold on the raw output, autoencoder heads only.
    pub threshold_raw: Option<i64>,
    /// Stage of every graph node: table stage for Maps, final add stage for
    /// SumReduces, `None` for Partitions.
    pub node_stage: Vec<Option<usize>>,
}

impl PipelineProgram {
    pub fn map_count(&self) -> usize {
        self.stages[self.base_stage..].iter().map(|s| s.tables.len()).sum()
    }

    pub fn stages_used(&self) -> usize {
        self.stages.len()
    }

    /// Every instruction the program uses.
    pub fn instruction_set(&self) -> std::collections::BTreeSet<Instruction> {
        let mut set = std::collections::BTreeSet::new();
        for stage in &self.stages {
            for t in &stage.tables {
                set.insert(Instruction::Match);
                let table = &self.tables[t.table];
                if table.key.iter().any(|k| k.spec.frac != k.src.frac as i32) {
                    set.insert(Instruction::Shift);
                }
                set.insert(Instruction::Compare);
                set.insert(Instruction::Copy);
            }
            for a in &stage.alu {
                set.extend(a.instructions());
            }
        }
        set
    }

    pub fn phv_bits(&self) -> u64 {
        self.slots.iter().map(|s| s.width as u64).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<PipelineProgram> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Usage {
    tables: usize,
    sram: u64,
    tcam: u64,
    bus: u64,
}

struct Placement {
    map_stage: Vec<Option<usize>>,
    /// Per SumReduce: final stage and per-element add stages per operand.
    sr_final: Vec<Option<usize>>,
}

fn table_ready(p: &Placement, base: Base, start: usize) -> usize {
    match base {
        Base::Input => start,
        Base::Node(id) => p.map_stage[id].or(p.sr_final[id]).map_or(start, |s| s + 1),
    }
}

fn alu_ready(p: &Placement, base: Base, start: usize) -> usize {
    match base {
        Base::Input => start,
        Base::Node(id) => p.map_stage[id].or(p.sr_final[id]).unwrap_or(start),
    }
}

fn place(
    compiled: &CompiledGraph,
    res: &ResourceModel,
    start: usize,
    pre: &[Usage],
) -> Result<(Placement, Vec<Usage>)> {
    let g = &compiled.graph;
    let n = g.nodes.len();
    let mut p = Placement {
        map_stage: vec![None; n],
        sr_final: vec![None; n],
    };
    let mut usage: Vec<Usage> = pre.to_vec();
    for (id, node) in g.nodes.iter().enumerate() {
        match &node.kind {
            NodeKind::Partition { .. } => {}
            NodeKind::Map { input, .. } => {
                let table = compiled
                    .table_for(id)
                    .ok_or_else(|| Error::Argument(format!("map {id} has no table")))?;
                let earliest = (0..g.source_len(*input))
                    .map(|j| table_ready(&p, g.resolve(*input, j).0, start))
                    .max()
                    .unwrap_or(start);
                let cost = Usage {
                    tables: 1,
                    sram: table.sram_bits(),
                    tcam: table.tcam_bits(),
                    bus: table.payload_bits(),
                };
                for (resource, need, limit) in [
                    ("sram", cost.sram, res.sram_bits_per_stage),
                    ("tcam", cost.tcam, res.tcam_bits_per_stage),
                    ("action bus", cost.bus, res.action_bus_bits),
                ] {
                    if need > limit {
                        return Err(Error::Budget {
                            resource,
                            stage: earliest,
                            used: need,
                            limit,
                            detail: format!("table of map {id} alone exceeds one stage"),
                        });
                    }
                }
                let mut s = earliest;
                loop {
                    if s >= res.stages {
                        return Err(Error::InsufficientStages {
                            node: id,
                            needed: s + 1,
                            available: res.stages,
                        });
                    }
                    if usage.len() <= s {
                        usage.resize(s + 1, Usage::default());
                    }
                    let u = usage[s];
                    if u.tables < res.per_stage_table_limit
                        && u.sram + cost.sram <= res.sram_bits_per_stage
                        && u.tcam + cost.tcam <= res.tcam_bits_per_stage
                        && u.bus + cost.bus <= res.action_bus_bits
                    {
                        break;
                    }
                    s += 1;
                }
                let u = &mut usage[s];
                u.tables += 1;
                u.sram += cost.sram;
                u.tcam += cost.tcam;
                u.bus += cost.bus;
                p.map_stage[id] = Some(s);
            }
            NodeKind::SumReduce { inputs, len } => {
                let f = inputs
                    .iter()
                    .flat_map(|&src| (0..*len).map(move |e| (src, e)))
                    .map(|(src, e)| alu_ready(&p, g.resolve(src, e).0, start))
                    .max()
                    .unwrap_or(start);
                if f >= res.stages {
                    return Err(Error::InsufficientStages {
                        node: id,
                        needed: f + 1,
                        available: res.stages,
                    });
                }
                if usage.len() <= f {
                    usage.resize(f + 1, Usage::default());
                }
                p.sr_final[id] = Some(f);
            }
        }
    }
    Ok((p, usage))
}

/// Greedy level scheduling: every Map goes to the earliest stage where its
/// keys are available and the stage budgets still admit its table;
/// SumReduce operands are accumulated in the stage they become available.
pub fn schedule(
    compiled: &CompiledGraph,
    res: &ResourceModel,
    stream: Option<StreamSpec>,
) -> Result<PipelineProgram> {
    res.validate()?;
    compiled.graph.check()?;
    let g = &compiled.graph;

    let mut tables: Vec<MappingTable> = Vec::new();
    let mut pre: Vec<Usage> = Vec::new();
    let mut stages: Vec<Stage> = Vec::new();
    let start = match &stream {
        Some(spec) if !spec.tokenizers.is_empty() => {
            let mut u = Usage::default();
            for tok in &spec.tokenizers {
                u.tables += 1;
                u.sram += tok.table.sram_bits();
                u.tcam += tok.table.tcam_bits();
                u.bus += tok.table.payload_bits();
            }
            for (resource, used, limit) in [
                ("tables", u.tables as u64, res.per_stage_table_limit as u64),
                ("sram", u.sram, res.sram_bits_per_stage),
                ("tcam", u.tcam, res.tcam_bits_per_stage),
                ("action bus", u.bus, res.action_bus_bits),
            ] {
                if used > limit {
                    return Err(Error::Budget {
                        resource,
                        stage: 0,
                        used,
                        limit,
                        detail: "tokenizer tables".into(),
                    });
                }
            }
            pre.push(u);
            stages.push(Stage::default());
            1
        }
        _ => 0,
    };

    let (p, usage) = match place(compiled, res, start, &pre) {
        Ok(v) => v,
        Err(Error::InsufficientStages { node, needed, available }) => {
            let needed = place(compiled, &ResourceModel::unbounded(), start, &pre)
                .map(|(_, u)| u.len())
                .unwrap_or(needed)
                .max(needed);
            return Err(Error::InsufficientStages {
                node,
                needed,
                available,
            });
        }
        Err(e) => return Err(e),
    };
    stages.resize(usage.len().max(start), Stage::default());

    // Values: (def stage, last use, width); def -1 for program inputs.
    const FOREVER: i64 = i64::MAX;
    let mut values: Vec<(i64, i64, u32)> = Vec::new();
    let mut input_val = Vec::with_capacity(g.input_len);
    for q in &compiled.input_q {
        input_val.push(values.len());
        values.push((-1, -1, q.width));
    }
    let mut node_val: Vec<Vec<usize>> = vec![Vec::new(); g.nodes.len()];
    for (id, node) in g.nodes.iter().enumerate() {
        let def = match &node.kind {
            NodeKind::Partition { .. } => continue,
            NodeKind::Map { .. } => p.map_stage[id].unwrap() as i64,
            NodeKind::SumReduce { .. } => 0,
        };
        for q in &compiled.node_q[id] {
            let width = if node.is_reduce() { ACCUMULATOR_BITS } else { q.width };
            node_val[id].push(values.len());
            values.push((def, def, width));
        }
    }
    let val_of = |b: Base, j: usize| match b {
        Base::Input => input_val[j],
        Base::Node(id) => node_val[id][j],
    };
    let touch = |values: &mut Vec<(i64, i64, u32)>, v: usize, stage: i64| {
        values[v].1 = values[v].1.max(stage);
    };

    // Actions refer to logical values until containers are assigned.
    let mut applies: Vec<(usize, TableApply)> = Vec::new();
    let mut alu: Vec<(usize, AluAction)> = Vec::new();
    for (id, node) in g.nodes.iter().enumerate() {
        match &node.kind {
            NodeKind::Partition { .. } => {}
            NodeKind::Map { input, .. } => {
                let s = p.map_stage[id].unwrap();
                let keys: Vec<usize> = (0..g.source_len(*input))
                    .map(|j| {
                        let (b, e) = g.resolve(*input, j);
                        val_of(b, e)
                    })
                    .collect();
                for &k in &keys {
                    touch(&mut values, k, s as i64);
                }
                let table = compiled.table_for(id).unwrap().clone();
                tables.push(table);
                applies.push((
                    s,
                    TableApply {
                        table: tables.len() - 1,
                        node: id,
                        keys,
                        results: node_val[id].clone(),
                    },
                ));
            }
            NodeKind::SumReduce { inputs, len } => {
                let f = p.sr_final[id].unwrap();
                let bound = lane_bound(inputs.len());
                for e in 0..*len {
                    let acc = node_val[id][e];
                    let out = compiled.node_q[id][e];
                    let mut adds: Vec<(usize, usize, usize, i32)> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, &src)| {
                            let (b, j) = g.resolve(src, e);
                            let q = compiled.base_q(b)[j];
                            (alu_ready(&p, b, start), k, val_of(b, j), out.frac as i32 - q.frac as i32)
                        })
                        .collect();
                    adds.sort();
                    values[acc].0 = adds[0].0 as i64;
                    for (i, &(s, _, v, shift)) in adds.iter().enumerate() {
                        touch(&mut values, v, s as i64);
                        alu.push((
                            s,
                            AluAction::Accumulate {
                                acc,
                                src: v,
                                shift,
                                bound,
                                first: i == 0,
                            },
                        ));
                    }
                    touch(&mut values, acc, f as i64);
                    alu.push((
                        f,
                        AluAction::Clamp {
                            slot: acc,
                            lo: out.min_raw(),
                            hi: out.max_raw(),
                        },
                    ));
                }
            }
        }
    }
    let mut output_vals = Vec::new();
    for &src in &g.outputs {
        for j in 0..g.source_len(src) {
            let (b, e) = g.resolve(src, j);
            let v = val_of(b, e);
            values[v].1 = FOREVER;
            output_vals.push(v);
        }
    }

    // Container assignment: values in order of definition; a container is
    // reused once its previous value's last read is in an earlier stage.
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by_key(|&v| (values[v].0, v));
    let mut slots: Vec<Slot> = Vec::new();
    let mut busy_until: Vec<i64> = Vec::new();
    let mut assign = vec![0usize; values.len()];
    let mut offset: u32 = 0;
    for v in order {
        let (def, last, width) = values[v];
        let reuse = (0..slots.len()).find(|&c| slots[c].width == width && busy_until[c] < def);
        let c = match reuse {
            Some(c) => c,
            None => {
                slots.push(Slot { offset, width });
                busy_until.push(-1);
                offset += width;
                slots.len() - 1
            }
        };
        busy_until[c] = last;
        assign[v] = c;
    }
    let phv: u64 = slots.iter().map(|s| s.width as u64).sum::<u64>()
        + stream.as_ref().map_or(0, StreamSpec::phv_bits);
    if phv > res.phv_bits {
        return Err(Error::Budget {
            resource: "phv",
            stage: 0,
            used: phv,
            limit: res.phv_bits,
            detail: format!("{} containers", slots.len()),
        });
    }

    for (s, mut a) in applies {
        a.keys.iter_mut().for_each(|k| *k = assign[*k]);
        a.results.iter_mut().for_each(|r| *r = assign[*r]);
        stages[s].tables.push(a);
    }
    for (s, mut a) in alu {
        match &mut a {
            AluAction::Accumulate { acc, src, .. } => {
                *acc = assign[*acc];
                *src = assign[*src];
            }
            AluAction::Clamp { slot, .. } => *slot = assign[*slot],
        }
        stages[s].alu.push(a);
    }

    let mut node_stage: BTreeMap<usize, usize> = BTreeMap::new();
    for id in 0..g.nodes.len() {
        if let Some(s) = p.map_stage[id].or(p.sr_final[id]) {
            node_stage.insert(id, s);
        }
    }
    Ok(PipelineProgram {
        resources: *res,
        head: Head::Classifier,
        input_q: compiled.input_q.clone(),
        output_q: compiled.output_q(),
        slots,
        input_slots: input_val.iter().map(|&v| assign[v]).collect(),
        output_slots: output_vals.iter().map(|&v| assign[v]).collect(),
        base_stage: start,
        stages,
        tables,
        stream,
        threshold_raw: None,
        node_stage: (0..g.nodes.len()).map(|id| node_stage.get(&id).copied()).collect(),
    })
}

/// Graph source of every output element, for callers that need to relate
/// output slots back to nodes.
pub fn output_sources(compiled: &CompiledGraph) -> Vec<(Source, usize)> {
    compiled
        .graph
        .outputs
        .iter()
        .flat_map(|&s| (0..compiled.graph.source_len(s)).map(move |i| (s, i)))
        .collect()
}

#[cfg(test)]
mod tests;
