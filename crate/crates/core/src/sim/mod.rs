//! Integer-only execution of scheduled programs, for single inputs and for
//! per-flow packet streams.

mod packets;
mod stream;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Head;
use crate::pipeline::{AluAction, PipelineProgram};
use crate::tables::{align, pack_key, MappingTable, TableKind};

pub use packets::{
    load_packets, load_packets_csv, load_packets_jsonl, write_decisions_jsonl, write_packets_csv,
    write_packets_jsonl, PacketRecord,
};
pub use stream::{packet_features, run_stream, FlowState, StreamDecision, StreamOutput, MAX_IPD_US};

/// One table application during execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupRecord {
    pub stage: usize,
    pub node: usize,
    pub keys: Vec<u64>,
    /// Matched rule for ternary tables.
    pub rule: Option<usize>,
    /// Payload row that was written.
    pub row: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTrace {
    pub lookups: Vec<LookupRecord>,
    /// PHV contents after each executed stage.
    pub snapshots: Vec<Vec<i64>>,
    pub output: Vec<i64>,
}

fn fits(v: i64, width: u32) -> bool {
    let half = 1i64 << (width - 1);
    (-half..half).contains(&v)
}

/// Matches `keys` against a table; returns the payload row and, for ternary
/// tables, the matched rule. Lowest priority number wins.
pub fn match_table(table: &MappingTable, keys: &[u64]) -> Option<(usize, Option<usize>)> {
    let packed = pack_key(keys, &table.widths());
    match table.kind {
        TableKind::Exact => ((packed as usize) < table.rows.len()).then_some((packed as usize, None)),
        TableKind::Ternary => table
            .rules
            .iter()
            .enumerate()
            .filter(|(_, r)| r.matches(packed))
            .min_by_key(|(i, r)| (r.priority, *i))
            .map(|(i, r)| (r.payload, Some(i))),
    }
}

fn run(program: &PipelineProgram, input: &[i64], mut trace: Option<&mut SimTrace>) -> Result<Vec<i64>> {
    if input.len() != program.input_slots.len() {
        return Err(Error::Argument(format!(
            "input has {} values, program expects {}",
            input.len(),
            program.input_slots.len()
        )));
    }
    let mut phv = vec![0i64; program.slots.len()];
    for ((&v, &slot), q) in input.iter().zip(&program.input_slots).zip(&program.input_q) {
        if v < q.min_raw() || v > q.max_raw() {
            return Err(Error::Argument(format!("input value {v} outside {}-bit range", q.width)));
        }
        phv[slot] = v;
    }
    for (s, stage) in program.stages.iter().enumerate().skip(program.base_stage) {
        for apply in &stage.tables {
            let table = &program.tables[apply.table];
            let keys: Vec<u64> = apply
                .keys
                .iter()
                .zip(&table.key)
                .map(|(&slot, field)| field.extract(phv[slot]))
                .collect();
            let (row, rule) = match_table(table, &keys).ok_or_else(|| {
                Error::SimFault(format!("stage {s}: no entry of node {} matches {keys:?}", apply.node))
            })?;
            for (&slot, &v) in apply.results.iter().zip(&table.rows[row]) {
                phv[slot] = v;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.lookups.push(LookupRecord {
                    stage: s,
                    node: apply.node,
                    keys,
                    rule,
                    row,
                });
            }
        }
        for action in &stage.alu {
            match *action {
                AluAction::Accumulate {
                    acc,
                    src,
                    shift,
                    bound,
                    first,
                } => {
                    let lane = shift_by(phv[src], shift).clamp(-bound, bound);
                    let width = program.slots[acc].width;
                    let base = if first { 0 } else { phv[acc] };
                    let half = 1i64 << (width - 1);
                    phv[acc] = (base + lane).clamp(-half, half - 1);
                }
                AluAction::Clamp { slot, lo, hi } => phv[slot] = phv[slot].clamp(lo, hi),
            }
        }
        for (i, (&v, slot)) in phv.iter().zip(&program.slots).enumerate() {
            if !fits(v, slot.width) {
                return Err(Error::SimFault(format!("stage {s}: container {i} overflows {} bits", slot.width)));
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.snapshots.push(phv.clone());
        }
    }
    let out: Vec<i64> = program.output_slots.iter().map(|&s| phv[s]).collect();
    if let Some(t) = trace {
        t.output = out.clone();
    }
    Ok(out)
}

fn shift_by(v: i64, shift: i32) -> i64 {
    if shift >= 0 {
        align(v, 0, shift as u32)
    } else {
        align(v, (-shift) as u32, 0)
    }
}

/// Runs the window program on a raw input vector.
pub fn execute(program: &PipelineProgram, input: &[i64]) -> Result<Vec<i64>> {
    run(program, input, None)
}

pub fn execute_traced(program: &PipelineProgram, input: &[i64]) -> Result<SimTrace> {
    let mut trace = SimTrace::default();
    run(program, input, Some(&mut trace))?;
    Ok(trace)
}

/// Classifier heads: index of the largest output, lowest index on ties,
/// compared after aligning every output to a common fraction. Autoencoder
/// heads: 1 when the score exceeds the program's threshold.
pub fn decide(program: &PipelineProgram, raw: &[i64]) -> usize {
    match program.head {
        Head::Classifier => {
            let frac = program.output_q.iter().map(|q| q.frac).max().unwrap_or(0);
            let mut best = 0;
            let mut best_v = i64::MIN;
            for (i, (&v, q)) in raw.iter().zip(&program.output_q).enumerate() {
                let a = align(v, q.frac, frac);
                if a > best_v {
                    best = i;
                    best_v = a;
                }
            }
            best
        }
        Head::Autoencoder => usize::from(raw.first().copied().unwrap_or(0) > program.threshold_raw.unwrap_or(i64::MAX)),
    }
}
