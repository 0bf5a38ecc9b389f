use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{decide, match_table, run, PacketRecord, SimTrace};
use crate::error::{Error, Result};
use crate::pipeline::{FlowStore, PacketFeature, PipelineProgram, StreamSpec};

/// Largest inter-packet delay the 16-bit timestamp difference can express.
pub const MAX_IPD_US: u64 = 65535;

/// Registers kept for one flow.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlowState {
    pub last_timestamp: Option<u64>,
    /// Window elements of the previous `window - 1` packets, oldest first.
    pub ring: VecDeque<Vec<i64>>,
    pub packets: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDecision {
    pub flow_id: String,
    /// 1-based position of the packet within its flow.
    pub packet_index: u64,
    pub decision: usize,
    pub raw_output: Vec<i64>,
    pub lookups: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StreamOutput {
    pub decisions: Vec<StreamDecision>,
    /// One per decision, when tracing was requested.
    pub traces: Vec<SimTrace>,
    /// The window inputs decisions were computed from, parallel to `decisions`.
    pub inputs: Vec<Vec<i64>>,
}

/// Full-precision features of one packet, in the program's feature order.
pub fn packet_features(spec: &StreamSpec, p: &PacketRecord, ipd: u64) -> Vec<f64> {
    spec.features
        .iter()
        .map(|f| match f {
            PacketFeature::Len => p.pkt_len as f64,
            PacketFeature::Ipd => ipd as f64,
            PacketFeature::Byte(i) => p.bytes.get(*i).copied().unwrap_or(0) as f64,
        })
        .collect()
}

/// Window elements one packet contributes: quantized features, or the
/// fuzzy indexes of its tokenizers.
fn packet_elements(spec: &StreamSpec, features: &[f64]) -> Result<(Vec<i64>, usize)> {
    let raw: Vec<i64> = features.iter().zip(&spec.feature_q).map(|(&v, q)| q.quantize(v)).collect();
    match spec.store {
        FlowStore::Raw => Ok((raw, 0)),
        FlowStore::Index => {
            let mut out = Vec::with_capacity(spec.tokenizers.len());
            for (i, tok) in spec.tokenizers.iter().enumerate() {
                let keys: Vec<u64> = tok
                    .features
                    .iter()
                    .zip(&tok.table.key)
                    .map(|(&f, field)| field.extract(raw[f]))
                    .collect();
                let (row, _) = match_table(&tok.table, &keys)
                    .ok_or_else(|| Error::SimFault(format!("tokenizer {i}: no entry matches {keys:?}")))?;
                out.push(tok.table.rows[row][0]);
            }
            Ok((out, spec.tokenizers.len()))
        }
    }
}

/// Feeds packets through per-flow state; a decision is emitted for every
/// packet that completes a window.
pub fn run_stream(program: &PipelineProgram, packets: &[PacketRecord], trace: bool) -> Result<StreamOutput> {
    let spec = program
        .stream
        .as_ref()
        .ok_or_else(|| Error::Argument("program has no stream specification".into()))?;
    if spec.window == 0 || spec.window * spec.per_packet() != program.input_slots.len() {
        return Err(Error::Argument(format!(
            "window {} x {} elements does not match the program input of {}",
            spec.window,
            spec.per_packet(),
            program.input_slots.len()
        )));
    }
    let mut flows: BTreeMap<&str, FlowState> = BTreeMap::new();
    let mut out = StreamOutput::default();
    for p in packets {
        let st = flows.entry(p.flow_id.as_str()).or_default();
        let ipd = match st.last_timestamp {
            None => 0,
            Some(last) if p.timestamp_us < last => {
                return Err(Error::Stream(format!(
                    "flow {}: timestamp {} precedes {}",
                    p.flow_id, p.timestamp_us, last
                )))
            }
            Some(last) => (p.timestamp_us - last).min(MAX_IPD_US),
        };
        st.last_timestamp = Some(p.timestamp_us);
        st.packets += 1;
        let (elems, token_lookups) = packet_elements(spec, &packet_features(spec, p, ipd))?;
        if st.ring.len() + 1 == spec.window {
            let input: Vec<i64> = st.ring.iter().flatten().chain(&elems).copied().collect();
            let mut t = SimTrace::default();
            let raw = run(program, &input, trace.then_some(&mut t))?;
            out.decisions.push(StreamDecision {
                flow_id: p.flow_id.clone(),
                packet_index: st.packets,
                decision: decide(program, &raw),
                raw_output: raw,
                lookups: token_lookups + program.map_count(),
            });
            if trace {
                out.traces.push(t);
            }
            out.inputs.push(input);
        }
        if spec.window > 1 {
            st.ring.push_back(elems);
            if st.ring.len() > spec.window - 1 {
                st.ring.pop_front();
            }
        }
    }
    Ok(out)
}
