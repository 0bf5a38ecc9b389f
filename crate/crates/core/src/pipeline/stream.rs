use serde::{Deserialize, Serialize};

use crate::tables::{MappingTable, QuantSpec};

/// Bits of the stored previous-packet timestamp.
pub const TIMESTAMP_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketFeature {
    Len,
    /// Inter-packet delay in microseconds, 0 for a flow's first packet.
    Ipd,
    /// One byte of the packet's feature bytes.
    Byte(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowStore {
    /// Previous packets' quantized features are kept per flow.
    Raw,
    /// Only their fuzzy indexes are kept.
    Index,
}

/// A tree table turning some of a packet's features into a fuzzy index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    /// Positions in the packet feature list used as key fields.
    pub features: Vec<usize>,
    pub table: MappingTable,
}

impl Tokenizer {
    /// Bits needed to store one index.
    pub fn index_bits(&self) -> u32 {
        let n = self.table.rows.len().max(2) as u64;
        64 - (n - 1).leading_zeros()
    }
}

/// How a windowed per-flow program is fed from a packet stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub window: usize,
    pub features: Vec<PacketFeature>,
    pub feature_q: Vec<QuantSpec>,
    pub store: FlowStore,
    /// One index per tokenizer per packet; empty for raw storage.
    pub tokenizers: Vec<Tokenizer>,
}

impl StreamSpec {
    /// Window-program input elements contributed by each packet.
    pub fn per_packet(&self) -> usize {
        match self.store {
            FlowStore::Raw => self.features.len(),
            FlowStore::Index => self.tokenizers.len(),
        }
    }

    /// PHV space for the current packet's features and indexes.
    pub fn phv_bits(&self) -> u64 {
        let features: u64 = self.feature_q.iter().map(|q| q.width as u64).sum();
        let tokens: u64 = self.tokenizers.iter().map(|t| t.table.payload_bits()).sum();
        features + tokens
    }

    pub fn layout(&self) -> FlowLayout {
        let prior = self.window.saturating_sub(1) as u64;
        let mut fields = vec![FlowField {
            name: "prev_timestamp".into(),
            bits: TIMESTAMP_BITS as u64,
        }];
        match self.store {
            FlowStore::Raw => {
                let per: u64 = self.feature_q.iter().map(|q| q.width as u64).sum();
                fields.push(FlowField {
                    name: "stored_features".into(),
                    bits: prior * per,
                });
            }
            FlowStore::Index => {
                // Indexes are packed into byte-wide registers.
                let per: u64 = self.tokenizers.iter().map(|t| t.index_bits() as u64).sum();
                fields.push(FlowField {
                    name: "fuzzy_indexes".into(),
                    bits: (prior * per).div_ceil(8) * 8,
                });
            }
        }
        FlowLayout { fields }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowField {
    pub name: String,
    pub bits: u64,
}

/// Per-flow register state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowLayout {
    pub fields: Vec<FlowField>,
}

impl FlowLayout {
    pub fn bits_per_flow(&self) -> u64 {
        self.fields.iter().map(|f| f.bits).sum()
    }
}
