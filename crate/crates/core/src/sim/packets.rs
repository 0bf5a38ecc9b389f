use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::StreamDecision;
use crate::error::{Error, Result};

/// One pre-extracted packet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub flow_id: String,
    pub timestamp_us: u64,
    pub pkt_len: u32,
    #[serde(default, serialize_with = "to_hex", deserialize_with = "from_hex")]
    pub bytes: Vec<u8>,
    /// Ground truth for evaluation; ignored by the simulator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

fn to_hex<S: Serializer>(b: &[u8], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(b))
}

fn from_hex<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<u8>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    hex::decode(s.unwrap_or_default().trim()).map_err(serde::de::Error::custom)
}

pub fn load_packets_csv(path: &Path) -> Result<Vec<PacketRecord>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn load_packets_jsonl(path: &Path) -> Result<Vec<PacketRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Argument(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Picks the reader from the file extension (`.jsonl`/`.json` or CSV).
pub fn load_packets(path: &Path) -> Result<Vec<PacketRecord>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => load_packets_jsonl(path),
        _ => load_packets_csv(path),
    }
}

pub fn write_packets_csv(path: &Path, packets: &[PacketRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["flow_id", "timestamp_us", "pkt_len", "bytes", "label"])?;
    for p in packets {
        w.write_record([
            p.flow_id.clone(),
            p.timestamp_us.to_string(),
            p.pkt_len.to_string(),
            hex::encode(&p.bytes),
            p.label.map(|l| l.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_packets_jsonl(path: &Path, packets: &[PacketRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in packets {
        writeln!(f, "{}", serde_json::to_string(p)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_decisions_jsonl(w: &mut impl Write, decisions: &[StreamDecision]) -> Result<()> {
    for d in decisions {
        writeln!(w, "{}", serde_json::to_string(d)?)?;
    }
    Ok(())
}
