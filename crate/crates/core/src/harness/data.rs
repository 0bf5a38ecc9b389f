//! Synthetic datasets: Gaussian blobs for row classification, and packet
//! flows (with optional injected anomalies) for windowed models.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::pipeline::PacketFeature;
use crate::sim::PacketRecord;

/// `classes` isotropic Gaussian clusters in `dim` dimensions whose centers
/// lie `separation` standard deviations from the origin, in random
/// directions. Labels are balanced.
pub fn gaussian_blobs(samples: usize, classes: usize, dim: usize, separation: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-9);
            v.iter().map(|a| a / norm * separation).collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        rows.push(centers[c].iter().map(|m| m + normal.sample(&mut rng)).collect());
        labels.push(c);
    }
    Dataset::new(rows, Some(labels))
}

/// Rows shuffled and cut by fractions (train, validation, test).
pub fn split_dataset(d: &Dataset, fractions: [f64; 3], seed: u64) -> Result<[Dataset; 3]> {
    check_fractions(fractions)?;
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cuts = cut_points(d.len(), fractions);
    let parts: Vec<Dataset> = (0..3).map(|k| d.select(&idx[cuts[k]..cuts[k + 1]])).collect();
    Ok([parts[0].clone(), parts[1].clone(), parts[2].clone()])
}

fn check_fractions(f: [f64; 3]) -> Result<()> {
    if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split fractions {f:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

fn cut_points(n: usize, f: [f64; 3]) -> [usize; 4] {
    let a = (n as f64 * f[0]).round() as usize;
    let b = ((n as f64 * (f[0] + f[1])).round() as usize).max(a);
    [0, a.min(n), b.min(n), n]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub flows: usize,
    pub min_packets: usize,
    pub max_packets: usize,
    /// Traffic classes; labels are class indexes.
    pub classes: usize,
    /// Feature bytes per packet.
    pub bytes: usize,
    /// Fraction of flows replaced by anomalous traffic labelled 1 (only
    /// used with `classes == 1`).
    pub anomaly_fraction: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            flows: 300,
            min_packets: 10,
            max_packets: 24,
            classes: 3,
            bytes: 0,
            anomaly_fraction: 0.0,
            seed: 1,
        }
    }
}

struct Profile {
    len_mean: f64,
    len_sd: f64,
    len_ar: f64,
    ipd_mean: f64,
    ipd_sd: f64,
    byte_mean: f64,
}

fn class_profile(k: usize, classes: usize) -> Profile {
    let t = if classes > 1 { k as f64 / (classes - 1) as f64 } else { 0.0 };
    Profile {
        len_mean: 400.0 + 400.0 * t,
        len_sd: 260.0,
        len_ar: 0.6,
        ipd_mean: 1200.0 + 1600.0 * (1.0 - t),
        ipd_sd: 900.0,
        byte_mean: 40.0 + 150.0 * t,
    }
}

/// Packets of synthetic flows, interleaved in timestamp order. Lengths
/// follow a per-class AR(1) process, delays a clipped Gaussian. Anomalous
/// flows have uncorrelated uniform lengths and short bursty delays.
pub fn generate_flows(cfg: &FlowConfig) -> Result<Vec<PacketRecord>> {
    if cfg.classes == 0 || cfg.flows == 0 || cfg.min_packets == 0 || cfg.max_packets < cfg.min_packets {
        return Err(Error::Argument("flow generator needs classes, flows and a valid packet range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut packets = Vec::new();
    for f in 0..cfg.flows {
        let anomalous = cfg.classes == 1 && rng.random_bool(cfg.anomaly_fraction.clamp(0.0, 1.0));
        let class = if cfg.classes == 1 { 0 } else { f % cfg.classes };
        let label = if cfg.classes == 1 { usize::from(anomalous) } else { class };
        let prof = class_profile(class, cfg.classes);
        let n = rng.random_range(cfg.min_packets..=cfg.max_packets);
        let mut ts: u64 = rng.random_range(0..1_000_000);
        let mut len = prof.len_mean;
        for i in 0..n {
            let (l, ipd) = if anomalous {
                let l = rng.random_range(40.0..1500.0);
                let ipd = if i % 2 == 0 { rng.random_range(5.0..60.0) } else { rng.random_range(4000.0..9000.0) };
                (l, ipd)
            } else {
                len = prof.len_mean + prof.len_ar * (len - prof.len_mean)
                    + prof.len_sd * (1.0 - prof.len_ar * prof.len_ar).sqrt() * normal.sample(&mut rng);
                let ipd = (prof.ipd_mean + prof.ipd_sd * normal.sample(&mut rng)).clamp(20.0, 20000.0);
                (len, ipd)
            };
            if i > 0 {
                ts += ipd.round().max(1.0) as u64;
            }
            let bytes = (0..cfg.bytes)
                .map(|b| {
                    let m = prof.byte_mean + 20.0 * b as f64;
                    (m + 30.0 * normal.sample(&mut rng)).clamp(0.0, 255.0) as u8
                })
                .collect();
            packets.push(PacketRecord {
                flow_id: format!("f{f:05}"),
                timestamp_us: ts,
                pkt_len: l.clamp(40.0, 1500.0).round() as u32,
                bytes,
                label: Some(label),
            });
        }
    }
    packets.sort_by(|a, b| (a.timestamp_us, &a.flow_id).cmp(&(b.timestamp_us, &b.flow_id)));
    Ok(packets)
}

/// Splits packets by flow.
pub fn split_flows(packets: &[PacketRecord], fractions: [f64; 3], seed: u64) -> Result<[Vec<PacketRecord>; 3]> {
    check_fractions(fractions)?;
    let mut ids: Vec<&str> = packets.iter().map(|p| p.flow_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cuts = cut_points(ids.len(), fractions);
    let part: BTreeMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, (0..3).find(|&k| i < cuts[k + 1]).unwrap_or(2)))
        .collect();
    let mut out: [Vec<PacketRecord>; 3] = Default::default();
    for p in packets {
        out[part[p.flow_id.as_str()]].push(p.clone());
    }
    Ok(out)
}

/// Full-precision windows over a packet stream, in the order the simulator
/// emits decisions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Windows {
    /// Time-major `[window, features]` rows.
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub flow_ids: Vec<String>,
    pub packet_index: Vec<u64>,
    /// Per-packet feature vectors of every packet seen.
    pub packet_features: Vec<Vec<f64>>,
}

#[derive(Default)]
struct FlowCursor {
    last_timestamp: Option<u64>,
    packets: u64,
}

pub fn windows(packets: &[PacketRecord], features: &[PacketFeature], window: usize) -> Result<Windows> {
    use crate::pipeline::{FlowStore, StreamSpec};
    let spec = StreamSpec {
        window,
        features: features.to_vec(),
        feature_q: Vec::new(),
        store: FlowStore::Raw,
        tokenizers: Vec::new(),
    };
    let mut flows: BTreeMap<&str, (FlowCursor, std::collections::VecDeque<Vec<f64>>)> = BTreeMap::new();
    let mut out = Windows::default();
    for p in packets {
        let (st, ring) = flows.entry(p.flow_id.as_str()).or_default();
        let ipd = match st.last_timestamp {
            None => 0,
            Some(last) if p.timestamp_us < last => {
                return Err(Error::Stream(format!("flow {}: timestamp {} precedes {last}", p.flow_id, p.timestamp_us)))
            }
            Some(last) => (p.timestamp_us - last).min(crate::sim::MAX_IPD_US),
        };
        st.last_timestamp = Some(p.timestamp_us);
        st.packets += 1;
        let f = crate::sim::packet_features(&spec, p, ipd);
        out.packet_features.push(f.clone());
        if ring.len() + 1 == window {
            out.rows.push(ring.iter().flatten().chain(&f).copied().collect());
            out.labels.push(p.label.unwrap_or(0));
            out.flow_ids.push(p.flow_id.clone());
            out.packet_index.push(st.packets);
        }
        if window > 1 {
            ring.push_back(f);
            if ring.len() > window - 1 {
                ring.pop_front();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let a = gaussian_blobs(300, 3, 4, 3.0, 5);
        let b = gaussian_blobs(300, 3, 4, 3.0, 5);
        assert_eq!(a, b);
        let labels = a.labels.as_ref().unwrap();
        for c in 0..3 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 100);
        }
    }

    #[test]
    fn splits_follow_fractions() {
        let d = gaussian_blobs(1000, 2, 2, 2.0, 1);
        let [tr, va, te] = split_dataset(&d, [0.75, 0.10, 0.15], 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (750, 100, 150));
        assert!(split_dataset(&d, [0.5, 0.1, 0.1], 3).is_err());
    }

    #[test]
    fn flows_are_ordered_and_split_by_flow() {
        let cfg = FlowConfig {
            flows: 40,
            bytes: 2,
            ..FlowConfig::default()
        };
        let p = generate_flows(&cfg).unwrap();
        assert!(p.windows(2).all(|w| w[0].timestamp_us <= w[1].timestamp_us));
        assert!(p.iter().all(|x| x.bytes.len() == 2));
        let [a, b, c] = split_flows(&p, [0.75, 0.10, 0.15], 1).unwrap();
        assert_eq!(a.len() + b.len() + c.len(), p.len());
        let ids = |v: &[PacketRecord]| v.iter().map(|x| x.flow_id.clone()).collect::<std::collections::BTreeSet<_>>();
        assert!(ids(&a).is_disjoint(&ids(&c)));
        assert_eq!(ids(&a).len() + ids(&b).len() + ids(&c).len(), 40);
    }

    #[test]
    fn windows_start_at_the_window_length() {
        let cfg = FlowConfig {
            flows: 5,
            min_packets: 6,
            max_packets: 6,
            ..FlowConfig::default()
        };
        let p = generate_flows(&cfg).unwrap();
        let w = windows(&p, &[PacketFeature::Len, PacketFeature::Ipd], 4).unwrap();
        assert_eq!(w.rows.len(), 5 * 3);
        assert!(w.packet_index.iter().all(|&i| i >= 4));
        assert!(w.rows.iter().all(|r| r.len() == 8));
    }

    #[test]
    fn anomalies_only_for_single_class() {
        let cfg = FlowConfig {
            flows: 200,
            classes: 1,
            anomaly_fraction: 0.3,
            ..FlowConfig::default()
        };
        let p = generate_flows(&cfg).unwrap();
        let anomalous: std::collections::BTreeSet<_> =
            p.iter().filter(|x| x.label == Some(1)).map(|x| x.flow_id.clone()).collect();
        assert!((40..80).contains(&anomalous.len()), "{}", anomalous.len());
    }
}
