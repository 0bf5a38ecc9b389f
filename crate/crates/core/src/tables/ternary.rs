use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value/mask rule over a key of at most 128 bits. Mask bit 1 means the bit
/// must match; wildcarded value bits are stored as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TernaryRule {
    #[serde(with = "hex128")]
    pub value: u128,
    #[serde(with = "hex128")]
    pub mask: u128,
    pub priority: u32,
    pub payload: usize,
}

impl TernaryRule {
    pub fn matches(&self, key: u128) -> bool {
        key & self.mask == self.value
    }
}

/// Minimal prefix cover of `[lo, hi]` over `width`-bit keys.
pub fn range_to_ternary(lo: u64, hi: u64, width: u32) -> Result<Vec<TernaryRule>> {
    if width == 0 || width > 64 {
        return Err(Error::Argument(format!("key width {width} outside 1..=64")));
    }
    let top = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
    if lo > hi || hi > top {
        return Err(Error::Argument(format!(
            "range [{lo}, {hi}] invalid for {width}-bit keys"
        )));
    }
    let full = top as u128;
    let mut rules = Vec::new();
    let mut cur = lo as u128;
    let end = hi as u128;
    while cur <= end {
        // Largest aligned block starting at `cur` that stays inside the range.
        let mut size_bits = if cur == 0 { width } else { cur.trailing_zeros().min(width) };
        while cur + (1u128 << size_bits) - 1 > end {
            size_bits -= 1;
        }
        let mask = full & !((1u128 << size_bits) - 1);
        rules.push(TernaryRule {
            value: cur,
            mask,
            priority: rules.len() as u32,
            payload: 0,
        });
        cur += 1u128 << size_bits;
    }
    Ok(rules)
}

/// Per-feature prefix covers of a box, concatenated with the first field in
/// the most significant position.
pub fn box_to_ternary(bounds: &[(u64, u64)], widths: &[u32]) -> Result<Vec<(u128, u128)>> {
    let mut acc: Vec<(u128, u128)> = vec![(0, 0)];
    for (&(lo, hi), &w) in bounds.iter().zip(widths) {
        let field = range_to_ternary(lo, hi, w)?;
        let mut next = Vec::with_capacity(acc.len() * field.len());
        for &(v, m) in &acc {
            for r in &field {
                next.push(((v << w) | r.value, (m << w) | r.mask));
            }
        }
        acc = next;
    }
    Ok(acc)
}

/// Packs key fields into one integer, first field most significant.
pub fn pack_key(fields: &[u64], widths: &[u32]) -> u128 {
    fields
        .iter()
        .zip(widths)
        .fold(0u128, |acc, (&f, &w)| (acc << w) | f as u128)
}

mod hex128 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        let digits = s.trim_start_matches("0x");
        u128::from_str_radix(digits, 16).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matched(rules: &[TernaryRule], width: u32) -> Vec<u64> {
        (0..1u64 << width)
            .filter(|&k| rules.iter().any(|r| r.matches(k as u128)))
            .collect()
    }

    #[test]
    fn three_to_five() {
        let rules = range_to_ternary(3, 5, 4).unwrap();
        assert_eq!(rules.len(), 2);
        assert_eq!((rules[0].value, rules[0].mask), (0b0011, 0b1111));
        assert_eq!((rules[1].value, rules[1].mask), (0b0100, 0b1110));
        assert_eq!(matched(&rules, 4), vec![3, 4, 5]);
    }

    #[test]
    fn full_domain_is_one_wildcard() {
        let rules = range_to_ternary(0, 15, 4).unwrap();
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].mask, 0);
    }

    #[test]
    fn one_to_fourteen() {
        let rules = range_to_ternary(1, 14, 4).unwrap();
        assert_eq!(rules.len(), 6);
        assert_eq!(matched(&rules, 4), (1..=14).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_ranges() {
        assert!(range_to_ternary(5, 3, 4).is_err());
        assert!(range_to_ternary(0, 16, 4).is_err());
    }

    #[test]
    fn box_cross_product() {
        let rules = box_to_ternary(&[(0, 3), (6, 15)], &[4, 4]).unwrap();
        for a in 0..16u64 {
            for b in 0..16u64 {
                let key = pack_key(&[a, b], &[4, 4]);
                let hit = rules.iter().any(|&(v, m)| key & m == v);
                assert_eq!(hit, a <= 3 && b >= 6, "{a} {b}");
            }
        }
    }

    #[test]
    fn hex_serialization() {
        let r = TernaryRule {
            value: 0x34,
            mask: 0xfe,
            priority: 1,
            payload: 2,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"0x34\""));
        assert_eq!(serde_json::from_str::<TernaryRule>(&s).unwrap(), r);
    }
}
