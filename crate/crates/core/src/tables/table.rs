use serde::{Deserialize, Serialize};

use super::{box_to_ternary, pack_key, KeySpec, QuantSpec, TernaryRule};
use crate::error::{Error, Result};
use crate::fuzzy::{leaf_regions, route_keys, ClusterTree};
use crate::lower::MapFunction;

pub const DEFAULT_EXACT_KEY_CAP: u32 = 16;
pub const DEFAULT_RULE_CAP: usize = 4096;

/// One key field: where it comes from and how it is cut down to table bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyField {
    pub spec: KeySpec,
    /// Format of the value the field is extracted from.
    pub src: QuantSpec,
    /// Upper bound for integer-index fields; their keys are row numbers.
    pub index_hi: Option<i64>,
}

impl KeyField {
    pub fn extract(&self, raw: i64) -> u64 {
        self.spec.key_from_raw(raw, self.src)
    }

    /// Full-precision input value a key stands for.
    pub fn representative(&self, key: u64) -> f64 {
        match self.index_hi {
            Some(hi) => self.spec.value(key).min(hi as f64),
            None => self.spec.representative(key, self.src),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    Exact,
    Ternary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingTable {
    /// Map node the table realizes.
    pub node: usize,
    pub kind: TableKind,
    pub key: Vec<KeyField>,
    pub out: Vec<QuantSpec>,
    /// Exact tables: one row per packed key. Ternary tables: one row per leaf.
    pub rows: Vec<Vec<i64>>,
    pub rules: Vec<TernaryRule>,
    /// Tree behind a ternary table, kept for inspection and as a routing oracle.
    pub tree: Option<ClusterTree>,
}

impl MappingTable {
    pub fn widths(&self) -> Vec<u32> {
        self.key.iter().map(|k| k.spec.bits).collect()
    }

    pub fn key_bits(&self) -> u32 {
        self.key.iter().map(|k| k.spec.bits).sum()
    }

    pub fn payload_bits(&self) -> u64 {
        self.out.iter().map(|q| q.width as u64).sum()
    }

    pub fn out_len(&self) -> usize {
        self.out.len()
    }

    /// Match on already-extracted key fields.
    pub fn lookup(&self, keys: &[u64]) -> Option<&[i64]> {
        let packed = pack_key(keys, &self.widths());
        match self.kind {
            TableKind::Exact => self.rows.get(packed as usize).map(Vec::as_slice),
            TableKind::Ternary => self
                .rules
                .iter()
                .filter(|r| r.matches(packed))
                .min_by_key(|r| r.priority)
                .map(|r| self.rows[r.payload].as_slice()),
        }
    }

    /// Routes through the tree instead of the rules; ternary tables only.
    pub fn route(&self, keys: &[u64]) -> Option<usize> {
        let specs: Vec<KeySpec> = self.key.iter().map(|k| k.spec).collect();
        self.tree.as_ref().map(|t| route_keys(t, &specs, keys))
    }

    /// SRAM bits: payload rows, plus nothing for keys of exact tables
    /// (the key is the address).
    pub fn sram_bits(&self) -> u64 {
        self.rows.len() as u64 * self.payload_bits()
    }

    /// TCAM bits: value and mask per rule.
    pub fn tcam_bits(&self) -> u64 {
        self.rules.len() as u64 * 2 * self.key_bits() as u64
    }
}

fn unpack(mut packed: u64, widths: &[u32]) -> Vec<u64> {
    let mut out = vec![0; widths.len()];
    for (i, &w) in widths.iter().enumerate().rev() {
        out[i] = packed & ((1u64 << w) - 1);
        packed >>= w;
    }
    out
}

fn quantize_row(values: &[f64], out: &[QuantSpec]) -> Vec<i64> {
    values.iter().zip(out).map(|(&v, q)| q.quantize(v)).collect()
}

/// Enumerates every key, evaluates `func` on the key's representative input
/// and stores the quantized result.
pub fn build_exact_table(
    node: usize,
    func: &MapFunction,
    key: Vec<KeyField>,
    out: Vec<QuantSpec>,
    key_cap: u32,
) -> Result<MappingTable> {
    let bits: u32 = key.iter().map(|k| k.spec.bits).sum();
    if bits > key_cap {
        return Err(Error::TableTooLarge(format!(
            "node {node}: {bits}-bit exact key exceeds the {key_cap}-bit cap"
        )));
    }
    let widths: Vec<u32> = key.iter().map(|k| k.spec.bits).collect();
    let mut rows = Vec::with_capacity(1 << bits);
    let mut x = vec![0.0; key.len()];
    for packed in 0..1u64 << bits {
        for (slot, (field, k)) in x.iter_mut().zip(key.iter().zip(unpack(packed, &widths))) {
            *slot = field.representative(k);
        }
        rows.push(quantize_row(&func.eval(&x)?, &out));
    }
    Ok(MappingTable {
        node,
        kind: TableKind::Exact,
        key,
        out,
        rows,
        rules: Vec::new(),
        tree: None,
    })
}

/// One ternary rule set per leaf box, with the function evaluated at the
/// leaf centroid. `payload` overrides the per-leaf values when given.
pub fn build_fuzzy_table(
    node: usize,
    func: &MapFunction,
    tree: &ClusterTree,
    key: Vec<KeyField>,
    out: Vec<QuantSpec>,
    rule_cap: usize,
) -> Result<MappingTable> {
    let centroids = tree.centroids();
    let rows = centroids
        .iter()
        .map(|c| Ok(quantize_row(&func.eval(c)?, &out)))
        .collect::<Result<Vec<_>>>()?;
    ternary_table(node, tree, key, out, rows, rule_cap)
}

/// A tokenizer table: the payload is the leaf's fuzzy index.
pub fn build_index_table(
    node: usize,
    tree: &ClusterTree,
    key: Vec<KeyField>,
    out: QuantSpec,
    rule_cap: usize,
) -> Result<MappingTable> {
    let rows = (0..tree.leaves).map(|i| vec![out.quantize(i as f64)]).collect();
    ternary_table(node, tree, key, vec![out], rows, rule_cap)
}

fn ternary_table(
    node: usize,
    tree: &ClusterTree,
    key: Vec<KeyField>,
    out: Vec<QuantSpec>,
    rows: Vec<Vec<i64>>,
    rule_cap: usize,
) -> Result<MappingTable> {
    if tree.dim != key.len() {
        return Err(Error::Argument(format!(
            "node {node}: tree has {} features but the key has {} fields",
            tree.dim,
            key.len()
        )));
    }
    let specs: Vec<KeySpec> = key.iter().map(|k| k.spec).collect();
    let widths: Vec<u32> = specs.iter().map(|k| k.bits).collect();
    let mut rules = Vec::new();
    for region in leaf_regions(tree, &specs) {
        for (value, mask) in box_to_ternary(&region.bounds, &widths)? {
            rules.push(TernaryRule {
                value,
                mask,
                priority: rules.len() as u32,
                payload: region.index,
            });
        }
        if rules.len() > rule_cap {
            return Err(Error::TableTooLarge(format!(
                "node {node}: more than {rule_cap} ternary rules"
            )));
        }
    }
    Ok(MappingTable {
        node,
        kind: TableKind::Ternary,
        key,
        out,
        rows,
        rules,
        tree: Some(tree.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuzzy::{fuzzy_index, TreeNode};
    use crate::lower::ElemOp;
    use crate::model::Range;

    fn field(bits: u32, frac: i32, lo: i64, src: QuantSpec) -> KeyField {
        KeyField {
            spec: KeySpec { bits, frac, lo },
            src,
            index_hi: None,
        }
    }

    #[test]
    fn identity_exact_table() {
        let q = QuantSpec::new(16, 0);
        let t = build_exact_table(0, &MapFunction::identity(1), vec![field(4, 0, 0, q)], vec![q], 16).unwrap();
        assert_eq!(t.rows.len(), 16);
        for k in 0..16u64 {
            assert_eq!(t.lookup(&[k]).unwrap(), &[k as i64]);
        }
    }

    #[test]
    fn relu_signed_keys() {
        let src = QuantSpec::new(16, 7);
        let key = KeySpec::for_range(Range { min: -1.0, max: 1.0 }, 8, src);
        let f = KeyField { spec: key, src, index_hi: None };
        let t = build_exact_table(0, &MapFunction::Elementwise { op: ElemOp::Relu }, vec![f], vec![src], 16).unwrap();
        for k in 0..256u64 {
            let v = f.representative(k);
            let row = t.lookup(&[k]).unwrap()[0];
            if v < 0.0 {
                assert_eq!(row, 0);
            } else {
                assert_eq!(row, src.quantize(v));
            }
        }
    }

    #[test]
    fn exp_table_error_bound() {
        let src = QuantSpec::new(16, 13);
        let key = KeySpec::for_range(Range { min: -2.0, max: 2.0 }, 8, src);
        let out = QuantSpec::new(16, 12);
        let f = KeyField { spec: key, src, index_hi: None };
        let t = build_exact_table(0, &MapFunction::Elementwise { op: ElemOp::Exp }, vec![f], vec![out], 16).unwrap();
        for k in 0..256u64 {
            let v = f.representative(k);
            if !(-2.0..=2.0).contains(&v) {
                continue;
            }
            let got = out.dequantize(t.lookup(&[k]).unwrap()[0]);
            assert!((got - v.exp()).abs() <= out.step() / 2.0 + 1e-12);
        }
    }

    #[test]
    fn too_wide_exact_key() {
        let q = QuantSpec::new(16, 0);
        let key = vec![field(9, 0, 0, q), field(8, 0, 0, q)];
        assert!(matches!(
            build_exact_table(0, &MapFunction::identity(2), key, vec![q; 2], 16),
            Err(Error::TableTooLarge(_))
        ));
    }

    fn worked_tree() -> ClusterTree {
        let leaf = |c: [f64; 2]| TreeNode::Leaf { index: 0, centroid: c.to_vec() };
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

    #[test]
    fn worked_fuzzy_lookup() {
        let src = QuantSpec::new(16, 8);
        let out = QuantSpec::new(16, 8);
        let key = vec![field(4, 0, 0, src), field(4, 0, 0, src)];
        let f = MapFunction::diagonal(&[0.4, 0.4], &[1.0, 1.0]);
        let t = build_fuzzy_table(0, &f, &worked_tree(), key, vec![out; 2], 4096).unwrap();
        let keys: Vec<u64> = t
            .key
            .iter()
            .zip([3.0, 7.0])
            .map(|(k, v)| k.extract(src.quantize(v)))
            .collect();
        assert_eq!(keys, vec![3, 7]);
        let row = t.lookup(&keys).unwrap();
        assert!((out.dequantize(row[0]) - 1.8).abs() <= out.step());
        assert!((out.dequantize(row[1]) - 4.0).abs() <= out.step());
    }

    #[test]
    fn ternary_lookup_agrees_with_tree() {
        let src = QuantSpec::new(16, 0);
        let key = vec![field(4, 0, 0, src), field(4, 0, 0, src)];
        let tree = worked_tree();
        let t = build_fuzzy_table(0, &MapFunction::identity(2), &tree, key, vec![src; 2], 4096).unwrap();
        assert_eq!(t.rows.len(), 4);
        for a in 0..16u64 {
            for b in 0..16u64 {
                let (leaf, _) = fuzzy_index(&tree, &[a as f64, b as f64]);
                assert_eq!(t.lookup(&[a, b]).unwrap(), t.rows[leaf].as_slice());
                assert_eq!(t.route(&[a, b]), Some(leaf));
            }
        }
    }

    #[test]
    fn single_leaf_is_one_wildcard_rule() {
        let src = QuantSpec::new(16, 0);
        let tree = ClusterTree::constant(vec![3.0]);
        let t = build_fuzzy_table(0, &MapFunction::identity(1), &tree, vec![field(8, 0, 0, src)], vec![src], 4096).unwrap();
        assert_eq!(t.rules.len(), 1);
        assert_eq!(t.rules[0].mask, 0);
        assert_eq!(t.rows, vec![vec![3]]);
    }
}
