//! Fixed-point formats, ternary range expansion and lookup tables that
//! materialize Map primitives.

mod quant;
mod table;
mod ternary;

pub use quant::{align, choose_fixed_point, lane_bound, KeySpec, QuantSpec, DEFAULT_KEY_BITS, DEFAULT_VALUE_BITS};
pub use table::{
    build_exact_table, build_fuzzy_table, build_index_table, KeyField, MappingTable, TableKind,
    DEFAULT_EXACT_KEY_CAP, DEFAULT_RULE_CAP,
};
pub use ternary::{box_to_ternary, pack_key, range_to_ternary, TernaryRule};
