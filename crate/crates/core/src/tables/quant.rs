use serde::{Deserialize, Serialize};

use crate::model::Range;

pub const DEFAULT_VALUE_BITS: u32 = 16;
pub const DEFAULT_KEY_BITS: u32 = 8;

/// Signed two's-complement fixed-point format: `raw = x * 2^frac`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub width: u32,
    pub frac: u32,
}

impl QuantSpec {
    pub fn new(width: u32, frac: u32) -> QuantSpec {
        assert!((2..=32).contains(&width) && frac < width, "bad fixed-point format");
        QuantSpec { width, frac }
    }

    pub fn min_raw(&self) -> i64 {
        -(1i64 << (self.width - 1))
    }

    pub fn max_raw(&self) -> i64 {
        (1i64 << (self.width - 1)) - 1
    }

    pub fn saturate(&self, raw: i64) -> i64 {
        raw.clamp(self.min_raw(), self.max_raw())
    }

    pub fn step(&self) -> f64 {
        (-(self.frac as f64)).exp2()
    }

    /// Round-half-even of `x * 2^frac`, saturated to the representable range.
    pub fn quantize(&self, x: f64) -> i64 {
        if x.is_nan() {
            return 0;
        }
        let scaled = (x * (self.frac as f64).exp2()).round_ties_even();
        if scaled >= self.max_raw() as f64 {
            self.max_raw()
        } else if scaled <= self.min_raw() as f64 {
            self.min_raw()
        } else {
            scaled as i64
        }
    }

    pub fn dequantize(&self, raw: i64) -> f64 {
        raw as f64 * self.step()
    }

    pub fn representable(&self) -> Range {
        Range {
            min: self.dequantize(self.min_raw()),
            max: self.dequantize(self.max_raw()),
        }
    }
}

/// Largest fractional precision whose integer part (plus sign) still covers
/// the range.
pub fn choose_fixed_point(range: Range, width: u32) -> QuantSpec {
    let floor = (-((width - 1) as f64)).exp2();
    let m = range.min.abs().max(range.max.abs()).max(floor);
    let int_bits = (m + 1e-12).log2().ceil();
    let f = ((width - 1) as f64 - int_bits).clamp(0.0, (width - 1) as f64);
    QuantSpec::new(width, f as u32)
}

/// Arithmetic shift from `from` fractional bits to `to` fractional bits.
pub fn align(raw: i64, from: u32, to: u32) -> i64 {
    if from >= to {
        raw >> (from - to)
    } else {
        raw << (to - from)
    }
}

/// Per-operand bound for summing `n` operands in a 32-bit accumulator: each
/// aligned operand is clamped to it, so the exact sum can never overflow and
/// does not depend on the order of additions.
pub fn lane_bound(n: usize) -> i64 {
    let extra = usize::BITS - n.max(1).saturating_sub(1).leading_zeros();
    (1i64 << (31 - extra.min(30))) - 1
}

/// A table-key field: a value's raw code shifted down to `frac` fractional
/// bits, clamped to `[lo, lo + 2^bits - 1]` and offset so keys start at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeySpec {
    pub bits: u32,
    pub frac: i32,
    pub lo: i64,
}

impl KeySpec {
    /// Key grid covering `range` with `bits` bits, never finer than the
    /// source value format.
    pub fn for_range(range: Range, bits: u32, src: QuantSpec) -> KeySpec {
        let floor = (-(src.frac as f64)).exp2();
        let (mag, signed) = if range.min >= 0.0 {
            (range.max.max(floor), false)
        } else {
            (range.min.abs().max(range.max.abs()).max(floor), true)
        };
        let int_bits = (mag + 1e-12).log2().ceil() as i32;
        let usable = bits as i32 - i32::from(signed);
        let frac = (usable - int_bits).min(src.frac as i32);
        let lo = if signed { -(1i64 << (bits - 1)) } else { 0 };
        KeySpec { bits, frac, lo }
    }

    /// Integer-index key for lookup-style inputs holding values in `[lo, hi]`.
    pub fn for_index(lo: i64, hi: i64) -> KeySpec {
        let span = (hi - lo + 1).max(2) as u64;
        let bits = 64 - (span - 1).leading_zeros();
        KeySpec { bits, frac: 0, lo }
    }

    pub fn size(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn max_key(&self) -> u64 {
        self.size() - 1
    }

    fn shift(&self, src: QuantSpec) -> u32 {
        (src.frac as i32 - self.frac).max(0) as u32
    }

    /// Shift, clamp and offset: the only operations the dataplane needs.
    pub fn key_from_raw(&self, raw: i64, src: QuantSpec) -> u64 {
        let code = if self.frac > src.frac as i32 {
            raw << (self.frac - src.frac as i32)
        } else {
            raw >> self.shift(src)
        };
        (code.clamp(self.lo, self.lo + self.max_key() as i64) - self.lo) as u64
    }

    pub fn key_from_value(&self, v: f64) -> u64 {
        let code = (v * (self.frac as f64).exp2()).floor();
        let hi = (self.lo + self.max_key() as i64) as f64;
        (code.clamp(self.lo as f64, hi) as i64 - self.lo) as u64
    }

    /// Lower edge of the key's cell in value units.
    pub fn value(&self, key: u64) -> f64 {
        (key as i64 + self.lo) as f64 * (-(self.frac as f64)).exp2()
    }

    /// Midpoint of the source raw values that share `key`, dequantized.
    pub fn representative(&self, key: u64, src: QuantSpec) -> f64 {
        let s = self.shift(src);
        let code = key as i64 + self.lo;
        let raw_lo = code << s;
        let raw_hi = raw_lo + (1i64 << s) - 1;
        let lo = raw_lo.max(src.min_raw());
        let hi = raw_hi.min(src.max_raw());
        src.dequantize(lo) * 0.5 + src.dequantize(hi) * 0.5
    }

    /// Key-grid threshold: `v <= t` on cell lower edges iff `key <= snap(t)`.
    pub fn snap(&self, t: f64) -> i64 {
        let code = (t * (self.frac as f64).exp2()).floor();
        let code = code.clamp(-(1i64 << 40) as f64, (1i64 << 40) as f64) as i64;
        code - self.lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(min: f64, max: f64) -> Range {
        Range { min, max }
    }

    #[test]
    fn fixed_point_positions() {
        assert_eq!(choose_fixed_point(r(-100.0, 100.0), 16).frac, 8);
        assert_eq!(choose_fixed_point(r(0.0, 5.0), 16).frac, 12);
        assert_eq!(choose_fixed_point(r(0.0, 0.0), 16).frac, 15);
        // Exact powers of two need the next integer bit.
        let q = choose_fixed_point(r(0.0, 4.0), 16);
        assert!(q.representable().contains(4.0));
        assert_eq!(choose_fixed_point(r(-1e9, 1.0), 16).frac, 0);
    }

    #[test]
    fn quantize_examples() {
        let q = QuantSpec::new(16, 8);
        assert_eq!(q.quantize(0.4), 102);
        assert_eq!(q.dequantize(102), 0.3984375);
        assert_eq!(q.quantize(0.0), 0);
        assert_eq!(q.quantize(1e9), 32767);
        assert_eq!(q.quantize(-1e9), -32768);
        // ties go to even
        assert_eq!(q.quantize(0.5 / 256.0), 0);
        assert_eq!(q.quantize(1.5 / 256.0), 2);
    }

    #[test]
    fn key_grid_unsigned_and_signed() {
        let src = QuantSpec::new(16, 12);
        let k = KeySpec::for_range(r(0.0, 5.0), 8, src);
        assert_eq!((k.frac, k.lo), (5, 0));
        assert_eq!(k.key_from_raw(src.quantize(1.0), src), 32);
        assert_eq!(k.key_from_raw(src.quantize(-1.0), src), 0);
        let k = KeySpec::for_range(r(-3.0, 2.0), 8, src);
        assert_eq!((k.frac, k.lo), (5, -128));
        assert_eq!(k.key_from_raw(src.quantize(-1.0), src), 96);
        assert_eq!(k.value(96), -1.0);
    }

    #[test]
    fn key_never_finer_than_source() {
        let src = QuantSpec::new(16, 2);
        let k = KeySpec::for_range(r(0.0, 1.0), 8, src);
        assert_eq!(k.frac, 2);
        assert_eq!(k.representative(3, src), 0.75);
    }

    #[test]
    fn lane_bounds() {
        assert_eq!(lane_bound(1), (1 << 31) - 1);
        assert_eq!(lane_bound(2), (1 << 30) - 1);
        assert_eq!(lane_bound(3), (1 << 29) - 1);
        assert_eq!(lane_bound(4), (1 << 29) - 1);
        assert!(lane_bound(5) * 5 < 1 << 31);
    }

    #[test]
    fn index_keys() {
        let k = KeySpec::for_index(0, 15);
        assert_eq!(k.bits, 4);
        let k = KeySpec::for_index(-2, 2);
        assert_eq!((k.bits, k.lo), (3, -2));
        let src = QuantSpec::new(16, 10);
        assert_eq!(k.key_from_raw(src.quantize(1.0), src), 3);
    }

    #[test]
    fn snap_matches_cell_edges() {
        let src = QuantSpec::new(16, 8);
        let k = KeySpec::for_range(r(0.0, 15.0), 4, src);
        assert_eq!(k.frac, 0);
        for key in 0..16u64 {
            for t in [2.5, 3.0, 5.0, -1.0, 20.0] {
                assert_eq!(k.value(key) <= t, key as i64 <= k.snap(t));
            }
        }
    }
}
