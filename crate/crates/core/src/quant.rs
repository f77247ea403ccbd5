//! Fixed-point conventions shared by the simulator and the reference path.
//!
//! Activations and weights are two's-complement integers of the layer's bit
//! width. GEMM accumulators are brought back to activation width by an
//! arithmetic right shift followed by saturation.

/// Inclusive range of a signed `bits`-wide integer.
pub fn signed_range(bits: u32) -> (i64, i64) {
    let half = 1i64 << (bits - 1);
    (-half, half - 1)
}

/// Representable weights: two's complement, except that a single bit is an
/// unsigned `{0, 1}` (a one-bit signed weight could only be −1 or 0).
pub fn weight_range(bits_w: u32) -> (i64, i64) {
    if bits_w == 1 {
        (0, 1)
    } else {
        signed_range(bits_w)
    }
}

pub fn clamp_signed(v: i64, bits: u32) -> i64 {
    let (lo, hi) = signed_range(bits);
    v.clamp(lo, hi)
}

pub fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

/// Right shift applied to a GEMM accumulator with `fan_in` products.
pub fn requant_shift(fan_in: usize, bits_w: u32) -> u32 {
    (bits_w - 1) + ceil_log2(fan_in) / 2
}

pub fn requantize(acc: i64, shift: u32, bits: u32) -> i64 {
    clamp_signed(acc >> shift, bits)
}

/// Offset-binary code of a signed value: order-preserving, so an unsigned
/// comparator finds the signed maximum.
pub fn to_offset(v: i64, bits: u32) -> u32 {
    let (lo, hi) = signed_range(bits);
    debug_assert!(v >= lo && v <= hi, "{v} out of {bits}-bit range");
    (v - lo) as u32
}

pub fn from_offset(code: u32, bits: u32) -> i64 {
    code as i64 + signed_range(bits).0
}

/// Two's-complement bit pattern of `v` in `bits` bits.
pub fn to_twos(v: i64, bits: u32) -> u32 {
    (v as u64 & ((1u64 << bits) - 1)) as u32
}

pub fn from_twos(code: u32, bits: u32) -> i64 {
    let v = code as i64 & ((1i64 << bits) - 1);
    if v >= 1i64 << (bits - 1) {
        v - (1i64 << bits)
    } else {
        v
    }
}

/// Fractional bits used when an activation tensor feeds the softmax unit.
pub fn softmax_frac_bits(bits: u32) -> u32 {
    bits.saturating_sub(4)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_and_clamping() {
        assert_eq!(signed_range(8), (-128, 127));
        assert_eq!(signed_range(1), (-1, 0));
        assert_eq!(clamp_signed(300, 8), 127);
        assert_eq!(clamp_signed(-300, 8), -128);
    }

    #[test]
    fn ceil_log2_values() {
        let cases = [
            (0, 0),
            (1, 0),
            (2, 1),
            (3, 2),
            (4, 2),
            (5, 3),
            (9, 4),
            (1024, 10),
            (1025, 11),
        ];
        for (n, want) in cases {
            assert_eq!(ceil_log2(n), want, "n={n}");
        }
    }

    #[test]
    fn requantize_floors_then_saturates() {
        assert_eq!(requantize(-1, 2, 8), -1);
        assert_eq!(requantize(7, 2, 8), 1);
        assert_eq!(requantize(1 << 20, 2, 8), 127);
    }

    #[test]
    fn encodings_round_trip() {
        for bits in 1..=12 {
            let (lo, hi) = signed_range(bits);
            for v in lo..=hi {
                assert_eq!(from_offset(to_offset(v, bits), bits), v);
                assert_eq!(from_twos(to_twos(v, bits), bits), v);
            }
            assert!(to_offset(lo, bits) < to_offset(hi, bits));
        }
    }
}
