//! Packing low-bitwidth sequences into wide multiplicands and splitting the
//! wide product back into convolution outputs.
//!
//! Operand A holds `f[i]` in slice `i` (bits `s*i .. s*(i+1)`), operand B
//! holds `g[j]` the same way. Their product then holds the convolution
//! output `y[m] = sum_{i+j=m} f[i]*g[j]` in segment `m`.
//!
//! Signed data is packed in two's complement. Each slice is then the element
//! minus the sign bit of the slice below it, and each segment of the product
//! reads as its signed field plus the sign bit of the segment below it.

use crate::config::{HiKonvConfig, OperandSide, MAX_ELEMENT_BITS};
use crate::error::{Error, Result};

/// Inclusive value range of a `bits`-wide element.
pub fn value_range(bits: u32, signed: bool) -> (i64, i64) {
    if signed {
        let half = 1i64 << (bits - 1);
        (-half, half - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

/// A sequence of quantized integers sharing one bitwidth and signedness.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantSeq {
    values: Vec<i64>,
    bitwidth: u32,
    signed: bool,
}

impl QuantSeq {
    pub fn new(values: Vec<i64>, bitwidth: u32, signed: bool) -> Result<Self> {
        check_element_bits(bitwidth, signed)?;
        let (lo, hi) = value_range(bitwidth, signed);
        if let Some(&bad) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::RangeError {
                value: bad,
                bits: bitwidth,
                signed,
            });
        }
        Ok(QuantSeq {
            values,
            bitwidth,
            signed,
        })
    }

    pub fn unsigned(values: Vec<i64>, bitwidth: u32) -> Result<Self> {
        Self::new(values, bitwidth, false)
    }

    pub fn signed(values: Vec<i64>, bitwidth: u32) -> Result<Self> {
        Self::new(values, bitwidth, true)
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<i64> {
        self.values
    }

    pub fn bitwidth(&self) -> u32 {
        self.bitwidth
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub(crate) fn check_element_bits(bits: u32, signed: bool) -> Result<()> {
    if !(1..=MAX_ELEMENT_BITS).contains(&bits) {
        return Err(Error::InvalidBitwidth {
            bits,
            reason: "element bitwidth must be 1..=8",
        });
    }
    if signed && bits == 1 {
        return Err(Error::InvalidBitwidth {
            bits,
            reason: "binary data is unsigned {0,1}",
        });
    }
    Ok(())
}

/// One wide multiplicand: the raw bits of a `bit_a` (or `bit_b`) register.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PackedOperand {
    /// Register contents; bits above the register width are zero.
    pub word: u64,
    pub lanes: usize,
    pub side: OperandSide,
    pub cfg: HiKonvConfig,
}

impl PackedOperand {
    /// Integer value of the register under the config's signedness.
    pub fn value(&self) -> i128 {
        let width = self.cfg.register_bits(self.side);
        if self.cfg.signed {
            sign_extend(self.word as u128, width)
        } else {
            self.word as i128
        }
    }
}

/// The exact product of two packed operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProductWord {
    /// Product bits; two's complement when `signed`.
    pub word: u128,
    pub signed: bool,
    /// `lanes_a + lanes_b - 1`, the number of segments the product carries.
    pub segments: usize,
}

impl ProductWord {
    pub fn signed_value(&self) -> i128 {
        self.word as i128
    }
}

fn sign_extend(word: u128, width: u32) -> i128 {
    if width >= 128 {
        return word as i128;
    }
    let shift = 128 - width;
    ((word << shift) as i128) >> shift
}

fn low_mask(bits: u32) -> u128 {
    if bits >= 128 {
        u128::MAX
    } else {
        (1u128 << bits) - 1
    }
}

fn check_pack(seq: &QuantSeq, cfg: &HiKonvConfig, side: OperandSide) -> Result<()> {
    cfg.validate()?;
    let budget = cfg.lane_budget(side);
    if seq.len() > budget {
        return Err(Error::LaneOverflow {
            len: seq.len(),
            budget,
        });
    }
    let bits = cfg.element_bits(side);
    if seq.signed != cfg.signed {
        return Err(Error::InvalidConfig(format!(
            "sequence signedness ({}) differs from the config ({})",
            seq.signed, cfg.signed
        )));
    }
    // A narrower sequence is still in range for the slot; re-check values
    // against the slot width in case the sequence is wider.
    let (lo, hi) = value_range(bits, cfg.signed);
    if let Some(&bad) = seq.values.iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(Error::RangeError {
            value: bad,
            bits,
            signed: cfg.signed,
        });
    }
    Ok(())
}

/// `sum_i values[i] * 2^(stride*i)` in wide signed arithmetic.
pub fn packed_sum(values: &[i64], stride: u32) -> i128 {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| i128::from(v) << (stride as usize * i))
        .sum()
}

/// Slice-by-slice signed packing: every slice above the first stores its
/// element minus the sign bit of the slice below, and the top slice is
/// sign-extended through all 128 bits.
pub fn pack_slices_signed(values: &[i64], stride: u32) -> u128 {
    let mask = low_mask(stride);
    let mut word = 0u128;
    let mut borrow = 0i64;
    for (i, &v) in values.iter().enumerate() {
        let slice = ((v - borrow) as i128 as u128) & mask;
        word |= slice << (stride as usize * i);
        borrow = ((slice >> (stride - 1)) & 1) as i64;
    }
    let used = stride as usize * values.len();
    if borrow == 1 && used < 128 {
        word |= u128::MAX << used;
    }
    word
}

/// Packs an unsigned sequence into operand `side`.
pub fn pack_unsigned(
    seq: &QuantSeq,
    cfg: &HiKonvConfig,
    side: OperandSide,
) -> Result<PackedOperand> {
    if seq.signed || cfg.signed {
        return Err(Error::InvalidConfig(
            "pack_unsigned needs unsigned data and config".into(),
        ));
    }
    check_pack(seq, cfg, side)?;
    let word = packed_sum(&seq.values, cfg.s) as u128;
    debug_assert!(word <= low_mask(cfg.register_bits(side)));
    Ok(PackedOperand {
        word: word as u64,
        lanes: seq.len(),
        side,
        cfg: *cfg,
    })
}

/// Packs a signed sequence into operand `side` (two's complement, truncated
/// to the register width).
pub fn pack_signed(seq: &QuantSeq, cfg: &HiKonvConfig, side: OperandSide) -> Result<PackedOperand> {
    if !seq.signed || !cfg.signed {
        return Err(Error::InvalidConfig(
            "pack_signed needs signed data and config".into(),
        ));
    }
    check_pack(seq, cfg, side)?;
    let width = cfg.register_bits(side);
    let word = pack_slices_signed(&seq.values, cfg.s) & low_mask(width);
    Ok(PackedOperand {
        word: word as u64,
        lanes: seq.len(),
        side,
        cfg: *cfg,
    })
}

/// Packs with the variant matching the config's signedness.
pub fn pack(seq: &QuantSeq, cfg: &HiKonvConfig, side: OperandSide) -> Result<PackedOperand> {
    if cfg.signed {
        pack_signed(seq, cfg, side)
    } else {
        pack_unsigned(seq, cfg, side)
    }
}

/// One wide multiplication.
pub fn multiply(a: &PackedOperand, b: &PackedOperand) -> ProductWord {
    debug_assert_eq!(a.cfg.signed, b.cfg.signed);
    let signed = a.cfg.signed;
    let word = if signed {
        (a.value() * b.value()) as u128
    } else {
        u128::from(a.word) * u128::from(b.word)
    };
    ProductWord {
        word,
        signed,
        segments: (a.lanes + b.lanes).saturating_sub(1),
    }
}

/// Reads `count` unsigned `stride`-bit fields, lowest first.
pub fn split_fields_unsigned(word: u128, stride: u32, count: usize) -> Vec<i64> {
    let mask = low_mask(stride);
    (0..count)
        .map(|m| {
            let shift = stride as usize * m;
            if shift >= 128 {
                0
            } else {
                ((word >> shift) & mask) as i64
            }
        })
        .collect()
}

/// Reads `count` signed segments of a product that carries `total` segments.
///
/// Segment `m` is its signed field plus bit `stride*m - 1` of the word. When
/// the top segment is requested it takes the whole arithmetic remainder of
/// the word, so it follows the product's sign.
pub fn split_fields_signed(word: u128, stride: u32, count: usize, total: usize) -> Vec<i64> {
    let value = word as i128;
    (0..count)
        .map(|m| {
            let shift = stride as usize * m;
            let base = if m + 1 == count && count >= total {
                sar(value, shift)
            } else {
                sign_extend((sar(value, shift) as u128) & low_mask(stride), stride)
            };
            let carry = if m == 0 { 0 } else { sar(value, shift - 1) & 1 };
            (base + carry) as i64
        })
        .collect()
}

fn sar(v: i128, shift: usize) -> i128 {
    if shift >= 128 {
        v >> 127
    } else {
        v >> shift
    }
}

fn check_segments(prod: &ProductWord, cfg: &HiKonvConfig, count: usize) -> Result<()> {
    let available = cfg.segments();
    if count > available {
        return Err(Error::SegmentCount {
            requested: count,
            available,
        });
    }
    if prod.signed != cfg.signed {
        return Err(Error::InvalidConfig(
            "product signedness differs from the config".into(),
        ));
    }
    Ok(())
}

/// Splits an unsigned product into its first `count` convolution outputs.
pub fn split_unsigned(prod: &ProductWord, cfg: &HiKonvConfig, count: usize) -> Result<Vec<i64>> {
    check_segments(prod, cfg, count)?;
    Ok(split_fields_unsigned(prod.word, cfg.s, count))
}

/// Splits a signed product into its first `count` convolution outputs.
pub fn split_signed(prod: &ProductWord, cfg: &HiKonvConfig, count: usize) -> Result<Vec<i64>> {
    check_segments(prod, cfg, count)?;
    Ok(split_fields_signed(prod.word, cfg.s, count, prod.segments))
}

/// Splits with the variant matching the config's signedness.
pub fn split(prod: &ProductWord, cfg: &HiKonvConfig, count: usize) -> Result<Vec<i64>> {
    if cfg.signed {
        split_signed(prod, cfg, count)
    } else {
        split_unsigned(prod, cfg, count)
    }
}

/// Bytes needed to store `count` elements of `bits` bits.
pub fn compressed_len(count: usize, bits: u32) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Bit-packs a sequence: `p` bits per element, LSB-first within each byte,
/// contiguous across byte boundaries, high bits of the last byte zero.
pub fn compress_bits(seq: &QuantSeq) -> Vec<u8> {
    let bits = seq.bitwidth as usize;
    let mask = (1u16 << bits) - 1;
    let mut out = vec![0u8; compressed_len(seq.len(), seq.bitwidth)];
    for (i, &v) in seq.values.iter().enumerate() {
        let pattern = (v as u16) & mask;
        let pos = i * bits;
        let (byte, off) = (pos / 8, pos % 8);
        let shifted = pattern << off;
        out[byte] |= shifted as u8;
        if off + bits > 8 {
            out[byte + 1] |= (shifted >> 8) as u8;
        }
    }
    out
}

/// Inverse of [`compress_bits`] for the first `count` elements.
pub fn decompress_bits(stream: &[u8], bits: u32, count: usize, signed: bool) -> Result<QuantSeq> {
    check_element_bits(bits, signed)?;
    let needed = compressed_len(count, bits);
    if stream.len() < needed {
        return Err(Error::TruncatedStream {
            needed,
            available: stream.len(),
        });
    }
    let width = bits as usize;
    let mask = (1u16 << width) - 1;
    let values = (0..count)
        .map(|i| {
            let pos = i * width;
            let (byte, off) = (pos / 8, pos % 8);
            let mut window = u16::from(stream[byte]);
            if off + width > 8 {
                window |= u16::from(stream[byte + 1]) << 8;
            }
            let pattern = (window >> off) & mask;
            if signed && pattern >> (width - 1) == 1 {
                i64::from(pattern) - (1i64 << width)
            } else {
                i64::from(pattern)
            }
        })
        .collect();
    Ok(QuantSeq {
        values,
        bitwidth: bits,
        signed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ConvMode, Multiplier};

    fn naive(f: &[i64], g: &[i64]) -> Vec<i64> {
        let mut y = vec![0; f.len() + g.len() - 1];
        for (i, a) in f.iter().enumerate() {
            for (j, b) in g.iter().enumerate() {
                y[i + j] += a * b;
            }
        }
        y
    }

    fn cfg(p: u32, q: u32, n: usize, k: usize, signed: bool) -> HiKonvConfig {
        HiKonvConfig::new(
            Multiplier::GPP,
            p,
            q,
            n,
            k,
            ConvMode::SingleMultiplier,
            signed,
        )
        .unwrap()
    }

    #[test]
    fn unsigned_pack_matches_polynomial() {
        // p = q = 4 over 32x32 gives n = k = 3, s = 10.
        let c = cfg(4, 4, 3, 3, false);
        assert_eq!(c.s, 10);
        let seq = QuantSeq::unsigned(vec![3, 1, 2], 4).unwrap();
        let a = pack_unsigned(&seq, &c, OperandSide::A).unwrap();
        assert_eq!(a.word, 2_098_179);
        assert_eq!(a.word, 2 * (1 << 20) + (1 << 10) + 3);
        let zero = QuantSeq::unsigned(vec![0, 0, 0], 4).unwrap();
        assert_eq!(pack_unsigned(&zero, &c, OperandSide::A).unwrap().word, 0);
    }

    #[test]
    fn int4_four_products_layout() {
        // A = A2*2^11 + A1, W = W2*2^22 + W1.
        let a = packed_sum(&[7, 11], 11) as u128;
        let w = packed_sum(&[5, 9], 22) as u128;
        let prod = a * w;
        assert_eq!(prod, (99u128 << 33) + (63u128 << 22) + (55u128 << 11) + 35);
        // A1W1, A2W1, A1W2, A2W2 in ascending 11-bit segments.
        assert_eq!(split_fields_unsigned(prod, 11, 4), vec![35, 55, 63, 99]);
    }

    #[test]
    fn pack_errors() {
        let c = cfg(4, 4, 3, 3, false);
        let long = QuantSeq::unsigned(vec![1, 2, 3, 4], 4).unwrap();
        assert!(matches!(
            pack_unsigned(&long, &c, OperandSide::A),
            Err(Error::LaneOverflow { len: 4, budget: 3 })
        ));
        assert!(matches!(
            QuantSeq::unsigned(vec![16], 4),
            Err(Error::RangeError { value: 16, .. })
        ));
        // An 8-bit sequence cannot go into a 4-bit slot when values exceed it.
        let wide = QuantSeq::unsigned(vec![200], 8).unwrap();
        assert!(matches!(
            pack_unsigned(&wide, &c, OperandSide::B),
            Err(Error::RangeError { value: 200, .. })
        ));
        let signed = QuantSeq::signed(vec![-1], 4).unwrap();
        assert!(pack_unsigned(&signed, &c, OperandSide::A).is_err());
    }

    #[test]
    fn signed_pack_examples() {
        let c = cfg(4, 4, 3, 3, true);
        let a = pack_signed(
            &QuantSeq::signed(vec![-1, 1], 4).unwrap(),
            &c,
            OperandSide::A,
        )
        .unwrap();
        assert_eq!(a.value(), 1023);
        let a = pack_signed(&QuantSeq::signed(vec![-1], 4).unwrap(), &c, OperandSide::A).unwrap();
        assert_eq!(a.value(), -1);
        assert_eq!(a.word & 0x3ff, 0x3ff);
        assert_eq!(a.word, u32::MAX as u64);
        let a = pack_signed(
            &QuantSeq::signed(vec![-3, 2, -1], 4).unwrap(),
            &c,
            OperandSide::A,
        )
        .unwrap();
        assert_eq!(a.value(), -(1 << 20) + 2 * (1 << 10) - 3);
    }

    #[test]
    fn slice_construction_matches_wide_sum_exhaustively() {
        for bits in 2..=3u32 {
            let (lo, hi) = value_range(bits, true);
            let stride = bits + bits + 1;
            for lanes in 1..=3usize {
                let total = (hi - lo + 1).pow(lanes as u32);
                for idx in 0..total {
                    let mut rest = idx;
                    let vals: Vec<i64> = (0..lanes)
                        .map(|_| {
                            let v = lo + rest % (hi - lo + 1);
                            rest /= hi - lo + 1;
                            v
                        })
                        .collect();
                    assert_eq!(
                        pack_slices_signed(&vals, stride),
                        packed_sum(&vals, stride) as u128,
                        "{vals:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn unsigned_split_examples() {
        // p = q = 2, n = k = 2 gives s = 5: A = 65 packs [1, 2], B = 35 packs [3, 1].
        let c = cfg(2, 2, 2, 2, false);
        assert_eq!(c.s, 5);
        let prod = ProductWord {
            word: 65 * 35,
            signed: false,
            segments: 3,
        };
        assert_eq!(split_unsigned(&prod, &c, 3).unwrap(), vec![3, 7, 2]);
        assert_eq!(naive(&[1, 2], &[3, 1]), vec![3, 7, 2]);
        let zero = ProductWord {
            word: 0,
            signed: false,
            segments: 3,
        };
        assert_eq!(split_unsigned(&zero, &c, 3).unwrap(), vec![0, 0, 0]);
        assert!(matches!(
            split_unsigned(&zero, &c, 4),
            Err(Error::SegmentCount {
                requested: 4,
                available: 3
            })
        ));
    }

    fn signed_roundtrip(f: &[i64], g: &[i64], c: &HiKonvConfig) -> Vec<i64> {
        let a = pack_signed(
            &QuantSeq::signed(f.to_vec(), c.p).unwrap(),
            c,
            OperandSide::A,
        )
        .unwrap();
        let b = pack_signed(
            &QuantSeq::signed(g.to_vec(), c.q).unwrap(),
            c,
            OperandSide::B,
        )
        .unwrap();
        let prod = multiply(&a, &b);
        split_signed(&prod, c, f.len() + g.len() - 1).unwrap()
    }

    #[test]
    fn signed_split_examples() {
        let c = cfg(3, 3, 2, 2, true);
        assert_eq!(signed_roundtrip(&[1], &[1], &c), vec![1]);
        let y = signed_roundtrip(&[-1, 0], &[1, 0], &c);
        assert_eq!(&y[..2], &[-1, 0]);
        assert_eq!(signed_roundtrip(&[-2, 3], &[-1, 2], &c), vec![2, -7, 6]);
        assert_eq!(naive(&[-2, 3], &[-1, 2]), vec![2, -7, 6]);
    }

    #[test]
    fn missing_guard_bits_corrupt_segments() {
        // Two 3x3-bit products summed in one segment need a guard bit.
        let f = [7i64, 7];
        let g = [7i64, 7];
        let stride = 6;
        let prod = (packed_sum(&f, stride) * packed_sum(&g, stride)) as u128;
        assert_ne!(split_fields_unsigned(prod, stride, 3), naive(&f, &g));
        let stride = 7;
        let prod = (packed_sum(&f, stride) * packed_sum(&g, stride)) as u128;
        assert_eq!(split_fields_unsigned(prod, stride, 3), naive(&f, &g));
    }

    #[test]
    fn exhaustive_block_roundtrip_small_bits() {
        for bits in 1..=2u32 {
            for signed in [false, true] {
                if signed && bits == 1 {
                    continue;
                }
                let (lo, hi) = value_range(bits, signed);
                let span = hi - lo + 1;
                for n in 1..=3usize {
                    for k in 1..=3usize {
                        let c = cfg(bits, bits, n, k, signed);
                        assert!(crate::config::check_feasible(&c));
                        let lanes = (n + k) as u32;
                        for idx in 0..span.pow(lanes) {
                            let mut rest = idx;
                            let mut draw = || {
                                let v = lo + rest % span;
                                rest /= span;
                                v
                            };
                            let f: Vec<i64> = (0..n).map(|_| draw()).collect();
                            let g: Vec<i64> = (0..k).map(|_| draw()).collect();
                            let fs = QuantSeq::new(f.clone(), bits, signed).unwrap();
                            let gs = QuantSeq::new(g.clone(), bits, signed).unwrap();
                            let a = pack(&fs, &c, OperandSide::A).unwrap();
                            let b = pack(&gs, &c, OperandSide::B).unwrap();
                            let y = split(&multiply(&a, &b), &c, n + k - 1).unwrap();
                            assert_eq!(y, naive(&f, &g), "f={f:?} g={g:?} signed={signed}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn compress_examples() {
        let seq = QuantSeq::unsigned(vec![3, 1, 2], 2).unwrap();
        assert_eq!(compress_bits(&seq), vec![0x27]);
        assert!(compress_bits(&QuantSeq::unsigned(vec![], 5).unwrap()).is_empty());
        assert_eq!(
            compress_bits(&QuantSeq::signed(vec![-1], 4).unwrap()),
            vec![0x0f]
        );
        // 3-bit elements straddle byte boundaries.
        let seq = QuantSeq::unsigned(vec![5, 6, 7], 3).unwrap();
        assert_eq!(compress_bits(&seq), vec![0b1111_0101, 0b0000_0001]);
    }

    #[test]
    fn decompress_examples() {
        let seq = decompress_bits(&[0x27], 2, 3, false).unwrap();
        assert_eq!(seq.values(), &[3, 1, 2]);
        let seq = decompress_bits(&[0x0f], 4, 1, true).unwrap();
        assert_eq!(seq.values(), &[-1]);
        assert!(matches!(
            decompress_bits(&[0x27], 4, 3, false),
            Err(Error::TruncatedStream {
                needed: 2,
                available: 1
            })
        ));
    }
}
