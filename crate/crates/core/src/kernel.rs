//! Convolutions built from packed wide multiplications.
//!
//! * [`conv_block`]: one multiplication gives a whole `n x k` convolution.
//! * [`conv1d`]: arbitrary-length input, processed in blocks of `n`. Each
//!   block product is added to the still-open upper segments of the previous
//!   one, so overlap-add happens in the packed domain.
//! * [`conv2d_layer`]: a valid DNN convolution computed from row
//!   convolutions, with up to `M` input channels summed as packed products
//!   before any split.

use crate::bitpack::{self, value_range, QuantSeq};
use crate::config::{ConvMode, HiKonvConfig, OperandSide};
use crate::error::{Error, Result};

/// Bitwidth tag for full-precision convolution outputs.
pub const OUTPUT_BITS: u32 = 32;

fn check_tensor(data: &[i64], expected: usize, bitwidth: u32, signed: bool) -> Result<()> {
    if data.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a shape holding {expected}",
            data.len()
        )));
    }
    if bitwidth != OUTPUT_BITS {
        bitpack::check_element_bits(bitwidth, signed)?;
    }
    let (lo, hi) = value_range(bitwidth, signed);
    if let Some(&bad) = data.iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(Error::RangeError {
            value: bad,
            bits: bitwidth,
            signed,
        });
    }
    Ok(())
}

/// Feature map in `[channel][height][width]` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tensor3 {
    data: Vec<i64>,
    dims: [usize; 3],
    bitwidth: u32,
    signed: bool,
}

impl Tensor3 {
    pub fn new(data: Vec<i64>, dims: [usize; 3], bitwidth: u32, signed: bool) -> Result<Self> {
        check_tensor(&data, dims.iter().product(), bitwidth, signed)?;
        Ok(Tensor3 {
            data,
            dims,
            bitwidth,
            signed,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<i64> {
        self.data
    }

    pub fn bitwidth(&self) -> u32 {
        self.bitwidth
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    #[inline]
    pub fn at(&self, c: usize, h: usize, w: usize) -> i64 {
        let [_, hn, wn] = self.dims;
        self.data[(c * hn + h) * wn + w]
    }

    /// Row `h` of channel `c`.
    pub fn row(&self, c: usize, h: usize) -> &[i64] {
        let [_, hn, wn] = self.dims;
        let start = (c * hn + h) * wn;
        &self.data[start..start + wn]
    }
}

/// Weights in `[c_o][c_i][k_h][k_w]` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tensor4 {
    data: Vec<i64>,
    dims: [usize; 4],
    bitwidth: u32,
    signed: bool,
}

impl Tensor4 {
    pub fn new(data: Vec<i64>, dims: [usize; 4], bitwidth: u32, signed: bool) -> Result<Self> {
        check_tensor(&data, dims.iter().product(), bitwidth, signed)?;
        Ok(Tensor4 {
            data,
            dims,
            bitwidth,
            signed,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn bitwidth(&self) -> u32 {
        self.bitwidth
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    #[inline]
    pub fn at(&self, co: usize, ci: usize, kh: usize, kw: usize) -> i64 {
        let [_, cin, khn, kwn] = self.dims;
        self.data[((co * cin + ci) * khn + kh) * kwn + kw]
    }

    /// The `k_w` row of weights for `(co, ci, kh)`.
    pub fn row(&self, co: usize, ci: usize, kh: usize) -> &[i64] {
        let [_, cin, khn, kwn] = self.dims;
        let start = ((co * cin + ci) * khn + kh) * kwn;
        &self.data[start..start + kwn]
    }
}

/// Where consecutive products are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Accumulation {
    /// Add whole product words, then split once.
    #[default]
    Packed,
    /// Split every product, then add the outputs.
    Unpacked,
}

/// Per-call instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KernelStats {
    pub wide_mults: u64,
    /// Largest `|segment|` read out of a packed accumulation.
    pub max_segment: u64,
}

impl KernelStats {
    fn record(&mut self, v: i64) {
        self.max_segment = self.max_segment.max(v.unsigned_abs());
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv1dOptions {
    pub accumulation: Accumulation,
    /// Split kernels longer than `k` into chunks instead of failing.
    pub allow_tiling: bool,
}

impl Default for Conv1dOptions {
    fn default() -> Self {
        Conv1dOptions {
            accumulation: Accumulation::Packed,
            allow_tiling: true,
        }
    }
}

/// Fixed-width two's-complement accumulator.
trait Word: Copy {
    const ZERO: Self;
    fn from_i64(v: i64) -> Self;
    fn add(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn shl(self, n: u32) -> Self;
    /// Logical shift right, zero when `n` is at least the width.
    fn shr(self, n: u32) -> Self;
    /// Arithmetic shift right.
    fn sar(self, n: u32) -> Self;
    fn low_bits(self, n: u32) -> u64;
    fn bit(self, n: u32) -> i64;
    fn as_i64(self) -> i64;
}

macro_rules! impl_word {
    ($u:ty, $i:ty) => {
        impl Word for $u {
            const ZERO: Self = 0;
            #[inline]
            fn from_i64(v: i64) -> Self {
                v as $i as $u
            }
            #[inline]
            fn add(self, o: Self) -> Self {
                self.wrapping_add(o)
            }
            #[inline]
            fn mul(self, o: Self) -> Self {
                self.wrapping_mul(o)
            }
            #[inline]
            fn shl(self, n: u32) -> Self {
                self.checked_shl(n).unwrap_or(0)
            }
            #[inline]
            fn shr(self, n: u32) -> Self {
                self.checked_shr(n).unwrap_or(0)
            }
            #[inline]
            fn sar(self, n: u32) -> Self {
                ((self as $i) >> n.min(<$u>::BITS - 1)) as $u
            }
            #[inline]
            fn low_bits(self, n: u32) -> u64 {
                (self & (1 as $u).checked_shl(n).unwrap_or(0).wrapping_sub(1)) as u64
            }
            #[inline]
            fn bit(self, n: u32) -> i64 {
                (self.shr(n) & 1) as i64
            }
            #[inline]
            fn as_i64(self) -> i64 {
                self as $i as i64
            }
        }
    };
}

impl_word!(u64, i64);
impl_word!(u128, i128);

/// Horner evaluation of `sum_i values[i] * 2^(s*i)`.
#[inline]
fn pack_word<W: Word>(values: &[i64], s: u32) -> W {
    values
        .iter()
        .rev()
        .fold(W::ZERO, |acc, &v| acc.shl(s).add(W::from_i64(v)))
}

/// Segment readout for one config.
#[derive(Clone, Copy)]
struct Segments {
    s: u32,
    signed: bool,
}

impl Segments {
    /// Segment `m` read as an `s`-bit field plus the carry from below.
    #[inline]
    fn field<W: Word>(&self, acc: W, m: usize) -> i64 {
        let shift = self.s * m as u32;
        let raw = acc.shr(shift).low_bits(self.s);
        if !self.signed {
            return raw as i64;
        }
        let sext = if raw >> (self.s - 1) == 1 {
            raw as i64 - (1i64 << self.s)
        } else {
            raw as i64
        };
        let carry = if m == 0 { 0 } else { acc.bit(shift - 1) };
        sext + carry
    }

    /// Top segment `m`: everything above `s*m`, following the word's sign.
    #[inline]
    fn top<W: Word>(&self, acc: W, m: usize) -> i64 {
        if !self.signed {
            return self.field(acc, m);
        }
        let shift = self.s * m as u32;
        let carry = if m == 0 { 0 } else { acc.bit(shift - 1) };
        acc.sar(shift).as_i64() + carry
    }

    /// Adds all `count` segments of `acc` into `out`.
    #[inline]
    fn drain_into<W: Word>(
        &self,
        acc: W,
        count: usize,
        out: &mut [i64],
        mut stats: Option<&mut KernelStats>,
    ) {
        for (m, slot) in out.iter_mut().enumerate().take(count) {
            let v = if m + 1 == count {
                self.top(acc, m)
            } else {
                self.field(acc, m)
            };
            if let Some(st) = stats.as_mut() {
                st.record(v);
            }
            *slot += v;
        }
    }

    /// Drops the lowest `lanes` segments, keeping the rest exact.
    #[inline]
    fn advance<W: Word>(&self, acc: W, lanes: usize) -> W {
        let shift = self.s * lanes as u32;
        if self.signed {
            acc.sar(shift).add(W::from_i64(acc.bit(shift - 1)))
        } else {
            acc.shr(shift)
        }
    }
}

/// Accumulator width check for sums of `group` products with `kernel_lanes`
/// B lanes. The top segment holds at most `group` extremal products and
/// every lower segment fits its slice, so the word stays below
/// `(top + 1) * 2^(s*T)`.
fn accumulator_fits(cfg: &HiKonvConfig, kernel_lanes: usize, group: u64, bits: u32) -> bool {
    let top_seg = (cfg.n + kernel_lanes - 2) as u32;
    let low_bits = cfg.s * top_seg + u32::from(cfg.signed);
    if low_bits >= bits {
        return false;
    }
    let per_product: u128 = if cfg.signed {
        1u128 << (cfg.p + cfg.q - 2)
    } else {
        ((1u128 << cfg.p) - 1) * ((1u128 << cfg.q) - 1)
    };
    let top = u128::from(group) * per_product + 1;
    let room = bits - low_bits;
    room >= 128 || top <= (1u128 << room)
}

fn required_bits(cfg: &HiKonvConfig, kernel_lanes: usize, group: u64) -> u32 {
    let per = if cfg.signed {
        cfg.p + cfg.q - 1
    } else {
        cfg.p + cfg.q
    };
    cfg.s * (cfg.n + kernel_lanes - 2) as u32 + per + crate::config::ceil_log2(group.max(1)) + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Width {
    W64,
    W128,
}

fn pick_width(cfg: &HiKonvConfig, kernel_lanes: usize, group: u64) -> Result<Width> {
    if accumulator_fits(cfg, kernel_lanes, group, 64) {
        Ok(Width::W64)
    } else if accumulator_fits(cfg, kernel_lanes, group, 128) {
        Ok(Width::W128)
    } else {
        Err(Error::AccumulatorOverflow {
            needed: required_bits(cfg, kernel_lanes, group),
            available: 128,
        })
    }
}

fn check_seq(seq: &QuantSeq, bits: u32, cfg: &HiKonvConfig, what: &str) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::ShapeMismatch(format!("{what} is empty")));
    }
    if seq.is_signed() != cfg.signed {
        return Err(Error::InvalidConfig(format!(
            "{what} signedness ({}) differs from the config ({})",
            seq.is_signed(),
            cfg.signed
        )));
    }
    if seq.bitwidth() > bits {
        return Err(Error::InvalidBitwidth {
            bits: seq.bitwidth(),
            reason: "sequence is wider than its slot",
        });
    }
    Ok(())
}

/// Exact 1-D convolution of one block with one multiplication.
///
/// `f_block` must fit `n` lanes and `g` must fit `k` lanes. Any mode works:
/// every guard-bit rule covers the `min(n, k)` terms of a single product.
pub fn conv_block(f_block: &QuantSeq, g: &QuantSeq, cfg: &HiKonvConfig) -> Result<Vec<i64>> {
    conv_block_with_stats(f_block, g, cfg).map(|(y, _)| y)
}

pub fn conv_block_with_stats(
    f_block: &QuantSeq,
    g: &QuantSeq,
    cfg: &HiKonvConfig,
) -> Result<(Vec<i64>, KernelStats)> {
    check_seq(f_block, cfg.p, cfg, "input block")?;
    check_seq(g, cfg.q, cfg, "kernel")?;
    let a = bitpack::pack(f_block, cfg, OperandSide::A)?;
    let b = bitpack::pack(g, cfg, OperandSide::B)?;
    let prod = bitpack::multiply(&a, &b);
    let y = bitpack::split(&prod, cfg, f_block.len() + g.len() - 1)?;
    let mut stats = KernelStats {
        wide_mults: 1,
        ..Default::default()
    };
    for &v in &y {
        stats.record(v);
    }
    Ok((y, stats))
}

/// Full 1-D convolution of `f` (any length) with `g`.
pub fn conv1d(f: &QuantSeq, g: &QuantSeq, cfg: &HiKonvConfig) -> Result<Vec<i64>> {
    conv1d_with(f, g, cfg, Conv1dOptions::default()).map(|(y, _)| y)
}

/// [`conv1d`] with explicit options and instrumentation.
///
/// Issues exactly `ceil(L / n)` wide multiplications per kernel chunk.
pub fn conv1d_with(
    f: &QuantSeq,
    g: &QuantSeq,
    cfg: &HiKonvConfig,
    opts: Conv1dOptions,
) -> Result<(Vec<i64>, KernelStats)> {
    cfg.validate()?;
    if cfg.mode != ConvMode::Conv1d {
        return Err(Error::ModeMismatch(format!(
            "conv1d needs a conv1d config, got {}",
            cfg.mode
        )));
    }
    check_seq(f, cfg.p, cfg, "input")?;
    check_seq(g, cfg.q, cfg, "kernel")?;
    if g.len() > cfg.k && !opts.allow_tiling {
        return Err(Error::InfeasibleGeometry(format!(
            "kernel length {} exceeds k={} and tiling is disabled",
            g.len(),
            cfg.k
        )));
    }
    let (f, g) = (f.values(), g.values());
    let mut out = vec![0i64; f.len() + g.len() - 1];
    let mut stats = KernelStats::default();
    let width = pick_width(cfg, cfg.k.min(g.len()), 1)?;
    for (c, chunk) in g.chunks(cfg.k).enumerate() {
        let dst = &mut out[c * cfg.k..];
        match width {
            Width::W64 => row_conv::<u64>(f, chunk, cfg, opts.accumulation, dst, &mut stats),
            Width::W128 => row_conv::<u128>(f, chunk, cfg, opts.accumulation, dst, &mut stats),
        }
    }
    Ok((out, stats))
}

/// Adds `f * g` into `out[0 .. f.len() + g.len() - 1]`, `g.len() <= k`.
fn row_conv<W: Word>(
    f: &[i64],
    g: &[i64],
    cfg: &HiKonvConfig,
    accumulation: Accumulation,
    out: &mut [i64],
    stats: &mut KernelStats,
) {
    let n = cfg.n;
    let seg = Segments {
        s: cfg.s,
        signed: cfg.signed,
    };
    let b: W = pack_word(g, cfg.s);
    let klen = g.len();
    let total = f.len() + klen - 1;
    let blocks = f.len().div_ceil(n);
    let mut acc = W::ZERO;
    for x in 0..blocks {
        let lo = x * n;
        let hi = (lo + n).min(f.len());
        let a: W = pack_word(&f[lo..hi], cfg.s);
        let prod = a.mul(b);
        stats.wide_mults += 1;
        match accumulation {
            Accumulation::Packed => {
                acc = acc.add(prod);
                if x + 1 < blocks {
                    // The lowest n segments receive no further contributions.
                    for m in 0..n {
                        let v = seg.field(acc, m);
                        stats.record(v);
                        out[lo + m] += v;
                    }
                    acc = seg.advance(acc, n);
                } else {
                    seg.drain_into(acc, total - lo, &mut out[lo..], Some(&mut *stats));
                }
            }
            Accumulation::Unpacked => {
                let count = hi - lo + klen - 1;
                seg.drain_into(prod, count, &mut out[lo..], None);
            }
        }
    }
}

/// Valid DNN convolution layer (stride 1, no padding).
pub fn conv2d_layer(input: &Tensor3, weights: &Tensor4, cfg: &HiKonvConfig) -> Result<Tensor3> {
    conv2d_layer_with(input, weights, cfg, Accumulation::Packed).map(|(t, _)| t)
}

/// [`conv2d_layer`] with explicit channel accumulation and instrumentation.
///
/// Output `O[co][h][w]` is the sum over input channels and kernel rows of
/// row convolutions `I[ci][h+kh][:] * reverse(W[co][ci][kh][:])` read at
/// `w + K - 1`. Products of up to `M` input channels are summed as packed
/// words and split once; everything after the split is full precision.
pub fn conv2d_layer_with(
    input: &Tensor3,
    weights: &Tensor4,
    cfg: &HiKonvConfig,
    accumulation: Accumulation,
) -> Result<(Tensor3, KernelStats)> {
    cfg.validate()?;
    let group = match cfg.mode {
        ConvMode::DnnLayer(m) => m as usize,
        other => {
            return Err(Error::ModeMismatch(format!(
                "conv2d_layer needs a dnn config, got {other}"
            )))
        }
    };
    let [ci_n, hi, wi] = input.dims();
    let [co_n, wci, khn, kwn] = weights.dims();
    if wci != ci_n {
        return Err(Error::ShapeMismatch(format!(
            "weights expect {wci} input channels, input has {ci_n}"
        )));
    }
    if khn != kwn {
        return Err(Error::ShapeMismatch(format!(
            "kernel must be square, got {khn}x{kwn}"
        )));
    }
    let k = khn;
    if ci_n == 0 || co_n == 0 || k == 0 || k > hi || k > wi {
        return Err(Error::ShapeMismatch(format!(
            "{k}x{k} kernel over a {ci_n}x{hi}x{wi} input with {co_n} outputs"
        )));
    }
    for (what, bits, signed, slot) in [
        ("input", input.bitwidth(), input.is_signed(), cfg.p),
        ("weights", weights.bitwidth(), weights.is_signed(), cfg.q),
    ] {
        if signed != cfg.signed {
            return Err(Error::InvalidConfig(format!(
                "{what} signedness ({signed}) differs from the config ({})",
                cfg.signed
            )));
        }
        if bits > slot {
            return Err(Error::InvalidBitwidth {
                bits,
                reason: "tensor is wider than its slot",
            });
        }
    }
    let group_terms = match accumulation {
        Accumulation::Packed => group.min(ci_n) as u64,
        Accumulation::Unpacked => 1,
    };
    let kernel_lanes = cfg.k.min(k);
    let mut stats = KernelStats::default();
    let out = match pick_width(cfg, kernel_lanes, group_terms)? {
        Width::W64 => layer::<u64>(input, weights, cfg, group, accumulation, &mut stats),
        Width::W128 => layer::<u128>(input, weights, cfg, group, accumulation, &mut stats),
    };
    let [_, ho, wo] = [co_n, hi - k + 1, wi - k + 1];
    Ok((Tensor3::new(out, [co_n, ho, wo], OUTPUT_BITS, true)?, stats))
}

fn layer<W: Word>(
    input: &Tensor3,
    weights: &Tensor4,
    cfg: &HiKonvConfig,
    group: usize,
    accumulation: Accumulation,
    stats: &mut KernelStats,
) -> Vec<i64> {
    let [ci_n, hi, wi] = input.dims();
    let [co_n, _, k, _] = weights.dims();
    let (ho, wo) = (hi - k + 1, wi - k + 1);
    let (n, s) = (cfg.n, cfg.s);
    let seg = Segments {
        s,
        signed: cfg.signed,
    };
    let blocks = wi.div_ceil(n);
    let chunk = cfg.k;
    let chunks = k.div_ceil(chunk);

    // Feature rows are packed once per block; the layout is [ci][row][x].
    let mut packed_in: Vec<W> = Vec::with_capacity(ci_n * hi * blocks);
    for ci in 0..ci_n {
        for r in 0..hi {
            let row = input.row(ci, r);
            for x in 0..blocks {
                let lo = x * n;
                packed_in.push(pack_word(&row[lo..(lo + n).min(wi)], s));
            }
        }
    }
    // Weight rows are reversed so each row convolution lines up with the
    // valid correlation; layout is [co][ci][kh][chunk].
    let mut packed_w: Vec<W> = Vec::with_capacity(co_n * ci_n * k * chunks);
    let mut chunk_len = Vec::with_capacity(chunks);
    for c in 0..chunks {
        chunk_len.push(chunk.min(k - c * chunk));
    }
    let mut rev = vec![0i64; k];
    for co in 0..co_n {
        for ci in 0..ci_n {
            for kh in 0..k {
                for (dst, &v) in rev.iter_mut().zip(weights.row(co, ci, kh).iter().rev()) {
                    *dst = v;
                }
                for c in 0..chunks {
                    let lo = c * chunk;
                    packed_w.push(pack_word(&rev[lo..lo + chunk_len[c]], s));
                }
            }
        }
    }

    let full = wi + k - 1;
    let mut out = vec![0i64; co_n * ho * wo];
    let mut row_acc = vec![0i64; full];
    for co in 0..co_n {
        for h in 0..ho {
            row_acc.iter_mut().for_each(|v| *v = 0);
            for kh in 0..k {
                let r = h + kh;
                for (c, &klen) in chunk_len.iter().enumerate() {
                    for x in 0..blocks {
                        let lanes = (wi - x * n).min(n);
                        let count = lanes + klen - 1;
                        let base = x * n + c * chunk;
                        let dst = &mut row_acc[base..];
                        for g0 in (0..ci_n).step_by(group) {
                            let g1 = (g0 + group).min(ci_n);
                            let mut acc = W::ZERO;
                            for ci in g0..g1 {
                                let a = packed_in[(ci * hi + r) * blocks + x];
                                let b = packed_w[((co * ci_n + ci) * k + kh) * chunks + c];
                                let prod = a.mul(b);
                                stats.wide_mults += 1;
                                match accumulation {
                                    Accumulation::Packed => acc = acc.add(prod),
                                    Accumulation::Unpacked => {
                                        seg.drain_into(prod, count, dst, None)
                                    }
                                }
                            }
                            if accumulation == Accumulation::Packed {
                                seg.drain_into(acc, count, dst, Some(&mut *stats));
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(co * ho + h) * wo..(co * ho + h + 1) * wo];
            dst.copy_from_slice(&row_acc[k - 1..k - 1 + wo]);
        }
    }
    out
}
