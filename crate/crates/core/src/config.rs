//! Slice geometry, guard bits, feasibility and the throughput search.
//!
//! A wide `bit_a x bit_b` multiplier holds `n` elements of `f` (each `p`
//! bits) in operand A and `k` elements of `g` (each `q` bits) in operand B,
//! one element per `s`-bit slice. The product then carries `n + k - 1`
//! convolution outputs, one per `s`-bit segment, provided every slice has
//! enough guard bits to absorb the vertical accumulation.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Widest operand accepted; keeps every product inside 128 bits.
pub const MAX_OPERAND_BITS: u32 = 64;
/// Widest quantized element accepted.
pub const MAX_ELEMENT_BITS: u32 = 8;

/// Which accumulation pattern the guard bits must cover.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvMode {
    /// One product, split once: at most `min(n, k)` terms per segment.
    SingleMultiplier,
    /// Overlap-add of consecutive block products: at most `k` terms.
    Conv1d,
    /// Products of up to `M` input channels summed before splitting.
    DnnLayer(u32),
}

impl ConvMode {
    pub fn group_size(&self) -> Option<u32> {
        match self {
            ConvMode::DnnLayer(m) => Some(*m),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConvMode::SingleMultiplier => "single",
            ConvMode::Conv1d => "conv1d",
            ConvMode::DnnLayer(_) => "dnn",
        }
    }
}

impl fmt::Display for ConvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvMode::DnnLayer(m) => write!(f, "dnn(m={m})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for ConvMode {
    type Err = Error;

    /// Parses `single`, `conv1d`, `dnn` (M = 1) or `dnn:<M>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(ConvMode::SingleMultiplier),
            "conv1d" => Ok(ConvMode::Conv1d),
            "dnn" => Ok(ConvMode::DnnLayer(1)),
            other => match other.strip_prefix("dnn:").map(str::parse::<u32>) {
                Some(Ok(m)) if m >= 1 => Ok(ConvMode::DnnLayer(m)),
                _ => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
            },
        }
    }
}

/// Input widths of the wide multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Multiplier {
    pub bit_a: u32,
    pub bit_b: u32,
}

impl Multiplier {
    pub const fn new(bit_a: u32, bit_b: u32) -> Self {
        Multiplier { bit_a, bit_b }
    }

    /// The 32x32 integer multiplier of a general-purpose CPU.
    pub const GPP: Multiplier = Multiplier::new(32, 32);
    /// The 27x18 multiplier of a DSP48E2 slice.
    pub const DSP48: Multiplier = Multiplier::new(27, 18);
}

impl Default for Multiplier {
    fn default() -> Self {
        Multiplier::GPP
    }
}

/// Which multiplicand a sequence is packed into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OperandSide {
    /// Operand A, holding up to `n` elements of `f`.
    A,
    /// Operand B, holding up to `k` elements of `g`.
    B,
}

/// A complete packing description for one multiplier geometry.
///
/// `s` and `g_b` are derived from the other fields; [`check_feasible`]
/// rejects a config whose stored values disagree with the derivation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HiKonvConfig {
    pub bit_a: u32,
    pub bit_b: u32,
    pub p: u32,
    pub q: u32,
    pub n: usize,
    pub k: usize,
    pub s: u32,
    pub g_b: u32,
    pub mode: ConvMode,
    pub signed: bool,
}

impl HiKonvConfig {
    /// Builds a self-consistent config for the given lane counts.
    ///
    /// Domain errors are reported here; whether the lanes actually fit the
    /// multiplier is a separate question answered by [`check_feasible`].
    pub fn new(
        mul: Multiplier,
        p: u32,
        q: u32,
        n: usize,
        k: usize,
        mode: ConvMode,
        signed: bool,
    ) -> Result<Self> {
        check_domain(mul, p, q, mode, signed)?;
        if n == 0 || k == 0 {
            return Err(Error::InvalidConfig(format!(
                "lane counts must be positive (n={n}, k={k})"
            )));
        }
        let g_b = guard_bits(mode, n, k);
        Ok(HiKonvConfig {
            bit_a: mul.bit_a,
            bit_b: mul.bit_b,
            p,
            q,
            n,
            k,
            s: slice_size(p, q, g_b),
            g_b,
            mode,
            signed,
        })
    }

    pub fn multiplier(&self) -> Multiplier {
        Multiplier::new(self.bit_a, self.bit_b)
    }

    pub fn ops(&self) -> u64 {
        ops_per_mult(self.n, self.k)
    }

    /// Number of segments in a product of full operands.
    pub fn segments(&self) -> usize {
        self.n + self.k - 1
    }

    pub fn lane_budget(&self, side: OperandSide) -> usize {
        match side {
            OperandSide::A => self.n,
            OperandSide::B => self.k,
        }
    }

    pub fn element_bits(&self, side: OperandSide) -> u32 {
        match side {
            OperandSide::A => self.p,
            OperandSide::B => self.q,
        }
    }

    pub fn register_bits(&self, side: OperandSide) -> u32 {
        match side {
            OperandSide::A => self.bit_a,
            OperandSide::B => self.bit_b,
        }
    }

    /// Errors unless the domain is valid and [`check_feasible`] holds.
    pub fn validate(&self) -> Result<()> {
        check_domain(self.multiplier(), self.p, self.q, self.mode, self.signed)?;
        if self.n == 0 || self.k == 0 {
            return Err(Error::InvalidConfig("lane counts must be positive".into()));
        }
        if !check_feasible(self) {
            return Err(Error::InfeasibleGeometry(format!(
                "n={} k={} s={} gb={} does not fit {}x{} for p={} q={} ({})",
                self.n, self.k, self.s, self.g_b, self.bit_a, self.bit_b, self.p, self.q, self.mode
            )));
        }
        Ok(())
    }
}

impl fmt::Display for HiKonvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} k={} s={} gb={} ops={}",
            self.n,
            self.k,
            self.s,
            self.g_b,
            self.ops()
        )
    }
}

fn check_domain(mul: Multiplier, p: u32, q: u32, mode: ConvMode, signed: bool) -> Result<()> {
    for bits in [p, q] {
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
    }
    for bits in [mul.bit_a, mul.bit_b] {
        if !(1..=MAX_OPERAND_BITS).contains(&bits) {
            return Err(Error::InvalidBitwidth {
                bits,
                reason: "multiplier operand width must be 1..=64",
            });
        }
    }
    if mode == ConvMode::DnnLayer(0) {
        return Err(Error::InvalidConfig(
            "channel group size M must be >= 1".into(),
        ));
    }
    Ok(())
}

/// `ceil(log2(x))`, with `ceil(log2(1)) = 0`.
pub fn ceil_log2(x: u64) -> u32 {
    assert!(x >= 1, "ceil_log2 of zero");
    x.next_power_of_two().trailing_zeros()
}

/// Slice width: a binary operand adds no bits of its own to the product.
pub fn slice_size(p: u32, q: u32, g_b: u32) -> u32 {
    if p == 1 {
        q + g_b
    } else if q == 1 {
        p + g_b
    } else {
        p + q + g_b
    }
}

/// Minimum guard bits for the number of terms that can land in one segment.
pub fn guard_bits(mode: ConvMode, n: usize, k: usize) -> u32 {
    let terms = match mode {
        ConvMode::SingleMultiplier => n.min(k) as u64,
        ConvMode::Conv1d => k as u64,
        ConvMode::DnnLayer(m) => u64::from(m) * n.min(k) as u64,
    };
    ceil_log2(terms)
}

/// Multiplications plus additions performed by one `n x k` block convolution.
pub fn ops_per_mult(n: usize, k: usize) -> u64 {
    let (n, k) = (n as u64, k as u64);
    n * k + (n - 1) * (k - 1)
}

/// Bits an operand register needs to hold `lanes` packed elements.
///
/// A signed packed word can exceed `bits + (lanes - 1) * s` by one bit: when
/// the top element is `-2^(bits-1)` and the lower lanes sum negative, the
/// two's-complement total falls just below the narrower range.
pub fn operand_width(bits: u32, lanes: usize, s: u32, signed: bool) -> u32 {
    let extra = u32::from(signed && lanes > 1);
    bits + (lanes as u32 - 1) * s + extra
}

/// True iff both operands fit their registers and `s`, `g_b` are the values
/// implied by the rest of the config.
pub fn check_feasible(cfg: &HiKonvConfig) -> bool {
    if cfg.n == 0 || cfg.k == 0 || cfg.p == 0 || cfg.q == 0 {
        return false;
    }
    if matches!(cfg.mode, ConvMode::DnnLayer(0)) {
        return false;
    }
    if cfg.g_b != guard_bits(cfg.mode, cfg.n, cfg.k) || cfg.s != slice_size(cfg.p, cfg.q, cfg.g_b) {
        return false;
    }
    // Lane counts beyond the register width cannot fit; bail out before the
    // width arithmetic can overflow.
    if cfg.n > cfg.bit_a as usize || cfg.k > cfg.bit_b as usize {
        return false;
    }
    operand_width(cfg.p, cfg.n, cfg.s, cfg.signed) <= cfg.bit_a
        && operand_width(cfg.q, cfg.k, cfg.s, cfg.signed) <= cfg.bit_b
}

/// Exhaustive search for the `(n, k)` that maximizes [`ops_per_mult`].
///
/// Guard bits are recomputed for every candidate, so the feasibility test
/// and the guard-bit rule always agree. Ties go to the larger `n`, then the
/// larger `k`.
pub fn search_optimal(
    mul: Multiplier,
    p: u32,
    q: u32,
    mode: ConvMode,
    signed: bool,
) -> Result<HiKonvConfig> {
    check_domain(mul, p, q, mode, signed)?;
    if p > mul.bit_a || q > mul.bit_b {
        return Err(Error::InfeasibleGeometry(format!(
            "{p}x{q}-bit elements do not fit a {}x{} multiplier",
            mul.bit_a, mul.bit_b
        )));
    }

    // s >= 1, so no more than bit - p + 1 lanes can ever fit.
    let max_n = (mul.bit_a - p + 1) as usize;
    let max_k = (mul.bit_b - q + 1) as usize;

    let mut best: Option<HiKonvConfig> = None;
    for n in 1..=max_n {
        for k in 1..=max_k {
            let cand = HiKonvConfig::new(mul, p, q, n, k, mode, signed)?;
            if !check_feasible(&cand) {
                continue;
            }
            let better = match &best {
                None => true,
                Some(b) => (cand.ops(), cand.n, cand.k) > (b.ops(), b.n, b.k),
            };
            if better {
                best = Some(cand);
            }
        }
    }
    best.ok_or_else(|| {
        Error::InfeasibleGeometry(format!(
            "no (n, k) fits {}x{} for p={p} q={q} ({mode})",
            mul.bit_a, mul.bit_b
        ))
    })
}

/// Largest channel group `M <= channels` that keeps the `(n, k)` of the
/// `DnnLayer(1)` optimum feasible, together with the resulting config.
pub fn search_dnn_layer(
    mul: Multiplier,
    p: u32,
    q: u32,
    signed: bool,
    channels: usize,
) -> Result<HiKonvConfig> {
    let base = search_optimal(mul, p, q, ConvMode::DnnLayer(1), signed)?;
    let mut best = base;
    let cap = channels.max(1).min(u32::MAX as usize) as u32;
    for m in 2..=cap {
        let cand = HiKonvConfig::new(mul, p, q, base.n, base.k, ConvMode::DnnLayer(m), signed)?;
        if !check_feasible(&cand) {
            // gb grows monotonically with M, so nothing larger fits either.
            break;
        }
        best = cand;
    }
    Ok(best)
}

/// One optimal packing in a throughput table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableRow {
    pub p: u32,
    pub q: u32,
    /// `None` when no packing fits.
    pub config: Option<HiKonvConfig>,
}

impl TableRow {
    pub fn csv_line(&self) -> String {
        match &self.config {
            Some(c) => format!(
                "{},{},{},{},{},{},{}",
                self.p,
                self.q,
                c.n,
                c.k,
                c.s,
                c.g_b,
                c.ops()
            ),
            None => format!("{},{},,,,,", self.p, self.q),
        }
    }
}

pub const TABLE_HEADER: &str = "p,q,n,k,s,gb,ops";

/// Optimal packing for every `(p, q)` pair, row-major in `p` then `q`.
pub fn throughput_table(
    mul: Multiplier,
    p_range: RangeInclusive<u32>,
    q_range: RangeInclusive<u32>,
    mode: ConvMode,
) -> Result<Vec<TableRow>> {
    for r in [&p_range, &q_range] {
        if *r.start() < 1 || *r.end() > MAX_ELEMENT_BITS {
            return Err(Error::InvalidConfig(format!(
                "bit range {}..={} outside 1..=8",
                r.start(),
                r.end()
            )));
        }
    }
    let mut rows = Vec::new();
    for p in p_range {
        for q in q_range.clone() {
            let config = match search_optimal(mul, p, q, mode, false) {
                Ok(cfg) => Some(cfg),
                Err(Error::InfeasibleGeometry(_)) => None,
                Err(e) => return Err(e),
            };
            rows.push(TableRow { p, q, config });
        }
    }
    Ok(rows)
}

/// Renders table rows as CSV with a trailing newline.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}
