//! `hikonv` command line.
//!
//! Exit codes: 0 success, 2 bad flags or input, 3 equivalence failure.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::builder::TypedValueParser;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{self, BenchParams, BenchShape};
use crate::bitpack::{value_range, QuantSeq};
use crate::config::{
    search_dnn_layer, search_optimal, table_csv, throughput_table, ConvMode, HiKonvConfig,
    Multiplier, MAX_ELEMENT_BITS,
};
use crate::error::{Error, Result};
use crate::kernel::{self, Tensor3, Tensor4};
use crate::oracle;
use crate::qtensor::{self, QTensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "hikonv",
    version,
    about = "Low-bitwidth convolution with several outputs per wide multiplication"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Find the packing with the most operations per multiplication.
    Search(SearchArgs),
    /// Write the optimal packing for every (p, q) as CSV.
    Table(TableArgs),
    /// Full 1-D convolution of two QTSR sequences.
    Conv1d(ConvArgs),
    /// Valid 2-D convolution layer of a [C_i][H][W] input with [C_o][C_i][K][K] weights.
    Conv2d(ConvArgs),
    /// Time naive and packed convolution on random inputs.
    Bench(BenchArgs),
    /// Check packed kernels against the naive oracle.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Single,
    Conv1d,
    Dnn,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct GeometryArgs {
    /// Width of the first multiplier input.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..=64))]
    pub bit_a: u32,
    /// Width of the second multiplier input.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..=64))]
    pub bit_b: u32,
}

impl GeometryArgs {
    fn multiplier(&self) -> Multiplier {
        Multiplier::new(self.bit_a, self.bit_b)
    }
}

fn bits_parser() -> clap::builder::RangedI64ValueParser<u32> {
    clap::value_parser!(u32).range(1..=i64::from(MAX_ELEMENT_BITS))
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub geometry: GeometryArgs,
    /// Bitwidth of the input elements.
    #[arg(long, value_parser = bits_parser())]
    pub p: u32,
    /// Bitwidth of the kernel elements.
    #[arg(long, value_parser = bits_parser())]
    pub q: u32,
    #[arg(long, value_enum, default_value_t = ModeArg::Single)]
    pub mode: ModeArg,
    /// Channels summed before splitting (dnn mode only).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub m: Option<u32>,
    /// Two's-complement operands.
    #[arg(long)]
    pub signed: bool,
}

#[derive(Args, Debug)]
pub struct TableArgs {
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long, default_value_t = 8, value_parser = bits_parser())]
    pub p_max: u32,
    #[arg(long, default_value_t = 8, value_parser = bits_parser())]
    pub q_max: u32,
    #[arg(long, value_enum, default_value_t = ModeArg::Single)]
    pub mode: ModeArg,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub m: Option<u32>,
    /// Output file; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConvArgs {
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub kernel: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the naive oracle instead of the packed kernel.
    #[arg(long)]
    pub naive: bool,
    /// Also run the other path and fail with exit 3 on any difference.
    #[arg(long)]
    pub verify: bool,
    /// Channel group size for conv2d; defaults to the largest feasible.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub m: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Conv1d,
    Conv2d,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long, value_enum, default_value_t = ScenarioArg::Conv1d)]
    pub scenario: ScenarioArg,
    #[arg(long, default_value_t = 4, value_parser = bits_parser())]
    pub p: u32,
    #[arg(long, default_value_t = 4, value_parser = bits_parser())]
    pub q: u32,
    #[arg(long)]
    pub signed: bool,
    /// conv1d input length.
    #[arg(long, default_value_t = 1 << 16)]
    pub len: usize,
    /// Kernel size (length for conv1d, side for conv2d).
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 32)]
    pub ci: usize,
    #[arg(long, default_value_t = 32)]
    pub co: usize,
    #[arg(long, default_value_t = 10)]
    pub h: usize,
    #[arg(long, default_value_t = 20)]
    pub w: usize,
    #[arg(long, default_value_t = bench::DEFAULT_ITERS, value_parser = clap::value_parser!(u64).range(1..).map(|v| v as usize))]
    pub iters: usize,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = bench::DEFAULT_SEED)]
    pub seed: u64,
    /// CSV output file; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    /// Element width of the exhaustive block sweep.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..=4))]
    pub exhaustive_bits: u32,
    #[arg(long, default_value_t = 10_000)]
    pub random_cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=256).map(|v| v as usize))]
    pub threads: usize,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let stdout = io::stdout();
    match dispatch(cli.command, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e @ Error::EquivalenceFailure(_)) => {
            eprintln!("error: {e}");
            EXIT_MISMATCH
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Search(a) => cmd_search(&a, out),
        Command::Table(a) => cmd_table(&a, out),
        Command::Conv1d(a) => cmd_conv1d(&a, out),
        Command::Conv2d(a) => cmd_conv2d(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Selftest(a) => cmd_selftest(&a, out),
    }
}

fn conv_mode(mode: ModeArg, m: Option<u32>) -> Result<ConvMode> {
    match (mode, m) {
        (ModeArg::Single, None) => Ok(ConvMode::SingleMultiplier),
        (ModeArg::Conv1d, None) => Ok(ConvMode::Conv1d),
        (ModeArg::Dnn, m) => Ok(ConvMode::DnnLayer(m.unwrap_or(1))),
        (_, Some(_)) => Err(Error::InvalidConfig(
            "--m only applies to --mode dnn".into(),
        )),
    }
}

pub fn cmd_search(a: &SearchArgs, out: &mut dyn Write) -> Result<i32> {
    let mul = a.geometry.multiplier();
    let mode = conv_mode(a.mode, a.m)?;
    let cfg = search_optimal(mul, a.p, a.q, mode, a.signed)?;
    writeln!(
        out,
        "{}x{} multiplier, {}-bit x {}-bit {} ({}): {} ops per multiplication",
        mul.bit_a,
        mul.bit_b,
        a.p,
        a.q,
        if a.signed { "signed" } else { "unsigned" },
        mode,
        cfg.ops()
    )?;
    writeln!(out, "{cfg}")?;
    Ok(EXIT_OK)
}

pub fn cmd_table(a: &TableArgs, out: &mut dyn Write) -> Result<i32> {
    let mul = a.geometry.multiplier();
    let mode = conv_mode(a.mode, a.m)?;
    let rows = throughput_table(mul, 1..=a.p_max, 1..=a.q_max, mode)?;
    let text = table_csv(&rows);
    match &a.out {
        Some(path) => {
            fs::write(path, text)?;
            writeln!(out, "wrote {} rows to {}", rows.len(), path.display())?;
        }
        None => out.write_all(text.as_bytes())?,
    }
    Ok(EXIT_OK)
}

fn same_signedness(a: bool, b: bool) -> Result<bool> {
    if a != b {
        return Err(Error::InvalidConfig(
            "input and kernel must share signedness".into(),
        ));
    }
    Ok(a)
}

fn first_difference(expect: &[i64], got: &[i64]) -> Option<String> {
    if expect.len() != got.len() {
        return Some(format!("length {} vs {}", expect.len(), got.len()));
    }
    (0..expect.len())
        .find(|&i| expect[i] != got[i])
        .map(|i| format!("output {i}: oracle {}, packed {}", expect[i], got[i]))
}

pub fn cmd_conv1d(a: &ConvArgs, out: &mut dyn Write) -> Result<i32> {
    if a.m.is_some() {
        return Err(Error::InvalidConfig("--m only applies to conv2d".into()));
    }
    let f = qtensor::read_file(&a.input)?.to_seq()?;
    let g = qtensor::read_file(&a.kernel)?.to_seq()?;
    let signed = same_signedness(f.is_signed(), g.is_signed())?;
    let packed = |f: &QuantSeq, g: &QuantSeq| -> Result<Vec<i64>> {
        let cfg = search_optimal(
            a.geometry.multiplier(),
            f.bitwidth(),
            g.bitwidth(),
            ConvMode::Conv1d,
            signed,
        )?;
        kernel::conv1d(f, g, &cfg)
    };
    let y = if a.naive {
        oracle::naive_conv1d(&f, &g)
    } else {
        packed(&f, &g)?
    };
    if a.verify {
        let other = if a.naive {
            packed(&f, &g)?
        } else {
            oracle::naive_conv1d(&f, &g)
        };
        if let Some(diff) = first_difference(&y, &other) {
            return Err(Error::EquivalenceFailure(format!("conv1d {diff}")));
        }
    }
    let bytes = qtensor::write_file(&a.out, &QTensor::from_outputs(y)?)?;
    writeln!(out, "wrote {bytes} bytes to {}", a.out.display())?;
    Ok(EXIT_OK)
}

pub fn cmd_conv2d(a: &ConvArgs, out: &mut dyn Write) -> Result<i32> {
    let input = qtensor::read_file(&a.input)?.to_tensor3()?;
    let weights = qtensor::read_file(&a.kernel)?.to_tensor4()?;
    let signed = same_signedness(input.is_signed(), weights.is_signed())?;
    let packed = |input: &Tensor3, weights: &Tensor4| -> Result<Tensor3> {
        let mul = a.geometry.multiplier();
        let (p, q) = (input.bitwidth(), weights.bitwidth());
        let cfg = match a.m {
            Some(m) => search_optimal(mul, p, q, ConvMode::DnnLayer(m), signed)?,
            None => search_dnn_layer(mul, p, q, signed, input.dims()[0])?,
        };
        kernel::conv2d_layer(input, weights, &cfg)
    };
    let y = if a.naive {
        oracle::naive_conv2d(&input, &weights)?
    } else {
        packed(&input, &weights)?
    };
    if a.verify {
        let other = if a.naive {
            packed(&input, &weights)?
        } else {
            oracle::naive_conv2d(&input, &weights)?
        };
        if let Some(diff) = first_difference(y.data(), other.data()) {
            return Err(Error::EquivalenceFailure(format!("conv2d {diff}")));
        }
    }
    let bytes = qtensor::write_file(&a.out, &QTensor::from_tensor3(&y)?)?;
    writeln!(out, "wrote {bytes} bytes to {}", a.out.display())?;
    Ok(EXIT_OK)
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<i32> {
    let shape = match a.scenario {
        ScenarioArg::Conv1d => BenchShape::Conv1d { len: a.len, k: a.k },
        ScenarioArg::Conv2d => BenchShape::Conv2d {
            ci: a.ci,
            co: a.co,
            h: a.h,
            w: a.w,
            k: a.k,
        },
    };
    let params = BenchParams {
        iters: a.iters,
        warmup: a.warmup,
        seed: a.seed,
        multiplier: a.geometry.multiplier(),
        ..BenchParams::new(shape, a.p, a.q, a.signed)
    };
    let record = bench::run_bench(&params)?;
    match &a.out {
        Some(path) => {
            bench::emit_csv(std::slice::from_ref(&record), fs::File::create(path)?)?;
            writeln!(out, "wrote {}", path.display())?;
        }
        None => bench::emit_csv(std::slice::from_ref(&record), &mut *out)?,
    }
    Ok(EXIT_OK)
}

/// A failing selftest case.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Counterexample {
    pub inputs: String,
    pub expected: Vec<i64>,
    pub actual: std::result::Result<Vec<i64>, String>,
}

impl std::fmt::Display for Counterexample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "inputs:   {}", self.inputs)?;
        writeln!(f, "expected: {:?}", self.expected)?;
        match &self.actual {
            Ok(v) => write!(f, "actual:   {v:?}"),
            Err(e) => write!(f, "actual:   error: {e}"),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOutcome {
    pub checked: u64,
    pub failed: u64,
    pub first_failure: Option<Counterexample>,
}

impl SuiteOutcome {
    fn check(
        &mut self,
        inputs: impl FnOnce() -> String,
        expected: Vec<i64>,
        actual: Result<Vec<i64>>,
    ) {
        self.checked += 1;
        let ok = matches!(&actual, Ok(v) if *v == expected);
        if !ok {
            self.failed += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(Counterexample {
                    inputs: inputs(),
                    expected,
                    actual: actual.map_err(|e| e.to_string()),
                });
            }
        }
    }

    fn merge(&mut self, other: SuiteOutcome) {
        self.checked += other.checked;
        self.failed += other.failed;
        if self.first_failure.is_none() {
            self.first_failure = other.first_failure;
        }
    }

    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

/// Every `p = q = bits` block with `n, k <= 2`, against the oracle.
///
/// Returns one outcome per signedness; signed is skipped for 1-bit elements.
pub fn selftest_exhaustive(bits: u32) -> Result<Vec<(bool, SuiteOutcome)>> {
    let mut results = Vec::new();
    for signed in [false, true] {
        if signed && bits < 2 {
            continue;
        }
        let mut outcome = SuiteOutcome::default();
        let (lo, hi) = value_range(bits, signed);
        let span = (hi - lo + 1) as usize;
        for n in 1..=2usize {
            for k in 1..=2usize {
                let cfg = HiKonvConfig::new(
                    Multiplier::GPP,
                    bits,
                    bits,
                    n,
                    k,
                    ConvMode::SingleMultiplier,
                    signed,
                )?;
                let total = span.pow((n + k) as u32);
                for code in 0..total {
                    let mut c = code;
                    let mut digits = Vec::with_capacity(n + k);
                    for _ in 0..n + k {
                        digits.push(lo + (c % span) as i64);
                        c /= span;
                    }
                    let (fv, gv) = digits.split_at(n);
                    let f = QuantSeq::new(fv.to_vec(), bits, signed)?;
                    let g = QuantSeq::new(gv.to_vec(), bits, signed)?;
                    outcome.check(
                        || format!("block {cfg}, signed={signed}, f={fv:?}, g={gv:?}"),
                        oracle::naive_conv1d(&f, &g),
                        kernel::conv_block(&f, &g, &cfg),
                    );
                }
            }
        }
        results.push((signed, outcome));
    }
    Ok(results)
}

fn random_conv1d_case(rng: &mut ChaCha8Rng, outcome: &mut SuiteOutcome) {
    let signed = rng.random_bool(0.5);
    let min_bits = if signed { 2 } else { 1 };
    let p = rng.random_range(min_bits..=MAX_ELEMENT_BITS);
    let q = rng.random_range(min_bits..=MAX_ELEMENT_BITS);
    let len = rng.random_range(1..=256usize);
    let klen = rng.random_range(1..=16usize);
    let draw = |rng: &mut ChaCha8Rng, count, bits| {
        let (lo, hi) = value_range(bits, signed);
        (0..count)
            .map(|_| rng.random_range(lo..=hi))
            .collect::<Vec<i64>>()
    };
    let fv = draw(rng, len, p);
    let gv = draw(rng, klen, q);
    let f = QuantSeq::new(fv.clone(), p, signed).expect("drawn in range");
    let g = QuantSeq::new(gv.clone(), q, signed).expect("drawn in range");
    let actual = search_optimal(Multiplier::GPP, p, q, ConvMode::Conv1d, signed)
        .and_then(|cfg| kernel::conv1d(&f, &g, &cfg));
    outcome.check(
        || format!("conv1d p={p} q={q} signed={signed} f={fv:?} g={gv:?}"),
        oracle::naive_conv1d(&f, &g),
        actual,
    );
}

fn random_conv2d_case(rng: &mut ChaCha8Rng, outcome: &mut SuiteOutcome) {
    let signed = rng.random_bool(0.5);
    let min_bits = if signed { 2 } else { 1 };
    let p = rng.random_range(min_bits..=MAX_ELEMENT_BITS);
    let q = rng.random_range(min_bits..=MAX_ELEMENT_BITS);
    let ci = rng.random_range(1..=16usize);
    let co = rng.random_range(1..=16usize);
    let k = rng.random_range(1..=5usize);
    let h = rng.random_range(k..=16);
    let w = rng.random_range(k..=16);
    let draw = |rng: &mut ChaCha8Rng, count, bits| {
        let (lo, hi) = value_range(bits, signed);
        (0..count)
            .map(|_| rng.random_range(lo..=hi))
            .collect::<Vec<i64>>()
    };
    let input = Tensor3::new(draw(rng, ci * h * w, p), [ci, h, w], p, signed).expect("in range");
    let weights =
        Tensor4::new(draw(rng, co * ci * k * k, q), [co, ci, k, k], q, signed).expect("in range");
    let expected = oracle::naive_conv2d(&input, &weights)
        .expect("valid shape")
        .into_data();
    let actual = search_dnn_layer(Multiplier::GPP, p, q, signed, ci)
        .and_then(|cfg| kernel::conv2d_layer(&input, &weights, &cfg))
        .map(Tensor3::into_data);
    outcome.check(
        || format!("conv2d p={p} q={q} signed={signed} shape={ci}x{co}x{h}x{w}x{k}"),
        expected,
        actual,
    );
}

/// Randomized conv1d and conv2d cases. Case `i` draws from stream `i` of
/// the seeded generator, so results do not depend on `threads`.
pub fn selftest_random(
    cases: usize,
    conv2d_cases: usize,
    seed: u64,
    threads: usize,
) -> SuiteOutcome {
    let total = cases + conv2d_cases;
    let run_range = |range: std::ops::Range<usize>| {
        let mut outcome = SuiteOutcome::default();
        for i in range {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            if i < cases {
                random_conv1d_case(&mut rng, &mut outcome);
            } else {
                random_conv2d_case(&mut rng, &mut outcome);
            }
        }
        outcome
    };
    let threads = threads.max(1).min(total.max(1));
    if threads == 1 {
        return run_range(0..total);
    }
    let chunk = total.div_ceil(threads);
    let parts: Vec<SuiteOutcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let range = (t * chunk).min(total)..((t + 1) * chunk).min(total);
                scope.spawn(move || run_range(range))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("selftest worker panicked"))
            .collect()
    });
    let mut outcome = SuiteOutcome::default();
    for part in parts {
        outcome.merge(part);
    }
    outcome
}

pub fn cmd_selftest(a: &SelftestArgs, out: &mut dyn Write) -> Result<i32> {
    let mut failures = Vec::new();
    for (signed, outcome) in selftest_exhaustive(a.exhaustive_bits)? {
        writeln!(
            out,
            "exhaustive {}-bit {}: {} block cases checked, {} failed",
            a.exhaustive_bits,
            if signed { "signed" } else { "unsigned" },
            outcome.checked,
            outcome.failed
        )?;
        failures.extend(outcome.first_failure);
    }
    let conv2d_cases = a.random_cases.div_ceil(100);
    let outcome = selftest_random(a.random_cases, conv2d_cases, a.seed, a.threads);
    writeln!(
        out,
        "random (seed {}): {} cases checked ({} conv1d, {} conv2d), {} failed",
        a.seed, outcome.checked, a.random_cases, conv2d_cases, outcome.failed
    )?;
    failures.extend(outcome.first_failure);
    match failures.first() {
        None => {
            writeln!(out, "selftest passed")?;
            Ok(EXIT_OK)
        }
        Some(cx) => {
            writeln!(out, "selftest FAILED, first counterexample:\n{cx}")?;
            Ok(EXIT_MISMATCH)
        }
    }
}
