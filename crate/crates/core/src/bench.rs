//! Naive versus packed latency and multiplication counts.

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitpack::{value_range, QuantSeq};
use crate::config::{search_dnn_layer, search_optimal, ConvMode, HiKonvConfig, Multiplier};
use crate::error::{Error, Result};
use crate::kernel::{self, Accumulation, Conv1dOptions, Tensor3, Tensor4};
use crate::oracle;

pub const DEFAULT_ITERS: usize = 30;
pub const DEFAULT_WARMUP: usize = 5;
pub const DEFAULT_SEED: u64 = 0x4869_4b6f_6e76;

pub const CSV_HEADER: &str =
    "scenario,p,q,shape,signed,naive_ns,hikonv_ns,naive_mults,hikonv_wide_mults,speedup,mult_ratio";

/// Problem size of one benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchShape {
    Conv1d {
        len: usize,
        k: usize,
    },
    Conv2d {
        ci: usize,
        co: usize,
        h: usize,
        w: usize,
        k: usize,
    },
}

impl BenchShape {
    pub fn scenario(&self) -> &'static str {
        match self {
            BenchShape::Conv1d { .. } => "conv1d",
            BenchShape::Conv2d { .. } => "conv2d",
        }
    }

    pub fn naive_mults(&self) -> u64 {
        match *self {
            BenchShape::Conv1d { len, k } => (len * k) as u64,
            BenchShape::Conv2d { ci, co, h, w, k } => {
                (co * ci * k * k * (h - k + 1) * (w - k + 1)) as u64
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            BenchShape::Conv1d { len, k } if len == 0 || k == 0 => Err(Error::ShapeMismatch(
                format!("conv1d bench needs len, k >= 1, got {len}, {k}"),
            )),
            BenchShape::Conv2d { ci, co, h, w, k }
                if ci == 0 || co == 0 || k == 0 || k > h || k > w =>
            {
                Err(Error::ShapeMismatch(format!(
                    "conv2d bench shape {ci}x{co}x{h}x{w}x{k} is empty or the kernel does not fit"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// `LxK` for conv1d, `CIxCOxHxWxK` for conv2d.
impl fmt::Display for BenchShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchShape::Conv1d { len, k } => write!(f, "{len}x{k}"),
            BenchShape::Conv2d { ci, co, h, w, k } => write!(f, "{ci}x{co}x{h}x{w}x{k}"),
        }
    }
}

impl FromStr for BenchShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::ShapeMismatch(format!("bad shape {s:?}")))?;
        let shape = match dims[..] {
            [len, k] => BenchShape::Conv1d { len, k },
            [ci, co, h, w, k] => BenchShape::Conv2d { ci, co, h, w, k },
            _ => return Err(Error::ShapeMismatch(format!("bad shape {s:?}"))),
        };
        shape.validate()?;
        Ok(shape)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub scenario: String,
    pub p: u32,
    pub q: u32,
    pub shape: String,
    pub signed: bool,
    pub naive_ns: u64,
    pub hikonv_ns: u64,
    pub naive_mults: u64,
    pub hikonv_wide_mults: u64,
    /// `naive_ns / hikonv_ns`, rounded to 4 decimals.
    pub speedup: f64,
    /// `naive_mults / hikonv_wide_mults`, rounded to 4 decimals.
    pub mult_ratio: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BenchParams {
    pub shape: BenchShape,
    pub p: u32,
    pub q: u32,
    pub signed: bool,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
    pub multiplier: Multiplier,
}

impl BenchParams {
    pub fn new(shape: BenchShape, p: u32, q: u32, signed: bool) -> Self {
        BenchParams {
            shape,
            p,
            q,
            signed,
            iters: DEFAULT_ITERS,
            warmup: DEFAULT_WARMUP,
            seed: DEFAULT_SEED,
            multiplier: Multiplier::GPP,
        }
    }
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    let mid = xs.len() / 2;
    if xs.len().is_multiple_of(2) {
        (xs[mid - 1] + xs[mid]) / 2
    } else {
        xs[mid]
    }
}

fn random_values(rng: &mut ChaCha8Rng, count: usize, bits: u32, signed: bool) -> Vec<i64> {
    let (lo, hi) = value_range(bits, signed);
    (0..count).map(|_| rng.random_range(lo..=hi)).collect()
}

/// Config a benchmark of `shape` would use.
pub fn bench_config(params: &BenchParams) -> Result<HiKonvConfig> {
    let BenchParams {
        p,
        q,
        signed,
        multiplier,
        ..
    } = *params;
    match params.shape {
        BenchShape::Conv1d { .. } => search_optimal(multiplier, p, q, ConvMode::Conv1d, signed),
        BenchShape::Conv2d { ci, .. } => search_dnn_layer(multiplier, p, q, signed, ci),
    }
}

/// Closed-form wide-multiplication count of the packed path.
pub fn predicted_wide_mults(shape: BenchShape, cfg: &HiKonvConfig) -> u64 {
    match shape {
        BenchShape::Conv1d { len, k } => (len.div_ceil(cfg.n) * k.div_ceil(cfg.k)) as u64,
        BenchShape::Conv2d { ci, co, h, w, k } => {
            (co * ci * k * (h - k + 1) * w.div_ceil(cfg.n) * k.div_ceil(cfg.k)) as u64
        }
    }
}

/// Times `warmup + iters` repetitions of both paths on one fixed input.
///
/// Every repetition compares the outputs; a mismatch aborts with
/// [`Error::EquivalenceFailure`] before any timing is returned.
pub fn run_bench(params: &BenchParams) -> Result<BenchRecord> {
    if params.iters == 0 {
        return Err(Error::InvalidConfig("iters must be at least 1".into()));
    }
    params.shape.validate()?;
    let cfg = bench_config(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (p, q, signed) = (params.p, params.q, params.signed);

    let mut naive_times = Vec::with_capacity(params.iters);
    let mut packed_times = Vec::with_capacity(params.iters);
    let wide_mults;

    match params.shape {
        BenchShape::Conv1d { len, k } => {
            let f = QuantSeq::new(random_values(&mut rng, len, p, signed), p, signed)?;
            let g = QuantSeq::new(random_values(&mut rng, k, q, signed), q, signed)?;
            let mut mults = 0;
            for rep in 0..params.warmup + params.iters {
                let t0 = Instant::now();
                let expect = black_box(oracle::naive_conv1d(black_box(&f), black_box(&g)));
                let t1 = Instant::now();
                let (got, stats) = kernel::conv1d_with(
                    black_box(&f),
                    black_box(&g),
                    &cfg,
                    Conv1dOptions::default(),
                )?;
                let t2 = Instant::now();
                if let Some(i) = (0..expect.len()).find(|&i| expect[i] != got[i]) {
                    return Err(Error::EquivalenceFailure(format!(
                        "conv1d {} output {i}: expected {}, got {}",
                        params.shape, expect[i], got[i]
                    )));
                }
                mults = stats.wide_mults;
                if rep >= params.warmup {
                    naive_times.push((t1 - t0).as_nanos() as u64);
                    packed_times.push((t2 - t1).as_nanos() as u64);
                }
            }
            wide_mults = mults;
        }
        BenchShape::Conv2d { ci, co, h, w, k } => {
            let input = Tensor3::new(
                random_values(&mut rng, ci * h * w, p, signed),
                [ci, h, w],
                p,
                signed,
            )?;
            let weights = Tensor4::new(
                random_values(&mut rng, co * ci * k * k, q, signed),
                [co, ci, k, k],
                q,
                signed,
            )?;
            let mut mults = 0;
            for rep in 0..params.warmup + params.iters {
                let t0 = Instant::now();
                let expect = black_box(oracle::naive_conv2d(
                    black_box(&input),
                    black_box(&weights),
                )?);
                let t1 = Instant::now();
                let (got, stats) = kernel::conv2d_layer_with(
                    black_box(&input),
                    black_box(&weights),
                    &cfg,
                    Accumulation::Packed,
                )?;
                let t2 = Instant::now();
                if let Some(i) =
                    (0..expect.data().len()).find(|&i| expect.data()[i] != got.data()[i])
                {
                    return Err(Error::EquivalenceFailure(format!(
                        "conv2d {} output {i}: expected {}, got {}",
                        params.shape,
                        expect.data()[i],
                        got.data()[i]
                    )));
                }
                mults = stats.wide_mults;
                if rep >= params.warmup {
                    naive_times.push((t1 - t0).as_nanos() as u64);
                    packed_times.push((t2 - t1).as_nanos() as u64);
                }
            }
            wide_mults = mults;
        }
    }

    let naive_ns = median(naive_times).max(1);
    let hikonv_ns = median(packed_times).max(1);
    let naive_mults = params.shape.naive_mults();
    Ok(BenchRecord {
        scenario: params.shape.scenario().to_string(),
        p,
        q,
        shape: params.shape.to_string(),
        signed,
        naive_ns,
        hikonv_ns,
        naive_mults,
        hikonv_wide_mults: wide_mults,
        speedup: round4(naive_ns as f64 / hikonv_ns as f64),
        mult_ratio: round4(naive_mults as f64 / wide_mults as f64),
    })
}

/// Runs independent benchmarks, on up to `threads` worker threads.
///
/// Each timed section is still single-threaded; only whole scenarios run
/// side by side. Results keep the order of `suite`.
pub fn run_suite(suite: &[BenchParams], threads: usize) -> Result<Vec<BenchRecord>> {
    let threads = threads.max(1).min(suite.len().max(1));
    if threads == 1 {
        return suite.iter().map(run_bench).collect();
    }
    let chunk = suite.len().div_ceil(threads);
    let results: Vec<Result<Vec<BenchRecord>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = suite
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(run_bench).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(suite.len());
    for part in results {
        out.extend(part?);
    }
    Ok(out)
}

/// Writes the CSV report. Fails on an empty record list.
pub fn emit_csv<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("no benchmark records to emit".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in records {
        w.write_record([
            r.scenario.clone(),
            r.p.to_string(),
            r.q.to_string(),
            r.shape.clone(),
            r.signed.to_string(),
            r.naive_ns.to_string(),
            r.hikonv_ns.to_string(),
            r.naive_mults.to_string(),
            r.hikonv_wide_mults.to_string(),
            format!("{:.4}", r.speedup),
            format!("{:.4}", r.mult_ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv_string(records: &[BenchRecord]) -> Result<String> {
    let mut buf = Vec::new();
    emit_csv(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::BadHeader(format!(
            "unexpected bench header {header:?}"
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(shape: BenchShape, p: u32, signed: bool) -> BenchParams {
        BenchParams {
            iters: 3,
            warmup: 1,
            ..BenchParams::new(shape, p, p, signed)
        }
    }

    #[test]
    fn shape_text_roundtrip() {
        for s in ["65536x3", "16x8x10x12x3"] {
            assert_eq!(s.parse::<BenchShape>().unwrap().to_string(), s);
        }
        assert!("4x".parse::<BenchShape>().is_err());
        assert!("1x1x2x2x3".parse::<BenchShape>().is_err());
    }

    #[test]
    fn conv1d_mult_ratio_matches_closed_form() {
        let shape = BenchShape::Conv1d { len: 1000, k: 3 };
        let params = quick(shape, 4, false);
        let cfg = bench_config(&params).unwrap();
        let rec = run_bench(&params).unwrap();
        assert_eq!(rec.hikonv_wide_mults, predicted_wide_mults(shape, &cfg));
        assert_eq!(rec.naive_mults, 3000);
        assert_eq!(
            rec.mult_ratio,
            round4(3000.0 / rec.hikonv_wide_mults as f64)
        );
        assert!(rec.speedup > 0.0);
    }

    #[test]
    fn single_block_is_one_mult() {
        let cfg = search_optimal(Multiplier::GPP, 4, 4, ConvMode::Conv1d, false).unwrap();
        let shape = BenchShape::Conv1d {
            len: cfg.n,
            k: cfg.k,
        };
        let rec = run_bench(&quick(shape, 4, false)).unwrap();
        assert_eq!(rec.hikonv_wide_mults, 1);
    }

    #[test]
    fn conv2d_record() {
        let shape = BenchShape::Conv2d {
            ci: 4,
            co: 3,
            h: 6,
            w: 7,
            k: 3,
        };
        let params = quick(shape, 4, true);
        let cfg = bench_config(&params).unwrap();
        let rec = run_bench(&params).unwrap();
        assert_eq!(rec.hikonv_wide_mults, predicted_wide_mults(shape, &cfg));
        assert_eq!(rec.naive_mults, (3 * 4 * 9 * 4 * 5) as u64);
    }

    #[test]
    fn zero_iters_rejected() {
        let mut params = quick(BenchShape::Conv1d { len: 8, k: 2 }, 2, false);
        params.iters = 0;
        assert!(run_bench(&params).is_err());
    }

    #[test]
    fn csv_roundtrip_and_empty() {
        assert!(emit_csv_string(&[]).is_err());
        let rec = run_bench(&quick(BenchShape::Conv1d { len: 64, k: 3 }, 3, true)).unwrap();
        let text = emit_csv_string(std::slice::from_ref(&rec)).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(parse_csv(&text).unwrap(), vec![rec]);
    }

    #[test]
    fn suite_keeps_order() {
        let suite: Vec<_> = (1..=4)
            .map(|p| quick(BenchShape::Conv1d { len: 40, k: 2 }, p, false))
            .collect();
        let recs = run_suite(&suite, 3).unwrap();
        assert_eq!(
            recs.iter().map(|r| r.p).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
    }
}
