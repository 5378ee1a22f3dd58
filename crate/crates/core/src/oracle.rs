//! Textbook convolutions used as ground truth.
//!
//! Nothing here is clever on purpose: every kernel result is compared
//! against these loops.

use crate::bitpack::{value_range, QuantSeq};
use crate::error::{Error, Result};
use crate::kernel::{Tensor3, Tensor4, OUTPUT_BITS};

/// Full 1-D convolution `y[m] = sum_{i+j=m} f[i] * g[j]`.
///
/// Returns an empty vector if either input is empty.
pub fn naive_conv1d_values(f: &[i64], g: &[i64]) -> Vec<i64> {
    if f.is_empty() || g.is_empty() {
        return Vec::new();
    }
    let mut y = vec![0i64; f.len() + g.len() - 1];
    for (i, &a) in f.iter().enumerate() {
        for (j, &b) in g.iter().enumerate() {
            y[i + j] += a * b;
        }
    }
    y
}

pub fn naive_conv1d(f: &QuantSeq, g: &QuantSeq) -> Vec<i64> {
    assert_accumulator_fits(
        f.len().min(g.len()),
        max_magnitude(f.bitwidth(), f.is_signed()),
        max_magnitude(g.bitwidth(), g.is_signed()),
    );
    naive_conv1d_values(f.values(), g.values())
}

/// Valid 2-D convolution of a `[C_i][H_i][W_i]` feature map with
/// `[C_o][C_i][K][K]` weights, by direct six-loop evaluation.
pub fn naive_conv2d(input: &Tensor3, weights: &Tensor4) -> Result<Tensor3> {
    let [ci_n, hi, wi] = input.dims();
    let [co_n, wci, kh_n, kw_n] = weights.dims();
    if wci != ci_n {
        return Err(Error::ShapeMismatch(format!(
            "weights expect {wci} input channels, input has {ci_n}"
        )));
    }
    if kh_n != kw_n {
        return Err(Error::ShapeMismatch(format!(
            "kernel must be square, got {kh_n}x{kw_n}"
        )));
    }
    let k = kh_n;
    if k == 0 || k > hi || k > wi {
        return Err(Error::ShapeMismatch(format!(
            "kernel {k}x{k} does not fit a {hi}x{wi} input"
        )));
    }
    assert_accumulator_fits(
        ci_n * k * k,
        max_magnitude(input.bitwidth(), input.is_signed()),
        max_magnitude(weights.bitwidth(), weights.is_signed()),
    );
    let (ho, wo) = (hi - k + 1, wi - k + 1);
    let mut out = vec![0i64; co_n * ho * wo];
    for co in 0..co_n {
        for h in 0..ho {
            for w in 0..wo {
                let mut acc = 0i64;
                for ci in 0..ci_n {
                    for kh in 0..k {
                        for kw in 0..k {
                            acc += input.at(ci, h + kh, w + kw) * weights.at(co, ci, kh, kw);
                        }
                    }
                }
                out[(co * ho + h) * wo + w] = acc;
            }
        }
    }
    Tensor3::new(out, [co_n, ho, wo], OUTPUT_BITS, true)
}

/// Multiplications and additions of a direct `L x K` convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NaiveOps {
    pub mults: u64,
    pub adds: u64,
}

pub fn count_naive_ops(len: usize, kernel_len: usize) -> NaiveOps {
    let (l, k) = (len as u64, kernel_len as u64);
    NaiveOps {
        mults: l * k,
        adds: (l - 1) * (k - 1),
    }
}

fn max_magnitude(bits: u32, signed: bool) -> i64 {
    let (lo, hi) = value_range(bits.min(32), signed);
    lo.abs().max(hi)
}

fn assert_accumulator_fits(terms: usize, a: i64, b: i64) {
    let bound = (terms as i64).checked_mul(a).and_then(|v| v.checked_mul(b));
    assert!(
        bound.is_some(),
        "oracle accumulator could overflow 64 bits ({terms} terms of {a} x {b})"
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1d_examples() {
        assert_eq!(naive_conv1d_values(&[1, 2, 3], &[1, 1]), vec![1, 3, 5, 3]);
        assert_eq!(naive_conv1d_values(&[4, 0, 7], &[1]), vec![4, 0, 7]);
        assert_eq!(naive_conv1d_values(&[-2, 3], &[-1, 2]), vec![2, -7, 6]);
        assert!(naive_conv1d_values(&[], &[1]).is_empty());
    }

    #[test]
    fn conv1d_commutes() {
        let f = [3, -1, 4, 1, -5];
        let g = [2, 7, -1];
        assert_eq!(naive_conv1d_values(&f, &g), naive_conv1d_values(&g, &f));
    }

    #[test]
    fn conv2d_examples() {
        let input = Tensor3::new(vec![1; 4], [1, 2, 2], 1, false).unwrap();
        let weights = Tensor4::new(vec![1; 4], [1, 1, 2, 2], 1, false).unwrap();
        let out = naive_conv2d(&input, &weights).unwrap();
        assert_eq!(out.dims(), [1, 1, 1]);
        assert_eq!(out.data(), &[4]);

        let data: Vec<i64> = (0..12).map(|i| i % 8).collect();
        let input = Tensor3::new(data.clone(), [1, 3, 4], 3, false).unwrap();
        let ident = Tensor4::new(vec![1], [1, 1, 1, 1], 1, false).unwrap();
        assert_eq!(naive_conv2d(&input, &ident).unwrap().data(), &data[..]);
    }

    #[test]
    fn conv2d_single_row_reduces_to_conv1d() {
        let f = [1i64, 5, 2, 7, 3, 0, 6];
        let kernel = [2i64, 1, 3];
        let input = Tensor3::new(f.to_vec(), [1, 1, 7], 3, false).unwrap();
        // A 1x1xK row kernel is not square; embed it as K x K with zero rows
        // and a K-row input instead.
        let k = kernel.len();
        let mut rows = vec![0i64; k * f.len()];
        rows[..f.len()].copy_from_slice(&f);
        let input3 = Tensor3::new(rows, [1, k, f.len()], 3, false).unwrap();
        let mut w = vec![0i64; k * k];
        w[..k].copy_from_slice(&kernel);
        let weights = Tensor4::new(w, [1, 1, k, k], 2, false).unwrap();
        let out = naive_conv2d(&input3, &weights).unwrap();
        // Valid correlation equals the full convolution with a reversed kernel,
        // trimmed to the fully-overlapping positions.
        let rev: Vec<i64> = kernel.iter().rev().copied().collect();
        let full = naive_conv1d_values(&f, &rev);
        assert_eq!(out.data(), &full[k - 1..f.len()]);
        assert_eq!(input.dims(), [1, 1, 7]);
    }

    #[test]
    fn conv2d_shape_errors() {
        let input = Tensor3::new(vec![0; 8], [2, 2, 2], 2, false).unwrap();
        let weights = Tensor4::new(vec![0; 4], [1, 1, 2, 2], 2, false).unwrap();
        assert!(matches!(
            naive_conv2d(&input, &weights),
            Err(Error::ShapeMismatch(_))
        ));
        let input = Tensor3::new(vec![0; 4], [1, 2, 2], 2, false).unwrap();
        let weights = Tensor4::new(vec![0; 9], [1, 1, 3, 3], 2, false).unwrap();
        assert!(naive_conv2d(&input, &weights).is_err());
    }

    #[test]
    fn naive_op_counts() {
        assert_eq!(
            count_naive_ops(9, 4),
            NaiveOps {
                mults: 36,
                adds: 24
            }
        );
        assert_eq!(
            count_naive_ops(8, 3),
            NaiveOps {
                mults: 24,
                adds: 14
            }
        );
        assert_eq!(count_naive_ops(1, 1), NaiveOps { mults: 1, adds: 0 });
    }
}
