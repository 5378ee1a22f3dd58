//! `QTSR` tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size     | field                                      |
//! |--------|----------|--------------------------------------------|
//! | 0      | 4        | magic `QTSR`                               |
//! | 4      | 1        | version, `1`                               |
//! | 5      | 1        | bitwidth, `1..=8` or `32`                  |
//! | 6      | 1        | signed, `0` or `1`                         |
//! | 7      | 1        | ndim, `1..=4`                              |
//! | 8      | 4 * ndim | dims, `u32` each, product > 0              |
//!
//! The payload follows: bit-packed elements (see
//! [`compress_bits`](crate::bitpack::compress_bits)) for bitwidths up to 8,
//! or one 32-bit word per element for bitwidth 32.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bitpack::{compress_bits, compressed_len, decompress_bits, value_range, QuantSeq};
use crate::error::{Error, Result};
use crate::kernel::{Tensor3, Tensor4, OUTPUT_BITS};

pub const MAGIC: [u8; 4] = *b"QTSR";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QTensor {
    dims: Vec<u32>,
    bitwidth: u32,
    signed: bool,
    values: Vec<i64>,
}

impl QTensor {
    pub fn new(dims: Vec<u32>, bitwidth: u32, signed: bool, values: Vec<i64>) -> Result<Self> {
        check_header(&dims, bitwidth)?;
        let count = element_count(&dims);
        if values.len() != count {
            return Err(Error::ShapeMismatch(format!(
                "{} values for dims {dims:?}",
                values.len()
            )));
        }
        if bitwidth != OUTPUT_BITS {
            // Validates 1-bit signed and the value range together.
            QuantSeq::new(Vec::new(), bitwidth, signed)?;
        }
        let (lo, hi) = value_range(bitwidth, signed);
        if let Some(&bad) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::RangeError {
                value: bad,
                bits: bitwidth,
                signed,
            });
        }
        Ok(QTensor {
            dims,
            bitwidth,
            signed,
            values,
        })
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn bitwidth(&self) -> u32 {
        self.bitwidth
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    pub fn from_seq(seq: &QuantSeq) -> Result<Self> {
        Self::new(
            vec![dim(seq.len())?],
            seq.bitwidth(),
            seq.is_signed(),
            seq.values().to_vec(),
        )
    }

    /// Full-precision 1-D output.
    pub fn from_outputs(values: Vec<i64>) -> Result<Self> {
        Self::new(vec![dim(values.len())?], OUTPUT_BITS, true, values)
    }

    pub fn from_tensor3(t: &Tensor3) -> Result<Self> {
        let dims = t.dims().iter().map(|&d| dim(d)).collect::<Result<_>>()?;
        Self::new(dims, t.bitwidth(), t.is_signed(), t.data().to_vec())
    }

    pub fn from_tensor4(t: &Tensor4) -> Result<Self> {
        let dims = t.dims().iter().map(|&d| dim(d)).collect::<Result<_>>()?;
        Self::new(dims, t.bitwidth(), t.is_signed(), t.data().to_vec())
    }

    fn expect_ndim(&self, ndim: usize) -> Result<()> {
        if self.dims.len() != ndim {
            return Err(Error::ShapeMismatch(format!(
                "expected a {ndim}-d tensor, got dims {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    pub fn to_seq(&self) -> Result<QuantSeq> {
        self.expect_ndim(1)?;
        QuantSeq::new(self.values.clone(), self.bitwidth, self.signed)
    }

    pub fn to_tensor3(&self) -> Result<Tensor3> {
        self.expect_ndim(3)?;
        let d = &self.dims;
        Tensor3::new(
            self.values.clone(),
            [d[0] as usize, d[1] as usize, d[2] as usize],
            self.bitwidth,
            self.signed,
        )
    }

    pub fn to_tensor4(&self) -> Result<Tensor4> {
        self.expect_ndim(4)?;
        let d = &self.dims;
        Tensor4::new(
            self.values.clone(),
            [d[0] as usize, d[1] as usize, d[2] as usize, d[3] as usize],
            self.bitwidth,
            self.signed,
        )
    }
}

fn dim(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::ShapeMismatch(format!("dimension {d} exceeds u32")))
}

fn element_count(dims: &[u32]) -> usize {
    dims.iter().map(|&d| d as usize).product()
}

fn check_header(dims: &[u32], bitwidth: u32) -> Result<()> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::BadHeader(format!(
            "ndim {} outside 1..=4",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::BadHeader(format!("zero dimension in {dims:?}")));
    }
    if !(1..=8).contains(&bitwidth) && bitwidth != OUTPUT_BITS {
        return Err(Error::BadHeader(format!(
            "bitwidth {bitwidth} not in 1..=8 or 32"
        )));
    }
    Ok(())
}

pub fn header_len(ndim: usize) -> usize {
    8 + 4 * ndim
}

pub fn payload_len(count: usize, bitwidth: u32) -> usize {
    if bitwidth == OUTPUT_BITS {
        count * 4
    } else {
        compressed_len(count, bitwidth)
    }
}

/// Serializes `t`, returning the number of bytes written.
pub fn write_qtensor<W: Write>(mut w: W, t: &QTensor) -> Result<usize> {
    let bytes = encode(t)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

pub fn encode(t: &QTensor) -> Result<Vec<u8>> {
    check_header(&t.dims, t.bitwidth)?;
    let count = element_count(&t.dims);
    let mut out = Vec::with_capacity(header_len(t.dims.len()) + payload_len(count, t.bitwidth));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(t.bitwidth as u8);
    out.push(u8::from(t.signed));
    out.push(t.dims.len() as u8);
    for d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    if t.bitwidth == OUTPUT_BITS {
        for &v in &t.values {
            let word = if t.signed {
                (v as i32).to_le_bytes()
            } else {
                (v as u32).to_le_bytes()
            };
            out.extend_from_slice(&word);
        }
    } else {
        let seq = QuantSeq::new(t.values.clone(), t.bitwidth, t.signed)?;
        out.extend_from_slice(&compress_bits(&seq));
    }
    Ok(out)
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], consumed: usize) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::TruncatedStream {
            needed: consumed + buf.len(),
            available: consumed,
        },
        _ => Error::Io(e),
    })
}

/// Reads one tensor, consuming exactly its header and payload.
pub fn read_qtensor<R: Read>(mut r: R) -> Result<QTensor> {
    let mut fixed = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut fixed, 0)?;
    let magic = [fixed[0], fixed[1], fixed[2], fixed[3]];
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if fixed[4] != VERSION {
        return Err(Error::BadVersion(fixed[4]));
    }
    let bitwidth = u32::from(fixed[5]);
    let signed = match fixed[6] {
        0 => false,
        1 => true,
        other => return Err(Error::BadHeader(format!("signed flag {other}"))),
    };
    let ndim = fixed[7] as usize;
    if !(1..=4).contains(&ndim) {
        return Err(Error::BadHeader(format!("ndim {ndim} outside 1..=4")));
    }
    let mut raw_dims = vec![0u8; 4 * ndim];
    read_exact_or_truncated(&mut r, &mut raw_dims, 8)?;
    let dims: Vec<u32> = raw_dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    check_header(&dims, bitwidth)?;
    let count = element_count(&dims);
    let mut payload = vec![0u8; payload_len(count, bitwidth)];
    read_exact_or_truncated(&mut r, &mut payload, header_len(ndim))?;
    let values = if bitwidth == OUTPUT_BITS {
        payload
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                if signed {
                    i64::from(i32::from_le_bytes(b))
                } else {
                    i64::from(u32::from_le_bytes(b))
                }
            })
            .collect()
    } else {
        decompress_bits(&payload, bitwidth, count, signed)?.into_values()
    };
    QTensor::new(dims, bitwidth, signed, values)
}

pub fn decode(bytes: &[u8]) -> Result<QTensor> {
    read_qtensor(bytes)
}

pub fn write_file(path: impl AsRef<Path>, t: &QTensor) -> Result<usize> {
    let file = File::create(path)?;
    write_qtensor(BufWriter::new(file), t)
}

pub fn read_file(path: impl AsRef<Path>) -> Result<QTensor> {
    read_qtensor(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> QTensor {
        QTensor::new(vec![3], 2, false, vec![3, 1, 2]).unwrap()
    }

    #[test]
    fn thirteen_byte_example() {
        let mut buf = Vec::new();
        let n = write_qtensor(&mut buf, &small()).unwrap();
        assert_eq!(n, 13);
        assert_eq!(buf.len(), 13);
        assert_eq!(
            &buf[..12],
            &[b'Q', b'T', b'S', b'R', 1, 2, 0, 1, 3, 0, 0, 0]
        );
        assert_eq!(buf[12], 0x27);
        let back = decode(&buf).unwrap();
        assert_eq!(back.dims(), &[3]);
        assert_eq!(back.values(), &[3, 1, 2]);
    }

    #[test]
    fn empty_tensor_rejected() {
        assert!(QTensor::new(vec![0], 4, false, vec![]).is_err());
        assert!(QTensor::new(vec![], 4, false, vec![]).is_err());
        assert!(QTensor::from_seq(&QuantSeq::unsigned(vec![], 4).unwrap()).is_err());
    }

    #[test]
    fn corrupt_headers() {
        let good = encode(&small()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::BadVersion(2))));
        assert!(matches!(
            decode(&good[..12]),
            Err(Error::TruncatedStream {
                needed: 13,
                available: 12
            })
        ));
        assert!(matches!(
            decode(&good[..5]),
            Err(Error::TruncatedStream { .. })
        ));
        let mut bad = good.clone();
        bad[5] = 9;
        assert!(matches!(decode(&bad), Err(Error::BadHeader(_))));
    }

    #[test]
    fn full_precision_roundtrip() {
        let t = QTensor::from_outputs(vec![-5, 0, i32::MAX as i64, i32::MIN as i64]).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(bytes.len(), 12 + 16);
        assert_eq!(decode(&bytes).unwrap(), t);
        assert!(QTensor::from_outputs(vec![1 << 40]).is_err());
    }

    #[test]
    fn tensor_views() {
        let t = QTensor::new(vec![2, 1, 3], 4, true, vec![-8, 7, 0, 1, -1, 2]).unwrap();
        let t3 = t.to_tensor3().unwrap();
        assert_eq!(t3.at(1, 0, 2), 2);
        assert!(t.to_seq().is_err());
        assert_eq!(QTensor::from_tensor3(&t3).unwrap(), t);
    }
}
