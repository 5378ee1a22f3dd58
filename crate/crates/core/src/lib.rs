//! Several low-bitwidth convolution outputs from one wide integer
//! multiplication.
//!
//! Operands are packed into guarded bit slices so that a single product
//! holds a whole block of a 1-D convolution. [`config`] finds the packing,
//! [`bitpack`] builds and splits the words, [`kernel`] runs full
//! convolutions on top, and [`oracle`] is the naive reference everything is
//! checked against.

pub mod bench;
pub mod bitpack;
pub mod cli;
pub mod config;
pub mod error;
pub mod kernel;
pub mod oracle;
pub mod qtensor;

pub use bitpack::QuantSeq;
pub use config::{search_optimal, ConvMode, HiKonvConfig, Multiplier};
pub use error::{Error, Result};
pub use kernel::{conv1d, conv2d_layer, conv_block, Tensor3, Tensor4};
pub use qtensor::QTensor;
