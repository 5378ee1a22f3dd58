use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no feasible packing: {0}")]
    InfeasibleGeometry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid bitwidth {bits} ({reason})")]
    InvalidBitwidth { bits: u32, reason: &'static str },

    #[error("{len} elements exceed the lane budget of {budget}")]
    LaneOverflow { len: usize, budget: usize },

    #[error("value {value} out of range for {bits}-bit {} data", if *.signed { "signed" } else { "unsigned" })]
    RangeError { value: i64, bits: u32, signed: bool },

    #[error("requested {requested} segments but the product holds only {available}")]
    SegmentCount { requested: usize, available: usize },

    #[error("packed accumulation needs {needed} bits, more than the {available}-bit accumulator")]
    AccumulatorOverflow { needed: u32, available: u32 },

    #[error("convolution mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("truncated stream: needed {needed} bytes, got {available}")]
    TruncatedStream { needed: usize, available: usize },

    #[error("bad magic {0:02x?}, expected \"QTSR\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    BadVersion(u8),

    #[error("malformed header: {0}")]
    BadHeader(String),

    #[error("equivalence failure: {0}")]
    EquivalenceFailure(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
