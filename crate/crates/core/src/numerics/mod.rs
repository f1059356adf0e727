//! Dense arrays, labelled random streams, the PMT1 tensor format and a
//! central-difference gradient checker, plus the named-tensor container.

mod container;
mod gradcheck;
mod io;
mod rng;
mod scalar;
mod tensor;

pub use container::{Container, CONTAINER_VERSION};
pub use gradcheck::{finite_diff_grad, finite_diff_grad_coords, max_relative_error};
pub use io::{decode_pmt1, encode_pmt1, read_tensor, read_tensor_any, write_tensor, AnyTensor, PMT1_MAGIC};
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tensor::{dot, norm, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated: {0}")]
    Truncated(String),
    #[error("extent overflow")]
    ExtentOverflow,
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("dtype mismatch: expected code {expected}, found {found}")]
    Dtype { expected: u8, found: u8 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty integer range {lo}..{hi}")]
    EmptyRange { lo: i64, hi: i64 },
    #[error("record {name}: {reason}")]
    Record { name: String, reason: String },
    #[error("unsupported container version {0}")]
    Version(u8),
    #[error("JSON trailer: {0}")]
    Json(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
