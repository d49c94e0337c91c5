//! Integer arithmetic coding over quantized PMFs.

mod arith;
mod pmf;

pub use arith::{ac_decode, ac_encode, Bitstream, Decoder, Encoder};
pub use pmf::{quantize_pmf, QuantizedPmf, PMF_TOTAL};
