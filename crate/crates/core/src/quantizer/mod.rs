//! Proxy adapters by block-wise absmax quantization.
//!
//! A matrix is flattened row-major and cut into blocks of `s` elements. Each
//! block is divided by its largest absolute value `z`, every normalised entry
//! is snapped to the nearest value of a fixed codebook `V ⊂ [-1, 1]`, and the
//! codebook indices travel together with the per-block `z`. Because `0 ∈ V`,
//! no entry ever changes sign.

mod block;
mod codebook;
pub mod format;

pub use block::{
    block_count, dequantize, quantization_error, quantize, ErrorStats, QuantizedTensor,
    DEFAULT_BLOCK_SIZE,
};
pub use codebook::{build_standard_set, StandardNumberSet, MAX_BITS};
