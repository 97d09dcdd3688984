//! Federated LoRA fine-tuning in which the server never reveals its adapters.
//!
//! The server keeps full-precision LoRA adapters over a frozen backbone and
//! broadcasts only block-wise quantized "proxy" copies. Clients fine-tune the
//! proxies on private data and upload the change; the server applies the
//! weighted changes to its own full-precision adapters. The gap between the
//! server's model and the best model any client can assemble is the
//! protection the scheme buys.
//!
//! The guide in `book/` walks through each piece; its code listings are
//! compiled as doc-tests of this crate.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod lora;
pub mod protocol;
pub mod quantizer;
pub mod rng;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use quantizer::{build_standard_set, dequantize, quantize, QuantizedTensor, StandardNumberSet};
pub use rng::RandomSource;
pub use tensor::Matrix;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/lora.md")]
    mod lora {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
