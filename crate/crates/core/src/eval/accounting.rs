use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::protocol::Payload;
use crate::quantizer::format::dense_len;

/// Bytes actually sent versus the same matrices sent as full-precision
/// `FLPF` payloads.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Traffic {
    pub bytes: u64,
    pub full_precision_bytes: u64,
}

impl Traffic {
    pub fn reduction(&self) -> f64 {
        if self.bytes == 0 {
            1.0
        } else {
            self.full_precision_bytes as f64 / self.bytes as f64
        }
    }

    pub fn add(&mut self, other: Traffic) {
        self.bytes += other.bytes;
        self.full_precision_bytes += other.full_precision_bytes;
    }
}

/// Parses each payload (either format) and totals its size against the
/// full-precision baseline. A full-precision payload therefore has a
/// reduction factor of exactly 1.
pub fn communication_accounting<B: AsRef<[u8]>>(payloads: &[B]) -> Result<Traffic> {
    let mut t = Traffic::default();
    for bytes in payloads {
        let bytes = bytes.as_ref();
        let (rows, cols) = Payload::decode(bytes)?.shape();
        t.bytes += bytes.len() as u64;
        t.full_precision_bytes += dense_len(rows, cols) as u64;
    }
    Ok(t)
}
