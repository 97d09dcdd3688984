//! Binary encodings for tensors on the wire and on disk.
//!
//! Both formats are little-endian.
//!
//! `FLPQ` (quantized):
//!
//! | field         | type                 |
//! |---------------|----------------------|
//! | magic         | `b"FLPQ"`            |
//! | version       | u16 = 1              |
//! | rows, cols    | u32, u32             |
//! | block_size    | u32                  |
//! | value_count   | u16                  |
//! | codebook      | value_count × f32    |
//! | scale_count   | u32                  |
//! | scales        | scale_count × f32    |
//! | codes         | bit-packed           |
//!
//! Codes take `ceil(log2 value_count)` bits each, packed LSB-first (code `i`
//! starts at bit `i × bits` of the stream; stream bit `j` is bit `j % 8` of
//! byte `j / 8`), and the final byte is zero-padded.
//!
//! `FLPF` (full precision) keeps the same leading fields and drops everything
//! quantization-specific: magic `b"FLPF"`, version u16 = 1, rows u32, cols u32,
//! then `rows × cols` f32 values in row-major order.

use crate::error::{FormatError, Result};
use crate::quantizer::block::block_count;
use crate::quantizer::codebook::code_bits_for;
use crate::quantizer::{QuantizedTensor, StandardNumberSet};
use crate::tensor::Matrix;

pub const QUANTIZED_MAGIC: [u8; 4] = *b"FLPQ";
pub const DENSE_MAGIC: [u8; 4] = *b"FLPF";
pub const VERSION: u16 = 1;

/// Magic, version, rows and cols: the prefix shared by both formats.
pub const SHAPE_HEADER_LEN: usize = 4 + 2 + 4 + 4;

/// Exact `FLPQ` length for the given shape and quantizer settings.
pub fn quantized_len(rows: usize, cols: usize, block_size: usize, value_count: usize) -> usize {
    let n = rows * cols;
    let code_bytes = (n * code_bits_for(value_count) as usize).div_ceil(8);
    SHAPE_HEADER_LEN + 4 + 2 + 4 * value_count + 4 + 4 * block_count(n, block_size) + code_bytes
}

/// Exact `FLPF` length for a `rows × cols` matrix.
pub fn dense_len(rows: usize, cols: usize) -> usize {
    SHAPE_HEADER_LEN + 4 * rows * cols
}

fn dim_u32(d: usize, what: &str) -> u32 {
    u32::try_from(d).unwrap_or_else(|_| panic!("{what} {d} exceeds u32"))
}

pub fn serialize(q: &QuantizedTensor) -> Vec<u8> {
    let set = q.codebook();
    let mut out = Vec::with_capacity(quantized_len(q.rows(), q.cols(), q.block_size(), set.len()));
    out.extend_from_slice(&QUANTIZED_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(q.rows(), "rows").to_le_bytes());
    out.extend_from_slice(&dim_u32(q.cols(), "cols").to_le_bytes());
    out.extend_from_slice(&dim_u32(q.block_size(), "block size").to_le_bytes());
    out.extend_from_slice(&(set.len() as u16).to_le_bytes());
    for v in set.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&dim_u32(q.scales().len(), "scale count").to_le_bytes());
    for z in q.scales() {
        out.extend_from_slice(&z.to_le_bytes());
    }
    pack_codes(q.codes(), set.code_bits(), &mut out);
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<QuantizedTensor> {
    let mut r = Reader::new(bytes);
    r.magic(QUANTIZED_MAGIC)?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let block_size = r.u32("block size")? as usize;
    if rows == 0 || cols == 0 || block_size == 0 {
        return Err(FormatError::Corrupt(format!(
            "dimensions {rows}x{cols} with block size {block_size}"
        ))
        .into());
    }
    let value_count = usize::from(r.u16("value count")?);
    let values = r.f32s(value_count, "codebook")?;
    let codebook = StandardNumberSet::new(values)
        .map_err(|e| FormatError::Corrupt(format!("codebook: {e}")))?;
    let scale_count = r.u32("scale count")? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| FormatError::Corrupt("element count overflows".into()))?;
    if scale_count != block_count(n, block_size) {
        return Err(FormatError::Corrupt(format!(
            "scale count {scale_count} does not match {} blocks",
            block_count(n, block_size)
        ))
        .into());
    }
    let scales = r.f32s(scale_count, "scales")?;
    let bits = codebook.code_bits();
    let packed = r.take((n * bits as usize).div_ceil(8), "codes")?;
    r.finish()?;
    let codes = unpack_codes(packed, n, bits)?;
    Ok(QuantizedTensor::from_parts(
        rows, cols, block_size, codebook, codes, scales,
    )?)
}

pub fn serialize_dense(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(dense_len(m.rows(), m.cols()));
    out.extend_from_slice(&DENSE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(m.rows(), "rows").to_le_bytes());
    out.extend_from_slice(&dim_u32(m.cols(), "cols").to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn deserialize_dense(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(bytes);
    r.magic(DENSE_MAGIC)?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(FormatError::Corrupt(format!("dimensions {rows}x{cols}")).into());
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| FormatError::Corrupt("element count overflows".into()))?;
    let values = r.f32s(n, "values")?;
    r.finish()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FormatError::Corrupt("non-finite value".into()).into());
    }
    Matrix::new(rows, cols, values)
}

fn pack_codes(codes: &[u16], bits: u32, out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + (codes.len() * bits as usize).div_ceil(8), 0);
    let buf = &mut out[start..];
    let mut pos = 0usize;
    for &code in codes {
        for b in 0..bits {
            if (code >> b) & 1 == 1 {
                buf[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
}

fn unpack_codes(buf: &[u8], n: usize, bits: u32) -> Result<Vec<u16>, FormatError> {
    let mut codes = Vec::with_capacity(n);
    let mut pos = 0usize;
    for _ in 0..n {
        let mut code = 0u16;
        for b in 0..bits {
            if (buf[pos / 8] >> (pos % 8)) & 1 == 1 {
                code |= 1 << b;
            }
            pos += 1;
        }
        codes.push(code);
    }
    let used = pos % 8;
    if used != 0 && buf[buf.len() - 1] >> used != 0 {
        return Err(FormatError::Corrupt("non-zero padding bits".into()));
    }
    Ok(codes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, len: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&end| end <= self.bytes.len())
            .ok_or(FormatError::Truncated(what))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let got: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if got != expected {
            return Err(FormatError::BadMagic(got));
        }
        let version = self.u16("version")?;
        if version != VERSION {
            return Err(FormatError::Version(version));
        }
        Ok(())
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize, what: &'static str) -> Result<Vec<f32>, FormatError> {
        let len = count
            .checked_mul(4)
            .ok_or(FormatError::Truncated(what))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<(), FormatError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            extra => Err(FormatError::TrailingBytes(extra)),
        }
    }
}
