//! Block-wise absmax quantization.

use crate::error::{Error, FormatError, Result};
use crate::quantizer::StandardNumberSet;
use crate::tensor::{ensure_finite, Matrix};

/// Block size used unless configured otherwise.
pub const DEFAULT_BLOCK_SIZE: usize = 256;

/// Codebook indices plus one absmax scale per block. This is the only form
/// in which adapters leave the server.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    block_size: usize,
    codebook: StandardNumberSet,
    codes: Vec<u16>,
    scales: Vec<f32>,
}

pub fn block_count(elements: usize, block_size: usize) -> usize {
    elements.div_ceil(block_size)
}

impl QuantizedTensor {
    /// Assembles a tensor from raw parts, checking every invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        block_size: usize,
        codebook: StandardNumberSet,
        codes: Vec<u16>,
        scales: Vec<f32>,
    ) -> Result<Self, FormatError> {
        if rows == 0 || cols == 0 || block_size == 0 {
            return Err(FormatError::Corrupt(format!(
                "dimensions {rows}x{cols} with block size {block_size}"
            )));
        }
        let n = rows * cols;
        if codes.len() != n {
            return Err(FormatError::Corrupt(format!(
                "{} codes for {n} elements",
                codes.len()
            )));
        }
        if scales.len() != block_count(n, block_size) {
            return Err(FormatError::Corrupt(format!(
                "{} scales for {} blocks",
                scales.len(),
                block_count(n, block_size)
            )));
        }
        if let Some((index, &code)) = codes
            .iter()
            .enumerate()
            .find(|(_, &c)| usize::from(c) >= codebook.len())
        {
            return Err(FormatError::CodeOverflow {
                index,
                code: u32::from(code),
                len: codebook.len(),
            });
        }
        if let Some(bad) = scales.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(FormatError::Corrupt(format!("scale {bad}")));
        }
        for (block, &scale) in codes.chunks(block_size).zip(&scales) {
            if scale == 0.0 && block.iter().any(|&c| usize::from(c) != codebook.zero_index()) {
                return Err(FormatError::Corrupt(
                    "zero-scale block with non-zero codes".into(),
                ));
            }
        }
        Ok(Self {
            rows,
            cols,
            block_size,
            codebook,
            codes,
            scales,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn codebook(&self) -> &StandardNumberSet {
        &self.codebook
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Reconstructs `scale × V[code]` for every element.
    pub fn dequantize(&self) -> Matrix {
        let v = self.codebook.values();
        let values = self
            .codes
            .chunks(self.block_size)
            .zip(&self.scales)
            .flat_map(|(block, &z)| block.iter().map(move |&c| z * v[usize::from(c)]))
            .collect();
        Matrix::from_parts(self.rows, self.cols, values)
    }
}

/// Quantizes `x` in row-major blocks of `block_size` elements. The last block
/// is shorter when the block size does not divide the element count.
///
/// ```
/// use fedlpp::{build_standard_set, quantize, Matrix};
/// let x = Matrix::from_rows(&[&[0.5, -0.25, 1.0, 0.1]]).unwrap();
/// let q = quantize(&x, &build_standard_set(2).unwrap(), 4).unwrap();
/// assert_eq!(q.codes(), &[2, 1, 3, 1]);
/// assert_eq!(q.scales(), &[1.0]);
/// ```
pub fn quantize(x: &Matrix, set: &StandardNumberSet, block_size: usize) -> Result<QuantizedTensor> {
    if block_size == 0 {
        return Err(Error::InvalidArgument("block size must be positive".into()));
    }
    ensure_finite(x.as_slice(), "quantizer input")?;
    let zero = set.zero_index() as u16;
    let mut codes = Vec::with_capacity(x.len());
    let mut scales = Vec::with_capacity(block_count(x.len(), block_size));
    for block in x.as_slice().chunks(block_size) {
        let z = block.iter().fold(0.0f32, |m, e| m.max(e.abs()));
        scales.push(z);
        if z == 0.0 {
            codes.extend(std::iter::repeat_n(zero, block.len()));
        } else {
            codes.extend(block.iter().map(|&e| set.nearest_code(e / z) as u16));
        }
    }
    Ok(QuantizedTensor {
        rows: x.rows(),
        cols: x.cols(),
        block_size,
        codebook: set.clone(),
        codes,
        scales,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    q.dequantize()
}

/// Summary of the loss incurred by one quantize/dequantize pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub max_abs: f32,
    pub mean_abs: f64,
    /// Fraction of elements where `dequantized × original ≥ 0`.
    pub sign_agreement_rate: f64,
}

pub fn quantization_error(
    x: &Matrix,
    set: &StandardNumberSet,
    block_size: usize,
) -> Result<ErrorStats> {
    let approx = quantize(x, set, block_size)?.dequantize();
    let mut max_abs = 0.0f32;
    let mut sum = 0.0f64;
    let mut agree = 0usize;
    for (&a, &b) in x.as_slice().iter().zip(approx.as_slice()) {
        let err = (a - b).abs();
        max_abs = max_abs.max(err);
        sum += f64::from(err);
        if a * b >= 0.0 {
            agree += 1;
        }
    }
    let n = x.len() as f64;
    Ok(ErrorStats {
        max_abs,
        mean_abs: sum / n,
        sign_agreement_rate: agree as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::build_standard_set;
    use crate::rng::RandomSource;

    fn w2() -> StandardNumberSet {
        build_standard_set(2).unwrap()
    }

    #[test]
    fn worked_blocks() {
        let x = Matrix::from_rows(&[&[0.5, -0.25, 1.0, 0.1]]).unwrap();
        let q = quantize(&x, &w2(), 4).unwrap();
        assert_eq!(q.codes(), &[2, 1, 3, 1]);
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.dequantize().as_slice(), &[0.33, 0.0, 1.0, 0.0]);

        let y = Matrix::from_rows(&[&[-2.0, 1.0]]).unwrap();
        let q = quantize(&y, &w2(), 2).unwrap();
        assert_eq!(q.codes(), &[0, 2]);
        assert_eq!(q.scales(), &[2.0]);
        assert_eq!(q.dequantize().as_slice(), &[-2.0, 0.66]);
    }

    #[test]
    fn all_zero_matrix() {
        for s in [1, 2, 4, 9, 256] {
            let q = quantize(&Matrix::zeros(3, 3), &w2(), s).unwrap();
            assert!(q.codes().iter().all(|&c| c == 1));
            assert!(q.scales().iter().all(|&z| z == 0.0));
            assert_eq!(q.dequantize(), Matrix::zeros(3, 3));
        }
    }

    #[test]
    fn ragged_final_block() {
        let x = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, -10.0]]).unwrap();
        let q = quantize(&x, &w2(), 4).unwrap();
        assert_eq!(q.scales(), &[4.0, 10.0]);
        assert_eq!(&q.codes()[4..], &[2, 0]);
    }

    #[test]
    fn fixed_point_recovers_exactly() {
        let v = w2();
        let x = Matrix::from_rows(&[&[-3.0, 0.0, 3.0, 0.99], &[0.5, 0.165, -0.5, 0.0]]).unwrap();
        let q = quantize(&x, &v, 4).unwrap();
        let once = q.dequantize();
        let twice = quantize(&once, &v, 4).unwrap();
        assert_eq!(twice, q);
        assert_eq!(twice.dequantize(), once);
    }

    #[test]
    fn rejects_bad_input() {
        let x = Matrix::zeros(2, 2);
        assert!(quantize(&x, &w2(), 0).is_err());
    }

    #[test]
    fn error_stats() {
        let x = Matrix::from_rows(&[&[1.0, -1.0, 0.0, 0.33]]).unwrap();
        let stats = quantization_error(&x, &w2(), 4).unwrap();
        assert_eq!(stats.max_abs, 0.0);
        assert_eq!(stats.sign_agreement_rate, 1.0);

        let mut rng = RandomSource::new(5, "err");
        let g = Matrix::gaussian_fill(16, 64, 0.0, 1.0, &mut rng).unwrap();
        let stats = quantization_error(&g, &w2(), 256).unwrap();
        assert_eq!(stats.sign_agreement_rate, 1.0);
        assert!(stats.mean_abs > 0.0);
    }

    #[test]
    fn from_parts_validation() {
        let set = w2();
        assert!(QuantizedTensor::from_parts(1, 2, 2, set.clone(), vec![0, 2], vec![1.0]).is_ok());
        assert!(matches!(
            QuantizedTensor::from_parts(1, 2, 2, set.clone(), vec![0, 4], vec![1.0]),
            Err(FormatError::CodeOverflow { index: 1, .. })
        ));
        assert!(QuantizedTensor::from_parts(1, 2, 2, set.clone(), vec![0, 2], vec![]).is_err());
        assert!(QuantizedTensor::from_parts(1, 2, 2, set.clone(), vec![0, 2], vec![-1.0]).is_err());
        assert!(QuantizedTensor::from_parts(1, 2, 2, set, vec![0, 2], vec![0.0]).is_err());
    }
}
