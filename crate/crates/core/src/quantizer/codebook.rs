//! Standard-number codebooks.

use std::sync::OnceLock;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Published tables for the three smallest widths.
const TABLE_W1: [f32; 3] = [-1.00, 0.00, 1.00];
const TABLE_W2: [f32; 4] = [-1.00, 0.00, 0.33, 1.00];
const TABLE_W3: [f32; 8] = [-1.00, -0.47, -0.21, 0.00, 0.16, 0.33, 0.56, 1.00];

pub const MAX_BITS: u8 = 8;

/// A sorted codebook `V ⊂ [-1, 1]` anchored at −1, 0 and 1.
#[derive(Debug, Clone)]
pub struct StandardNumberSet {
    values: Vec<f32>,
    nominal_bits: Option<u8>,
    zero_index: usize,
}

impl PartialEq for StandardNumberSet {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
    }
}

impl StandardNumberSet {
    /// Validates an arbitrary codebook. Sets of any length ≥ 3 are accepted,
    /// not only powers of two. The nominal width is recovered when the values
    /// coincide with a canonical set.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() < 3 || values.len() > usize::from(u16::MAX) {
            return Err(Error::InvalidArgument(format!(
                "codebook needs between 3 and 65535 values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "codebook values must be strictly increasing".into(),
            ));
        }
        if values[0] != -1.0 || values[values.len() - 1] != 1.0 {
            return Err(Error::InvalidArgument(
                "codebook must start at -1 and end at 1".into(),
            ));
        }
        let zero_index = values
            .iter()
            .position(|&v| v == 0.0)
            .ok_or_else(|| Error::InvalidArgument("codebook must contain 0".into()))?;
        let nominal_bits =
            (1..=MAX_BITS).find(|&w| canonical(w).values.as_slice() == values.as_slice());
        Ok(Self {
            values,
            nominal_bits,
            zero_index,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nominal_bits(&self) -> Option<u8> {
        self.nominal_bits
    }

    pub fn zero_index(&self) -> usize {
        self.zero_index
    }

    /// Bits needed to store one code: `ceil(log2 |V|)`.
    pub fn code_bits(&self) -> u32 {
        code_bits_for(self.values.len())
    }

    /// Largest distance between neighbouring values.
    pub fn max_gap(&self) -> f32 {
        self.values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f32::max)
    }

    /// Index of the value closest to `x`. Ties go to the value of smaller
    /// magnitude. `x` is expected in `[-1, 1]`; values outside clamp to the
    /// end points.
    pub fn nearest_code(&self, x: f32) -> usize {
        let v = &self.values;
        let hi = v.partition_point(|&c| c < x);
        if hi == 0 {
            return 0;
        }
        if hi == v.len() {
            return v.len() - 1;
        }
        let lo = hi - 1;
        let x = f64::from(x);
        let below = x - f64::from(v[lo]);
        let above = f64::from(v[hi]) - x;
        if below < above {
            lo
        } else if above < below || v[hi].abs() < v[lo].abs() {
            hi
        } else {
            lo
        }
    }
}

pub(crate) fn code_bits_for(len: usize) -> u32 {
    debug_assert!(len >= 2);
    usize::BITS - (len - 1).leading_zeros()
}

/// The canonical codebook for width `w` (1 ≤ w ≤ 8).
///
/// Widths 1–3 use the fixed published tables. Wider sets follow the
/// normal-float construction: `2^(w-1)` positive and `2^(w-1) - 1` negative
/// standard-normal quantiles at evenly spaced probabilities, normalised so the
/// extremes are ±1, plus an exact zero.
///
/// ```
/// let v = fedlpp::build_standard_set(2).unwrap();
/// assert_eq!(v.values(), &[-1.0, 0.0, 0.33, 1.0]);
/// ```
pub fn build_standard_set(w: u8) -> Result<StandardNumberSet> {
    if !(1..=MAX_BITS).contains(&w) {
        return Err(Error::InvalidArgument(format!(
            "bit width must be in 1..={MAX_BITS}, got {w}"
        )));
    }
    Ok(canonical(w).clone())
}

fn canonical(w: u8) -> &'static StandardNumberSet {
    static SETS: OnceLock<Vec<StandardNumberSet>> = OnceLock::new();
    let sets = SETS.get_or_init(|| {
        (1..=MAX_BITS)
            .map(|w| {
                let values = match w {
                    1 => TABLE_W1.to_vec(),
                    2 => TABLE_W2.to_vec(),
                    3 => TABLE_W3.to_vec(),
                    _ => normal_float_values(w),
                };
                let zero_index = values.iter().position(|&v| v == 0.0).unwrap();
                StandardNumberSet {
                    values,
                    nominal_bits: Some(w),
                    zero_index,
                }
            })
            .collect()
    });
    &sets[usize::from(w - 1)]
}

fn normal_float_values(w: u8) -> Vec<f32> {
    let total = 1usize << w;
    let half = total / 2;
    let offset = 1.0 - 0.5 * (1.0 / (2.0 * (total as f64 - 1.0)) + 1.0 / (2.0 * total as f64));
    let normal = Normal::standard();
    // `count` probabilities evenly spaced from `offset` toward 0.5, the last
    // point (0.5 itself) excluded.
    let quantiles = |count: usize| -> Vec<f64> {
        (0..count)
            .map(|i| offset + (0.5 - offset) * i as f64 / count as f64)
            .map(|p| normal.inverse_cdf(p))
            .collect()
    };
    let top = normal.inverse_cdf(offset);
    let mut values: Vec<f32> = quantiles(half)
        .into_iter()
        .chain(quantiles(half - 1).into_iter().map(|q| -q))
        .map(|q| (q / top) as f32)
        .collect();
    values.push(0.0);
    values.sort_by(f32::total_cmp);
    values
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive scan, independent of the binary search above.
    fn brute_nearest(x: f32, v: &[f32]) -> usize {
        let mut best = 0;
        for i in 1..v.len() {
            let d = (f64::from(x) - f64::from(v[i])).abs();
            let db = (f64::from(x) - f64::from(v[best])).abs();
            if d < db || (d == db && v[i].abs() < v[best].abs()) {
                best = i;
            }
        }
        best
    }

    #[test]
    fn published_tables() {
        assert_eq!(build_standard_set(1).unwrap().values(), &[-1.0, 0.0, 1.0]);
        assert_eq!(
            build_standard_set(2).unwrap().values(),
            &[-1.0, 0.0, 0.33, 1.0]
        );
        assert_eq!(
            build_standard_set(3).unwrap().values(),
            &[-1.0, -0.47, -0.21, 0.0, 0.16, 0.33, 0.56, 1.0]
        );
    }

    #[test]
    fn width_out_of_range() {
        assert!(build_standard_set(0).is_err());
        assert!(build_standard_set(9).is_err());
    }

    #[test]
    fn wide_sets_satisfy_invariants() {
        for w in 4..=MAX_BITS {
            let set = build_standard_set(w).unwrap();
            let v = set.values();
            assert_eq!(v.len(), 1 << w);
            assert_eq!(v[0], -1.0);
            assert_eq!(*v.last().unwrap(), 1.0);
            assert!(v.windows(2).all(|p| p[0] < p[1]));
            assert_eq!(v[(1 << (w - 1)) - 1], 0.0);
            assert_eq!(set.nominal_bits(), Some(w));
        }
    }

    #[test]
    fn width_four_matches_normal_float() {
        // NF4 levels as published with QLoRA.
        let nf4 = [
            -1.0, -0.6962, -0.5251, -0.3949, -0.2844, -0.1848, -0.0911, 0.0, 0.0796, 0.1609,
            0.2461, 0.3379, 0.4407, 0.5626, 0.7230, 1.0,
        ];
        let set = build_standard_set(4).unwrap();
        for (got, want) in set.values().iter().zip(nf4) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn nearest_examples() {
        let set = build_standard_set(2).unwrap();
        assert_eq!(set.nearest_code(0.0), 1);
        assert_eq!(set.nearest_code(0.5), 2);
        // 0.165 is equidistant from 0 and 0.33 in f32.
        assert_eq!(set.nearest_code(0.165), 1);
        assert_eq!(set.nearest_code(-1.0), 0);
        assert_eq!(set.nearest_code(1.0), 3);
    }

    #[test]
    fn nearest_matches_scan_on_grid() {
        for w in 1..=MAX_BITS {
            let set = build_standard_set(w).unwrap();
            for i in -2000..=2000 {
                let x = i as f32 / 2000.0;
                assert_eq!(set.nearest_code(x), brute_nearest(x, set.values()), "w={w} x={x}");
            }
            // Every midpoint is a tie.
            for p in set.values().windows(2) {
                let mid = (p[0] + p[1]) / 2.0;
                assert_eq!(set.nearest_code(mid), brute_nearest(mid, set.values()));
            }
        }
    }

    #[test]
    fn code_bits() {
        assert_eq!(build_standard_set(1).unwrap().code_bits(), 2);
        assert_eq!(build_standard_set(2).unwrap().code_bits(), 2);
        assert_eq!(build_standard_set(3).unwrap().code_bits(), 3);
        assert_eq!(build_standard_set(8).unwrap().code_bits(), 8);
        assert_eq!(code_bits_for(5), 3);
    }

    #[test]
    fn custom_sets() {
        let s = StandardNumberSet::new(vec![-1.0, -0.5, 0.0, 0.25, 0.6, 1.0]).unwrap();
        assert_eq!(s.nominal_bits(), None);
        assert_eq!(s.zero_index(), 2);
        let w2 = StandardNumberSet::new(vec![-1.0, 0.0, 0.33, 1.0]).unwrap();
        assert_eq!(w2.nominal_bits(), Some(2));
        assert!(StandardNumberSet::new(vec![-1.0, 1.0]).is_err());
        assert!(StandardNumberSet::new(vec![-1.0, 0.5, 1.0]).is_err());
        assert!(StandardNumberSet::new(vec![-1.0, 0.0, 0.0, 1.0]).is_err());
        assert!(StandardNumberSet::new(vec![-0.9, 0.0, 1.0]).is_err());
    }
}
