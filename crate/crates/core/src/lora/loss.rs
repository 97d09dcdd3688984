use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Mean of squared errors over every output entry.
    Mse,
    /// Mean over samples of `-log softmax(y)[label]`.
    SoftmaxCrossEntropy,
}

/// Supervision for a batch whose samples are columns.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Matrix),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(m) => m.cols(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, cols: &[usize]) -> Self {
        match self {
            Targets::Values(m) => Targets::Values(m.select_columns(cols)),
            Targets::Classes(c) => Targets::Classes(cols.iter().map(|&i| c[i]).collect()),
        }
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes(c) => Some(c),
            Targets::Values(_) => None,
        }
    }
}

/// Mean batch loss and its gradient with respect to `outputs`.
pub fn loss_and_output_grad(
    kind: LossKind,
    outputs: &Matrix,
    targets: &Targets,
) -> Result<(f64, Matrix)> {
    let (rows, batch) = outputs.shape();
    if targets.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "{} targets for a batch of {batch}",
            targets.len()
        )));
    }
    let (loss, grad) = match (kind, targets) {
        (LossKind::Mse, Targets::Values(t)) => {
            if t.shape() != outputs.shape() {
                return Err(Error::Shape {
                    op: "mse targets",
                    left: outputs.shape(),
                    right: t.shape(),
                });
            }
            let n = (rows * batch) as f64;
            let mut sum = 0.0f64;
            let grad = outputs
                .as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(&y, &t)| {
                    let d = f64::from(y) - f64::from(t);
                    sum += d * d;
                    (2.0 * d / n) as f32
                })
                .collect();
            (sum / n, Matrix::from_parts(rows, batch, grad))
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            if let Some(&bad) = labels.iter().find(|&&c| c >= rows) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} with {rows} outputs"
                )));
            }
            let mut grad = vec![0.0f32; rows * batch];
            let mut total = 0.0f64;
            let mut column = vec![0.0f64; rows];
            for (j, &label) in labels.iter().enumerate() {
                for (r, c) in column.iter_mut().enumerate() {
                    *c = f64::from(outputs.get(r, j));
                }
                let max = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = column.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                total += log_z - column[label];
                for r in 0..rows {
                    let p = (column[r] - log_z).exp();
                    let onehot = if r == label { 1.0 } else { 0.0 };
                    grad[r * batch + j] = ((p - onehot) / batch as f64) as f32;
                }
            }
            (total / batch as f64, Matrix::from_parts(rows, batch, grad))
        }
        (kind, _) => {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} loss does not accept these targets"
            )))
        }
    };
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, grad))
}

/// Fraction of columns whose largest output is the labelled class.
pub fn accuracy(outputs: &Matrix, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(j, &label)| argmax_column(outputs, j) == label)
        .count();
    hits as f64 / labels.len() as f64
}

/// Index of the largest entry of column `j`; the earliest wins ties.
pub fn argmax_column(outputs: &Matrix, j: usize) -> usize {
    let mut best = 0;
    for r in 1..outputs.rows() {
        if outputs.get(r, j) > outputs.get(best, j) {
            best = r;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_zero_at_target() {
        let y = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let (loss, grad) =
            loss_and_output_grad(LossKind::Mse, &y, &Targets::Values(y.clone())).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_value() {
        let y = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let t = Matrix::from_rows(&[&[0.0, 2.0]]).unwrap();
        let (loss, grad) = loss_and_output_grad(LossKind::Mse, &y, &Targets::Values(t)).unwrap();
        assert_eq!(loss, 2.5);
        assert_eq!(grad.as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn cross_entropy_uniform() {
        let y = Matrix::zeros(4, 2);
        let (loss, grad) = loss_and_output_grad(
            LossKind::SoftmaxCrossEntropy,
            &y,
            &Targets::Classes(vec![0, 3]),
        )
        .unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((grad.get(0, 0) - (0.25 - 1.0) / 2.0).abs() < 1e-7);
        assert!((grad.get(1, 0) - 0.125).abs() < 1e-7);
    }

    #[test]
    fn mismatched_targets() {
        let y = Matrix::zeros(2, 2);
        assert!(loss_and_output_grad(LossKind::Mse, &y, &Targets::Classes(vec![0, 1])).is_err());
        assert!(loss_and_output_grad(
            LossKind::SoftmaxCrossEntropy,
            &y,
            &Targets::Classes(vec![0, 2])
        )
        .is_err());
        assert!(loss_and_output_grad(LossKind::Mse, &y, &Targets::Values(Matrix::zeros(2, 3))).is_err());
    }

    #[test]
    fn accuracy_counts_argmax() {
        let y = Matrix::from_rows(&[&[1.0, 0.0, 0.5], &[0.0, 2.0, 0.5]]).unwrap();
        assert_eq!(accuracy(&y, &[0, 1, 0]), 1.0);
        assert_eq!(accuracy(&y, &[1, 1, 1]), 1.0 / 3.0);
    }
}
