//! Evaluation, best-round selection, privacy-gap and traffic accounting.

mod accounting;
mod metrics;
mod report;

pub use accounting::{communication_accounting, Traffic};
pub use metrics::{read_metrics_csv, write_metrics_csv, RoundMetrics, CSV_COLUMNS};
pub use report::{
    median, privacy_gap_report, select_best, MetricSummary, PrivacyGapReport, SeedHistory,
    SeedSummary, Which,
};

use crate::data::Dataset;
use crate::error::Result;
use crate::lora::{accuracy, loss_and_output_grad, LossKind, LoraModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Only for classification.
    pub accuracy: Option<f64>,
}

/// Mean loss over the whole dataset, plus argmax accuracy when the targets
/// are class labels.
pub fn evaluate(model: &LoraModel, ds: &Dataset, kind: LossKind) -> Result<Evaluation> {
    let outputs = model.predict(ds.features())?;
    let (loss, _) = loss_and_output_grad(kind, &outputs, ds.targets())?;
    let accuracy = ds.targets().classes().map(|labels| accuracy(&outputs, labels));
    Ok(Evaluation { loss, accuracy })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::data::Split;
    use crate::lora::{Activation, AdapterSet, Backbone, Layer, Targets};
    use crate::rng::RandomSource;
    use crate::Matrix;
    use rand::Rng;

    #[test]
    fn perfect_regression_has_zero_loss() {
        let mut rng = RandomSource::new(0, "eval");
        let backbone = Arc::new(Backbone::random(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap());
        let model = LoraModel::new(backbone, AdapterSet::new(vec![None, None])).unwrap();
        let x = Matrix::gaussian_fill(3, 10, 0.0, 1.0, &mut rng).unwrap();
        let y = model.predict(&x).unwrap();
        let ds = Dataset::new(x, Targets::Values(y), vec![0; 10], Split::Test).unwrap();
        let e = evaluate(&model, &ds, LossKind::Mse).unwrap();
        assert_eq!(e.loss, 0.0);
        assert_eq!(e.accuracy, None);
        assert_eq!(evaluate(&model, &ds, LossKind::Mse).unwrap(), e);
    }

    #[test]
    fn random_classifier_scores_near_chance() {
        // Random logits against balanced labels: accuracy ~ Binomial(n, 1/K)/n.
        let (k, n) = (4usize, 4000usize);
        let mut rng = RandomSource::new(1, "chance");
        let layer = Layer::new(
            Matrix::gaussian_fill(k, 2, 0.0, 1.0, &mut rng).unwrap(),
            Matrix::zeros(k, 1),
            Activation::Identity,
        )
        .unwrap();
        let model = LoraModel::new(
            Arc::new(Backbone::new(vec![layer]).unwrap()),
            AdapterSet::new(vec![None]),
        )
        .unwrap();
        let x = Matrix::gaussian_fill(2, n, 0.0, 1.0, &mut rng).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let ds = Dataset::new(x, Targets::Classes(labels.clone()), labels, Split::Test).unwrap();
        let acc = evaluate(&model, &ds, LossKind::SoftmaxCrossEntropy)
            .unwrap()
            .accuracy
            .unwrap();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() <= 3.0 * sigma, "{acc}");
    }
}
