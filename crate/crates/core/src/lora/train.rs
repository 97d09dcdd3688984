use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::loss::{loss_and_output_grad, LossKind, Targets};
use crate::lora::model::{backpropagate, AdapterSet, Backbone, LoraModel};
use crate::rng::RandomSource;
use crate::tensor::Matrix;

/// Mean-loss gradients with respect to every `B` and `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    pub grads: AdapterSet,
    pub loss: f64,
}

pub fn loss_and_backward(
    model: &LoraModel,
    inputs: &Matrix,
    targets: &Targets,
    kind: LossKind,
) -> Result<AdapterGradients> {
    let (outputs, cache) = model.forward(inputs)?;
    let (loss, d_out) = loss_and_output_grad(kind, &outputs, targets)?;
    let (grads, _) = backpropagate(model, &cache, &outputs, d_out, false);
    if !grads.is_finite() {
        return Err(Error::NonFinite("adapter gradients".into()));
    }
    Ok(AdapterGradients { grads, loss })
}

/// `B ← B − lr·dB`, `A ← A − lr·dA`.
pub fn sgd_step(adapters: &AdapterSet, grads: &AdapterGradients, lr: f32) -> Result<AdapterSet> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    if !adapters.same_layout(&grads.grads) {
        return Err(Error::InvalidArgument(
            "gradient layout does not match adapters".into(),
        ));
    }
    let mut next = adapters.clone();
    next.axpy(-lr, &grads.grads);
    if !next.is_finite() {
        return Err(Error::NonFinite("adapters after step".into()));
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

/// Column order for one epoch. A batch that covers the whole set keeps the
/// natural order, so a full-batch epoch is a single plain gradient step.
fn epoch_order(n: usize, batch_size: usize, rng: &mut RandomSource) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if batch_size < n {
        order.shuffle(rng);
    }
    order
}

/// Mini-batch SGD on the adapters only. Each epoch reshuffles with a stream
/// derived from `rng` and the epoch number.
pub fn train_adapters(
    model: &LoraModel,
    inputs: &Matrix,
    targets: &Targets,
    kind: LossKind,
    schedule: Schedule,
    rng: &RandomSource,
) -> Result<AdapterSet> {
    if schedule.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let n = inputs.cols();
    let mut current = model.clone();
    for epoch in 0..schedule.epochs {
        let order = epoch_order(n, schedule.batch_size, &mut rng.derive(format!("epoch-{epoch}")));
        for batch in order.chunks(schedule.batch_size) {
            let x = inputs.select_columns(batch);
            let t = targets.select(batch);
            let grads = loss_and_backward(&current, &x, &t, kind)?;
            let next = sgd_step(current.adapters(), &grads, schedule.lr)?;
            current = current.with_adapters(next)?;
        }
    }
    Ok(current.into_adapters())
}

/// Full-parameter SGD on a backbone with no adapters, used to produce the
/// frozen weights before any federated training happens.
pub fn pretrain_backbone(
    backbone: &Backbone,
    inputs: &Matrix,
    targets: &Targets,
    kind: LossKind,
    schedule: Schedule,
    rng: &RandomSource,
) -> Result<Backbone> {
    let n = inputs.cols();
    let slots = vec![None; backbone.layers().len()];
    let mut current = backbone.clone();
    for epoch in 0..schedule.epochs {
        let order = epoch_order(n, schedule.batch_size, &mut rng.derive(format!("epoch-{epoch}")));
        for batch in order.chunks(schedule.batch_size) {
            let model = LoraModel::new(current.clone().into(), AdapterSet::new(slots.clone()))?;
            let x = inputs.select_columns(batch);
            let (outputs, cache) = model.forward(&x)?;
            let (_, d_out) = loss_and_output_grad(kind, &outputs, &targets.select(batch))?;
            let (_, grads) = backpropagate(&model, &cache, &outputs, d_out, true);
            current = current.stepped(&grads.expect("requested"), schedule.lr);
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::lora::model::{Activation, Layer, LoraAdapter};

    fn small_model(seed: u64) -> (LoraModel, Matrix, Matrix) {
        let mut rng = RandomSource::new(seed, "train-test");
        let backbone =
            Arc::new(Backbone::random(&[4, 3, 2], Activation::Tanh, &mut rng).unwrap());
        let adapters = AdapterSet::init(&backbone, &[0, 1], 1, &mut rng)
            .unwrap()
            .map(|m| Matrix::gaussian_fill(m.rows(), m.cols(), 0.0, 0.5, &mut rng).unwrap());
        let model = LoraModel::new(backbone, adapters).unwrap();
        let x = Matrix::gaussian_fill(4, 6, 0.0, 1.0, &mut rng).unwrap();
        let t = Matrix::gaussian_fill(2, 6, 0.0, 1.0, &mut rng).unwrap();
        (model, x, t)
    }

    #[test]
    fn zero_error_batch_has_zero_gradient() {
        let (model, x, _) = small_model(1);
        let y = model.predict(&x).unwrap();
        let g = loss_and_backward(&model, &x, &Targets::Values(y), LossKind::Mse).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grads.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let (model, x, t) = small_model(2);
        let g1 = loss_and_backward(&model, &x, &Targets::Values(t.clone()), LossKind::Mse).unwrap();
        let idx: Vec<usize> = (0..6).chain(0..6).collect();
        let g2 = loss_and_backward(
            &model,
            &x.select_columns(&idx),
            &Targets::Values(t.select_columns(&idx)),
            LossKind::Mse,
        )
        .unwrap();
        assert!((g1.loss - g2.loss).abs() < 1e-6);
        for (a, b) in g1.grads.flatten().iter().zip(g2.grads.flatten()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn sgd_step_cases() {
        let (model, x, t) = small_model(3);
        let adapters = model.adapters().clone();
        let zero = AdapterGradients {
            grads: adapters.map(|m| Matrix::zeros(m.rows(), m.cols())),
            loss: 0.0,
        };
        assert_eq!(sgd_step(&adapters, &zero, 0.1).unwrap(), adapters);
        let same = AdapterGradients {
            grads: adapters.clone(),
            loss: 0.0,
        };
        let gone = sgd_step(&adapters, &same, 1.0).unwrap();
        assert!(gone.flatten().iter().all(|&v| v == 0.0));
        let g = loss_and_backward(&model, &x, &Targets::Values(t), LossKind::Mse).unwrap();
        assert!(sgd_step(&adapters, &g, -1.0).is_err());
    }

    #[test]
    fn quadratic_step_closed_form() {
        // One identity layer, scalar B and A, target 0: loss = (b·a·x)², with
        // a = x = 1 this is b², so a step gives b - lr·2b.
        let layer = Layer::new(Matrix::zeros(1, 1), Matrix::zeros(1, 1), Activation::Identity)
            .unwrap();
        let backbone = Arc::new(Backbone::new(vec![layer]).unwrap());
        let b0 = 0.75f32;
        let ad = LoraAdapter::new(Matrix::filled(1, 1, b0), Matrix::filled(1, 1, 1.0)).unwrap();
        let model = LoraModel::new(backbone, AdapterSet::new(vec![Some(ad)])).unwrap();
        let g = loss_and_backward(
            &model,
            &Matrix::filled(1, 1, 1.0),
            &Targets::Values(Matrix::zeros(1, 1)),
            LossKind::Mse,
        )
        .unwrap();
        let lr = 0.1;
        let next = sgd_step(model.adapters(), &g, lr).unwrap();
        let (_, ad) = next.iter().next().unwrap();
        assert_eq!(ad.b().get(0, 0), b0 - lr * 2.0 * b0);
    }

    #[test]
    fn small_lr_never_increases_loss() {
        for seed in 0..5 {
            let (mut model, x, t) = small_model(seed);
            let targets = Targets::Values(t);
            let mut last = f64::INFINITY;
            for _ in 0..10 {
                let g = loss_and_backward(&model, &x, &targets, LossKind::Mse).unwrap();
                assert!(g.loss <= last + 1e-6, "{} > {last}", g.loss);
                last = g.loss;
                model = model
                    .with_adapters(sgd_step(model.adapters(), &g, 1e-3).unwrap())
                    .unwrap();
            }
        }
    }

    #[test]
    fn pretraining_reduces_loss_and_training_leaves_backbone() {
        let (model, x, t) = small_model(4);
        let targets = Targets::Values(t);
        let backbone = model.backbone().as_ref().clone();
        let schedule = Schedule {
            epochs: 200,
            batch_size: 6,
            lr: 0.1,
        };
        let rng = RandomSource::new(0, "pretrain");
        let trained = pretrain_backbone(&backbone, &x, &targets, LossKind::Mse, schedule, &rng).unwrap();
        let bare = |b: &Backbone| {
            let m = LoraModel::new(Arc::new(b.clone()), AdapterSet::new(vec![None, None])).unwrap();
            loss_and_backward(&m, &x, &targets, LossKind::Mse).unwrap().loss
        };
        assert!(bare(&trained) < bare(&backbone));

        let checksum = model.backbone().checksum();
        train_adapters(&model, &x, &targets, LossKind::Mse, schedule, &rng).unwrap();
        assert_eq!(model.backbone().checksum(), checksum);
    }
}
