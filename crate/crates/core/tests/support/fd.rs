//! Finite-difference oracle for adapter gradients: an independent `f64`
//! forward pass over a copy of the model.

use std::sync::Arc;

use fedlpp::lora::{
    loss_and_backward, Activation, AdapterSet, Backbone, LossKind, LoraModel, Targets,
};
use fedlpp::{Matrix, RandomSource};

pub const EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely against it.
pub const FLOOR: f64 = 1e-4;

/// Flat `f64` copy of a model: per layer `(W0, bias, act, Option<(B, A)>)`.
pub struct Reference {
    layers: Vec<RefLayer>,
}

struct RefLayer {
    w0: Vec<f64>,
    bias: Vec<f64>,
    d_out: usize,
    d_in: usize,
    act: Activation,
    adapter: Option<(Vec<f64>, Vec<f64>, usize)>,
}

fn to_f64(m: &Matrix) -> Vec<f64> {
    m.as_slice().iter().map(|&v| f64::from(v)).collect()
}

impl Reference {
    fn from_model(model: &LoraModel) -> Self {
        let layers = model
            .backbone()
            .layers()
            .iter()
            .zip(model.adapters().slots())
            .map(|(layer, slot)| RefLayer {
                w0: to_f64(layer.weight()),
                bias: to_f64(layer.bias()),
                d_out: layer.out_dim(),
                d_in: layer.in_dim(),
                act: layer.activation(),
                adapter: slot.as_ref().map(|ad| (to_f64(ad.b()), to_f64(ad.a()), ad.rank())),
            })
            .collect();
        Self { layers }
    }

    fn loss(&self, x: &Matrix, targets: &Targets, kind: LossKind) -> f64 {
        let batch = x.cols();
        let mut h: Vec<Vec<f64>> = (0..batch).map(|j| to_f64(x).iter().skip(j).step_by(batch).copied().collect()).collect();
        for l in &self.layers {
            let mut w = l.w0.clone();
            if let Some((b, a, r)) = &l.adapter {
                for i in 0..l.d_out {
                    for k in 0..l.d_in {
                        for p in 0..*r {
                            w[i * l.d_in + k] += b[i * r + p] * a[p * l.d_in + k];
                        }
                    }
                }
            }
            h = h
                .iter()
                .map(|col| {
                    (0..l.d_out)
                        .map(|i| {
                            let z: f64 = l.bias[i]
                                + (0..l.d_in).map(|k| w[i * l.d_in + k] * col[k]).sum::<f64>();
                            match l.act {
                                Activation::Tanh => z.tanh(),
                                Activation::Relu => z.max(0.0),
                                Activation::Identity => z,
                            }
                        })
                        .collect()
                })
                .collect();
        }
        match (kind, targets) {
            (LossKind::Mse, Targets::Values(t)) => {
                let t = to_f64(t);
                let mut s = 0.0;
                for (j, col) in h.iter().enumerate() {
                    for (r, y) in col.iter().enumerate() {
                        s += (y - t[r * batch + j]).powi(2);
                    }
                }
                s / (batch * h[0].len()) as f64
            }
            (LossKind::SoftmaxCrossEntropy, Targets::Classes(c)) => {
                let mut s = 0.0;
                for (col, &label) in h.iter().zip(c) {
                    let lse = col.iter().map(|v| v.exp()).sum::<f64>().ln();
                    s += lse - col[label];
                }
                s / batch as f64
            }
            _ => unreachable!(),
        }
    }

    /// Mutable views of every adapter parameter, `B` then `A` per layer.
    fn params(&mut self) -> Vec<&mut f64> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.adapter.as_mut())
            .flat_map(|(b, a, _)| b.iter_mut().chain(a.iter_mut()))
            .collect()
    }
}

pub fn random_model(seed: u64, widths: &[usize], rank: usize) -> LoraModel {
    let mut rng = RandomSource::new(seed, "fd-model");
    let backbone = Arc::new(Backbone::random(widths, Activation::Tanh, &mut rng).unwrap());
    let layers: Vec<usize> = (0..widths.len() - 1).collect();
    let adapters = AdapterSet::init(&backbone, &layers, rank, &mut rng)
        .unwrap()
        .map(|m| Matrix::gaussian_fill(m.rows(), m.cols(), 0.0, 0.5, &mut rng).unwrap());
    LoraModel::new(backbone, adapters).unwrap()
}

/// Worst relative error over every adapter parameter.
pub fn check(model: &LoraModel, x: &Matrix, targets: &Targets, kind: LossKind) -> f64 {
    let analytic = loss_and_backward(model, x, targets, kind).unwrap().grads.flatten();
    let mut reference = Reference::from_model(model);
    let count = reference.params().len();
    assert_eq!(count, analytic.len());
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *reference.params()[i];
        *reference.params()[i] = orig + EPS;
        let up = reference.loss(x, targets, kind);
        *reference.params()[i] = orig - EPS;
        let down = reference.loss(x, targets, kind);
        *reference.params()[i] = orig;
        let fd = (up - down) / (2.0 * EPS);
        let g = f64::from(a);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(FLOOR);
        worst = worst.max(rel);
    }
    worst
}

