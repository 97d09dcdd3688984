use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::{ensure_finite, product, Matrix};

/// Standard deviation of the Gaussian used for fresh `A` factors.
pub const A_INIT_STDDEV: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f32, y: f32) -> f32 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One frozen dense layer: `y = act(W0 x + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weight: Matrix,
    bias: Matrix,
    activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Matrix, activation: Activation) -> Result<Self> {
        if bias.shape() != (weight.rows(), 1) {
            return Err(Error::Shape {
                op: "layer bias",
                left: weight.shape(),
                right: bias.shape(),
            });
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// The frozen network the adapters attach to.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    layers: Vec<Layer>,
}

impl Backbone {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("backbone needs a layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    op: "backbone chain",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Random MLP with `widths[0]` inputs, `tanh` hidden layers and a linear
    /// output. Weights are `Normal(0, 1/fan_in)`, biases zero.
    pub fn random(widths: &[usize], hidden: Activation, rng: &mut RandomSource) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least input and output widths".into(),
            ));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = (1.0 / w[0] as f32).sqrt();
                let act = if i == last { Activation::Identity } else { hidden };
                Layer::new(
                    Matrix::gaussian_fill(w[1], w[0], 0.0, std, rng)?,
                    Matrix::zeros(w[1], 1),
                    act,
                )
            })
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Digest of every weight and bias, for checking that training never
    /// touches the backbone.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for layer in &self.layers {
            for v in layer.weight.as_slice().iter().chain(layer.bias.as_slice()) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub(crate) fn with_layers(&self, layers: Vec<Layer>) -> Self {
        Self { layers }
    }
}

/// A rank-`r` update `B·A` for one `d_out × d_in` layer. The same pair type
/// also carries gradients and deltas, which have identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    b: Matrix,
    a: Matrix,
}

impl LoraAdapter {
    pub fn new(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::Shape {
                op: "adapter factors",
                left: b.shape(),
                right: a.shape(),
            });
        }
        if a.rows() > b.rows().min(a.cols()) {
            return Err(Error::InvalidArgument(format!(
                "rank {} exceeds min({}, {})",
                a.rows(),
                b.rows(),
                a.cols()
            )));
        }
        Ok(Self { b, a })
    }

    /// `B = 0`, `A ~ Normal(0, 0.02²)`: the update starts at exactly zero.
    pub fn init(d_out: usize, d_in: usize, rank: usize, rng: &mut RandomSource) -> Result<Self> {
        Self::new(
            Matrix::zeros(d_out, rank),
            Matrix::gaussian_fill(rank, d_in, 0.0, A_INIT_STDDEV, rng)?,
        )
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn target_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            b: Matrix::zeros(self.b.rows(), self.b.cols()),
            a: Matrix::zeros(self.a.rows(), self.a.cols()),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.b.shape() == other.b.shape() && self.a.shape() == other.a.shape()
    }

    pub(crate) fn from_parts(b: Matrix, a: Matrix) -> Self {
        Self { b, a }
    }

    pub fn into_parts(self) -> (Matrix, Matrix) {
        (self.b, self.a)
    }
}

/// `W0 + B·A`, with no scaling coefficient on the update.
pub fn effective_weight(w0: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    if adapter.target_shape() != w0.shape() {
        return Err(Error::Shape {
            op: "effective_weight",
            left: w0.shape(),
            right: adapter.target_shape(),
        });
    }
    let delta = adapter.b.matmul(&adapter.a)?;
    w0.add_scaled(&delta, 1.0)
}

/// One optional adapter slot per backbone layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    slots: Vec<Option<LoraAdapter>>,
}

impl AdapterSet {
    pub fn new(slots: Vec<Option<LoraAdapter>>) -> Self {
        Self { slots }
    }

    /// Fresh adapters of rank `rank` on the listed layers.
    pub fn init(
        backbone: &Backbone,
        adapted_layers: &[usize],
        rank: usize,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let mut slots = vec![None; backbone.layers().len()];
        for &i in adapted_layers {
            let layer = backbone.layers().get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("layer {i} does not exist"))
            })?;
            let mut layer_rng = rng.derive(format!("adapter-{i}"));
            slots[i] = Some(LoraAdapter::init(
                layer.out_dim(),
                layer.in_dim(),
                rank,
                &mut layer_rng,
            )?);
        }
        Ok(Self { slots })
    }

    pub fn slots(&self) -> &[Option<LoraAdapter>] {
        &self.slots
    }

    /// `(layer index, adapter)` for every adapted layer, ascending.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &LoraAdapter)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|a| (i, a)))
    }

    /// Applies `f` to every matrix, keeping the slot layout.
    pub fn map(&self, mut f: impl FnMut(&Matrix) -> Matrix) -> Self {
        Self {
            slots: self
                .slots
                .iter()
                .map(|s| s.as_ref().map(|ad| LoraAdapter::from_parts(f(&ad.b), f(&ad.a))))
                .collect(),
        }
    }

    pub fn try_map(&self, mut f: impl FnMut(&Matrix) -> Result<Matrix>) -> Result<Self> {
        let slots = self
            .slots
            .iter()
            .map(|s| {
                s.as_ref()
                    .map(|ad| Ok(LoraAdapter::from_parts(f(&ad.b)?, f(&ad.a)?)))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(Self { slots })
    }

    /// Every matrix in order: for each adapted layer, `B` then `A`.
    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.iter().flat_map(|(_, ad)| [&ad.b, &ad.a])
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.slots.len() == other.slots.len()
            && self.slots.iter().zip(&other.slots).all(|(x, y)| match (x, y) {
                (Some(x), Some(y)) => x.same_shape(y),
                (None, None) => true,
                _ => false,
            })
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |x, y| x.add_scaled(y, -1.0))
    }

    pub fn zip_with(
        &self,
        other: &Self,
        mut f: impl FnMut(&Matrix, &Matrix) -> Result<Matrix>,
    ) -> Result<Self> {
        if !self.same_layout(other) {
            return Err(Error::InvalidArgument("adapter layouts differ".into()));
        }
        let slots = self
            .slots
            .iter()
            .zip(&other.slots)
            .map(|(x, y)| match (x, y) {
                (Some(x), Some(y)) => Ok(Some(LoraAdapter::from_parts(
                    f(&x.b, &y.b)?,
                    f(&x.a, &y.a)?,
                ))),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self { slots })
    }

    /// In-place `self += c · other`; layouts must already agree.
    pub(crate) fn axpy(&mut self, c: f32, other: &Self) {
        for (x, y) in self.slots.iter_mut().zip(&other.slots) {
            if let (Some(x), Some(y)) = (x, y) {
                x.b.axpy(c, &y.b);
                x.a.axpy(c, &y.a);
            }
        }
    }

    /// All entries concatenated in `matrices()` order.
    pub fn flatten(&self) -> Vec<f32> {
        self.matrices()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().all(Matrix::is_finite)
    }

    pub fn parameter_count(&self) -> usize {
        self.matrices().map(Matrix::len).sum()
    }
}

/// A frozen backbone with adapters attached.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraModel {
    backbone: Arc<Backbone>,
    adapters: AdapterSet,
}

impl LoraModel {
    pub fn new(backbone: Arc<Backbone>, adapters: AdapterSet) -> Result<Self> {
        if adapters.slots.len() != backbone.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} adapter slots for {} layers",
                adapters.slots.len(),
                backbone.layers.len()
            )));
        }
        for (i, ad) in adapters.iter() {
            let w = backbone.layers[i].weight.shape();
            if ad.target_shape() != w {
                return Err(Error::Shape {
                    op: "adapter/layer",
                    left: w,
                    right: ad.target_shape(),
                });
            }
        }
        Ok(Self { backbone, adapters })
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn with_adapters(&self, adapters: AdapterSet) -> Result<Self> {
        Self::new(Arc::clone(&self.backbone), adapters)
    }

    pub fn into_adapters(self) -> AdapterSet {
        self.adapters
    }

    /// Runs the network on a `d_in × batch` input.
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if inputs.rows() != self.backbone.in_dim() {
            return Err(Error::Shape {
                op: "forward input",
                left: self.backbone.layers[0].weight.shape(),
                right: inputs.shape(),
            });
        }
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.backbone.layers.len()),
            weights: Vec::with_capacity(self.backbone.layers.len()),
            pre: Vec::with_capacity(self.backbone.layers.len()),
        };
        let mut x = inputs.clone();
        for (layer, slot) in self.backbone.layers.iter().zip(&self.adapters.slots) {
            let w = match slot {
                Some(ad) => {
                    let mut w = product(&ad.b, false, &ad.a, false);
                    w.axpy(1.0, &layer.weight);
                    w
                }
                None => layer.weight.clone(),
            };
            let mut z = product(&w, false, &x, false);
            let batch = z.cols();
            for (r, row) in z.as_mut_slice().chunks_mut(batch).enumerate() {
                let b = layer.bias.as_slice()[r];
                row.iter_mut().for_each(|v| *v += b);
            }
            let y = z.as_slice().iter().map(|&v| layer.activation.apply(v)).collect();
            let y = Matrix::from_parts(z.rows(), batch, y);
            cache.inputs.push(x);
            cache.weights.push(w);
            cache.pre.push(z);
            x = y;
        }
        ensure_finite(x.as_slice(), "forward activations")?;
        Ok((x, cache))
    }

    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.forward(inputs).map(|(y, _)| y)
    }
}

/// Intermediates retained by `forward` for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) inputs: Vec<Matrix>,
    pub(crate) weights: Vec<Matrix>,
    pub(crate) pre: Vec<Matrix>,
}

/// Gradients of the mean batch loss with respect to the backbone, used only
/// when pretraining it.
#[derive(Debug, Clone)]
pub(crate) struct BackboneGradients {
    pub(crate) weights: Vec<Matrix>,
    pub(crate) biases: Vec<Matrix>,
}

/// Backpropagates `d_output` (the loss gradient with respect to the network
/// output) through the cached forward pass. Adapter gradients are
/// `dB = dW·Aᵀ` and `dA = Bᵀ·dW` where `dW = δ·xᵀ`.
pub(crate) fn backpropagate(
    model: &LoraModel,
    cache: &ForwardCache,
    output: &Matrix,
    d_output: Matrix,
    want_backbone: bool,
) -> (AdapterSet, Option<BackboneGradients>) {
    let layers = &model.backbone.layers;
    let mut slots: Vec<Option<LoraAdapter>> = vec![None; layers.len()];
    let mut weight_grads = vec![None; layers.len()];
    let mut bias_grads = vec![None; layers.len()];
    let mut grad = d_output;
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let z = &cache.pre[l];
        let y = if l + 1 == layers.len() {
            output
        } else {
            &cache.inputs[l + 1]
        };
        let delta: Vec<f32> = grad
            .as_slice()
            .iter()
            .zip(z.as_slice().iter().zip(y.as_slice()))
            .map(|(&g, (&zv, &yv))| g * layer.activation.derivative(zv, yv))
            .collect();
        let delta = Matrix::from_parts(z.rows(), z.cols(), delta);
        let needs_dw = want_backbone || model.adapters.slots[l].is_some();
        if needs_dw {
            let dw = product(&delta, false, &cache.inputs[l], true);
            if let Some(ad) = &model.adapters.slots[l] {
                let db = product(&dw, false, &ad.a, true);
                let da = product(&ad.b, true, &dw, false);
                slots[l] = Some(LoraAdapter::from_parts(db, da));
            }
            if want_backbone {
                let bias: Vec<f32> = delta
                    .as_slice()
                    .chunks(delta.cols())
                    .map(|row| row.iter().map(|&v| f64::from(v)).sum::<f64>() as f32)
                    .collect();
                bias_grads[l] = Some(Matrix::from_parts(delta.rows(), 1, bias));
                weight_grads[l] = Some(dw);
            }
        }
        if l > 0 {
            grad = product(&cache.weights[l], true, &delta, false);
        }
    }
    let backbone = want_backbone.then(|| BackboneGradients {
        weights: weight_grads.into_iter().map(Option::unwrap).collect(),
        biases: bias_grads.into_iter().map(Option::unwrap).collect(),
    });
    (AdapterSet::new(slots), backbone)
}

impl Backbone {
    /// Returns a copy moved by `-lr` times the given gradients.
    pub(crate) fn stepped(&self, grads: &BackboneGradients, lr: f32) -> Self {
        let layers = self
            .layers
            .iter()
            .zip(grads.weights.iter().zip(&grads.biases))
            .map(|(layer, (dw, db))| {
                let mut w = layer.weight.clone();
                w.axpy(-lr, dw);
                let mut b = layer.bias.clone();
                b.axpy(-lr, db);
                Layer {
                    weight: w,
                    bias: b,
                    activation: layer.activation,
                }
            })
            .collect();
        self.with_layers(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn effective_weight_cases() {
        let w0 = Matrix::identity(2);
        let ad = LoraAdapter::new(m(&[&[1.0], &[0.0]]), m(&[&[0.0, 2.0]])).unwrap();
        assert_eq!(
            effective_weight(&w0, &ad).unwrap(),
            m(&[&[1.0, 2.0], &[0.0, 1.0]])
        );
        let zero = LoraAdapter::new(Matrix::zeros(2, 1), m(&[&[3.0, -4.0]])).unwrap();
        assert_eq!(effective_weight(&w0, &zero).unwrap(), w0);
        let full = LoraAdapter::new(Matrix::zeros(2, 2), Matrix::zeros(2, 3)).unwrap();
        assert_eq!(full.target_shape(), (2, 3));
        assert!(effective_weight(&w0, &full).is_err());
    }

    #[test]
    fn rank_bound() {
        assert!(LoraAdapter::new(Matrix::zeros(2, 3), Matrix::zeros(3, 4)).is_err());
        assert!(LoraAdapter::new(Matrix::zeros(2, 1), Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn linear_layer_by_hand() {
        let layer = Layer::new(
            m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            m(&[&[0.5], &[-1.0]]),
            Activation::Identity,
        )
        .unwrap();
        let backbone = Arc::new(Backbone::new(vec![layer]).unwrap());
        let ad = LoraAdapter::new(m(&[&[1.0], &[2.0]]), m(&[&[1.0, -1.0]])).unwrap();
        let model = LoraModel::new(backbone, AdapterSet::new(vec![Some(ad)])).unwrap();
        // W = [[2, -1], [2, -1]]; x = [3, 1] -> [5, 5] + bias.
        let y = model.predict(&m(&[&[3.0], &[1.0]])).unwrap();
        assert_eq!(y.as_slice(), &[5.5, 4.0]);
    }

    #[test]
    fn zero_adapters_match_backbone() {
        let mut rng = RandomSource::new(1, "zero-adapters");
        let backbone = Arc::new(Backbone::random(&[5, 7, 3], Activation::Tanh, &mut rng).unwrap());
        let adapters = AdapterSet::init(&backbone, &[0, 1], 2, &mut rng).unwrap();
        let with = LoraModel::new(Arc::clone(&backbone), adapters).unwrap();
        let without = LoraModel::new(Arc::clone(&backbone), AdapterSet::new(vec![None, None])).unwrap();
        let x = Matrix::gaussian_fill(5, 9, 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(with.predict(&x).unwrap(), without.predict(&x).unwrap());
    }

    #[test]
    fn identity_network_is_weight_product() {
        let w1 = m(&[&[1.0, 2.0], &[0.0, -1.0], &[3.0, 1.0]]);
        let w2 = m(&[&[1.0, 1.0, -2.0]]);
        let backbone = Backbone::new(vec![
            Layer::new(w1.clone(), Matrix::zeros(3, 1), Activation::Identity).unwrap(),
            Layer::new(w2.clone(), Matrix::zeros(1, 1), Activation::Identity).unwrap(),
        ])
        .unwrap();
        let mut rng = RandomSource::new(0, "ident");
        let adapters = AdapterSet::init(&backbone, &[0, 1], 1, &mut rng).unwrap();
        let model = LoraModel::new(Arc::new(backbone), adapters).unwrap();
        let x = m(&[&[1.0, -2.0], &[0.5, 4.0]]);
        let expected = w2.matmul(&w1).unwrap().matmul(&x).unwrap();
        assert_eq!(model.predict(&x).unwrap(), expected);
    }

    #[test]
    fn batch_is_column_stack() {
        let mut rng = RandomSource::new(2, "batch");
        let backbone = Arc::new(Backbone::random(&[4, 6, 2], Activation::Tanh, &mut rng).unwrap());
        let mut adapters = AdapterSet::init(&backbone, &[0, 1], 2, &mut rng).unwrap();
        adapters = adapters.map(|x| {
            Matrix::gaussian_fill(x.rows(), x.cols(), 0.0, 0.3, &mut rng).unwrap()
        });
        let model = LoraModel::new(backbone, adapters).unwrap();
        let x = Matrix::gaussian_fill(4, 2, 0.0, 1.0, &mut rng).unwrap();
        let both = model.predict(&x).unwrap();
        for c in 0..2 {
            let single = model.predict(&x.select_columns(&[c])).unwrap();
            assert_eq!(single.as_slice(), both.column(c).as_slice());
        }
    }

    #[test]
    fn layout_checks() {
        let mut rng = RandomSource::new(3, "layout");
        let backbone = Arc::new(Backbone::random(&[4, 6, 2], Activation::Relu, &mut rng).unwrap());
        let wrong = AdapterSet::new(vec![Some(
            LoraAdapter::new(Matrix::zeros(4, 1), Matrix::zeros(1, 6)).unwrap(),
        ), None]);
        assert!(LoraModel::new(Arc::clone(&backbone), wrong).is_err());
        assert!(LoraModel::new(backbone, AdapterSet::new(vec![None])).is_err());
    }
}
