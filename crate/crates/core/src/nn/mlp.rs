use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::{
    activation_apply, activation_backward, activation_forward, Activation, ActivationRecord,
};
use super::layer::{LayerGrads, LinearLayer};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// A feed-forward stack of [`LinearLayer`]s with one activation kind.
///
/// The activation follows every layer except the last, unless
/// `activate_output` is set (used for encoder bodies that feed linear heads).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<LinearLayer>,
    activation: Activation,
    constrained: bool,
    activate_output: bool,
}

/// Intermediates recorded by [`mlp_forward`] for [`mlp_backward`].
#[derive(Clone, Debug)]
pub struct Tape {
    /// Input to each layer, in order.
    inputs: Vec<Tensor2>,
    records: Vec<Option<ActivationRecord>>,
    signature: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpModel {
    pub fn new(
        layers: Vec<LinearLayer>,
        activation: Activation,
        constrained: bool,
        activate_output: bool,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("an MLP needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "MlpModel::new",
                    format!("layer {} input width {}", i + 1, pair[0].out_dim()),
                    pair[1].in_dim(),
                ));
            }
        }
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            let activated = i < last || activate_output;
            if activated && !activation.accepts_width(layer.out_dim()) {
                return Err(Error::shape(
                    "MlpModel::new",
                    format!("width of layer {i} compatible with {activation:?}"),
                    layer.out_dim(),
                ));
            }
        }
        Ok(MlpModel {
            layers,
            activation,
            constrained,
            activate_output,
        })
    }

    /// Randomly initialized stack through `widths` (input width first).
    /// Every layer gets `layer_scale`.
    pub fn init(
        widths: &[usize],
        activation: Activation,
        constrained: bool,
        activate_output: bool,
        layer_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Contract(
                "an MLP needs an input and an output width".into(),
            ));
        }
        let layers = widths
            .windows(2)
            .map(|w| LinearLayer::init(w[0], w[1], layer_scale, rng))
            .collect();
        MlpModel::new(layers, activation, constrained, activate_output)
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn is_constrained(&self) -> bool {
        self.constrained
    }

    pub fn activates_output(&self) -> bool {
        self.activate_output
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LinearLayer::num_params).sum()
    }

    fn activated(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.activate_output
    }

    fn signature(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.in_dim(), l.out_dim()))
            .collect()
    }

    /// Forward pass without recording anything.
    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut h = self.layers[0].forward(x)?;
        for i in 0..self.layers.len() {
            if i > 0 {
                h = self.layers[i].forward(&h)?;
            }
            if self.activated(i) {
                activation_apply(self.activation, &mut h)?;
            }
        }
        Ok(h)
    }

    /// Parameter slices in a fixed order: weight then bias, layer by layer.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            let (w, b) = layer.params_mut();
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight().data().len(), l.bias().len()])
            .collect()
    }
}

/// Forward pass that records everything [`mlp_backward`] needs.
pub fn mlp_forward(model: &MlpModel, x: &Tensor2) -> Result<(Tensor2, Tape)> {
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut records = Vec::with_capacity(model.layers.len());
    let mut h = x.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        let pre = layer.forward(&h)?;
        inputs.push(h);
        if model.activated(i) {
            let (post, record) = activation_forward(model.activation, &pre)?;
            records.push(Some(record));
            h = post;
        } else {
            records.push(None);
            h = pre;
        }
    }
    Ok((
        h,
        Tape {
            inputs,
            records,
            signature: model.signature(),
        },
    ))
}

/// Reverse pass through the stack: parameter gradients plus the input gradient.
pub fn mlp_backward(
    model: &MlpModel,
    tape: &Tape,
    upstream: &Tensor2,
) -> Result<(MlpGrads, Tensor2)> {
    let (grads, input_grad) = backward_impl(model, tape, upstream, true)?;
    Ok((grads, input_grad.expect("requested")))
}

/// Same as [`mlp_backward`] but skips the (often large) input-gradient product.
pub fn mlp_backward_params(model: &MlpModel, tape: &Tape, upstream: &Tensor2) -> Result<MlpGrads> {
    Ok(backward_impl(model, tape, upstream, false)?.0)
}

fn backward_impl(
    model: &MlpModel,
    tape: &Tape,
    upstream: &Tensor2,
    want_input_grad: bool,
) -> Result<(MlpGrads, Option<Tensor2>)> {
    if tape.signature != model.signature() {
        return Err(Error::Contract(
            "tape was recorded on a model with different layer shapes".into(),
        ));
    }
    let batch = tape.inputs[0].rows();
    if upstream.shape() != (batch, model.out_dim()) {
        return Err(Error::shape(
            "mlp_backward",
            format!("{}x{}", batch, model.out_dim()),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    let n = model.layers.len();
    let mut layer_grads: Vec<Option<LayerGrads>> = vec![None; n];
    let mut grad = upstream.clone();
    for i in (0..n).rev() {
        if let Some(record) = &tape.records[i] {
            grad = activation_backward(record, &grad)?;
        }
        let need_input = i > 0 || want_input_grad;
        let (g, input_grad) = model.layers[i].backward(&tape.inputs[i], &grad, need_input)?;
        layer_grads[i] = Some(g);
        if let Some(ig) = input_grad {
            grad = ig;
        }
    }
    let grads = MlpGrads {
        layers: layer_grads
            .into_iter()
            .map(|g| g.expect("filled"))
            .collect(),
    };
    Ok((grads, want_input_grad.then_some(grad)))
}

impl MlpGrads {
    pub fn zeros_like(model: &MlpModel) -> Self {
        MlpGrads {
            layers: model.layers.iter().map(LayerGrads::zeros_like).collect(),
        }
    }

    /// Slices in the same order as [`MlpModel::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| [g.weight.data(), g.bias.as_slice()])
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::linear_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_identity_layer_model_is_identity() {
        let w = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let layer = LinearLayer::new(w, vec![0.0; 2], 1.0).unwrap();
        let model = MlpModel::new(vec![layer], Activation::Relu, false, false).unwrap();
        let x = Tensor2::from_rows(&[vec![-3.0, 0.5]]).unwrap();
        assert_eq!(model.forward(&x).unwrap(), x);
        assert_eq!(mlp_forward(&model, &x).unwrap().0, x);
    }

    #[test]
    fn two_linear_layers_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // With no activation between them (single hidden group of size 1
        // sorts nothing), the stack equals two linear_forward calls.
        let model = MlpModel::init(
            &[3, 4, 2],
            Activation::GroupSort { group_size: 1 },
            false,
            false,
            1.0,
            &mut rng,
        )
        .unwrap();
        let x = Tensor2::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 2.0]]).unwrap();
        let manual = linear_forward(
            &model.layers()[1],
            &linear_forward(&model.layers()[0], &x).unwrap(),
        )
        .unwrap();
        assert_eq!(model.forward(&x).unwrap(), manual);
    }

    #[test]
    fn rejects_broken_chains_and_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = LinearLayer::init(3, 4, 1.0, &mut rng);
        let b = LinearLayer::init(5, 2, 1.0, &mut rng);
        assert!(MlpModel::new(vec![a.clone(), b], Activation::Relu, false, false).is_err());
        let c = LinearLayer::init(4, 3, 1.0, &mut rng);
        // Output of width 3 is activated and not divisible by 2.
        assert!(
            MlpModel::new(vec![a.clone(), c.clone()], Activation::MAX_MIN, true, true).is_err()
        );
        assert!(MlpModel::new(vec![a, c], Activation::MAX_MIN, true, false).is_ok());
        assert!(MlpModel::new(vec![], Activation::Relu, false, false).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MlpModel::init(
            &[4, 6, 6, 2],
            Activation::MAX_MIN,
            true,
            false,
            1.2,
            &mut rng,
        )
        .unwrap();
        let x = Tensor2::from_rows(&[vec![0.1, 0.9, 0.4, 0.3]]).unwrap();
        let (_, tape) = mlp_forward(&model, &x).unwrap();
        let (grads, input_grad) = mlp_backward(&model, &tape, &Tensor2::zeros(1, 2)).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
        assert_eq!(input_grad.max_abs(), 0.0);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let small =
            MlpModel::init(&[2, 4, 1], Activation::Relu, false, false, 1.0, &mut rng).unwrap();
        let other =
            MlpModel::init(&[2, 6, 1], Activation::Relu, false, false, 1.0, &mut rng).unwrap();
        let (_, tape) = mlp_forward(&small, &Tensor2::zeros(1, 2)).unwrap();
        assert!(matches!(
            mlp_backward(&other, &tape, &Tensor2::zeros(1, 1)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            mlp_backward(&small, &tape, &Tensor2::zeros(2, 1)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model =
            MlpModel::init(&[5, 8, 3], Activation::Relu, false, false, 1.0, &mut rng).unwrap();
        let x = Tensor2::from_rows(&[vec![0.3, 0.1, 0.7, 0.2, 0.9]]).unwrap();
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
