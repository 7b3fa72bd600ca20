use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Affine map `h ↦ scale · (h·Wᵀ + b)`.
///
/// `scale` carries the per-layer Lipschitz factor of a constrained network
/// and is `1.0` for unconstrained layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    weight: Tensor2,
    bias: Vec<f64>,
    scale: f64,
}

/// Gradients of a loss with respect to one layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(weight: Tensor2, bias: Vec<f64>, scale: f64) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(
                "LinearLayer::new",
                format!("bias of length {}", weight.rows()),
                bias.len(),
            ));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Contract(format!(
                "layer scale must be positive and finite, got {scale}"
            )));
        }
        Ok(LinearLayer {
            weight,
            bias,
            scale,
        })
    }

    /// Weights and biases uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn init(in_dim: usize, out_dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let bias = (0..out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        LinearLayer {
            weight: Tensor2::from_vec(out_dim, in_dim, weight).expect("sized above"),
            bias,
            scale,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Tensor2 {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor2 {
        &mut self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Contract(format!(
                "layer scale must be positive and finite, got {scale}"
            )));
        }
        self.scale = scale;
        Ok(())
    }

    /// Weight and bias storage, borrowed together.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.weight.data_mut(), &mut self.bias)
    }

    pub fn num_params(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    pub fn forward(&self, h: &Tensor2) -> Result<Tensor2> {
        if h.cols() != self.in_dim() {
            return Err(Error::shape(
                "linear_forward",
                format!("input width {}", self.in_dim()),
                h.cols(),
            ));
        }
        let mut out = h.matmul_nt(&self.weight)?;
        let s = self.scale;
        for row in out.data_mut().chunks_exact_mut(self.bias.len().max(1)) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v = s * (*v + b);
            }
        }
        Ok(out)
    }

    /// Backward pass given the layer input and the upstream gradient.
    /// The input gradient is skipped when `want_input_grad` is false.
    pub fn backward(
        &self,
        input: &Tensor2,
        grad_out: &Tensor2,
        want_input_grad: bool,
    ) -> Result<(LayerGrads, Option<Tensor2>)> {
        if grad_out.cols() != self.out_dim() || grad_out.rows() != input.rows() {
            return Err(Error::shape(
                "linear_backward",
                format!("{}x{}", input.rows(), self.out_dim()),
                format!("{}x{}", grad_out.rows(), grad_out.cols()),
            ));
        }
        let s = self.scale;
        let mut weight = grad_out.matmul_tn(input)?;
        weight.data_mut().iter_mut().for_each(|v| *v *= s);
        let mut bias = vec![0.0; self.out_dim()];
        for row in grad_out.iter_rows() {
            for (b, g) in bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        bias.iter_mut().for_each(|b| *b *= s);
        let input_grad = if want_input_grad {
            let mut g = grad_out.matmul(&self.weight)?;
            g.data_mut().iter_mut().for_each(|v| *v *= s);
            Some(g)
        } else {
            None
        };
        Ok((LayerGrads { weight, bias }, input_grad))
    }
}

/// Applies `layer` to a batch.
pub fn linear_forward(layer: &LinearLayer, h: &Tensor2) -> Result<Tensor2> {
    layer.forward(h)
}

impl LayerGrads {
    pub fn zeros_like(layer: &LinearLayer) -> Self {
        LayerGrads {
            weight: Tensor2::zeros(layer.out_dim(), layer.in_dim()),
            bias: vec![0.0; layer.out_dim()],
        }
    }
}
