use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lipschitz::{project_layer_in_place, project_mlp, LipschitzBudget};
use crate::nn::{Activation, LinearLayer, MlpModel};
use crate::tensor::Tensor2;

pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

/// Shape and constraint settings of a Gaussian VAE.
///
/// Setting `encoder_lipschitz` makes every encoder layer (body and both
/// heads) GroupSort-activated and projected with that total budget; the
/// decoder is handled the same way by `decoder_lipschitz`. Unset means a
/// plain ReLU network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSpec {
    pub input_dim: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: Vec<usize>,
    #[serde(default)]
    pub encoder_lipschitz: Option<f64>,
    #[serde(default)]
    pub decoder_lipschitz: Option<f64>,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
}

fn default_latent_dim() -> usize {
    10
}
fn default_encoder_hidden() -> Vec<usize> {
    vec![512, 256]
}
fn default_decoder_hidden() -> Vec<usize> {
    vec![256, 512]
}
fn default_group_size() -> usize {
    2
}

impl VaeSpec {
    /// Desk-scale defaults for 28×28 images.
    pub fn mnist_like(encoder_lipschitz: Option<f64>, decoder_lipschitz: Option<f64>) -> Self {
        VaeSpec {
            input_dim: 784,
            latent_dim: default_latent_dim(),
            encoder_hidden: default_encoder_hidden(),
            decoder_hidden: default_decoder_hidden(),
            encoder_lipschitz,
            decoder_lipschitz,
            group_size: default_group_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "input and latent dims must be positive".into(),
            ));
        }
        if self.encoder_hidden.is_empty() {
            return Err(Error::Config(
                "encoder needs at least one hidden layer".into(),
            ));
        }
        if self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .any(|&w| w == 0)
        {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        for m in [self.encoder_lipschitz, self.decoder_lipschitz]
            .into_iter()
            .flatten()
        {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::Config(format!(
                    "Lipschitz budget must be positive, got {m}"
                )));
            }
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be positive".into()));
        }
        Ok(())
    }
}

/// Gaussian-encoder, Bernoulli-decoder VAE with a standard normal prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    pub(crate) encoder_body: MlpModel,
    pub(crate) mu_head: LinearLayer,
    pub(crate) log_sigma_head: LinearLayer,
    pub(crate) decoder: MlpModel,
    pub(crate) latent_dim: usize,
    pub(crate) encoder_budget: Option<LipschitzBudget>,
    pub(crate) decoder_budget: Option<LipschitzBudget>,
}

impl VaeModel {
    pub fn new(spec: &VaeSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let group = Activation::GroupSort {
            group_size: spec.group_size,
        };

        let encoder_budget = spec
            .encoder_lipschitz
            .map(|m| LipschitzBudget::new(m, spec.encoder_hidden.len() + 1))
            .transpose()?;
        let (enc_act, enc_scale) = match encoder_budget {
            Some(b) => (group, b.per_layer()),
            None => (Activation::Relu, 1.0),
        };
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.encoder_hidden);
        let encoder_body = MlpModel::init(
            &widths,
            enc_act,
            encoder_budget.is_some(),
            true,
            enc_scale,
            rng,
        )?;
        let body_out = *spec.encoder_hidden.last().expect("validated");
        let mu_head = LinearLayer::init(body_out, spec.latent_dim, enc_scale, rng);
        let log_sigma_head = LinearLayer::init(body_out, spec.latent_dim, enc_scale, rng);

        let decoder_budget = spec
            .decoder_lipschitz
            .map(|m| LipschitzBudget::new(m, spec.decoder_hidden.len() + 1))
            .transpose()?;
        let (dec_act, dec_scale) = match decoder_budget {
            Some(b) => (group, b.per_layer()),
            None => (Activation::Relu, 1.0),
        };
        let mut widths = vec![spec.latent_dim];
        widths.extend(&spec.decoder_hidden);
        widths.push(spec.input_dim);
        let decoder = MlpModel::init(
            &widths,
            dec_act,
            decoder_budget.is_some(),
            false,
            dec_scale,
            rng,
        )?;

        let mut model = VaeModel {
            encoder_body,
            mu_head,
            log_sigma_head,
            decoder,
            latent_dim: spec.latent_dim,
            encoder_budget,
            decoder_budget,
        };
        model.project();
        Ok(model)
    }

    /// Assembles a model from parts, checking every structural invariant.
    pub fn from_parts(
        encoder_body: MlpModel,
        mu_head: LinearLayer,
        log_sigma_head: LinearLayer,
        decoder: MlpModel,
        encoder_budget: Option<LipschitzBudget>,
        decoder_budget: Option<LipschitzBudget>,
    ) -> Result<Self> {
        let latent_dim = mu_head.out_dim();
        if mu_head.in_dim() != encoder_body.out_dim()
            || log_sigma_head.in_dim() != encoder_body.out_dim()
        {
            return Err(Error::shape(
                "VaeModel::from_parts",
                format!("head input width {}", encoder_body.out_dim()),
                format!("{} / {}", mu_head.in_dim(), log_sigma_head.in_dim()),
            ));
        }
        if log_sigma_head.out_dim() != latent_dim || decoder.in_dim() != latent_dim {
            return Err(Error::shape(
                "VaeModel::from_parts",
                format!("latent width {latent_dim}"),
                format!("{} / {}", log_sigma_head.out_dim(), decoder.in_dim()),
            ));
        }
        if decoder.out_dim() != encoder_body.in_dim() {
            return Err(Error::shape(
                "VaeModel::from_parts",
                format!("decoder output width {}", encoder_body.in_dim()),
                decoder.out_dim(),
            ));
        }
        if encoder_budget.is_some()
            && (!encoder_body.is_constrained()
                || !matches!(encoder_body.activation(), Activation::GroupSort { .. }))
        {
            return Err(Error::Contract(
                "a budgeted encoder must be constrained and use GroupSort".into(),
            ));
        }
        Ok(VaeModel {
            encoder_body,
            mu_head,
            log_sigma_head,
            decoder,
            latent_dim,
            encoder_budget,
            decoder_budget,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_body.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn encoder_body(&self) -> &MlpModel {
        &self.encoder_body
    }

    pub fn mu_head(&self) -> &LinearLayer {
        &self.mu_head
    }

    pub fn log_sigma_head(&self) -> &LinearLayer {
        &self.log_sigma_head
    }

    pub fn decoder(&self) -> &MlpModel {
        &self.decoder
    }

    pub fn encoder_budget(&self) -> Option<LipschitzBudget> {
        self.encoder_budget
    }

    pub fn decoder_budget(&self) -> Option<LipschitzBudget> {
        self.decoder_budget
    }

    pub fn num_params(&self) -> usize {
        self.encoder_body.num_params()
            + self.mu_head.num_params()
            + self.log_sigma_head.num_params()
            + self.decoder.num_params()
    }

    /// Re-projects every constrained layer onto the unit row-L1 ball.
    pub fn project(&mut self) {
        if self.encoder_budget.is_some() {
            project_mlp(&mut self.encoder_body);
            project_layer_in_place(&mut self.mu_head);
            project_layer_in_place(&mut self.log_sigma_head);
        }
        if self.decoder_budget.is_some() {
            project_mlp(&mut self.decoder);
        }
    }

    /// Parameter slices: encoder body, μ head, log σ head, decoder.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder_body.params_mut();
        let (w, b) = self.mu_head.params_mut();
        out.push(w);
        out.push(b);
        let (w, b) = self.log_sigma_head.params_mut();
        out.push(w);
        out.push(b);
        out.extend(self.decoder.params_mut());
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut out = self.encoder_body.param_sizes();
        for head in [&self.mu_head, &self.log_sigma_head] {
            out.push(head.weight().data().len());
            out.push(head.bias().len());
        }
        out.extend(self.decoder.param_sizes());
        out
    }

    /// Posterior means `μ(x)` for a batch.
    pub fn encode_mean(&self, x: &Tensor2) -> Result<Tensor2> {
        let h = self.encoder_body.forward(x)?;
        self.mu_head.forward(&h)
    }

    /// Decoder logits for a batch of latent codes.
    pub fn decode_logits(&self, z: &Tensor2) -> Result<Tensor2> {
        self.decoder.forward(z)
    }

    /// Bernoulli means `sigmoid(logits)`.
    pub fn decode_mean(&self, z: &Tensor2) -> Result<Tensor2> {
        Ok(self.decode_logits(z)?.map(sigmoid))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eˣ)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
