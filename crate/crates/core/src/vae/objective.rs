//! Posterior, likelihood, ELBO and importance-sampled marginal likelihood.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{sigmoid, softplus, VaeModel, LOG_SIGMA_MAX, LOG_SIGMA_MIN};
use crate::error::{Error, Result};
use crate::nn::{mlp_backward, mlp_backward_params, mlp_forward, LayerGrads, MlpGrads};
use crate::tensor::Tensor2;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal Gaussian posterior `q(z|x)` for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorParams {
    pub mu: Vec<f64>,
    /// Clamped to `[LOG_SIGMA_MIN, LOG_SIGMA_MAX]`.
    pub log_sigma: Vec<f64>,
}

impl PosteriorParams {
    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }
}

/// Posterior parameters for a batch, one row per input.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorBatch {
    pub mu: Tensor2,
    pub log_sigma: Tensor2,
}

impl PosteriorBatch {
    pub fn get(&self, i: usize) -> PosteriorParams {
        PosteriorParams {
            mu: self.mu.row(i).to_vec(),
            log_sigma: self.log_sigma.row(i).to_vec(),
        }
    }
}

fn check_input(model: &VaeModel, width: usize, op: &'static str) -> Result<()> {
    if width != model.input_dim() {
        return Err(Error::shape(
            op,
            format!("input width {}", model.input_dim()),
            width,
        ));
    }
    Ok(())
}

pub fn encode_batch(model: &VaeModel, x: &Tensor2) -> Result<PosteriorBatch> {
    check_input(model, x.cols(), "encode")?;
    let h = model.encoder_body.forward(x)?;
    let mu = model.mu_head.forward(&h)?;
    let log_sigma = model
        .log_sigma_head
        .forward(&h)?
        .map(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));
    if !mu.is_finite() || !log_sigma.is_finite() {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok(PosteriorBatch { mu, log_sigma })
}

pub fn encode(model: &VaeModel, x: &[f64]) -> Result<PosteriorParams> {
    Ok(encode_batch(model, &Tensor2::row_vector(x))?.get(0))
}

/// `z = μ + exp(log σ) ⊙ noise`.
pub fn reparameterize(p: &PosteriorParams, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != p.mu.len() {
        return Err(Error::shape("reparameterize", p.mu.len(), noise.len()));
    }
    Ok(p.mu
        .iter()
        .zip(&p.log_sigma)
        .zip(noise)
        .map(|((m, ls), e)| m + ls.exp() * e)
        .collect())
}

/// `Σᵢ xᵢ log σ(ℓᵢ) + (1 − xᵢ) log(1 − σ(ℓᵢ))`, written as `xᵢℓᵢ − softplus(ℓᵢ)`.
pub fn bernoulli_loglik(logits: &[f64], x: &[f64]) -> f64 {
    logits
        .iter()
        .zip(x)
        .map(|(&l, &xi)| xi * l - softplus(l))
        .sum()
}

/// `log p(x|z)` under the Bernoulli decoder.
pub fn decode_loglik(model: &VaeModel, z: &[f64], x: &[f64]) -> Result<f64> {
    if z.len() != model.latent_dim() {
        return Err(Error::shape("decode_loglik", model.latent_dim(), z.len()));
    }
    check_input(model, x.len(), "decode_loglik")?;
    let logits = model.decode_logits(&Tensor2::row_vector(z))?;
    Ok(bernoulli_loglik(logits.row(0), x))
}

/// `log p(x|zᵢ)` for every row `zᵢ` of `z`, against one input `x`.
pub fn decode_logliks(model: &VaeModel, z: &Tensor2, x: &[f64]) -> Result<Vec<f64>> {
    check_input(model, x.len(), "decode_logliks")?;
    let logits = model.decode_logits(z)?;
    Ok(logits.iter_rows().map(|l| bernoulli_loglik(l, x)).collect())
}

/// `KL(q ‖ N(0, I)) = ½ Σⱼ (μⱼ² + σⱼ² − 1 − 2 log σⱼ)`.
pub fn kl_gaussian_std(p: &PosteriorParams) -> f64 {
    kl_row(&p.mu, &p.log_sigma)
}

fn kl_row(mu: &[f64], log_sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_sigma)
        .map(|(m, ls)| m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls)
        .sum::<f64>()
}

/// `log N(z; 0, I)`.
pub fn log_standard_normal(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v + LN_2PI).sum::<f64>()
}

/// Gradients of the training loss, laid out like [`VaeModel::params_mut`].
#[derive(Clone, Debug)]
pub struct VaeGrads {
    pub encoder_body: MlpGrads,
    pub mu_head: LayerGrads,
    pub log_sigma_head: LayerGrads,
    pub decoder: MlpGrads,
}

impl VaeGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder_body.slices();
        for head in [&self.mu_head, &self.log_sigma_head] {
            out.push(head.weight.data());
            out.push(&head.bias);
        }
        out.extend(self.decoder.slices());
        out
    }
}

/// Result of a one-sample ELBO evaluation over a batch.
#[derive(Clone, Debug)]
pub struct ElboOutput {
    /// Per-input ELBO estimate `log p(x|z) − KL(q ‖ p)`.
    pub elbo: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub kl: Vec<f64>,
    /// Training loss, the negated batch-mean ELBO.
    pub loss: f64,
    /// Gradient of `loss` with respect to every parameter.
    pub grads: VaeGrads,
}

/// One reparameterized draw per input (`noise` is `batch × latent_dim`),
/// with the full backward pass through the sampling step.
pub fn elbo(model: &VaeModel, x: &Tensor2, noise: &Tensor2) -> Result<ElboOutput> {
    check_input(model, x.cols(), "elbo")?;
    let batch = x.rows();
    let m = model.latent_dim();
    if noise.shape() != (batch, m) {
        return Err(Error::shape(
            "elbo",
            format!("noise {batch}x{m}"),
            format!("{}x{}", noise.rows(), noise.cols()),
        ));
    }
    if batch == 0 {
        return Err(Error::Contract("elbo needs a non-empty batch".into()));
    }

    let (h, body_tape) = mlp_forward(&model.encoder_body, x)?;
    let mu = model.mu_head.forward(&h)?;
    let raw_log_sigma = model.log_sigma_head.forward(&h)?;
    let log_sigma = raw_log_sigma.map(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));
    let sigma = log_sigma.map(f64::exp);

    let mut z = Tensor2::zeros(batch, m);
    for (k, zk) in z.data_mut().iter_mut().enumerate() {
        *zk = mu.data()[k] + sigma.data()[k] * noise.data()[k];
    }
    let (logits, dec_tape) = mlp_forward(&model.decoder, &z)?;

    let reconstruction: Vec<f64> = logits
        .iter_rows()
        .zip(x.iter_rows())
        .map(|(l, xi)| bernoulli_loglik(l, xi))
        .collect();
    let kl: Vec<f64> = (0..batch)
        .map(|i| kl_row(mu.row(i), log_sigma.row(i)))
        .collect();
    let elbo: Vec<f64> = reconstruction.iter().zip(&kl).map(|(r, k)| r - k).collect();
    let inv_b = 1.0 / batch as f64;
    let loss = -elbo.iter().sum::<f64>() * inv_b;

    // d loss / d logits = −(x − σ(ℓ)) / B
    let mut d_logits = Tensor2::zeros(batch, model.input_dim());
    for ((d, &l), &xi) in d_logits
        .data_mut()
        .iter_mut()
        .zip(logits.data())
        .zip(x.data())
    {
        *d = (sigmoid(l) - xi) * inv_b;
    }
    let (decoder_grads, dz) = mlp_backward(&model.decoder, &dec_tape, &d_logits)?;

    let mut d_mu = dz.clone();
    let mut d_log_sigma = Tensor2::zeros(batch, m);
    for k in 0..batch * m {
        let (mu_k, s_k, e_k, raw_k) = (
            mu.data()[k],
            sigma.data()[k],
            noise.data()[k],
            raw_log_sigma.data()[k],
        );
        d_mu.data_mut()[k] += mu_k * inv_b;
        let inside = (LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(&raw_k);
        d_log_sigma.data_mut()[k] = if inside {
            dz.data()[k] * s_k * e_k + (s_k * s_k - 1.0) * inv_b
        } else {
            0.0
        };
    }

    let (mu_grads, dh_mu) = model.mu_head.backward(&h, &d_mu, true)?;
    let (ls_grads, dh_ls) = model.log_sigma_head.backward(&h, &d_log_sigma, true)?;
    let mut dh = dh_mu.expect("requested");
    for (a, b) in dh
        .data_mut()
        .iter_mut()
        .zip(dh_ls.expect("requested").data())
    {
        *a += b;
    }
    let body_grads = mlp_backward_params(&model.encoder_body, &body_tape, &dh)?;

    Ok(ElboOutput {
        elbo,
        reconstruction,
        kl,
        loss,
        grads: VaeGrads {
            encoder_body: body_grads,
            mu_head: mu_grads,
            log_sigma_head: ls_grads,
            decoder: decoder_grads,
        },
    })
}

/// Per-input one-sample ELBO without the backward pass.
pub fn elbo_values(model: &VaeModel, x: &Tensor2, noise: &Tensor2) -> Result<Vec<f64>> {
    let post = encode_batch(model, x)?;
    if noise.shape() != post.mu.shape() {
        return Err(Error::shape(
            "elbo_values",
            format!("noise {}x{}", x.rows(), model.latent_dim()),
            format!("{}x{}", noise.rows(), noise.cols()),
        ));
    }
    let mut z = post.mu.clone();
    for ((zk, ls), e) in z
        .data_mut()
        .iter_mut()
        .zip(post.log_sigma.data())
        .zip(noise.data())
    {
        *zk += ls.exp() * e;
    }
    let logits = model.decode_logits(&z)?;
    Ok((0..x.rows())
        .map(|i| {
            bernoulli_loglik(logits.row(i), x.row(i))
                - kl_row(post.mu.row(i), post.log_sigma.row(i))
        })
        .collect())
}

/// Importance-sampled `log p̂(x)` with the posterior as proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceEstimate {
    /// `log (1/N) Σᵢ exp(log_terms[i])`.
    pub log_marginal: f64,
    /// `log p(x|zᵢ) + log p(zᵢ) − log q(zᵢ|x)` for each draw.
    pub log_terms: Vec<f64>,
}

/// Draws `n` reparameterized codes from `q(z|x)`; returns the codes and the
/// standard-normal noise that produced them.
pub(crate) fn sample_posterior(
    p: &PosteriorParams,
    n: usize,
    rng: &mut (impl Rng + ?Sized),
) -> (Tensor2, Tensor2) {
    let m = p.mu.len();
    let mut noise = Tensor2::zeros(n, m);
    for v in noise.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    let sigma = p.sigma();
    let mut z = Tensor2::zeros(n, m);
    for i in 0..n {
        let (e, zi) = (noise.row(i).to_vec(), z.row_mut(i));
        for j in 0..m {
            zi[j] = p.mu[j] + sigma[j] * e[j];
        }
    }
    (z, noise)
}

/// `log p(x|zᵢ)` for `n` draws `zᵢ ~ q(z|x)`.
pub fn posterior_logliks(
    model: &VaeModel,
    x: &[f64],
    n: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Vec<f64>> {
    let p = encode(model, x)?;
    let (z, _) = sample_posterior(&p, n, rng);
    decode_logliks(model, &z, x)
}

pub fn importance_log_marginal(
    model: &VaeModel,
    x: &[f64],
    n: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<ImportanceEstimate> {
    if n == 0 {
        return Err(Error::Contract("importance sampling needs N >= 1".into()));
    }
    let p = encode(model, x)?;
    let (z, noise) = sample_posterior(&p, n, rng);
    let logliks = decode_logliks(model, &z, x)?;
    let log_sigma_sum: f64 = p.log_sigma.iter().sum();
    let log_terms: Vec<f64> = (0..n)
        .map(|i| {
            let log_q =
                -log_sigma_sum - 0.5 * noise.row(i).iter().map(|e| e * e + LN_2PI).sum::<f64>();
            logliks[i] + log_standard_normal(z.row(i)) - log_q
        })
        .collect();
    Ok(ImportanceEstimate {
        log_marginal: log_mean_exp(&log_terms),
        log_terms,
    })
}

/// `log((1/N) Σ exp(vᵢ))`, shifted by the maximum.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / values.len() as f64).ln()
}
