//! A VAE whose latent codes live on the 2-sphere, with a vMF posterior and
//! the uniform prior. Sampling uses the closed-form inverse CDF of the
//! vMF's axial component on S², so the reparameterization is exact and
//! differentiable in κ.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    mlp_backward, mlp_backward_params, mlp_forward, Activation, AdamState, LayerGrads, LinearLayer,
    MlpGrads, MlpModel,
};
use crate::persist::{read_model_file, write_model_file, LayerLayout, MlpLayout, ParamReader};
use crate::rng;
use crate::scores::{LatentVariableModel, PosteriorSamples};
use crate::tensor::Tensor2;
use crate::vae::{bernoulli_loglik, sigmoid, softplus, TrainConfig, TrainReport};

/// Ambient dimension of the latent sphere S².
pub const SPHERE_AMBIENT: usize = 3;
pub const SPHERE_VAE_KIND: &str = "sphere_vae";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereVaeSpec {
    pub input_dim: usize,
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: Vec<usize>,
}

fn default_encoder_hidden() -> Vec<usize> {
    vec![256, 128]
}
fn default_decoder_hidden() -> Vec<usize> {
    vec![128, 256]
}

impl SphereVaeSpec {
    pub fn mnist_like() -> Self {
        SphereVaeSpec {
            input_dim: 784,
            encoder_hidden: default_encoder_hidden(),
            decoder_hidden: default_decoder_hidden(),
        }
    }
}

/// `KL(vMF(μ, κ) ‖ Uniform(S²)) = κ coth κ − 1 + log κ − log sinh κ`.
pub fn kl_s2(kappa: f64) -> f64 {
    if kappa < 1e-3 {
        let k2 = kappa * kappa;
        return k2 / 6.0 - k2 * k2 / 60.0;
    }
    kappa / kappa.tanh() - 1.0 + kappa.ln() - log_sinh(kappa)
}

/// `d KL / d κ = 1/κ − κ / sinh² κ`.
pub fn kl_s2_derivative(kappa: f64) -> f64 {
    if kappa < 1e-3 {
        return kappa / 3.0 - kappa.powi(3) / 15.0;
    }
    let e = (-2.0 * kappa).exp();
    let denom = -(-2.0 * kappa).exp_m1();
    1.0 / kappa - 4.0 * kappa * e / (denom * denom)
}

fn log_sinh(kappa: f64) -> f64 {
    kappa + (-(-2.0 * kappa).exp_m1()).ln() - 2f64.ln()
}

/// Axial component `w = 1 + log(u + (1 − u) e^(−2κ)) / κ` for `u ∈ (0, 1]`,
/// and its derivative in κ.
pub fn s2_axial_sample(kappa: f64, u: f64) -> (f64, f64) {
    let e = (-2.0 * kappa).exp();
    let t = u + (1.0 - u) * e;
    let w = (1.0 + t.ln() / kappa).clamp(-1.0, 1.0);
    let dw = -t.ln() / (kappa * kappa) - 2.0 * (1.0 - u) * e / (kappa * t);
    (w, dw)
}

/// S² VAE with ReLU MLPs, μ = r / ‖r‖ and κ = softplus(c) + 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereVae {
    encoder_body: MlpModel,
    mu_head: LinearLayer,
    kappa_head: LinearLayer,
    decoder: MlpModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SphereLayout {
    encoder_body: MlpLayout,
    mu_head: LayerLayout,
    kappa_head: LayerLayout,
    decoder: MlpLayout,
}

/// Gradients laid out like [`SphereVae::params_mut`].
#[derive(Clone, Debug)]
pub struct SphereGrads {
    pub encoder_body: MlpGrads,
    pub mu_head: LayerGrads,
    pub kappa_head: LayerGrads,
    pub decoder: MlpGrads,
}

impl SphereGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder_body.slices();
        for head in [&self.mu_head, &self.kappa_head] {
            out.push(head.weight.data());
            out.push(&head.bias);
        }
        out.extend(self.decoder.slices());
        out
    }
}

#[derive(Clone, Debug)]
pub struct SphereElbo {
    pub elbo: Vec<f64>,
    pub loss: f64,
    pub grads: SphereGrads,
}

struct Posterior {
    mu: Vec<[f64; 3]>,
    norms: Vec<f64>,
    kappa: Vec<f64>,
}

/// Code on S² from the posterior `(μ, κ)` and two uniforms.
struct Draw {
    z: [f64; 3],
    z_local: [f64; 3],
    w: f64,
    dw_dkappa: f64,
    angle: f64,
}

fn draw(mu: &[f64; 3], kappa: f64, u_axial: f64, u_angle: f64) -> Draw {
    let (w, dw_dkappa) = s2_axial_sample(kappa, u_axial);
    let angle = 2.0 * PI * u_angle;
    let s = (1.0 - w * w).max(0.0).sqrt();
    let z_local = [w, s * angle.cos(), s * angle.sin()];
    let a = [1.0 - mu[0], -mu[1], -mu[2]];
    let q = dot(&a, &a);
    let z = if q < 1e-30 {
        z_local
    } else {
        let k = 2.0 * dot(&a, &z_local) / q;
        [
            z_local[0] - k * a[0],
            z_local[1] - k * a[1],
            z_local[2] - k * a[2],
        ]
    };
    Draw {
        z,
        z_local,
        w,
        dw_dkappa,
        angle,
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl SphereVae {
    pub fn new(spec: &SphereVaeSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.input_dim == 0 || spec.encoder_hidden.is_empty() {
            return Err(Error::Config(
                "sphere VAE needs an input dim and encoder layers".into(),
            ));
        }
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.encoder_hidden);
        let encoder_body = MlpModel::init(&widths, Activation::Relu, false, true, 1.0, rng)?;
        let h = *spec.encoder_hidden.last().expect("checked");
        let mu_head = LinearLayer::init(h, SPHERE_AMBIENT, 1.0, rng);
        let kappa_head = LinearLayer::init(h, 1, 1.0, rng);
        let mut widths = vec![SPHERE_AMBIENT];
        widths.extend(&spec.decoder_hidden);
        widths.push(spec.input_dim);
        let decoder = MlpModel::init(&widths, Activation::Relu, false, false, 1.0, rng)?;
        Ok(SphereVae {
            encoder_body,
            mu_head,
            kappa_head,
            decoder,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_body.in_dim()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder_body.params_mut();
        let (w, b) = self.mu_head.params_mut();
        out.push(w);
        out.push(b);
        let (w, b) = self.kappa_head.params_mut();
        out.push(w);
        out.push(b);
        out.extend(self.decoder.params_mut());
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut out = self.encoder_body.param_sizes();
        for head in [&self.mu_head, &self.kappa_head] {
            out.push(head.weight().data().len());
            out.push(head.bias().len());
        }
        out.extend(self.decoder.param_sizes());
        out
    }

    fn posterior_from(&self, h: &Tensor2) -> Result<(Posterior, Tensor2, Tensor2)> {
        let r = self.mu_head.forward(h)?;
        let c = self.kappa_head.forward(h)?;
        let mut post = Posterior {
            mu: Vec::with_capacity(h.rows()),
            norms: Vec::with_capacity(h.rows()),
            kappa: Vec::with_capacity(h.rows()),
        };
        for (ri, ci) in r.iter_rows().zip(c.iter_rows()) {
            let norm = (ri[0] * ri[0] + ri[1] * ri[1] + ri[2] * ri[2]).sqrt();
            if !(norm > 1e-12) || !norm.is_finite() {
                return Err(Error::NonFinite("sphere encoder direction".into()));
            }
            post.mu.push([ri[0] / norm, ri[1] / norm, ri[2] / norm]);
            post.norms.push(norm);
            post.kappa.push(softplus(ci[0]) + 1.0);
        }
        Ok((post, r, c))
    }

    /// Mean directions and concentrations for a batch.
    pub fn encode(&self, x: &Tensor2) -> Result<(Tensor2, Vec<f64>)> {
        let h = self.encoder_body.forward(x)?;
        let (post, _, _) = self.posterior_from(&h)?;
        let mut mu = Tensor2::zeros(x.rows(), SPHERE_AMBIENT);
        for (i, m) in post.mu.iter().enumerate() {
            mu.row_mut(i).copy_from_slice(m);
        }
        Ok((mu, post.kappa))
    }

    /// One-sample ELBO and its exact gradient. `uniforms` holds two values
    /// in `(0, 1]` per input: the axial and the angular draw.
    pub fn elbo(&self, x: &Tensor2, uniforms: &Tensor2) -> Result<SphereElbo> {
        let batch = x.rows();
        if uniforms.shape() != (batch, 2) {
            return Err(Error::shape(
                "SphereVae::elbo",
                format!("uniforms {batch}x2"),
                format!("{}x{}", uniforms.rows(), uniforms.cols()),
            ));
        }
        if batch == 0 {
            return Err(Error::Contract("elbo needs a non-empty batch".into()));
        }
        let (h, body_tape) = mlp_forward(&self.encoder_body, x)?;
        let (post, _, c) = self.posterior_from(&h)?;
        let draws: Vec<Draw> = (0..batch)
            .map(|i| {
                draw(
                    &post.mu[i],
                    post.kappa[i],
                    uniforms.get(i, 0),
                    uniforms.get(i, 1),
                )
            })
            .collect();
        let mut z = Tensor2::zeros(batch, SPHERE_AMBIENT);
        for (i, d) in draws.iter().enumerate() {
            z.row_mut(i).copy_from_slice(&d.z);
        }
        let (logits, dec_tape) = mlp_forward(&self.decoder, &z)?;
        let elbo: Vec<f64> = (0..batch)
            .map(|i| bernoulli_loglik(logits.row(i), x.row(i)) - kl_s2(post.kappa[i]))
            .collect();
        let inv_b = 1.0 / batch as f64;
        let loss = -elbo.iter().sum::<f64>() * inv_b;

        let mut d_logits = Tensor2::zeros(batch, self.input_dim());
        for ((d, &l), &xi) in d_logits
            .data_mut()
            .iter_mut()
            .zip(logits.data())
            .zip(x.data())
        {
            *d = (sigmoid(l) - xi) * inv_b;
        }
        let (decoder_grads, dz) = mlp_backward(&self.decoder, &dec_tape, &d_logits)?;

        let mut d_r = Tensor2::zeros(batch, SPHERE_AMBIENT);
        let mut d_c = Tensor2::zeros(batch, 1);
        for i in 0..batch {
            let g = [dz.get(i, 0), dz.get(i, 1), dz.get(i, 2)];
            let mu = &post.mu[i];
            let dr = &draws[i];
            let a = [1.0 - mu[0], -mu[1], -mu[2]];
            let q = dot(&a, &a);
            let (dz_local, d_mu) = if q < 1e-30 {
                (g, [0.0; 3])
            } else {
                let sa = dot(&a, &dr.z_local);
                let ga = dot(&g, &a);
                let dzl = [
                    g[0] - 2.0 * a[0] * ga / q,
                    g[1] - 2.0 * a[1] * ga / q,
                    g[2] - 2.0 * a[2] * ga / q,
                ];
                let mut dmu = [0.0; 3];
                for k in 0..3 {
                    let da = -2.0
                        * (g[k] * sa / q + ga * dr.z_local[k] / q - 2.0 * ga * sa * a[k] / (q * q));
                    dmu[k] = -da;
                }
                (dzl, dmu)
            };
            let s = (1.0 - dr.w * dr.w).max(0.0).sqrt();
            let mut dw = dz_local[0];
            if s > 1e-12 {
                dw -= (dz_local[1] * dr.angle.cos() + dz_local[2] * dr.angle.sin()) * dr.w / s;
            }
            let kappa = post.kappa[i];
            let d_kappa = dw * dr.dw_dkappa + inv_b * kl_s2_derivative(kappa);
            d_c.set(i, 0, d_kappa * sigmoid(c.get(i, 0)));
            let proj = dot(mu, &d_mu);
            for k in 0..3 {
                d_r.set(i, k, (d_mu[k] - mu[k] * proj) / post.norms[i]);
            }
        }
        let (mu_grads, dh_mu) = self.mu_head.backward(&h, &d_r, true)?;
        let (kappa_grads, dh_k) = self.kappa_head.backward(&h, &d_c, true)?;
        let mut dh = dh_mu.expect("requested");
        for (a, b) in dh
            .data_mut()
            .iter_mut()
            .zip(dh_k.expect("requested").data())
        {
            *a += b;
        }
        let body_grads = mlp_backward_params(&self.encoder_body, &body_tape, &dh)?;
        Ok(SphereElbo {
            elbo,
            loss,
            grads: SphereGrads {
                encoder_body: body_grads,
                mu_head: mu_grads,
                kappa_head: kappa_grads,
                decoder: decoder_grads,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let layout = SphereLayout {
            encoder_body: MlpLayout::of(&self.encoder_body),
            mu_head: LayerLayout::of(&self.mu_head),
            kappa_head: LayerLayout::of(&self.kappa_head),
            decoder: MlpLayout::of(&self.decoder),
        };
        let mut copy = self.clone();
        let params = copy.params_mut();
        let views: Vec<&[f64]> = params.iter().map(|p| &**p).collect();
        write_model_file(path, SPHERE_VAE_KIND, &layout, &views)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (layout, params): (SphereLayout, Vec<f64>) = read_model_file(path, SPHERE_VAE_KIND)?;
        let mut reader = ParamReader::new(&params);
        let encoder_body = layout.encoder_body.build(&mut reader)?;
        let mu_head = layout.mu_head.build(&mut reader)?;
        let kappa_head = layout.kappa_head.build(&mut reader)?;
        let decoder = layout.decoder.build(&mut reader)?;
        reader.finish()?;
        if mu_head.out_dim() != SPHERE_AMBIENT
            || kappa_head.out_dim() != 1
            || decoder.in_dim() != SPHERE_AMBIENT
            || mu_head.in_dim() != encoder_body.out_dim()
            || kappa_head.in_dim() != encoder_body.out_dim()
            || decoder.out_dim() != encoder_body.in_dim()
        {
            return Err(Error::format(path, "inconsistent sphere VAE structure"));
        }
        Ok(SphereVae {
            encoder_body,
            mu_head,
            kappa_head,
            decoder,
        })
    }
}

fn uniform_matrix(rows: usize, rng: &mut (impl Rng + ?Sized)) -> Tensor2 {
    let mut t = Tensor2::zeros(rows, 2);
    for v in t.data_mut() {
        *v = 1.0 - rng.random::<f64>();
    }
    t
}

impl LatentVariableModel for SphereVae {
    fn input_dim(&self) -> usize {
        SphereVae::input_dim(self)
    }

    fn latent_dim(&self) -> usize {
        SPHERE_AMBIENT
    }

    fn posterior_samples(
        &self,
        x: &[f64],
        n: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<PosteriorSamples> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("posterior_samples", self.input_dim(), x.len()));
        }
        let h = self.encoder_body.forward(&Tensor2::row_vector(x))?;
        let (post, _, _) = self.posterior_from(&h)?;
        let (mu, kappa) = (post.mu[0], post.kappa[0]);
        let u = uniform_matrix(n, rng);
        let mut z = Tensor2::zeros(n, SPHERE_AMBIENT);
        let mut ws = Vec::with_capacity(n);
        for i in 0..n {
            let d = draw(&mu, kappa, u.get(i, 0), u.get(i, 1));
            z.row_mut(i).copy_from_slice(&d.z);
            ws.push(d.w);
        }
        let logits = self.decoder.forward(&z)?;
        let logliks: Vec<f64> = logits.iter_rows().map(|l| bernoulli_loglik(l, x)).collect();
        // log p(z) − log q(z|x) = log sinh κ − log κ − κ μᵀz, and μᵀz = w.
        let log_ratio = log_sinh(kappa) - kappa.ln();
        let log_terms = logliks
            .iter()
            .zip(&ws)
            .map(|(ll, w)| ll + log_ratio - kappa * w)
            .collect();
        Ok(PosteriorSamples { logliks, log_terms })
    }

    fn posterior_means(&self, x: &Tensor2) -> Result<Tensor2> {
        Ok(self.encode(x)?.0)
    }

    fn decode_means(&self, z: &Tensor2) -> Result<Tensor2> {
        Ok(self.decoder.forward(z)?.map(sigmoid))
    }
}

/// Trains a sphere VAE with Adam on the negated one-sample ELBO.
pub fn hvae_toy_train(
    mut model: SphereVae,
    data: &Tensor2,
    config: &TrainConfig,
) -> Result<(SphereVae, TrainReport)> {
    config.validate()?;
    if data.rows() == 0 || data.cols() != model.input_dim() {
        return Err(Error::shape(
            "hvae_toy_train",
            model.input_dim(),
            data.cols(),
        ));
    }
    let mut rng = rng::seeded(config.seed);
    let mut adam = AdamState::new(config.adam, &model.param_sizes());
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut report = TrainReport::default();
    {
        let mut eval_rng = rng::stream(config.seed, 1);
        let u = uniform_matrix(data.rows(), &mut eval_rng);
        let out = model.elbo(data, &u)?;
        report.epoch_elbo.push(-out.loss);
    }
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let x = data.select_rows(batch);
            let u = uniform_matrix(batch.len(), &mut rng);
            let out = model.elbo(&x, &u)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_index,
                    loss: out.loss,
                });
            }
            sum += out.elbo.iter().sum::<f64>();
            let grads = out.grads.slices();
            adam.step(&mut model.params_mut(), &grads)?;
        }
        report.epoch_elbo.push(sum / data.rows() as f64);
    }
    Ok((model, report))
}
