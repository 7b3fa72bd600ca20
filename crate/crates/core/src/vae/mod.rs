//! Gaussian-encoder, Bernoulli-decoder VAE: model, objective, training.

mod model;
mod objective;
mod train;

pub use model::{VaeModel, VaeSpec, LOG_SIGMA_MAX, LOG_SIGMA_MIN};
pub use objective::{
    bernoulli_loglik, decode_loglik, decode_logliks, elbo, elbo_values, encode, encode_batch,
    importance_log_marginal, kl_gaussian_std, log_mean_exp, log_standard_normal, posterior_logliks,
    reparameterize, ElboOutput, ImportanceEstimate, PosteriorBatch, PosteriorParams, VaeGrads,
};
pub use train::{mean_elbo, train, TrainConfig, TrainReport};

pub(crate) use model::{sigmoid, softplus};
pub(crate) use objective::sample_posterior;
#[cfg(test)]
use train::normal_matrix;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{relative_error, FD_STEP};
    use crate::rng::seeded;
    use crate::tensor::Tensor2;

    fn toy_spec(enc: Option<f64>, dec: Option<f64>) -> VaeSpec {
        VaeSpec {
            input_dim: 5,
            latent_dim: 2,
            encoder_hidden: vec![6],
            decoder_hidden: vec![4],
            encoder_lipschitz: enc,
            decoder_lipschitz: dec,
            group_size: 2,
        }
    }

    fn toy_batch() -> Tensor2 {
        Tensor2::from_rows(&[
            vec![0.1, 0.9, 0.5, 0.0, 1.0],
            vec![0.7, 0.2, 0.3, 0.8, 0.4],
            vec![1.0, 1.0, 0.0, 0.25, 0.6],
        ])
        .unwrap()
    }

    fn zero_model(spec: &VaeSpec) -> VaeModel {
        let mut m = VaeModel::new(spec, &mut seeded(0)).unwrap();
        for p in m.params_mut() {
            p.fill(0.0);
        }
        m
    }

    #[test]
    fn zero_weights_give_bias_posterior() {
        let spec = toy_spec(None, None);
        let mut m = zero_model(&spec);
        m.mu_head.bias_mut().copy_from_slice(&[0.3, -0.2]);
        m.log_sigma_head.bias_mut().copy_from_slice(&[0.5, -9.0]);
        let p = encode(&m, &[0.2; 5]).unwrap();
        assert_eq!(p.mu, vec![0.3, -0.2]);
        assert_eq!(p.log_sigma, vec![0.5, LOG_SIGMA_MIN]);
        assert_eq!(p, encode(&m, &[0.2; 5]).unwrap());
    }

    #[test]
    fn reparameterize_examples() {
        let p = PosteriorParams {
            mu: vec![1.0, -2.0],
            log_sigma: vec![0.0, 0.0],
        };
        assert_eq!(reparameterize(&p, &[0.0, 0.0]).unwrap(), p.mu);
        assert_eq!(reparameterize(&p, &[1.0, 0.0]).unwrap(), vec![2.0, -2.0]);
        assert!(reparameterize(&p, &[1.0]).is_err());
    }

    #[test]
    fn reparameterized_draws_center_on_mu() {
        use rand_distr::{Distribution, StandardNormal};
        let p = PosteriorParams {
            mu: vec![0.4, -1.5],
            log_sigma: vec![-0.5, 0.7],
        };
        let mut rng = seeded(3);
        let n = 100_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let e: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z = reparameterize(&p, &e).unwrap();
            mean[0] += z[0] / n as f64;
            mean[1] += z[1] / n as f64;
        }
        for j in 0..2 {
            let tol = 3.0 * p.log_sigma[j].exp() / (n as f64).sqrt();
            assert!((mean[j] - p.mu[j]).abs() < tol, "{j}: {}", mean[j]);
        }
    }

    #[test]
    fn bernoulli_loglik_limits_and_direct_form() {
        let n = 5;
        let x = [0.0, 0.3, 1.0, 0.5, 0.9];
        let ll = bernoulli_loglik(&[0.0; 5], &x);
        assert!((ll - n as f64 * 0.5f64.ln()).abs() < 1e-12);
        let sat = bernoulli_loglik(&[800.0; 3], &[1.0; 3]);
        assert!(sat <= 0.0 && sat > -1e-300);

        // Direct definition, fine for moderate logits.
        let logits: [f64; 5] = [-3.2, 0.4, 2.5, -0.7, 1.1];
        let direct: f64 = logits
            .iter()
            .zip(&x)
            .map(|(&l, &xi)| {
                let s = 1.0 / (1.0 + (-l).exp());
                xi * s.ln() + (1.0 - xi) * (1.0 - s).ln()
            })
            .sum();
        assert!((bernoulli_loglik(&logits, &x) - direct).abs() < 1e-13);
    }

    #[test]
    fn kl_examples() {
        let zero = PosteriorParams {
            mu: vec![0.0, 0.0],
            log_sigma: vec![0.0, 0.0],
        };
        assert_eq!(kl_gaussian_std(&zero), 0.0);
        let shifted = PosteriorParams {
            mu: vec![1.0, 0.0],
            log_sigma: vec![0.0, 0.0],
        };
        assert!((kl_gaussian_std(&shifted) - 0.5).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn kl_is_nonnegative(mu in proptest::collection::vec(-5.0f64..5.0, 3),
                             ls in proptest::collection::vec(-6.0f64..2.0, 3)) {
            let p = PosteriorParams { mu, log_sigma: ls };
            proptest::prop_assert!(kl_gaussian_std(&p) >= 0.0);
        }

        #[test]
        fn log_mean_exp_is_stable(v in proptest::collection::vec(-1e5f64..0.0, 1..50)) {
            let r = log_mean_exp(&v);
            proptest::prop_assert!(r.is_finite());
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(r <= max + 1e-9);
        }
    }

    fn check_elbo_gradient(spec: &VaeSpec, seed: u64) {
        let mut model = VaeModel::new(spec, &mut seeded(seed)).unwrap();
        let x = toy_batch();
        let noise = normal_matrix(x.rows(), spec.latent_dim, &mut seeded(seed + 100));
        let out = elbo(&model, &x, &noise).unwrap();
        let analytic: Vec<Vec<f64>> = out.grads.slices().iter().map(|s| s.to_vec()).collect();
        let sizes = model.param_sizes();
        let mut worst = 0.0f64;
        for (t, &size) in sizes.iter().enumerate() {
            for k in 0..size {
                let orig = model.params_mut()[t][k];
                model.params_mut()[t][k] = orig + FD_STEP;
                let up = elbo(&model, &x, &noise).unwrap().loss;
                model.params_mut()[t][k] = orig - FD_STEP;
                let down = elbo(&model, &x, &noise).unwrap().loss;
                model.params_mut()[t][k] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(analytic[t][k], numeric));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        check_elbo_gradient(&toy_spec(None, None), 1);
        check_elbo_gradient(&toy_spec(Some(1.0), Some(3.0)), 2);
    }

    #[test]
    fn elbo_matches_its_parts() {
        let spec = toy_spec(None, None);
        let model = VaeModel::new(&spec, &mut seeded(4)).unwrap();
        let x = toy_batch();
        let noise = normal_matrix(3, 2, &mut seeded(5));
        let out = elbo(&model, &x, &noise).unwrap();
        assert_eq!(out.elbo, elbo_values(&model, &x, &noise).unwrap());
        for i in 0..3 {
            let p = encode(&model, x.row(i)).unwrap();
            let z = reparameterize(&p, noise.row(i)).unwrap();
            let want = decode_loglik(&model, &z, x.row(i)).unwrap() - kl_gaussian_std(&p);
            assert!((out.elbo[i] - want).abs() < 1e-12);
        }
        let mean = out.elbo.iter().sum::<f64>() / 3.0;
        assert!((out.loss + mean).abs() < 1e-12);
    }

    #[test]
    fn constant_decoder_gives_exact_marginal() {
        let spec = toy_spec(None, None);
        let mut model = VaeModel::new(&spec, &mut seeded(6)).unwrap();
        for layer in model.decoder.layers_mut() {
            let (w, b) = layer.params_mut();
            w.fill(0.0);
            b.fill(0.0);
        }
        // Posterior equal to the prior makes every importance weight exactly p(x).
        for head in [&mut model.mu_head, &mut model.log_sigma_head] {
            let (w, b) = head.params_mut();
            w.fill(0.0);
            b.fill(0.0);
        }
        let x = [0.2, 0.4, 0.6, 0.8, 1.0];
        for n in [1, 7, 64] {
            let est = importance_log_marginal(&model, &x, n, &mut seeded(n as u64)).unwrap();
            assert!((est.log_marginal - 5.0 * 0.5f64.ln()).abs() < 1e-9 * 5.0);
        }
    }

    #[test]
    fn single_importance_sample_is_single_sample_elbo_draw() {
        // With one draw the estimate is log p(x|z) + log p(z) − log q(z|x),
        // the Monte Carlo form of the ELBO under the same noise.
        use rand::Rng;
        let spec = toy_spec(None, None);
        let model = VaeModel::new(&spec, &mut seeded(7)).unwrap();
        let x = toy_batch();
        let xi = x.row(1);
        let est = importance_log_marginal(&model, xi, 1, &mut seeded(9)).unwrap();
        let mut rng = seeded(9);
        let noise: Vec<f64> = (0..2)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        let p = encode(&model, xi).unwrap();
        let z = reparameterize(&p, &noise).unwrap();
        let log_q: f64 = p
            .log_sigma
            .iter()
            .zip(&noise)
            .map(|(ls, e)| -0.5 * (2.0 * std::f64::consts::PI).ln() - ls - 0.5 * e * e)
            .sum();
        let want = decode_loglik(&model, &z, xi).unwrap() + log_standard_normal(&z) - log_q;
        assert!((est.log_marginal - want).abs() < 1e-12);
        assert_eq!(est.log_terms.len(), 1);
        assert!(importance_log_marginal(&model, xi, 0, &mut seeded(0)).is_err());
    }

    #[test]
    fn training_is_deterministic_and_improves_elbo() {
        let spec = toy_spec(Some(1.0), Some(3.0));
        let mut rng = seeded(11);
        let data = {
            use rand::Rng;
            let rows: Vec<Vec<f64>> = (0..64)
                .map(|i| {
                    let on = i % 2 == 0;
                    (0..5)
                        .map(|j| {
                            let base = if (j % 2 == 0) == on { 0.9 } else { 0.1 };
                            base + 0.05 * rng.random::<f64>()
                        })
                        .collect()
                })
                .collect();
            Tensor2::from_rows(&rows).unwrap()
        };
        let config = TrainConfig {
            epochs: 15,
            batch_size: 16,
            seed: 5,
            adam: crate::nn::AdamConfig {
                learning_rate: 1e-2,
                ..Default::default()
            },
        };
        let run = || {
            let model = VaeModel::new(&spec, &mut seeded(12)).unwrap();
            train(model, &data, &config).unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.epoch_elbo.len(), 16);
        assert!(
            ra.epoch_elbo.last().unwrap() > &ra.epoch_elbo[0],
            "{:?}",
            ra.epoch_elbo
        );
        for layer in a.encoder_body().layers().iter().chain(a.decoder().layers()) {
            assert!(crate::lipschitz::max_row_l1(layer.weight()) <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn nan_input_aborts_training() {
        let spec = toy_spec(None, None);
        let model = VaeModel::new(&spec, &mut seeded(1)).unwrap();
        let mut data = toy_batch();
        data.set(0, 0, f64::NAN);
        let config = TrainConfig {
            epochs: 1,
            batch_size: 3,
            seed: 0,
            adam: Default::default(),
        };
        assert!(train(model, &data, &config).is_err());
    }
}
