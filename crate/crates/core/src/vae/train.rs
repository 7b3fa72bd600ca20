use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::VaeModel;
use super::objective::{elbo, elbo_values};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState};
use crate::rng;
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch training trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean one-sample ELBO over the epoch's batches, in order. Entry 0 is
    /// measured on the untrained model before any update.
    pub epoch_elbo: Vec<f64>,
}

/// Mean one-sample ELBO over `data`, evaluated in chunks without updating.
pub fn mean_elbo(model: &VaeModel, data: &Tensor2, rng: &mut impl Rng) -> Result<f64> {
    const CHUNK: usize = 500;
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.rows()).collect();
    for chunk in idx.chunks(CHUNK) {
        let x = data.select_rows(chunk);
        let noise = normal_matrix(chunk.len(), model.latent_dim(), rng);
        total += elbo_values(model, &x, &noise)?.iter().sum::<f64>();
    }
    Ok(total / data.rows() as f64)
}

pub(crate) fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2 {
    let mut t = Tensor2::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    t
}

/// Mini-batch Adam on the negated ELBO. Constrained layers are projected
/// after every update, so every forward pass sees projected weights.
pub fn train(
    mut model: VaeModel,
    data: &Tensor2,
    config: &TrainConfig,
) -> Result<(VaeModel, TrainReport)> {
    config.validate()?;
    if data.rows() == 0 {
        return Err(Error::Contract("training set is empty".into()));
    }
    if data.cols() != model.input_dim() {
        return Err(Error::shape("train", model.input_dim(), data.cols()));
    }
    let mut rng = rng::seeded(config.seed);
    let mut adam = AdamState::new(config.adam, &model.param_sizes());
    let mut report = TrainReport {
        epoch_elbo: vec![mean_elbo(&model, data, &mut rng::stream(config.seed, 1))?],
    };
    let mut order: Vec<usize> = (0..data.rows()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let x = data.select_rows(batch);
            let noise = normal_matrix(batch.len(), model.latent_dim(), &mut rng);
            let out = elbo(&model, &x, &noise)?;
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
            model.project();
        }
        report.epoch_elbo.push(sum / data.rows() as f64);
    }
    Ok((model, report))
}
