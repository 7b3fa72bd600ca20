//! Outlier scores and latent-hole probes. For every score a higher value
//! means "more likely an outlier".

use std::fs::File;
use std::path::Path;

use libdeflater::{CompressionLvl, Compressor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lipschitz::linf_distance;
use crate::rng;
use crate::tensor::Tensor2;
use crate::vae::{
    decode_logliks, encode, log_mean_exp, log_standard_normal, sample_posterior, VaeModel,
};

pub const DEFAULT_POSTERIOR_SAMPLES: usize = 128;
pub const DEFAULT_IMPORTANCE_SAMPLES: usize = 256;
pub const DEFAULT_AGG_EPSILON: f64 = 0.01;

/// Draws from `q(z|x)` with their decoder log-likelihoods and importance
/// log-weights, aligned by index.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSamples {
    /// `log p(x|zᵢ)`.
    pub logliks: Vec<f64>,
    /// `log p(x|zᵢ) + log p(zᵢ) − log q(zᵢ|x)`.
    pub log_terms: Vec<f64>,
}

/// What the scores need from a latent-variable model.
pub trait LatentVariableModel {
    fn input_dim(&self) -> usize;

    fn latent_dim(&self) -> usize;

    fn posterior_samples(
        &self,
        x: &[f64],
        n: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<PosteriorSamples>;

    /// Posterior location used for latent statistics (one row per input).
    fn posterior_means(&self, x: &Tensor2) -> Result<Tensor2>;

    /// Decoder means `E[x|z]` for a batch of codes.
    fn decode_means(&self, z: &Tensor2) -> Result<Tensor2>;
}

impl LatentVariableModel for VaeModel {
    fn input_dim(&self) -> usize {
        VaeModel::input_dim(self)
    }

    fn latent_dim(&self) -> usize {
        VaeModel::latent_dim(self)
    }

    fn posterior_samples(
        &self,
        x: &[f64],
        n: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<PosteriorSamples> {
        let p = encode(self, x)?;
        let (z, noise) = sample_posterior(&p, n, rng);
        let logliks = decode_logliks(self, &z, x)?;
        let log_sigma_sum: f64 = p.log_sigma.iter().sum();
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let log_terms = (0..n)
            .map(|i| {
                let log_q =
                    -log_sigma_sum - 0.5 * noise.row(i).iter().map(|e| e * e + ln_2pi).sum::<f64>();
                logliks[i] + log_standard_normal(z.row(i)) - log_q
            })
            .collect();
        Ok(PosteriorSamples { logliks, log_terms })
    }

    fn posterior_means(&self, x: &Tensor2) -> Result<Tensor2> {
        self.encode_mean(x)
    }

    fn decode_means(&self, z: &Tensor2) -> Result<Tensor2> {
        self.decode_mean(z)
    }
}

/// Sample standard deviation with divisor `N − 1`.
pub fn sample_std(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Contract(
            "a sample std needs at least two values".into(),
        ));
    }
    // Shifting by the first value keeps constant samples at exactly zero.
    let n = values.len() as f64;
    let shift = values[0];
    let mean = values.iter().map(|v| v - shift).sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - shift - mean).powi(2)).sum();
    Ok((ss / (n - 1.0)).sqrt())
}

fn require_two(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Contract(format!("this score needs N >= 2, got {n}")));
    }
    Ok(())
}

/// Spread of decoder log-likelihoods over posterior draws.
pub fn hole_indicator<M: LatentVariableModel + ?Sized>(
    model: &M,
    x: &[f64],
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<f64> {
    require_two(n)?;
    sample_std(&model.posterior_samples(x, n, rng)?.logliks)
}

/// Spread of the importance-sampling log-terms.
pub fn stds_of_lls<M: LatentVariableModel + ?Sized>(
    model: &M,
    x: &[f64],
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<f64> {
    require_two(n)?;
    sample_std(&model.posterior_samples(x, n, rng)?.log_terms)
}

/// Negated importance-sampled log marginal likelihood, in nats.
pub fn nll_score<M: LatentVariableModel + ?Sized>(
    model: &M,
    x: &[f64],
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("importance sampling needs N >= 1".into()));
    }
    Ok(-log_mean_exp(
        &model.posterior_samples(x, n, rng)?.log_terms,
    ))
}

/// `|NLL(x) − entropy|`, where `entropy` is the mean training-set NLL.
pub fn typicality_score<M: LatentVariableModel + ?Sized>(
    model: &M,
    x: &[f64],
    model_entropy: f64,
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<f64> {
    Ok((nll_score(model, x, n, rng)? - model_entropy).abs())
}

/// Mean NLL over `data`, each input on its own stream under `seed`.
pub fn model_entropy<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Tensor2,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if data.rows() == 0 {
        return Err(Error::Contract("entropy needs at least one input".into()));
    }
    let base = rng::derive_seed(seed, "entropy");
    let mut total = 0.0;
    for (i, x) in data.iter_rows().enumerate() {
        total += nll_score(model, x, n, &mut rng::stream(base, i as u64))?;
    }
    Ok(total / data.rows() as f64)
}

/// Raw-deflate size of the 8-bit quantized image, in bits per dimension.
pub fn compressed_bits_per_dim(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Contract("cannot compress an empty input".into()));
    }
    let bytes: Vec<u8> = x
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut compressor = Compressor::new(CompressionLvl::best());
    let mut out = vec![0u8; compressor.deflate_compress_bound(bytes.len())];
    let size = compressor
        .deflate_compress(&bytes, &mut out)
        .map_err(|e| Error::Contract(format!("compressor failed: {e}")))?;
    Ok(8.0 * size as f64 / x.len() as f64)
}

/// NLL in bits per dimension minus the compressed length per dimension.
pub fn input_complexity_score<M: LatentVariableModel + ?Sized>(
    model: &M,
    x: &[f64],
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<f64> {
    let nll_bits = nll_score(model, x, n, rng)? / (x.len() as f64 * std::f64::consts::LN_2);
    Ok(nll_bits - compressed_bits_per_dim(x)?)
}

/// Ratio of decoder-mean to latent-code distances, both in L∞.
pub fn f_lip_probe<M: LatentVariableModel + ?Sized>(
    model: &M,
    z1: &[f64],
    z2: &[f64],
) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::shape("f_lip_probe", z1.len(), z2.len()));
    }
    let dz = linf_distance(z1, z2);
    if dz == 0.0 {
        return Err(Error::Contract(
            "F_Lip is undefined for identical codes".into(),
        ));
    }
    let out = model.decode_means(&Tensor2::from_rows(&[z1.to_vec(), z2.to_vec()])?)?;
    Ok(linf_distance(out.row(0), out.row(1)) / dz)
}

/// Product-Gaussian kernel density over latent codes, with per-axis
/// bandwidths from Scott's rule.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentKde {
    points: Tensor2,
    bandwidth: Vec<f64>,
}

impl LatentKde {
    pub fn fit(points: Tensor2) -> Result<Self> {
        let (n, d) = points.shape();
        if n < 2 || d == 0 {
            return Err(Error::Contract("a KDE needs at least two points".into()));
        }
        let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
        let bandwidth = (0..d)
            .map(|j| {
                let col: Vec<f64> = points.iter_rows().map(|r| r[j]).collect();
                let s = sample_std(&col).expect("n >= 2");
                (if s > 0.0 { s } else { 1e-6 }) * factor
            })
            .collect();
        Ok(LatentKde { points, bandwidth })
    }

    pub fn with_bandwidth(points: Tensor2, bandwidth: Vec<f64>) -> Result<Self> {
        if bandwidth.len() != points.cols() || bandwidth.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::Contract(
                "one positive bandwidth per axis required".into(),
            ));
        }
        Ok(LatentKde { points, bandwidth })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.points.cols() {
            return Err(Error::shape(
                "LatentKde::log_density",
                self.points.cols(),
                z.len(),
            ));
        }
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let log_norm: f64 = self.bandwidth.iter().map(|h| h.ln() + 0.5 * ln_2pi).sum();
        let exps: Vec<f64> = self
            .points
            .iter_rows()
            .map(|p| {
                -0.5 * p
                    .iter()
                    .zip(z)
                    .zip(&self.bandwidth)
                    .map(|((pi, zi), h)| ((zi - pi) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        Ok(log_mean_exp(&exps) - log_norm)
    }
}

/// `max(−log p̂(z + ε), −log p̂(z − ε))` with `ε` added on every axis.
pub fn f_agg_probe(z: &[f64], kde: &LatentKde, epsilon: f64) -> Result<f64> {
    let plus: Vec<f64> = z.iter().map(|v| v + epsilon).collect();
    let minus: Vec<f64> = z.iter().map(|v| v - epsilon).collect();
    Ok((-kde.log_density(&plus)?).max(-kde.log_density(&minus)?))
}

/// One-dimensional Gaussian KDE with Scott's bandwidth, evaluated on `grid`.
pub fn kde_curve(values: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let points = Tensor2::from_vec(values.len(), 1, values.to_vec())?;
    let kde = LatentKde::fit(points)?;
    grid.iter()
        .map(|&g| kde.log_density(&[g]).map(f64::exp))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    HoleIndicator,
    StdsOfLls,
    Nll,
    Typicality,
    InputComplexity,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 5] = [
        ScoreKind::HoleIndicator,
        ScoreKind::StdsOfLls,
        ScoreKind::Nll,
        ScoreKind::Typicality,
        ScoreKind::InputComplexity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::HoleIndicator => "hole_indicator",
            ScoreKind::StdsOfLls => "stds_of_lls",
            ScoreKind::Nll => "nll",
            ScoreKind::Typicality => "typicality",
            ScoreKind::InputComplexity => "input_complexity",
        }
    }

    fn uses_importance(self) -> bool {
        !matches!(self, ScoreKind::HoleIndicator | ScoreKind::StdsOfLls)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSettings {
    /// Draws for the hole indicator and stds of LLs.
    #[serde(default = "default_posterior")]
    pub posterior_samples: usize,
    /// Draws for the NLL-based scores.
    #[serde(default = "default_importance")]
    pub importance_samples: usize,
}

fn default_posterior() -> usize {
    DEFAULT_POSTERIOR_SAMPLES
}
fn default_importance() -> usize {
    DEFAULT_IMPORTANCE_SAMPLES
}

impl Default for ScoreSettings {
    fn default() -> Self {
        ScoreSettings {
            posterior_samples: DEFAULT_POSTERIOR_SAMPLES,
            importance_samples: DEFAULT_IMPORTANCE_SAMPLES,
        }
    }
}

/// Scores every row of `images` for every requested kind. Input `i` draws
/// from its own stream under `seed`, and one set of draws is shared by all
/// kinds: the first `posterior_samples` feed the spread scores, the first
/// `importance_samples` the likelihood scores. Returns one vector per kind.
pub fn score_inputs<M: LatentVariableModel + ?Sized>(
    model: &M,
    images: &Tensor2,
    kinds: &[ScoreKind],
    settings: &ScoreSettings,
    model_entropy: Option<f64>,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let spread = kinds.iter().any(|k| !k.uses_importance());
    let likelihood = kinds.iter().any(|k| k.uses_importance());
    if spread {
        require_two(settings.posterior_samples)?;
    }
    if likelihood && settings.importance_samples == 0 {
        return Err(Error::Contract("importance sampling needs N >= 1".into()));
    }
    if kinds.contains(&ScoreKind::Typicality) && model_entropy.is_none() {
        return Err(Error::Contract("typicality needs the model entropy".into()));
    }
    let draws = match (spread, likelihood) {
        (true, true) => settings.posterior_samples.max(settings.importance_samples),
        (true, false) => settings.posterior_samples,
        (false, _) => settings.importance_samples,
    };
    let base = rng::derive_seed(seed, "scores");
    let mut out = vec![Vec::with_capacity(images.rows()); kinds.len()];
    for (i, x) in images.iter_rows().enumerate() {
        let s = model.posterior_samples(x, draws, &mut rng::stream(base, i as u64))?;
        let nll = if likelihood {
            -log_mean_exp(&s.log_terms[..settings.importance_samples])
        } else {
            f64::NAN
        };
        for (slot, kind) in out.iter_mut().zip(kinds) {
            let value = match kind {
                ScoreKind::HoleIndicator => sample_std(&s.logliks[..settings.posterior_samples])?,
                ScoreKind::StdsOfLls => sample_std(&s.log_terms[..settings.posterior_samples])?,
                ScoreKind::Nll => nll,
                ScoreKind::Typicality => (nll - model_entropy.expect("checked")).abs(),
                ScoreKind::InputComplexity => {
                    nll / (x.len() as f64 * std::f64::consts::LN_2) - compressed_bits_per_dim(x)?
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("{} for input {i}", kind.name())));
            }
            slot.push(value);
        }
    }
    Ok(out)
}

/// Per-input values of one score on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub score: ScoreKind,
    pub dataset: String,
    pub samples: usize,
    pub seed: u64,
    pub labels: Vec<u32>,
    pub values: Vec<f64>,
}

impl ScoreReport {
    pub fn new(
        score: ScoreKind,
        dataset: impl Into<String>,
        samples: usize,
        seed: u64,
        labels: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if labels.len() != values.len() {
            return Err(Error::shape("ScoreReport::new", values.len(), labels.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score value".into()));
        }
        Ok(ScoreReport {
            score,
            dataset: dataset.into(),
            samples,
            seed,
            labels,
            values,
        })
    }

    /// CSV with columns `input_index,label,score`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["input_index", "label", "score"])?;
        for (i, (l, v)) in self.labels.iter().zip(&self.values).enumerate() {
            w.write_record([i.to_string(), l.to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(
        path: &Path,
        score: ScoreKind,
        dataset: &str,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let (mut labels, mut values) = (Vec::new(), Vec::new());
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| {
                rec.get(k)
                    .ok_or_else(|| Error::format(path, format!("row {i} is short")))
            };
            let index: usize = parse(0)?
                .parse()
                .map_err(|_| Error::format(path, format!("row {i}: bad index")))?;
            if index != i {
                return Err(Error::format(
                    path,
                    format!("row {i}: index {index} out of order"),
                ));
            }
            labels.push(
                parse(1)?
                    .parse()
                    .map_err(|_| Error::format(path, format!("row {i}: bad label")))?,
            );
            values.push(
                parse(2)?
                    .parse()
                    .map_err(|_| Error::format(path, format!("row {i}: bad score")))?,
            );
        }
        ScoreReport::new(score, dataset, samples, seed, labels, values)
    }
}
