//! Config-driven experiments: training with a model cache, score reports,
//! detection summaries, the two ablations, the latent-norm study and the
//! sphere utilities.
//!
//! Every output depends only on the resolved config, so running the same
//! config twice rewrites byte-identical files.

mod config;
mod report;

pub use config::{
    Command, DataLoader, DataSettings, DataSource, Experiment, ExperimentConfig, TrainingSettings,
    Variant,
};
pub use report::{mean_and_interval, summarize, MetricRow, SummaryRow, CONFIDENCE};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hypersphere::{hvae_toy_train, write_surface_area_csv, SphereVae};
use crate::lipschitz::linf_distance;
use crate::metrics::{DetectionMetrics, LabeledScores};
use crate::rng;
use crate::scores::{
    kde_curve, model_entropy, sample_std, score_inputs, LatentKde, LatentVariableModel, ScoreKind,
    ScoreReport,
};
use crate::tensor::Tensor2;
use crate::vae::{train, TrainConfig, TrainReport, VaeModel, VaeSpec};
use report::{ensure_dir, write_json, write_rows};

/// A trained model as recorded in reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub variant: String,
    pub seed: u64,
    pub model_file: PathBuf,
    pub epoch_elbo: Vec<f64>,
}

/// Location of one written score file, relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub variant: String,
    pub seed: u64,
    pub dataset: String,
    pub score: ScoreKind,
    pub inputs: usize,
    pub file: PathBuf,
}

/// Per-(variant, seed, dataset) statistics of `‖μ(x)‖∞`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub variant: String,
    pub seed: u64,
    pub dataset: String,
    pub inputs: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    /// `‖μ(0)‖∞` for the all-zero image.
    pub zero_image_norm: f64,
    /// `max ‖μ(x) − μ(0)‖∞` over the dataset.
    pub max_distance_to_zero: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct NormRow<'a> {
    variant: &'a str,
    seed: u64,
    dataset: &'a str,
    input_index: usize,
    label: u32,
    linf_norm: f64,
    linf_distance_to_zero: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct KdeRow<'a> {
    variant: &'a str,
    seed: u64,
    dataset: &'a str,
    norm: f64,
    density: f64,
}

#[derive(Serialize)]
struct CacheKey<'a> {
    kind: &'static str,
    spec: serde_json::Value,
    training: &'a TrainingSettings,
    train: &'a DataSource,
    max_train: Option<usize>,
    data_seed: u64,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
enum ModelChoice {
    Vae(Variant),
    Sphere,
}

impl ModelChoice {
    fn name(&self) -> &str {
        match self {
            ModelChoice::Vae(v) => &v.name,
            ModelChoice::Sphere => "sphere",
        }
    }
}

/// Executes one experiment. Optional progress messages go to `progress`.
pub struct Runner<'a> {
    exp: &'a Experiment,
    loader: DataLoader,
    train_set: Option<Dataset>,
    progress: Box<dyn FnMut(&str) + 'a>,
}

impl<'a> Runner<'a> {
    pub fn new(exp: &'a Experiment) -> Self {
        Runner {
            exp,
            loader: DataLoader::default(),
            train_set: None,
            progress: Box::new(|_| {}),
        }
    }

    pub fn with_progress(mut self, progress: impl FnMut(&str) + 'a) -> Self {
        self.progress = Box::new(progress);
        self
    }

    fn config(&self) -> &'a ExperimentConfig {
        &self.exp.config
    }

    fn out(&self, name: impl AsRef<Path>) -> PathBuf {
        self.exp.output_dir().join(name)
    }

    /// Runs the command and returns the report files it wrote.
    pub fn run(mut self) -> Result<Vec<PathBuf>> {
        ensure_dir(&self.exp.output_dir())?;
        let config_file = self.out("config.json");
        write_json(&config_file, self.config())?;
        let mut files = vec![config_file];
        match self.exp.command() {
            Command::Train => files.extend(self.run_train()?),
            Command::Score => files.extend(self.run_score()?),
            Command::Eval => files.extend(self.run_eval()?),
            Command::AblateDecoder => files.extend(self.run_ablate_decoder()?),
            Command::AblateCompactness => files.extend(self.run_ablate_compactness()?),
            Command::LatentNorms => files.extend(self.run_latent_norms()?),
            Command::SphereArea => {
                let path = self.out("sphere_area.csv");
                write_surface_area_csv(&path, self.config().max_dim)?;
                files.push(path);
            }
            Command::SphereToy => files.extend(self.run_sphere_toy()?),
        }
        Ok(files)
    }

    fn train_set(&mut self) -> Result<&Dataset> {
        if self.train_set.is_none() {
            self.train_set = Some(self.exp.load_train(&mut self.loader)?);
        }
        Ok(self.train_set.as_ref().expect("just loaded"))
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.config().training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: rng::derive_seed(seed, "train"),
            adam: t.adam,
        }
    }

    fn cache_path(&self, choice: &ModelChoice, seed: u64) -> Result<PathBuf> {
        let data = self.config().data();
        let (kind, spec) = match choice {
            ModelChoice::Vae(v) => (
                crate::persist::GAUSSIAN_VAE_KIND,
                serde_json::to_value(v.apply(&self.config().model))?,
            ),
            ModelChoice::Sphere => (
                crate::hypersphere::SPHERE_VAE_KIND,
                serde_json::to_value(&self.config().sphere_model)?,
            ),
        };
        let key = CacheKey {
            kind,
            spec,
            training: &self.config().training,
            train: &self.exp.source(&data.train),
            max_train: data.max_train,
            data_seed: data.data_seed,
            seed,
        };
        let hash = rng::fnv1a(&serde_json::to_vec(&key)?);
        Ok(self.exp.cache_dir().join(format!("{kind}-{hash:016x}.bin")))
    }

    /// Loads the model from the cache, training and caching it first if
    /// needed.
    fn model(
        &mut self,
        choice: &ModelChoice,
        seed: u64,
    ) -> Result<(Box<dyn LatentVariableModel>, TrainedModel)> {
        let path = self.cache_path(choice, seed)?;
        let trace_path = path.with_extension("json");
        let cached = path.exists() && trace_path.exists();
        if !cached {
            (self.progress)(&format!("training {} (seed {seed})", choice.name()));
        }
        let config = self.train_config(seed);
        let init_seed = rng::derive_seed(seed, "init");
        let (model, trace): (Box<dyn LatentVariableModel>, TrainReport) = match (choice, cached) {
            (ModelChoice::Vae(_), true) => {
                (Box::new(VaeModel::load(&path)?), read_trace(&trace_path)?)
            }
            (ModelChoice::Sphere, true) => {
                (Box::new(SphereVae::load(&path)?), read_trace(&trace_path)?)
            }
            (ModelChoice::Vae(v), false) => {
                let spec: VaeSpec = v.apply(&self.config().model);
                let fresh = VaeModel::new(&spec, &mut rng::seeded(init_seed))?;
                let (m, trace) = train(fresh, &self.train_set()?.images, &config)?;
                store(&path, &trace_path, &trace, |p| m.save(p))?;
                (Box::new(m), trace)
            }
            (ModelChoice::Sphere, false) => {
                let fresh =
                    SphereVae::new(&self.config().sphere_model, &mut rng::seeded(init_seed))?;
                let (m, trace) = hvae_toy_train(fresh, &self.train_set()?.images, &config)?;
                store(&path, &trace_path, &trace, |p| m.save(p))?;
                (Box::new(m), trace)
            }
        };
        let record = TrainedModel {
            variant: choice.name().to_string(),
            seed,
            model_file: path,
            epoch_elbo: trace.epoch_elbo,
        };
        Ok((model, record))
    }

    fn vae_choices(&self) -> Vec<ModelChoice> {
        self.config()
            .variants
            .iter()
            .cloned()
            .map(ModelChoice::Vae)
            .collect()
    }

    fn run_train(&mut self) -> Result<Vec<PathBuf>> {
        let mut models = Vec::new();
        for choice in self.vae_choices() {
            for &seed in &self.config().seeds {
                models.push(self.model(&choice, seed)?.1);
            }
        }
        let path = self.out("train.json");
        write_json(
            &path,
            &serde_json::json!({ "config": self.config(), "models": models }),
        )?;
        Ok(vec![path])
    }

    /// Scores every set under `model`, writing one CSV per (set, score).
    fn score_sets(
        &mut self,
        model: &dyn LatentVariableModel,
        variant: &str,
        seed: u64,
        sets: &[&Dataset],
    ) -> Result<(Vec<Vec<ScoreReport>>, Vec<ScoreFile>)> {
        let cfg = self.config();
        let entropy = if cfg.scores.contains(&ScoreKind::Typicality) {
            let data_seed = cfg.data().data_seed;
            let sub = self
                .train_set()?
                .subsample(cfg.entropy_inputs, rng::derive_seed(data_seed, "entropy"));
            let n = cfg.sampling.importance_samples;
            Some(model_entropy(
                model,
                &sub.images,
                n,
                rng::derive_seed(seed, "entropy"),
            )?)
        } else {
            None
        };
        let mut reports = Vec::new();
        let mut files = Vec::new();
        for set in sets {
            (self.progress)(&format!(
                "scoring {} on {} (seed {seed})",
                variant, set.name
            ));
            let score_seed = rng::derive_seed(seed, &format!("score/{}", set.name));
            let values = score_inputs(
                model,
                &set.images,
                &cfg.scores,
                &cfg.sampling,
                entropy,
                score_seed,
            )?;
            let dir = PathBuf::from("scores")
                .join(variant)
                .join(format!("seed{seed}"))
                .join(&set.name);
            ensure_dir(&self.out(&dir))?;
            let mut per_set = Vec::new();
            for (kind, v) in cfg.scores.iter().zip(values) {
                let samples = match kind {
                    ScoreKind::HoleIndicator | ScoreKind::StdsOfLls => {
                        cfg.sampling.posterior_samples
                    }
                    _ => cfg.sampling.importance_samples,
                };
                let report = ScoreReport::new(
                    *kind,
                    set.name.clone(),
                    samples,
                    score_seed,
                    set.labels.clone(),
                    v,
                )?;
                let file = dir.join(format!("{}.csv", kind.name()));
                report.write_csv(&self.out(&file))?;
                files.push(ScoreFile {
                    variant: variant.to_string(),
                    seed,
                    dataset: set.name.clone(),
                    score: *kind,
                    inputs: set.len(),
                    file,
                });
                per_set.push(report);
            }
            reports.push(per_set);
        }
        Ok((reports, files))
    }

    fn run_score(&mut self) -> Result<Vec<PathBuf>> {
        let (inliers, outliers) = self.exp.load_eval_sets(&mut self.loader)?;
        let sets: Vec<&Dataset> = std::iter::once(&inliers).chain(&outliers).collect();
        let mut models = Vec::new();
        let mut files = Vec::new();
        for choice in self.vae_choices() {
            for &seed in &self.config().seeds {
                let (model, record) = self.model(&choice, seed)?;
                files.extend(
                    self.score_sets(model.as_ref(), choice.name(), seed, &sets)?
                        .1,
                );
                models.push(record);
            }
        }
        let path = self.out("scores.json");
        write_json(
            &path,
            &serde_json::json!({ "config": self.config(), "models": models, "score_files": files }),
        )?;
        Ok(vec![path])
    }

    /// Scores the inlier set against every outlier set for each model and
    /// seed, returning per-seed metric rows in (model, seed, set, score)
    /// order.
    fn evaluate(
        &mut self,
        choices: &[ModelChoice],
        inliers: &Dataset,
        outliers: &[Dataset],
    ) -> Result<(Vec<MetricRow>, Vec<TrainedModel>, Vec<ScoreFile>)> {
        let sets: Vec<&Dataset> = std::iter::once(inliers).chain(outliers).collect();
        let (mut rows, mut models, mut files) = (Vec::new(), Vec::new(), Vec::new());
        for choice in choices {
            for &seed in &self.config().seeds {
                let (model, record) = self.model(choice, seed)?;
                let (reports, written) =
                    self.score_sets(model.as_ref(), choice.name(), seed, &sets)?;
                for (set, per_set) in outliers.iter().zip(&reports[1..]) {
                    for (inl, out) in reports[0].iter().zip(per_set) {
                        let labeled = LabeledScores::new(inl.values.clone(), out.values.clone())?;
                        let m = DetectionMetrics::of(&labeled);
                        rows.push(MetricRow {
                            variant: choice.name().to_string(),
                            seed,
                            score: out.score,
                            dataset: set.name.clone(),
                            inliers: inliers.len(),
                            outliers: set.len(),
                            auroc: m.auroc,
                            auprc: m.auprc,
                            fpr80: m.fpr80,
                        });
                    }
                }
                models.push(record);
                files.extend(written);
            }
        }
        Ok((rows, models, files))
    }

    fn write_benchmark(
        &self,
        rows: &[MetricRow],
        models: &[TrainedModel],
        files: &[ScoreFile],
    ) -> Result<(Vec<SummaryRow>, Vec<PathBuf>)> {
        let summary = summarize(rows)?;
        let metrics_csv = self.out("metrics.csv");
        let summary_csv = self.out("summary.csv");
        let summary_json = self.out("summary.json");
        write_rows(&metrics_csv, rows)?;
        write_rows(&summary_csv, &summary)?;
        write_json(
            &summary_json,
            &serde_json::json!({
                "config": self.config(),
                "confidence": CONFIDENCE,
                "models": models,
                "score_files": files,
                "per_seed": rows,
                "summary": summary,
            }),
        )?;
        Ok((summary, vec![metrics_csv, summary_csv, summary_json]))
    }

    fn run_eval(&mut self) -> Result<Vec<PathBuf>> {
        let (inliers, outliers) = self.exp.load_eval_sets(&mut self.loader)?;
        let (rows, models, files) = self.evaluate(&self.vae_choices(), &inliers, &outliers)?;
        Ok(self.write_benchmark(&rows, &models, &files)?.1)
    }

    fn run_sphere_toy(&mut self) -> Result<Vec<PathBuf>> {
        let (inliers, outliers) = self.exp.load_eval_sets(&mut self.loader)?;
        let (rows, models, files) = self.evaluate(&[ModelChoice::Sphere], &inliers, &outliers)?;
        Ok(self.write_benchmark(&rows, &models, &files)?.1)
    }

    fn run_ablate_decoder(&mut self) -> Result<Vec<PathBuf>> {
        let cfg = self.config();
        let base = cfg.variants.first().expect("resolve fills variants");
        let choices: Vec<ModelChoice> = cfg
            .decoder_budgets
            .iter()
            .map(|&m| {
                ModelChoice::Vae(Variant {
                    name: format!("decoder_m{m}"),
                    encoder_lipschitz: base.encoder_lipschitz,
                    decoder_lipschitz: Some(m),
                })
            })
            .collect();
        let (inliers, outliers) = self.exp.load_eval_sets(&mut self.loader)?;
        let (rows, models, files) = self.evaluate(&choices, &inliers, &outliers)?;
        let (summary, mut written) = self.write_benchmark(&rows, &models, &files)?;
        let table: Vec<(String, &SummaryRow)> = summary
            .iter()
            .map(|s| {
                let m = cfg
                    .decoder_budgets
                    .iter()
                    .find(|&&m| s.variant == format!("decoder_m{m}"))
                    .expect("every row comes from a budget");
                (m.to_string(), s)
            })
            .collect();
        let path = self.out("ablate_decoder.csv");
        write_setting_table(&path, "decoder_m", &table)?;
        written.push(path);
        Ok(written)
    }

    fn run_ablate_compactness(&mut self) -> Result<Vec<PathBuf>> {
        let cfg = self.config();
        let data = cfg.data();
        let mut scaled = Vec::new();
        for &factor in &cfg.intensity_factors {
            for source in &data.outliers {
                let s = DataSource::Scaled {
                    name: None,
                    source: Box::new(source.clone()),
                    factor,
                };
                scaled.push((factor, s));
            }
        }
        let (inliers, _) = self.exp.load_eval_sets(&mut self.loader)?;
        let outliers = scaled
            .iter()
            .map(|(_, s)| {
                let d = self.loader.load(&self.exp.source(s))?;
                Ok(match data.max_eval {
                    Some(max) => {
                        d.subsample(max, rng::derive_seed(data.data_seed, "eval/compactness"))
                    }
                    None => d,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (rows, models, files) = self.evaluate(&self.vae_choices(), &inliers, &outliers)?;
        let (summary, mut written) = self.write_benchmark(&rows, &models, &files)?;
        let table: Vec<(String, &SummaryRow)> = summary
            .iter()
            .map(|s| {
                let factor = scaled
                    .iter()
                    .find(|(_, src)| src.name() == s.dataset)
                    .map(|(f, _)| *f)
                    .expect("every row comes from a scaled set");
                (factor.to_string(), s)
            })
            .collect();
        let path = self.out("ablate_compactness.csv");
        write_setting_table(&path, "factor", &table)?;
        written.push(path);
        Ok(written)
    }

    fn run_latent_norms(&mut self) -> Result<Vec<PathBuf>> {
        let (inliers, outliers) = self.exp.load_eval_sets(&mut self.loader)?;
        let sets: Vec<&Dataset> = std::iter::once(&inliers).chain(&outliers).collect();
        let cfg = self.config();
        let mut norms_csv = csv_writer(&self.out("latent_norms.csv"))?;
        let mut kde_csv = csv_writer(&self.out("latent_kde.csv"))?;
        let mut stats = Vec::new();
        let mut models = Vec::new();
        for choice in self.vae_choices() {
            for &seed in &cfg.seeds {
                let (model, record) = self.model(&choice, seed)?;
                models.push(record);
                let zero = model.posterior_means(&Tensor2::zeros(1, model.input_dim()))?;
                let zero_mu = zero.row(0);
                let zero_norm = linf_norm(zero_mu);
                let mut per_set = Vec::new();
                for set in &sets {
                    let mu = model.posterior_means(&set.images)?;
                    let norms: Vec<f64> = mu.iter_rows().map(linf_norm).collect();
                    let dists: Vec<f64> =
                        mu.iter_rows().map(|r| linf_distance(r, zero_mu)).collect();
                    for (i, (n, d)) in norms.iter().zip(&dists).enumerate() {
                        norms_csv.serialize(NormRow {
                            variant: choice.name(),
                            seed,
                            dataset: &set.name,
                            input_index: i,
                            label: set.labels[i],
                            linf_norm: *n,
                            linf_distance_to_zero: *d,
                        })?;
                    }
                    stats.push(norm_stats(
                        choice.name(),
                        seed,
                        &set.name,
                        &norms,
                        &dists,
                        zero_norm,
                    )?);
                    per_set.push((set.name.as_str(), norms));
                }
                let grid = kde_grid(&per_set, cfg.kde_points)?;
                for (name, norms) in &per_set {
                    let density = if norms.len() >= 2 {
                        kde_curve(norms, &grid)?
                    } else {
                        vec![0.0; grid.len()]
                    };
                    for (g, p) in grid.iter().zip(density) {
                        kde_csv.serialize(KdeRow {
                            variant: choice.name(),
                            seed,
                            dataset: name,
                            norm: *g,
                            density: p,
                        })?;
                    }
                }
            }
        }
        norms_csv
            .flush()
            .map_err(|e| Error::io(self.out("latent_norms.csv"), e))?;
        kde_csv
            .flush()
            .map_err(|e| Error::io(self.out("latent_kde.csv"), e))?;
        let json = self.out("latent_norms.json");
        write_json(
            &json,
            &serde_json::json!({ "config": cfg, "models": models, "datasets": stats }),
        )?;
        Ok(vec![
            self.out("latent_norms.csv"),
            self.out("latent_kde.csv"),
            json,
        ])
    }
}

/// Resolves, runs and reports one command from a config file.
pub fn run_config_file(path: &Path, command: Command) -> Result<Vec<PathBuf>> {
    let exp = Experiment::load(path, command)?;
    Runner::new(&exp).run()
}

fn read_trace(path: &Path) -> Result<TrainReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

/// Writes the model and its trace through temporary names, so an
/// interrupted run never leaves a half-written cache entry.
fn store(
    path: &Path,
    trace_path: &Path,
    trace: &TrainReport,
    save: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    let tmp = path.with_extension("bin.partial");
    save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    let tmp_trace = trace_path.with_extension("json.partial");
    write_json(&tmp_trace, trace)?;
    fs::rename(&tmp_trace, trace_path).map_err(|e| Error::io(trace_path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn linf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn norm_stats(
    variant: &str,
    seed: u64,
    dataset: &str,
    norms: &[f64],
    dists: &[f64],
    zero_image_norm: f64,
) -> Result<NormStats> {
    let n = norms.len() as f64;
    Ok(NormStats {
        variant: variant.to_string(),
        seed,
        dataset: dataset.to_string(),
        inputs: norms.len(),
        min: norms.iter().copied().fold(f64::INFINITY, f64::min),
        max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: norms.iter().sum::<f64>() / n,
        std: if norms.len() >= 2 {
            sample_std(norms)?
        } else {
            0.0
        },
        zero_image_norm,
        max_distance_to_zero: dists.iter().copied().fold(0.0, f64::max),
    })
}

/// Evenly spaced grid wide enough that every set's KDE decays to nothing
/// at both ends.
fn kde_grid(sets: &[(&str, Vec<f64>)], points: usize) -> Result<Vec<f64>> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut widest: f64 = 0.0;
    for (_, v) in sets {
        for &x in v {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        if v.len() >= 2 {
            let kde = LatentKde::fit(Tensor2::from_vec(v.len(), 1, v.clone())?)?;
            widest = widest.max(kde.bandwidth()[0]);
        }
    }
    let pad = 6.0 * widest.max(1e-3);
    let (lo, hi) = (lo - pad, hi + pad);
    let step = (hi - lo) / (points - 1) as f64;
    Ok((0..points).map(|i| lo + step * i as f64).collect())
}

fn write_setting_table(path: &Path, setting: &str, rows: &[(String, &SummaryRow)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        setting,
        "variant",
        "dataset",
        "score",
        "seeds",
        "auroc_mean",
        "auroc_ci",
        "auprc_mean",
        "auprc_ci",
        "fpr80_mean",
        "fpr80_ci",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (value, s) in rows {
        w.write_record([
            value.clone(),
            s.variant.clone(),
            s.dataset.clone(),
            s.score.name().to_string(),
            s.seeds.to_string(),
            s.auroc_mean.to_string(),
            opt(s.auroc_ci),
            s.auprc_mean.to_string(),
            opt(s.auprc_ci),
            s.fpr80_mean.to_string(),
            opt(s.fpr80_ci),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let text = r#"{
            "output_dir": "out",
            "seeds": [3, 4],
            "model": {"input_dim": 16, "latent_dim": 2, "encoder_hidden": [8], "decoder_hidden": [8],
                      "encoder_lipschitz": 1.0, "decoder_lipschitz": 3.0},
            "training": {"epochs": 2, "batch_size": 8},
            "sampling": {"posterior_samples": 8, "importance_samples": 16},
            "entropy_inputs": 10,
            "decoder_budgets": [1, 10],
            "intensity_factors": [1, 5],
            "kde_points": 64,
            "data": {
                "train": {"kind": "synthetic", "name": "train", "mode": "near_black", "n": 40, "side": 4, "delta": 0.5},
                "inlier_test": {"kind": "synthetic", "name": "test", "mode": "near_black", "n": 12, "side": 4, "delta": 0.5, "seed": 1},
                "outliers": [{"kind": "synthetic", "mode": "near_white", "n": 10, "side": 4, "seed": 2}]
            }
        }"#;
        let mut c = ExperimentConfig::from_json(text).unwrap();
        c.output_dir = dir.join("out");
        c
    }

    fn run(dir: &Path, command: Command) -> Vec<PathBuf> {
        let exp = Experiment::new(tiny_config(dir), dir.to_path_buf(), command).unwrap();
        Runner::new(&exp).run().unwrap()
    }

    #[test]
    fn eval_emits_one_summary_row_per_score_and_set() {
        let dir = tempfile::tempdir().unwrap();
        let files = run(dir.path(), Command::Eval);
        let summary = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 1 + ScoreKind::ALL.len());
        let metrics = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 2 * ScoreKind::ALL.len());
        let first_data = summary.lines().nth(1).unwrap();
        assert!(first_data.starts_with("model,hole_indicator,near_white,2,"));
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap())
                .unwrap();
        assert_eq!(json["config"]["command"], "eval");
        assert_eq!(json["config"]["seeds"], serde_json::json!([3, 4]));
        assert!(files.iter().all(|f| f.exists()));
        let report = dir.path().join("out/scores/model/seed3/near_white/nll.csv");
        assert_eq!(fs::read_to_string(report).unwrap().lines().count(), 11);
    }

    #[test]
    fn reruns_are_byte_identical_and_reuse_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let first = run(dir.path(), Command::AblateCompactness);
        let snapshot: Vec<Vec<u8>> = first.iter().map(|f| fs::read(f).unwrap()).collect();
        let cached = fs::read_dir(dir.path().join("out/models")).unwrap().count();
        assert_eq!(cached, 2 * 2 * 2);
        let second = run(dir.path(), Command::AblateCompactness);
        assert_eq!(first, second);
        for (f, before) in second.iter().zip(&snapshot) {
            assert_eq!(&fs::read(f).unwrap(), before, "{} changed", f.display());
        }
        let table = fs::read_to_string(dir.path().join("out/ablate_compactness.csv")).unwrap();
        assert_eq!(table.lines().count(), 1 + 2 * 2);
        assert!(table
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("1,vanilla,near_white_x1,"));
    }

    #[test]
    fn decoder_ablation_has_one_row_per_budget_and_set() {
        let dir = tempfile::tempdir().unwrap();
        run(dir.path(), Command::AblateDecoder);
        let table = fs::read_to_string(dir.path().join("out/ablate_decoder.csv")).unwrap();
        let rows: Vec<&str> = table.lines().skip(1).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].starts_with("1,decoder_m1,near_white,hole_indicator,2,"));
        assert!(rows[1].starts_with("10,decoder_m10,"));
    }

    #[test]
    fn latent_norm_kde_integrates_to_one() {
        let dir = tempfile::tempdir().unwrap();
        run(dir.path(), Command::LatentNorms);
        let mut r = csv::Reader::from_path(dir.path().join("out/latent_kde.csv")).unwrap();
        let rows: Vec<(String, u64, String, f64, f64)> =
            r.deserialize().map(|x| x.unwrap()).collect();
        let (v, s, d) = (rows[0].0.clone(), rows[0].1, rows[0].2.clone());
        let curve: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.0 == v && r.1 == s && r.2 == d)
            .map(|r| (r.3, r.4))
            .collect();
        assert_eq!(curve.len(), 64);
        let area: f64 = curve
            .windows(2)
            .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
            .sum();
        assert!((area - 1.0).abs() < 1e-2, "area {area}");
        let norms = fs::read_to_string(dir.path().join("out/latent_norms.csv")).unwrap();
        assert_eq!(norms.lines().count(), 1 + 2 * 2 * (12 + 10));
    }

    #[test]
    fn sphere_area_and_train_commands() {
        let dir = tempfile::tempdir().unwrap();
        run(dir.path(), Command::SphereArea);
        let area = fs::read_to_string(dir.path().join("out/sphere_area.csv")).unwrap();
        assert_eq!(area.lines().count(), 41);
        run(dir.path(), Command::Train);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("out/train.json")).unwrap())
                .unwrap();
        assert_eq!(json["models"].as_array().unwrap().len(), 2);
        assert_eq!(json["models"][0]["epoch_elbo"].as_array().unwrap().len(), 3);
    }
}
