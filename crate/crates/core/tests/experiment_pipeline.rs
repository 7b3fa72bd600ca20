use std::fs;
use std::path::{Path, PathBuf};

use lipvae::experiment::{Command, Experiment, ExperimentConfig, Runner, SummaryRow};
use lipvae::scores::{ScoreKind, ScoreReport};
use lipvae::vae::VaeModel;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn config(out: &Path, command: &str) -> ExperimentConfig {
    let f = fixtures();
    let text = serde_json::json!({
        "command": command,
        "output_dir": out.join("out"),
        "seeds": [0, 1],
        "model": {"input_dim": 36, "latent_dim": 2, "encoder_hidden": [16], "decoder_hidden": [16],
                  "encoder_lipschitz": 1.0, "decoder_lipschitz": 3.0},
        "training": {"epochs": 3, "batch_size": 16},
        "sampling": {"posterior_samples": 8, "importance_samples": 16},
        "entropy_inputs": 20,
        "data": {
            "train": {"kind": "idx", "name": "tiny01", "classes": [0, 1],
                      "images": f.join("tiny-train-images-idx3-ubyte"),
                      "labels": f.join("tiny-train-labels-idx1-ubyte")},
            "inlier_test": {"kind": "idx", "name": "tiny01_test", "classes": [0, 1],
                            "images": f.join("tiny-test-images-idx3-ubyte"),
                            "labels": f.join("tiny-test-labels-idx1-ubyte")},
            "outliers": [
                {"kind": "idx", "name": "tiny2", "exclude_classes": [0, 1],
                 "images": f.join("tiny-test-images-idx3-ubyte"),
                 "labels": f.join("tiny-test-labels-idx1-ubyte")},
                {"kind": "synthetic", "mode": "near_white", "n": 10, "side": 6}
            ]
        }
    })
    .to_string();
    ExperimentConfig::from_json(&text).unwrap()
}

fn run(dir: &Path, command: Command, name: &str) -> Experiment {
    let exp = Experiment::new(config(dir, name), dir.to_path_buf(), command).unwrap();
    Runner::new(&exp).run().unwrap();
    exp
}

#[test]
fn eval_on_fixtures_reports_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let exp = run(dir.path(), Command::Eval, "eval");
    let text = fs::read_to_string(exp.output_dir().join("summary.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let rows: Vec<SummaryRow> = serde_json::from_value(v["summary"].clone()).unwrap();
    assert_eq!(rows.len(), ScoreKind::ALL.len() * 2);
    for r in &rows {
        assert_eq!(r.seeds, 2);
        assert!(r.auroc_ci.is_some());
        assert!((0.0..=100.0).contains(&r.auroc_mean));
    }
    assert_eq!(
        v["per_seed"].as_array().unwrap().len(),
        2 * ScoreKind::ALL.len() * 2
    );
    let report = ScoreReport::read_csv(
        &exp.output_dir()
            .join("scores/model/seed1/tiny2/hole_indicator.csv"),
        ScoreKind::HoleIndicator,
        "tiny2",
        8,
        0,
    )
    .unwrap();
    assert_eq!(report.values.len(), 6);
    assert!(report.labels.iter().all(|&l| l == 2));
}

#[test]
fn cached_models_are_the_trained_models() {
    let dir = tempfile::tempdir().unwrap();
    let exp = run(dir.path(), Command::Train, "train");
    let text = fs::read_to_string(exp.output_dir().join("train.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let models = v["models"].as_array().unwrap();
    assert_eq!(models.len(), 2);
    let a = VaeModel::load(Path::new(models[0]["model_file"].as_str().unwrap())).unwrap();
    let b = VaeModel::load(Path::new(models[1]["model_file"].as_str().unwrap())).unwrap();
    assert_ne!(a, b, "seeds must give different models");
    assert_eq!(a.encoder_budget().unwrap().total(), 1.0);
    let elbo = models[0]["epoch_elbo"].as_array().unwrap();
    assert_eq!(elbo.len(), 4);
    assert!(elbo[3].as_f64().unwrap() > elbo[0].as_f64().unwrap());
}

#[test]
fn score_command_reuses_models_from_train() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), Command::Train, "train");
    let models = dir.path().join("out/models");
    let before: Vec<_> = fs::read_dir(&models)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    let stamps: Vec<_> = before
        .iter()
        .map(|p| fs::metadata(p).unwrap().modified().unwrap())
        .collect();
    let exp = run(dir.path(), Command::Score, "score");
    let after: Vec<_> = fs::read_dir(&models)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(before.len(), after.len());
    for (p, t) in before.iter().zip(stamps) {
        assert_eq!(fs::metadata(p).unwrap().modified().unwrap(), t);
    }
    let text = fs::read_to_string(exp.output_dir().join("scores.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    // 2 seeds x 3 sets x 5 scores.
    assert_eq!(v["score_files"].as_array().unwrap().len(), 30);
}

#[test]
fn missing_dataset_is_a_descriptive_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), "eval");
    if let Some(d) = c.data.as_mut() {
        if let lipvae::experiment::DataSource::Idx { images, .. } = &mut d.train {
            *images = dir.path().join("absent-images");
        }
    }
    let exp = Experiment::new(c, dir.path().to_path_buf(), Command::Eval).unwrap();
    let e = Runner::new(&exp).run().unwrap_err().to_string();
    assert!(e.contains("absent-images"), "{e}");
}
