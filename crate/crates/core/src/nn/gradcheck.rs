//! Central finite-difference checks of hand-written backward passes.

use super::activation::{activation_apply, Activation};
use super::mlp::{mlp_backward, mlp_forward, MlpModel};
use crate::error::Result;
use crate::tensor::Tensor2;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Which entry produced `max_rel_error`.
    pub worst: String,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate of `point`.
pub fn numerical_gradient(point: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let plus = f(&x);
            x[i] = orig - step;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Fixed, input-independent weights for the scalar probe loss `Σ c_ij·y_ij`.
fn probe_weights(rows: usize, cols: usize) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|k| {
            let (i, j) = (k / cols, k % cols);
            (0.7 * i as f64 + 1.3 * j as f64 + 0.25).cos()
        })
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("sized above")
}

fn probe_loss(model: &MlpModel, x: &Tensor2, weights: &Tensor2) -> Result<f64> {
    let y = model.forward(x)?;
    Ok(y.data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum())
}

/// Compares [`mlp_backward`] against central differences of the probe loss,
/// over every parameter and every input entry.
pub fn finite_diff_check(model: &MlpModel, x: &Tensor2, tolerance: f64) -> Result<GradCheckReport> {
    let weights = probe_weights(x.rows(), model.out_dim());
    let (_, tape) = mlp_forward(model, x)?;
    let (grads, input_grad) = mlp_backward(model, &tape, &weights)?;

    let mut worst = (0.0f64, String::from("none"));
    let mut checked = 0;
    let mut record = |rel: f64, label: &dyn Fn() -> String| {
        checked += 1;
        if rel > worst.0 || rel.is_nan() {
            worst = (rel, label());
        }
    };

    let mut probe = model.clone();
    let analytic = grads.slices();
    let sizes = model.param_sizes();
    for (t, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = probe.params_mut()[t][j];
            probe.params_mut()[t][j] = orig + FD_STEP;
            let plus = probe_loss(&probe, x, &weights)?;
            probe.params_mut()[t][j] = orig - FD_STEP;
            let minus = probe_loss(&probe, x, &weights)?;
            probe.params_mut()[t][j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel = relative_error(analytic[t][j], numeric);
            record(rel, &|| format!("param tensor {t} entry {j}"));
        }
    }

    let numeric_input = numerical_gradient(x.data(), FD_STEP, |data| {
        let xi = Tensor2::from_vec(x.rows(), x.cols(), data.to_vec()).expect("same shape");
        probe_loss(model, &xi, &weights).unwrap_or(f64::NAN)
    });
    for (j, (&a, &n)) in input_grad.data().iter().zip(&numeric_input).enumerate() {
        record(relative_error(a, n), &|| format!("input entry {j}"));
    }

    Ok(GradCheckReport {
        passed: worst.0 < tolerance,
        max_rel_error: worst.0,
        checked,
        worst: worst.1,
    })
}

/// Smallest distance of any activation input from a non-differentiable point:
/// `|v|` for ReLU, the within-group gap between neighbours for GroupSort.
///
/// Finite differences are only meaningful when this exceeds the step size
/// by a comfortable margin.
pub fn min_kink_distance(model: &MlpModel, x: &Tensor2) -> Result<f64> {
    let mut h = x.clone();
    let mut min = f64::INFINITY;
    let n = model.layers().len();
    for (i, layer) in model.layers().iter().enumerate() {
        h = layer.forward(&h)?;
        if i + 1 == n && !model.activates_output() {
            break;
        }
        match model.activation() {
            Activation::Relu => {
                min = h.data().iter().fold(min, |m, v| m.min(v.abs()));
            }
            Activation::GroupSort { group_size } => {
                for group in h.data().chunks(group_size) {
                    let mut sorted = group.to_vec();
                    sorted.sort_by(f64::total_cmp);
                    for w in sorted.windows(2) {
                        min = min.min(w[1] - w[0]);
                    }
                }
            }
        }
        activation_apply(model.activation(), &mut h)?;
    }
    Ok(min)
}
