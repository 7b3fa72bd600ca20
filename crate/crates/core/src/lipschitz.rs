//! Lipschitz control of MLP mappings under the L∞ metric.
//!
//! The ∞→∞ operator norm of a weight matrix is its largest row L1 norm, so
//! projecting every row onto the unit L1 ball makes the affine part of a
//! layer 1-Lipschitz. Multiplying by a per-layer scale `M^(1/K)` and using
//! 1-Lipschitz GroupSort activations gives an `M`-Lipschitz network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LinearLayer, MlpModel};
use crate::tensor::Tensor2;

/// Total constant `M` split evenly over `num_layers` layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBudget {
    total: f64,
    num_layers: usize,
}

impl LipschitzBudget {
    pub fn new(total: f64, num_layers: usize) -> Result<Self> {
        if !(total > 0.0 && total.is_finite()) || num_layers == 0 {
            return Err(Error::Contract(format!(
                "budget needs M > 0 and at least one layer, got M={total}, K={num_layers}"
            )));
        }
        Ok(LipschitzBudget { total, num_layers })
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn per_layer(&self) -> f64 {
        per_layer_scale(self.total, self.num_layers).expect("validated in new")
    }
}

/// Closest whole number to `√m + 2` (prior std 1, typical-set radius plus two
/// standard deviations), ties to even.
pub fn lipschitz_budget(latent_dim: usize) -> Result<u32> {
    if latent_dim == 0 {
        return Err(Error::Contract(
            "latent dimension must be at least 1".into(),
        ));
    }
    Ok(((latent_dim as f64).sqrt() + 2.0).round_ties_even() as u32)
}

/// `total^(1/K)`, so that `K` layers compose to `total`.
pub fn per_layer_scale(total: f64, num_layers: usize) -> Result<f64> {
    if !(total > 0.0 && total.is_finite()) || num_layers == 0 {
        return Err(Error::Contract(format!(
            "per-layer scale needs M > 0 and K >= 1, got M={total}, K={num_layers}"
        )));
    }
    Ok(match num_layers {
        1 => total,
        2 => total.sqrt(),
        3 => total.cbrt(),
        k => total.powf(1.0 / k as f64),
    })
}

/// Euclidean projection of `y` onto `{x : ‖x‖₁ ≤ radius}`.
///
/// Points already inside the ball are returned unchanged. Otherwise the
/// magnitudes are soft-thresholded by the τ found from the sorted
/// magnitudes, and the signs restored.
pub fn project_row_l1(y: &[f64], radius: f64) -> Result<Vec<f64>> {
    let mut out = y.to_vec();
    project_row_l1_in_place(&mut out, radius)?;
    Ok(out)
}

pub fn project_row_l1_in_place(y: &mut [f64], radius: f64) -> Result<()> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Contract(format!(
            "projection radius must be positive, got {radius}"
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("project_row_l1 input".into()));
    }
    let norm: f64 = y.iter().map(|v| v.abs()).sum();
    if norm <= radius {
        return Ok(());
    }
    let mut tau = l1_threshold(y, radius);
    // Rounding can leave the shrunk row a few ulps outside the ball, which
    // would make a second projection move it again.
    let mut step = f64::EPSILON * norm;
    loop {
        let sum: f64 = y.iter().map(|v| (v.abs() - tau).max(0.0)).sum();
        if sum <= radius {
            break;
        }
        tau += step.max(sum - radius);
        step *= 2.0;
    }
    for v in y.iter_mut() {
        let shrunk = (v.abs() - tau).max(0.0);
        *v = shrunk.copysign(*v);
    }
    Ok(())
}

/// Threshold τ for magnitudes `|y|` whose sum exceeds `radius`.
fn l1_threshold(y: &[f64], radius: f64) -> f64 {
    let mut u: Vec<f64> = y.iter().map(|v| v.abs()).collect();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cumsum += uk;
        let candidate = (cumsum - radius) / (k + 1) as f64;
        if candidate < uk {
            tau = candidate;
        } else {
            // The condition fails from here on once it fails for sorted input.
            break;
        }
    }
    tau
}

/// Projects each weight row onto the unit L1 ball; biases are left alone.
pub fn project_weights(layer: &LinearLayer) -> LinearLayer {
    let mut out = layer.clone();
    project_layer_in_place(&mut out);
    out
}

pub fn project_layer_in_place(layer: &mut LinearLayer) {
    let w = layer.weight_mut();
    for i in 0..w.rows() {
        // Finite weights are an invariant of training; a NaN here would
        // already have aborted the optimizer.
        let _ = project_row_l1_in_place(w.row_mut(i), 1.0);
    }
}

/// Projects every layer of a constrained model; no-op otherwise.
pub fn project_mlp(model: &mut MlpModel) {
    if model.is_constrained() {
        for layer in model.layers_mut() {
            project_layer_in_place(layer);
        }
    }
}

/// Largest row L1 norm, i.e. the ∞→∞ operator norm.
pub fn max_row_l1(weight: &Tensor2) -> f64 {
    weight
        .iter_rows()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Upper bound on the L∞ Lipschitz constant of a model from its weights:
/// `∏ scale_l · ‖W_l‖∞→∞`. Valid for 1-Lipschitz activations (ReLU, GroupSort).
pub fn certified_bound(model: &MlpModel) -> f64 {
    model
        .layers()
        .iter()
        .map(|l| l.scale() * max_row_l1(l.weight()))
        .product()
}

pub fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzEstimate {
    /// `max ‖f(x1) − f(x2)‖∞ / ‖x1 − x2‖∞` over the usable pairs.
    pub max_ratio: f64,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
}

/// Empirical lower bound on the Lipschitz constant of a batched map `f`,
/// probing row `i` of `left` against row `i` of `right`. Coincident pairs
/// are skipped.
pub fn empirical_lipschitz(
    f: impl Fn(&Tensor2) -> Result<Tensor2>,
    left: &Tensor2,
    right: &Tensor2,
) -> Result<LipschitzEstimate> {
    if left.shape() != right.shape() {
        return Err(Error::shape(
            "empirical_lipschitz",
            format!("{}x{}", left.rows(), left.cols()),
            format!("{}x{}", right.rows(), right.cols()),
        ));
    }
    let fl = f(left)?;
    let fr = f(right)?;
    let mut estimate = LipschitzEstimate {
        max_ratio: 0.0,
        pairs_used: 0,
        pairs_skipped: 0,
    };
    for i in 0..left.rows() {
        let din = linf_distance(left.row(i), right.row(i));
        if din == 0.0 {
            estimate.pairs_skipped += 1;
            continue;
        }
        let dout = linf_distance(fl.row(i), fr.row(i));
        estimate.max_ratio = estimate.max_ratio.max(dout / din);
        estimate.pairs_used += 1;
    }
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_row_l1(&[0.2, 0.3], 1.0).unwrap(), vec![0.2, 0.3]);
        assert!(close(
            &project_row_l1(&[0.8, 0.6], 1.0).unwrap(),
            &[0.6, 0.4],
            1e-12
        ));
        assert!(close(
            &project_row_l1(&[2.0, 0.0], 1.0).unwrap(),
            &[1.0, 0.0],
            1e-12
        ));
        assert!(close(
            &project_row_l1(&[-0.8, 0.6], 1.0).unwrap(),
            &[-0.6, 0.4],
            1e-12
        ));
    }

    #[test]
    fn projection_errors() {
        assert!(project_row_l1(&[1.0, f64::NAN], 1.0).is_err());
        assert!(project_row_l1(&[1.0, f64::INFINITY], 1.0).is_err());
        assert!(project_row_l1(&[1.0], 0.0).is_err());
    }

    #[test]
    fn budget_values() {
        assert_eq!(lipschitz_budget(10).unwrap(), 5);
        assert_eq!(lipschitz_budget(70).unwrap(), 10);
        assert_eq!(lipschitz_budget(1).unwrap(), 3);
        assert!(lipschitz_budget(0).is_err());
    }

    #[test]
    fn per_layer_scale_values() {
        for k in 1..6 {
            assert_eq!(per_layer_scale(1.0, k).unwrap(), 1.0);
        }
        assert_eq!(per_layer_scale(5.0, 1).unwrap(), 5.0);
        assert_eq!(per_layer_scale(8.0, 3).unwrap(), 2.0);
        assert!(per_layer_scale(0.0, 2).is_err());
        assert!(per_layer_scale(2.0, 0).is_err());
    }

    #[test]
    fn budget_composes_back_to_total() {
        for total in [1.0, 2.0, 3.0, 5.0, 10.0, 0.37] {
            for k in 1..8 {
                let b = LipschitzBudget::new(total, k).unwrap();
                let product = b.per_layer().powi(k as i32);
                assert!(((product - total) / total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn project_weights_bounds_rows_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = LinearLayer::init(30, 12, 1.0, &mut rng);
        let mut big = layer.clone();
        big.weight_mut()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= 5.0);
        let once = project_weights(&big);
        assert!(max_row_l1(once.weight()) <= 1.0);
        assert_eq!(project_weights(&once), once);
        assert_eq!(once.bias(), big.bias());

        let mut small = layer;
        small
            .weight_mut()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= 1e-3);
        assert_eq!(project_weights(&small), small);
    }

    #[test]
    fn rounding_never_leaves_the_row_outside_the_ball() {
        let once = project_row_l1(&[2.160893375764971, -0.8666294921345228], 0.6).unwrap();
        assert!(once.iter().map(|v| v.abs()).sum::<f64>() <= 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..2000 {
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let r = rng.random_range(0.1..2.0);
            let p = project_row_l1(&y, r).unwrap();
            assert!(p.iter().map(|v| v.abs()).sum::<f64>() <= r);
            assert_eq!(project_row_l1(&p, r).unwrap(), p);
        }
    }

    #[test]
    fn empirical_lipschitz_of_simple_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor2::from_vec(50, 3, (0..150).map(|_| rng.random()).collect()).unwrap();
        let b = Tensor2::from_vec(50, 3, (0..150).map(|_| rng.random()).collect()).unwrap();
        let id = empirical_lipschitz(|t| Ok(t.clone()), &a, &b).unwrap();
        assert!((id.max_ratio - 1.0).abs() < 1e-12);
        let twice = empirical_lipschitz(|t| Ok(t.map(|v| 2.0 * v)), &a, &b).unwrap();
        assert!((twice.max_ratio - 2.0).abs() < 1e-12);
        let same = empirical_lipschitz(|t| Ok(t.clone()), &a, &a).unwrap();
        assert_eq!(same.pairs_used, 0);
        assert_eq!(same.pairs_skipped, 50);
    }

    #[test]
    fn projected_groupsort_mlp_is_certified() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let budget = LipschitzBudget::new(1.0, 3).unwrap();
        let mut model = MlpModel::init(
            &[16, 32, 32, 8],
            Activation::MAX_MIN,
            true,
            false,
            budget.per_layer(),
            &mut rng,
        )
        .unwrap();
        // Inflate so the projection actually has work to do.
        for layer in model.layers_mut() {
            layer
                .weight_mut()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= 4.0);
        }
        project_mlp(&mut model);
        assert!(certified_bound(&model) <= 1.0 + 1e-9);
        let n = 10_000;
        let a = Tensor2::from_vec(n, 16, (0..n * 16).map(|_| rng.random()).collect()).unwrap();
        let b = Tensor2::from_vec(n, 16, (0..n * 16).map(|_| rng.random()).collect()).unwrap();
        let est = empirical_lipschitz(|t| model.forward(t), &a, &b).unwrap();
        assert!(est.max_ratio <= 1.0 + 1e-6, "{est:?}");
    }

    /// Nearest point in the ball by dense grid search over 2-D candidates.
    fn brute_force_2d(y: [f64; 2], radius: f64) -> [f64; 2] {
        let steps = 2000;
        let mut best = ([0.0, 0.0], f64::INFINITY);
        for i in 0..=steps {
            let a = -radius + 2.0 * radius * i as f64 / steps as f64;
            let rem = (radius - a.abs()).max(0.0);
            for b in [-rem, rem, y[1].clamp(-rem, rem)] {
                let d = (a - y[0]).powi(2) + (b - y[1]).powi(2);
                if d < best.1 {
                    best = ([a, b], d);
                }
            }
        }
        best.0
    }

    #[test]
    fn matches_grid_oracle_in_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let y = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let r = rng.random_range(0.2..2.0);
            let p = project_row_l1(&y, r).unwrap();
            let q = brute_force_2d(y, r);
            assert!(close(&p, &q, 3e-3), "y={y:?} r={r} p={p:?} q={q:?}");
        }
    }

    proptest! {
        #[test]
        fn output_is_inside_ball(y in prop::collection::vec(-10.0f64..10.0, 1..40), r in 0.01f64..5.0) {
            let p = project_row_l1(&y, r).unwrap();
            prop_assert!(p.iter().map(|v| v.abs()).sum::<f64>() <= r + 1e-12);
        }

        #[test]
        fn projection_is_non_expansive(
            a in prop::collection::vec(-4.0f64..4.0, 6),
            b in prop::collection::vec(-4.0f64..4.0, 6),
        ) {
            let pa = project_row_l1(&a, 1.0).unwrap();
            let pb = project_row_l1(&b, 1.0).unwrap();
            let d_in: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let d_out: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d_out <= d_in + 1e-12);
        }

        #[test]
        fn signs_are_preserved(y in prop::collection::vec(-3.0f64..3.0, 1..20)) {
            let p = project_row_l1(&y, 1.0).unwrap();
            for (a, b) in y.iter().zip(&p) {
                prop_assert!(*b == 0.0 || a.signum() == b.signum());
                prop_assert!(b.abs() <= a.abs() + 1e-15);
            }
        }
    }
}
