use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const MAX_REJECTIONS: usize = 1_000_000;

/// Area of the unit sphere in ℝⁿ, `2 π^(n/2) / Γ(n/2)`.
pub fn sphere_surface_area(n_ambient: usize) -> Result<f64> {
    Ok(log_sphere_surface_area(n_ambient)?.exp())
}

pub fn log_sphere_surface_area(n_ambient: usize) -> Result<f64> {
    if n_ambient == 0 {
        return Err(Error::Contract(
            "sphere needs ambient dimension >= 1".into(),
        ));
    }
    let half = n_ambient as f64 / 2.0;
    Ok(2f64.ln() + half * PI.ln() - ln_gamma(half))
}

/// von Mises-Fisher parameters on the unit sphere in ℝ^d, `d = mu.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    mu: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    pub fn new(mu: Vec<f64>, kappa: f64) -> Result<Self> {
        if mu.len() < 2 {
            return Err(Error::Contract("vMF needs ambient dimension >= 2".into()));
        }
        let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "vMF mean must be unit norm, got {norm}"
            )));
        }
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::Contract(format!(
                "vMF concentration must be >= 0, got {kappa}"
            )));
        }
        Ok(VmfParams { mu, kappa })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn ambient_dim(&self) -> usize {
        self.mu.len()
    }
}

/// Reflection taking the north pole `e₁` to `mu`, applied to `v`.
pub fn householder_rotate(v: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
    if v.len() != mu.len() {
        return Err(Error::shape("householder_rotate", mu.len(), v.len()));
    }
    let mut a: Vec<f64> = mu.iter().map(|m| -m).collect();
    a[0] += 1.0;
    let q: f64 = a.iter().map(|x| x * x).sum();
    if q < 1e-30 {
        return Ok(v.to_vec());
    }
    let s: f64 = a.iter().zip(v).map(|(x, y)| x * y).sum();
    Ok(v.iter()
        .zip(&a)
        .map(|(vi, ai)| vi - 2.0 * ai * s / q)
        .collect())
}

fn uniform_direction(dim: usize, rng: &mut (impl Rng + ?Sized)) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return g.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Wood's rejection sampler for the component along the mean direction.
fn sample_w(kappa: f64, dim: usize, rng: &mut (impl Rng + ?Sized)) -> Result<f64> {
    let p1 = (dim - 1) as f64;
    let b = p1 / (2.0 * kappa + (4.0 * kappa * kappa + p1 * p1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + p1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(p1 / 2.0, p1 / 2.0).expect("positive shape");
    for _ in 0..MAX_REJECTIONS {
        let eps: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * eps) / (1.0 - (1.0 - b) * eps);
        let u: f64 = rng.random();
        if kappa * w + p1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            return Ok(w);
        }
    }
    Err(Error::Contract(format!(
        "vMF rejection sampler did not accept within {MAX_REJECTIONS} draws"
    )))
}

/// One draw from vMF(μ, κ); `κ = 0` gives a uniform point on the sphere.
pub fn sample_vmf(p: &VmfParams, rng: &mut (impl Rng + ?Sized)) -> Result<Vec<f64>> {
    let d = p.ambient_dim();
    if p.kappa == 0.0 {
        return Ok(uniform_direction(d, rng));
    }
    let w = sample_w(p.kappa, d, rng)?;
    let tangent = uniform_direction(d - 1, rng);
    let r = (1.0 - w * w).max(0.0).sqrt();
    let mut x = Vec::with_capacity(d);
    x.push(w);
    x.extend(tangent.iter().map(|t| r * t));
    householder_rotate(&x, &p.mu)
}

/// `log I_ν(x)` for `ν ≥ 0`, `x ≥ 0`.
pub fn log_bessel_i(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x > 50.0 + nu * nu {
        // Large-argument expansion.
        let mu4 = 4.0 * nu * nu;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..30 {
            let kf = k as f64;
            let next = -term * (mu4 - (2.0 * kf - 1.0).powi(2)) / (kf * 8.0 * x);
            if next.abs() >= term.abs() {
                break;
            }
            term = next;
            sum += term;
            if term.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        return x - 0.5 * (2.0 * PI * x).ln() + sum.ln();
    }
    // Power series Σ (x/2)^(2k+ν) / (k! Γ(k+ν+1)) summed in the log domain.
    let log_half = (x / 2.0).ln();
    let mut log_term = nu * log_half - ln_gamma(nu + 1.0);
    let mut terms = vec![log_term];
    let mut k = 0.0;
    loop {
        log_term += 2.0 * log_half - (k + 1.0f64).ln() - (k + nu + 1.0).ln();
        k += 1.0;
        terms.push(log_term);
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if k > x && log_term < max - 40.0 {
            break;
        }
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Mean resultant length `A_d(κ) = I_{d/2}(κ) / I_{d/2−1}(κ)`.
pub fn bessel_ratio(d: usize, kappa: f64) -> f64 {
    let nu = d as f64 / 2.0;
    if kappa < 1e-4 {
        return kappa / d as f64;
    }
    // Modified Lentz evaluation of I_ν/I_{ν−1} = 1 / (2ν/κ + 1 / (2(ν+1)/κ + …)).
    let tiny = 1e-300;
    let mut f = tiny;
    let mut c = f;
    let mut dd = 0.0;
    for j in 0..10_000 {
        let b = 2.0 * (nu + j as f64) / kappa;
        let a = 1.0;
        dd = b + a * dd;
        if dd.abs() < tiny {
            dd = tiny;
        }
        c = b + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        dd = 1.0 / dd;
        let delta = c * dd;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    f
}

/// `log C_d(κ)`, the log normalizer of the vMF density on the sphere in ℝ^d.
pub fn log_vmf_normalizer(d: usize, kappa: f64) -> Result<f64> {
    if kappa == 0.0 {
        return Ok(-log_sphere_surface_area(d)?);
    }
    let nu = d as f64 / 2.0 - 1.0;
    Ok(nu * kappa.ln() - (d as f64 / 2.0) * (2.0 * PI).ln() - log_bessel_i(nu, kappa))
}

/// `log vMF(z; μ, κ)`.
pub fn vmf_log_density(p: &VmfParams, z: &[f64]) -> Result<f64> {
    if z.len() != p.ambient_dim() {
        return Err(Error::shape("vmf_log_density", p.ambient_dim(), z.len()));
    }
    let dot: f64 = p.mu.iter().zip(z).map(|(a, b)| a * b).sum();
    Ok(log_vmf_normalizer(p.ambient_dim(), p.kappa)? + p.kappa * dot)
}

/// `KL(vMF(μ, κ) ‖ Uniform(S^m))` with `m + 1 = mu.len()`.
pub fn kl_vmf_uniform(p: &VmfParams) -> Result<f64> {
    let d = p.ambient_dim();
    if p.kappa == 0.0 {
        return Ok(0.0);
    }
    let kl = p.kappa * bessel_ratio(d, p.kappa)
        + log_vmf_normalizer(d, p.kappa)?
        + log_sphere_surface_area(d)?;
    Ok(kl.max(0.0))
}
