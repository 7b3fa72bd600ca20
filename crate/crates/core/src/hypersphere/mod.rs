//! Hyperspherical latent utilities: sphere areas, von Mises-Fisher sampling
//! and densities, KL to the uniform prior, and an S² toy VAE.

mod sphere_vae;
mod vmf;

pub use sphere_vae::{
    hvae_toy_train, kl_s2, kl_s2_derivative, s2_axial_sample, SphereElbo, SphereGrads, SphereVae,
    SphereVaeSpec, SPHERE_AMBIENT, SPHERE_VAE_KIND,
};
pub use vmf::{
    bessel_ratio, householder_rotate, kl_vmf_uniform, log_bessel_i, log_sphere_surface_area,
    log_vmf_normalizer, sample_vmf, sphere_surface_area, vmf_log_density, VmfParams,
};

use std::path::Path;

use crate::error::{Error, Result};

/// `(dimension, area)` for `n = 1..=max_dim`.
pub fn surface_area_curve(max_dim: usize) -> Result<Vec<(usize, f64)>> {
    (1..=max_dim)
        .map(|n| Ok((n, sphere_surface_area(n)?)))
        .collect()
}

pub fn write_surface_area_csv(path: &Path, max_dim: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dimension", "area"])?;
    for (n, a) in surface_area_curve(max_dim)? {
        w.write_record([n.to_string(), a.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
