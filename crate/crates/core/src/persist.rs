//! Model files: an 8-byte magic, a little-endian `u64` header length, a JSON
//! header describing the structure, then every parameter as a little-endian
//! `f64` in `params_mut` order. Parameters round-trip bit-exactly.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lipschitz::LipschitzBudget;
use crate::nn::{Activation, LinearLayer, MlpModel};
use crate::tensor::Tensor2;
use crate::vae::VaeModel;

const MAGIC: &[u8; 8] = b"LIPVAE\x00\x01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub in_dim: usize,
    pub out_dim: usize,
    pub scale: f64,
}

impl LayerLayout {
    pub fn of(layer: &LinearLayer) -> Self {
        LayerLayout {
            in_dim: layer.in_dim(),
            out_dim: layer.out_dim(),
            scale: layer.scale(),
        }
    }

    fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub(crate) fn build(&self, params: &mut ParamReader<'_>) -> Result<LinearLayer> {
        let w = params.take(self.in_dim * self.out_dim)?;
        let b = params.take(self.out_dim)?;
        LinearLayer::new(
            Tensor2::from_vec(self.out_dim, self.in_dim, w)?,
            b,
            self.scale,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub layers: Vec<LayerLayout>,
    pub activation: Activation,
    pub constrained: bool,
    pub activate_output: bool,
}

impl MlpLayout {
    pub fn of(model: &MlpModel) -> Self {
        MlpLayout {
            layers: model.layers().iter().map(LayerLayout::of).collect(),
            activation: model.activation(),
            constrained: model.is_constrained(),
            activate_output: model.activates_output(),
        }
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(LayerLayout::param_count).sum()
    }

    pub(crate) fn build(&self, params: &mut ParamReader<'_>) -> Result<MlpModel> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.build(params))
            .collect::<Result<Vec<_>>>()?;
        MlpModel::new(
            layers,
            self.activation,
            self.constrained,
            self.activate_output,
        )
    }
}

/// Structure of a Gaussian VAE, stored as the header of its model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeLayout {
    pub encoder_body: MlpLayout,
    pub mu_head: LayerLayout,
    pub log_sigma_head: LayerLayout,
    pub decoder: MlpLayout,
    pub encoder_budget: Option<LipschitzBudget>,
    pub decoder_budget: Option<LipschitzBudget>,
}

pub(crate) struct ParamReader<'a> {
    values: &'a [f64],
    pos: usize,
}

impl<'a> ParamReader<'a> {
    pub(crate) fn new(values: &'a [f64]) -> Self {
        ParamReader { values, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let end = self.pos + n;
        if end > self.values.len() {
            return Err(Error::Contract("model file has too few parameters".into()));
        }
        let out = self.values[self.pos..end].to_vec();
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.values.len() {
            return Err(Error::Contract("model file has trailing parameters".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    kind: String,
    param_count: usize,
    structure: H,
}

/// Writes `params` under a typed header. `kind` guards against loading a
/// file as the wrong model type.
pub fn write_model_file<H: Serialize>(
    path: &Path,
    kind: &str,
    structure: &H,
    params: &[&[f64]],
) -> Result<()> {
    let param_count = params.iter().map(|p| p.len()).sum();
    let header = serde_json::to_vec(&Envelope {
        kind: kind.to_string(),
        param_count,
        structure,
    })?;
    let mut bytes = Vec::with_capacity(16 + header.len() + 8 * param_count);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for slice in params {
        for v in *slice {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_model_file`], checking the kind.
pub fn read_model_file<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a model file (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let envelope: Envelope<H> = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if envelope.kind != kind {
        return Err(Error::format(
            path,
            format!("expected a {kind} model, found {}", envelope.kind),
        ));
    }
    let body = &bytes[body_start..];
    if body.len() != 8 * envelope.param_count {
        return Err(Error::format(
            path,
            format!(
                "expected {} parameter bytes, found {}",
                8 * envelope.param_count,
                body.len()
            ),
        ));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((envelope.structure, params))
}

pub const GAUSSIAN_VAE_KIND: &str = "gaussian_vae";

impl VaeModel {
    pub fn layout(&self) -> VaeLayout {
        VaeLayout {
            encoder_body: MlpLayout::of(&self.encoder_body),
            mu_head: LayerLayout::of(&self.mu_head),
            log_sigma_head: LayerLayout::of(&self.log_sigma_head),
            decoder: MlpLayout::of(&self.decoder),
            encoder_budget: self.encoder_budget,
            decoder_budget: self.decoder_budget,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut copy = self.clone();
        let params = copy.params_mut();
        let views: Vec<&[f64]> = params.iter().map(|p| &**p).collect();
        write_model_file(path, GAUSSIAN_VAE_KIND, &self.layout(), &views)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (layout, params): (VaeLayout, Vec<f64>) = read_model_file(path, GAUSSIAN_VAE_KIND)?;
        let expected = layout.encoder_body.param_count()
            + layout.mu_head.param_count()
            + layout.log_sigma_head.param_count()
            + layout.decoder.param_count();
        if expected != params.len() {
            return Err(Error::format(
                path,
                format!(
                    "structure needs {expected} parameters, file has {}",
                    params.len()
                ),
            ));
        }
        let mut reader = ParamReader::new(&params);
        let encoder_body = layout.encoder_body.build(&mut reader)?;
        let mu_head = layout.mu_head.build(&mut reader)?;
        let log_sigma_head = layout.log_sigma_head.build(&mut reader)?;
        let decoder = layout.decoder.build(&mut reader)?;
        reader.finish()?;
        VaeModel::from_parts(
            encoder_body,
            mu_head,
            log_sigma_head,
            decoder,
            layout.encoder_budget,
            layout.decoder_budget,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::vae::VaeSpec;

    fn spec() -> VaeSpec {
        VaeSpec {
            input_dim: 6,
            latent_dim: 2,
            encoder_hidden: vec![4],
            decoder_hidden: vec![4],
            encoder_lipschitz: Some(1.0),
            decoder_lipschitz: Some(5.0),
            group_size: 2,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut model = VaeModel::new(&spec(), &mut seeded(1)).unwrap();
        model.params_mut()[0][0] = f64::from_bits(0x3ff0_0000_0000_0001);
        model.save(&path).unwrap();
        let loaded = VaeModel::load(&path).unwrap();
        assert_eq!(loaded, model);
        let mut a = model.clone();
        let mut b = loaded.clone();
        for (x, y) in a.params_mut().iter().zip(b.params_mut().iter()) {
            let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        VaeModel::new(&spec(), &mut seeded(1))
            .unwrap()
            .save(&path)
            .unwrap();
        let good = fs::read(&path).unwrap();

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(VaeModel::load(&path), Err(Error::Format { .. })));

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(VaeModel::load(&path), Err(Error::Format { .. })));

        assert!(matches!(
            read_model_file::<serde_json::Value>(&dir.path().join("absent"), "x"),
            Err(Error::Io { .. })
        ));
        fs::write(&path, &good).unwrap();
        assert!(read_model_file::<serde_json::Value>(&path, "sphere_vae").is_err());
    }
}
