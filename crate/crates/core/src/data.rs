//! Image datasets: IDX loading, synthetic extremes, intensity scaling and
//! class splits. Pixels always lie in `[0, 1]`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor2;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor2,
    pub labels: Vec<u32>,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor2,
        labels: Vec<u32>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if labels.len() != images.rows() {
            return Err(Error::shape("Dataset::new", images.rows(), labels.len()));
        }
        if height * width != images.cols() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{height}x{width} pixels"),
                images.cols(),
            ));
        }
        if images.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Contract("pixels must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            height: self.height,
            width: self.width,
        }
    }

    /// At most `max` inputs, chosen uniformly without replacement under
    /// `seed` and kept in their original order.
    pub fn subsample(&self, max: usize, seed: u64) -> Dataset {
        if self.len() <= max {
            return self.clone();
        }
        let mut r = rng::seeded(seed);
        let mut picked = rand::seq::index::sample(&mut r, self.len(), max).into_vec();
        picked.sort_unstable();
        self.select(&picked)
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

fn read_idx(path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = read_u32(&bytes, 0, path)?;
    if found != magic {
        return Err(Error::format(
            path,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let shape = (0..dims)
        .map(|k| read_u32(&bytes, 4 + 4 * k, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * dims;
    let count: usize = shape.iter().product();
    let body = &bytes[start..];
    if body.len() < count {
        return Err(Error::format(
            path,
            format!(
                "truncated: expected {count} data bytes, found {}",
                body.len()
            ),
        ));
    }
    if body.len() > count {
        return Err(Error::format(path, "trailing bytes after data"));
    }
    Ok((shape, body.to_vec()))
}

/// Loads an IDX image/label pair. Pixels are scaled by `1/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (shape, pixels) = read_idx(images_path, IMAGE_MAGIC, 3)?;
    let (label_shape, labels) = read_idx(labels_path, LABEL_MAGIC, 1)?;
    if label_shape[0] != shape[0] {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {} images", label_shape[0], shape[0]),
        ));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(
        name,
        Tensor2::from_vec(n, h * w, data)?,
        labels.into_iter().map(u32::from).collect(),
        h,
        w,
    )
}

/// Writes a dataset as an IDX pair, quantizing pixels to bytes.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut img = Vec::with_capacity(16 + dataset.images.data().len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [dataset.len(), dataset.height, dataset.width] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(
        dataset
            .images
            .data()
            .iter()
            .map(|p| (p * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &l in &dataset.labels {
        let byte = u8::try_from(l)
            .map_err(|_| Error::Contract(format!("label {l} does not fit in a byte")))?;
        lab.push(byte);
    }
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtremeMode {
    NearBlack,
    NearWhite,
}

pub const DEFAULT_DELTA: f64 = 0.1;

/// `n` images of `side × side` i.i.d. uniform pixels in `[0, delta]`
/// (near black) or `[1 − delta, 1]` (near white). Labels are all zero.
pub fn synth_extreme(
    n: usize,
    side: usize,
    mode: ExtremeMode,
    delta: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Contract(format!(
            "delta must lie in [0, 1], got {delta}"
        )));
    }
    let mut r = rng::seeded(seed);
    let data = (0..n * side * side)
        .map(|_| {
            let u: f64 = if delta > 0.0 {
                r.random_range(0.0..=delta)
            } else {
                0.0
            };
            match mode {
                ExtremeMode::NearBlack => u,
                ExtremeMode::NearWhite => 1.0 - u,
            }
        })
        .collect();
    let name = match mode {
        ExtremeMode::NearBlack => "near_black",
        ExtremeMode::NearWhite => "near_white",
    };
    Dataset::new(
        name,
        Tensor2::from_vec(n, side * side, data)?,
        vec![0; n],
        side,
        side,
    )
}

/// Multiplies every pixel by `factor` and clips to `[0, 1]`.
pub fn intensity_scale(dataset: &Dataset, factor: f64) -> Result<Dataset> {
    if !(factor >= 0.0 && factor.is_finite()) {
        return Err(Error::Contract(format!(
            "intensity factor must be finite and >= 0, got {factor}"
        )));
    }
    let mut out = dataset.clone();
    out.images = dataset.images.map(|p| (p * factor).clamp(0.0, 1.0));
    Ok(out)
}

/// Splits by label: inputs whose label is in `inlier_classes`, then the rest.
pub fn held_out_split(dataset: &Dataset, inlier_classes: &[u32]) -> (Dataset, Dataset) {
    let (inl, out): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| inlier_classes.contains(&dataset.labels[i]));
    (dataset.select(&inl), dataset.select(&out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = Tensor2::from_rows(&[
            vec![0.0, 1.0, 0.5, 0.2],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.2, 0.4, 0.6, 0.8],
        ])
        .unwrap();
        Dataset::new("tiny", images, vec![0, 1, 2], 2, 2).unwrap()
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&tiny(), &ip, &lp).unwrap();
        let a = load_idx(&ip, &lp).unwrap();
        assert_eq!(a, load_idx(&ip, &lp).unwrap());
        assert_eq!((a.len(), a.dim(), a.height, a.width), (3, 4, 2, 2));
        assert_eq!(a.images.get(0, 1), 1.0);
        assert_eq!(a.images.get(0, 0), 0.0);
        assert_eq!(a.labels, vec![0, 1, 2]);
    }

    #[test]
    fn idx_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&tiny(), &ip, &lp).unwrap();
        assert!(matches!(load_idx(&lp, &ip), Err(Error::Format { .. })));
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
        fs::write(&ip, &bytes[..6]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn synthetic_extremes() {
        let b = synth_extreme(2, 3, ExtremeMode::NearBlack, 0.0, 1).unwrap();
        assert!(b.images.data().iter().all(|&p| p == 0.0));
        let w = synth_extreme(2, 3, ExtremeMode::NearWhite, 0.0, 1).unwrap();
        assert!(w.images.data().iter().all(|&p| p == 1.0));

        let b = synth_extreme(200, 28, ExtremeMode::NearBlack, 0.1, 2).unwrap();
        let n = b.images.data().len() as f64;
        let mean = b.images.data().iter().sum::<f64>() / n;
        let sd = 0.1 / 12f64.sqrt();
        assert!((mean - 0.05).abs() < 3.0 * sd / n.sqrt(), "{mean}");
        assert!(synth_extreme(1, 2, ExtremeMode::NearBlack, 1.5, 0).is_err());
    }

    #[test]
    fn intensity_examples() {
        let d = tiny();
        assert_eq!(intensity_scale(&d, 1.0).unwrap(), d);
        let s = intensity_scale(&d, 15.0).unwrap();
        assert_eq!(s.images.get(0, 2), 1.0);
        let s = intensity_scale(&d, 3.0).unwrap();
        assert!((s.images.get(0, 3) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn split_partitions_by_label() {
        let d = tiny();
        let (i, o) = held_out_split(&d, &[0, 1]);
        assert_eq!((i.labels.clone(), o.labels.clone()), (vec![0, 1], vec![2]));
        let (i, o) = held_out_split(&d, &[0, 1, 2]);
        assert_eq!((i.len(), o.len()), (3, 0));
    }

    #[test]
    fn subsample_is_seeded_and_ordered() {
        let d = synth_extreme(50, 2, ExtremeMode::NearBlack, 0.1, 0).unwrap();
        let a = d.subsample(10, 4);
        assert_eq!(a, d.subsample(10, 4));
        assert_eq!(a.len(), 10);
        assert_eq!(d.subsample(100, 4), d);
    }
}
