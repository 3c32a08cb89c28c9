//! Dataset ingestion: the big-endian IDX image/label format and seeded
//! synthetic datasets (class-positioned Gaussian blobs, rings) so every
//! experiment can run without external files.

use std::io::Read;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{next_standard_normal, stream};
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// In-memory dataset: images in [0,1], NHWC, optional labels, and a
/// provenance tag ("idx" or "synthetic").
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
    pub provenance: String,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    /// Row-range view as a new tensor [m, H, W, C].
    pub fn batch(&self, start: usize, len: usize) -> Tensor<f32> {
        let per: usize = self.images.shape()[1..].iter().product();
        let mut shape = vec![len];
        shape.extend_from_slice(&self.images.shape()[1..]);
        Tensor::new(
            &shape,
            self.images.data()[start * per..(start + len) * per].to_vec(),
        )
    }
}

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::data(format!("truncated {what}: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image file (magic 0x00000803) and optionally its label file
/// (magic 0x00000801). Pixels are unsigned bytes scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<DatasetHandle> {
    let mut f = std::fs::File::open(images_path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", images_path.display())))?;
    let magic = read_u32_be(&mut f, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::data(format!(
            "bad image magic: observed 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )));
    }
    let n = read_u32_be(&mut f, "image count")? as usize;
    let rows = read_u32_be(&mut f, "row count")? as usize;
    let cols = read_u32_be(&mut f, "column count")? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    f.read_exact(&mut pixels)
        .map_err(|e| Error::data(format!("truncated image payload: {e}")))?;
    let images = Tensor::new(
        &[n, rows, cols, 1],
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    );

    let labels = match labels_path {
        None => None,
        Some(path) => {
            let mut f = std::fs::File::open(path)
                .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
            let magic = read_u32_be(&mut f, "label magic")?;
            if magic != IDX_LABEL_MAGIC {
                return Err(Error::data(format!(
                    "bad label magic: observed 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
                )));
            }
            let ln = read_u32_be(&mut f, "label count")? as usize;
            if ln != n {
                return Err(Error::data(format!(
                    "label count {ln} does not match image count {n}"
                )));
            }
            let mut labels = vec![0u8; ln];
            f.read_exact(&mut labels)
                .map_err(|e| Error::data(format!("truncated label payload: {e}")))?;
            Some(labels)
        }
    };

    Ok(DatasetHandle {
        images,
        labels,
        provenance: "idx".to_string(),
    })
}

/// Serialize images (and optional labels) back to IDX byte buffers; used by
/// tests and fixtures.
pub fn to_idx_bytes(handle: &DatasetHandle) -> (Vec<u8>, Option<Vec<u8>>) {
    let shape = handle.images.shape();
    let (n, rows, cols) = (shape[0], shape[1], shape[2]);
    assert_eq!(shape[3], 1, "idx stores single-channel images");
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in handle.images.data() {
        img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let lbl = handle.labels.as_ref().map(|labels| {
        let mut out = Vec::with_capacity(8 + labels.len());
        out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    });
    (img, lbl)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Gaussian spots at 10 class-dependent positions with per-sample jitter.
    Blobs,
    /// Rings of varying radius and thickness.
    Rings,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blobs" => Some(SyntheticKind::Blobs),
            "rings" => Some(SyntheticKind::Rings),
            _ => None,
        }
    }
}

/// Deterministic synthetic dataset: n single-channel side x side images in
/// [0,1] with class labels.
pub fn make_synthetic(kind: SyntheticKind, n: usize, side: usize, seed: u64) -> Result<DatasetHandle> {
    if n == 0 {
        return Err(Error::data("synthetic dataset needs n > 0"));
    }
    if side < 8 {
        return Err(Error::data(format!("synthetic side {side} too small (need >= 8)")));
    }
    let mut rng = stream(seed, "synthetic");
    let mut images = vec![0.0f32; n * side * side];
    let mut labels = vec![0u8; n];
    let s = side as f64;
    match kind {
        SyntheticKind::Blobs => {
            // Ten class centers on a circle around the image center.
            let centers: Vec<(f64, f64)> = (0..10)
                .map(|c| {
                    let theta = c as f64 / 10.0 * std::f64::consts::TAU;
                    (
                        s / 2.0 + s * 0.28 * theta.cos(),
                        s / 2.0 + s * 0.28 * theta.sin(),
                    )
                })
                .collect();
            for i in 0..n {
                let class = rng.gen_range(0..10usize);
                labels[i] = class as u8;
                let (cx, cy) = centers[class];
                let jx = cx + next_standard_normal(&mut rng) * s * 0.02;
                let jy = cy + next_standard_normal(&mut rng) * s * 0.02;
                let sigma = s * (0.09 + 0.02 * rng.gen_range(-1.0..1.0f64));
                let amp = 0.75 + 0.2 * rng.gen_range(-1.0..1.0f64);
                let img = &mut images[i * side * side..(i + 1) * side * side];
                for y in 0..side {
                    for x in 0..side {
                        let dx = x as f64 - jx;
                        let dy = y as f64 - jy;
                        let v = amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        img[y * side + x] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
        SyntheticKind::Rings => {
            for i in 0..n {
                let class = rng.gen_range(0..10usize);
                labels[i] = class as u8;
                let radius = s * (0.15 + 0.025 * class as f64) + next_standard_normal(&mut rng) * s * 0.01;
                let thickness = s * 0.05 * (1.0 + 0.2 * rng.gen_range(-1.0..1.0f64));
                let img = &mut images[i * side * side..(i + 1) * side * side];
                for y in 0..side {
                    for x in 0..side {
                        let dx = x as f64 - s / 2.0;
                        let dy = y as f64 - s / 2.0;
                        let r = (dx * dx + dy * dy).sqrt();
                        let v = (-(r - radius) * (r - radius) / (2.0 * thickness * thickness)).exp();
                        img[y * side + x] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }
    Ok(DatasetHandle {
        images: Tensor::new(&[n, side, side, 1], images),
        labels: Some(labels),
        provenance: "synthetic".to_string(),
    })
}

/// Mean silhouette score of points under the given labels (O(n^2); used by
/// the latent-separation checks on modest subsamples).
pub fn silhouette_score(points: &[f64], n: usize, dim: usize, labels: &[u8]) -> f64 {
    assert_eq!(points.len(), n * dim);
    assert_eq!(labels.len(), n);
    let dist = |a: usize, b: usize| -> f64 {
        let mut acc = 0.0;
        for j in 0..dim {
            let d = points[a * dim + j] - points[b * dim + j];
            acc += d * d;
        }
        acc.sqrt()
    };
    let classes: Vec<u8> = {
        let mut c: Vec<u8> = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..n {
        let own = labels[i];
        let mut same_sum = 0.0;
        let mut same_count = 0usize;
        let mut best_other = f64::INFINITY;
        for &other in &classes {
            if other == own {
                for j in 0..n {
                    if j != i && labels[j] == own {
                        same_sum += dist(i, j);
                        same_count += 1;
                    }
                }
            } else {
                let mut sum = 0.0;
                let mut count = 0usize;
                for j in 0..n {
                    if labels[j] == other {
                        sum += dist(i, j);
                        count += 1;
                    }
                }
                if count > 0 {
                    best_other = best_other.min(sum / count as f64);
                }
            }
        }
        if same_count == 0 || !best_other.is_finite() {
            continue;
        }
        let a = same_sum / same_count as f64;
        let b = best_other;
        total += (b - a) / a.max(b);
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_deterministic_and_bounded() {
        let a = make_synthetic(SyntheticKind::Blobs, 32, 16, 7).unwrap();
        let b = make_synthetic(SyntheticKind::Blobs, 32, 16, 7).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = make_synthetic(SyntheticKind::Rings, 8, 16, 7).unwrap();
        assert_eq!(c.images.shape(), &[8, 16, 16, 1]);
        assert!(make_synthetic(SyntheticKind::Blobs, 0, 16, 7).is_err());
    }

    #[test]
    fn blob_classes_are_separated_in_pixel_space() {
        // Distinct class means: nearest-center classification of raw pixels
        // should agree with itself; silhouette over downsampled pixels > 0.
        let d = make_synthetic(SyntheticKind::Blobs, 200, 16, 3).unwrap();
        let (feats, dim) = crate::metrics::downsample_features(&d.images, 4).unwrap();
        let score = silhouette_score(&feats, 200, dim, d.labels.as_ref().unwrap());
        assert!(score > 0.0, "silhouette {score}");
    }

    #[test]
    fn idx_roundtrip_fixture() {
        // Handcrafted 2-image fixture with known bytes 0 and 255.
        let images = Tensor::new(&[2, 2, 2, 1], vec![0.0f32, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let handle = DatasetHandle {
            images,
            labels: Some(vec![3, 7]),
            provenance: "synthetic".into(),
        };
        let (img_bytes, lbl_bytes) = to_idx_bytes(&handle);
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.idx");
        let lbl_path = dir.path().join("lbl.idx");
        std::fs::write(&img_path, &img_bytes).unwrap();
        std::fs::write(&lbl_path, lbl_bytes.unwrap()).unwrap();
        let loaded = load_idx(&img_path, Some(&lbl_path)).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.images.shape(), &[2, 2, 2, 1]);
        assert_eq!(loaded.images.data(), handle.images.data());
        assert_eq!(loaded.labels, Some(vec![3, 7]));
        assert_eq!(loaded.provenance, "idx");
    }

    #[test]
    fn idx_error_paths() {
        let dir = tempfile::tempdir().unwrap();
        // wrong magic names observed vs expected
        let bad = dir.path().join("bad.idx");
        std::fs::write(&bad, 0x12345678u32.to_be_bytes()).unwrap();
        let err = load_idx(&bad, None).unwrap_err().to_string();
        assert!(err.contains("0x12345678") && err.contains("0x00000803"), "{err}");
        // truncated payload
        let trunc = dir.path().join("trunc.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0u8; 3]); // needs 8
        std::fs::write(&trunc, &bytes).unwrap();
        assert!(load_idx(&trunc, None).unwrap_err().to_string().contains("truncated"));
        // count mismatch between images and labels
        let images = Tensor::new(&[2, 2, 2, 1], vec![0.5f32; 8]);
        let (img_bytes, _) = to_idx_bytes(&DatasetHandle {
            images,
            labels: None,
            provenance: "synthetic".into(),
        });
        let img = dir.path().join("img.idx");
        std::fs::write(&img, &img_bytes).unwrap();
        let lbl = dir.path().join("lbl.idx");
        let mut lbl_bytes = Vec::new();
        lbl_bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        lbl_bytes.extend_from_slice(&3u32.to_be_bytes());
        lbl_bytes.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&lbl, &lbl_bytes).unwrap();
        let err = load_idx(&img, Some(&lbl)).unwrap_err().to_string();
        assert!(err.contains("label count 3") && err.contains("image count 2"), "{err}");
    }
}
