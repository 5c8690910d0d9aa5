//! Dataset ingestion, normalization, and training-time augmentation.
//!
//! Images are stored as raw bytes in NHWC order and normalized to f32 on
//! batch assembly: (x/255 − mean)/std per channel. Attack budgets specified
//! in raw [0,1] pixel units map into this normalized space per channel
//! (ε_c = ε/std_c), so the forward path never needs a second input format.

use crate::tensor::Tensor;
use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated payload, expected {expected} bytes, found {actual}")]
    Truncated {
        path: String,
        expected: usize,
        actual: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {value} out of range for {num_classes} classes")]
    LabelRange { value: u8, num_classes: usize },
    #[error("{path}: file length {len} is not a multiple of the {record}-byte record")]
    RecordSize { path: String, len: usize, record: usize },
    #[error("normalization std must be nonzero")]
    ZeroStd,
}

/// Byte-valued image set with labels, NHWC layout.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<u8>,
    /// (H, W, C) of one sample.
    pub shape: [usize; 3],
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_bytes(&self) -> usize {
        self.shape.iter().product()
    }

    /// Contiguous sub-range view (copied), e.g. an evaluation slice.
    pub fn slice(&self, start: usize, len: usize) -> Dataset {
        let sb = self.sample_bytes();
        let end = (start + len).min(self.len());
        Dataset {
            images: self.images[start * sb..end * sb].to_vec(),
            shape: self.shape,
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Raw bytes of one sample.
    pub fn sample(&self, i: usize) -> &[u8] {
        let sb = self.sample_bytes();
        &self.images[i * sb..(i + 1) * sb]
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let wrap = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let raw = std::fs::read(path).map_err(wrap)?;
    // Transparent gzip support, detected by magic.
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(wrap)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parse an IDX image file (big-endian header: magic, count, rows, cols).
pub fn load_idx_images(path: &Path) -> Result<(Vec<u8>, [usize; 3], usize), DataError> {
    let bytes = read_file(path)?;
    let pstr = path.display().to_string();
    let mut cur = &bytes[..];
    let read_u32 = |cur: &mut &[u8]| {
        cur.read_u32::<BigEndian>().map_err(|source| DataError::Io {
            path: pstr.clone(),
            source,
        })
    };
    let magic = read_u32(&mut cur)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: pstr,
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = read_u32(&mut cur)? as usize;
    let rows = read_u32(&mut cur)? as usize;
    let cols = read_u32(&mut cur)? as usize;
    let expected = n * rows * cols;
    if cur.len() != expected {
        return Err(DataError::Truncated {
            path: pstr,
            expected,
            actual: cur.len(),
        });
    }
    Ok((cur.to_vec(), [rows, cols, 1], n))
}

/// Parse an IDX label file (big-endian header: magic, count).
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = read_file(path)?;
    let pstr = path.display().to_string();
    let mut cur = &bytes[..];
    let read_u32 = |cur: &mut &[u8]| {
        cur.read_u32::<BigEndian>().map_err(|source| DataError::Io {
            path: pstr.clone(),
            source,
        })
    };
    let magic = read_u32(&mut cur)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: pstr,
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = read_u32(&mut cur)? as usize;
    if cur.len() != n {
        return Err(DataError::Truncated {
            path: pstr,
            expected: n,
            actual: cur.len(),
        });
    }
    Ok(cur.to_vec())
}

/// Load an IDX image/label pair, validating counts and label range.
pub fn load_idx_pair(
    images: &Path,
    labels: &Path,
    num_classes: usize,
) -> Result<Dataset, DataError> {
    let (image_bytes, shape, n) = load_idx_images(images)?;
    let label_bytes = load_idx_labels(labels)?;
    if n != label_bytes.len() {
        return Err(DataError::CountMismatch {
            images: n,
            labels: label_bytes.len(),
        });
    }
    if let Some(&bad) = label_bytes.iter().find(|&&l| (l as usize) >= num_classes) {
        return Err(DataError::LabelRange {
            value: bad,
            num_classes,
        });
    }
    Ok(Dataset {
        images: image_bytes,
        shape,
        labels: label_bytes,
        num_classes,
    })
}

/// Load CIFAR-10-style binary batches: each record is 1 label byte followed
/// by 3072 image bytes (channel-major R,G,B planes of a 32×32 image),
/// converted here to NHWC.
pub fn load_cifar_binary(paths: &[std::path::PathBuf], num_classes: usize) -> Result<Dataset, DataError> {
    const RECORD: usize = 3073;
    const SIDE: usize = 32;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        if bytes.len() % RECORD != 0 {
            return Err(DataError::RecordSize {
                path: path.display().to_string(),
                len: bytes.len(),
                record: RECORD,
            });
        }
        for rec in bytes.chunks_exact(RECORD) {
            let label = rec[0];
            if (label as usize) >= num_classes {
                return Err(DataError::LabelRange {
                    value: label,
                    num_classes,
                });
            }
            labels.push(label);
            let planes = &rec[1..];
            for h in 0..SIDE {
                for w in 0..SIDE {
                    for c in 0..3 {
                        images.push(planes[c * SIDE * SIDE + h * SIDE + w]);
                    }
                }
            }
        }
    }
    Ok(Dataset {
        images,
        shape: [SIDE, SIDE, 3],
        labels,
        num_classes,
    })
}

/// Per-channel normalization constants applied after the /255 rescale.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self, DataError> {
        if std.iter().any(|&s| s == 0.0) {
            return Err(DataError::ZeroStd);
        }
        Ok(Normalization { mean, std })
    }

    /// Conventional grayscale-digit constants.
    pub fn mnist() -> Self {
        Normalization {
            mean: vec![0.1307],
            std: vec![0.3081],
        }
    }

    /// Conventional CIFAR-10 RGB constants.
    pub fn cifar10() -> Self {
        Normalization {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    /// No-op normalization (x/255 only).
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Normalize raw NHWC bytes: (x/255 − mean)/std per channel.
pub fn normalize(bytes: &[u8], shape: [usize; 3], norm: &Normalization) -> Tensor {
    let sb: usize = shape.iter().product();
    let n = bytes.len() / sb;
    let c = shape[2];
    let data: Vec<f32> = bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let ch = i % c;
            (b as f32 / 255.0 - norm.mean[ch]) / norm.std[ch]
        })
        .collect();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).expect("normalize shape")
}

/// Invert `normalize` back to the [0,1] scale (not to bytes).
pub fn denormalize(x: &Tensor, norm: &Normalization) -> Tensor {
    let c = *x.shape().last().unwrap();
    let data: Vec<f32> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * norm.std[i % c] + norm.mean[i % c])
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("denormalize shape")
}

/// Deterministic crop-and-flip core: pad each sample with `pad` zero pixels
/// on every side, cut the original-size window at the given per-sample
/// offsets (dy, dx ∈ [0, 2·pad]), and mirror horizontally where flagged.
pub fn augment_with(
    bytes: &[u8],
    shape: [usize; 3],
    pad: usize,
    offsets: &[(usize, usize)],
    flips: &[bool],
) -> Vec<u8> {
    let [h, w, c] = shape;
    let sb = h * w * c;
    let n = bytes.len() / sb;
    let mut out = vec![0u8; bytes.len()];
    for i in 0..n {
        let (dy, dx) = offsets[i];
        let src = &bytes[i * sb..(i + 1) * sb];
        let dst = &mut out[i * sb..(i + 1) * sb];
        for oy in 0..h {
            // Padded-image row index; source row = padded − pad.
            let sy = oy + dy;
            for ox in 0..w {
                let sx = ox + dx;
                let inside = sy >= pad && sy < h + pad && sx >= pad && sx < w + pad;
                for ch in 0..c {
                    let v = if inside {
                        src[((sy - pad) * w + (sx - pad)) * c + ch]
                    } else {
                        0
                    };
                    let tx = if flips[i] { w - 1 - ox } else { ox };
                    dst[(oy * w + tx) * c + ch] = v;
                }
            }
        }
    }
    out
}

/// Random crop (zero padding) and optional horizontal flip. Digit datasets
/// should pass `flip=false`; mirrored digits change class semantics.
pub fn augment(
    bytes: &[u8],
    shape: [usize; 3],
    pad: usize,
    flip: bool,
    rng: &mut impl Rng,
) -> Vec<u8> {
    let sb: usize = shape.iter().product();
    let n = bytes.len() / sb;
    let offsets: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad)))
        .collect();
    let flips: Vec<bool> = (0..n).map(|_| flip && rng.gen_bool(0.5)).collect();
    augment_with(bytes, shape, pad, &offsets, &flips)
}

/// Seed-driven epoch ordering.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Assemble a normalized batch (and labels) for the given sample indices,
/// optionally augmenting the raw bytes first.
pub fn make_batch(
    ds: &Dataset,
    indices: &[usize],
    norm: &Normalization,
    augment_cfg: Option<(usize, bool)>,
    rng: &mut impl Rng,
) -> (Tensor, Vec<usize>) {
    let sb = ds.sample_bytes();
    let mut bytes = Vec::with_capacity(indices.len() * sb);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        bytes.extend_from_slice(ds.sample(i));
        labels.push(ds.labels[i] as usize);
    }
    if let Some((pad, flip)) = augment_cfg {
        bytes = augment(&bytes, ds.shape, pad, flip, rng);
    }
    (normalize(&bytes, ds.shape, norm), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_examples() {
        let norm = Normalization::identity(1);
        let t = normalize(&[255, 0], [1, 2, 1], &norm);
        assert_eq!(t.data(), &[1.0, 0.0]);
        let norm = Normalization::new(vec![0.5], vec![0.5]).unwrap();
        let t = normalize(&[255], [1, 1, 1], &norm);
        assert!((t.data()[0] - 1.0).abs() < 1e-6);
        assert!(Normalization::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn normalize_round_trips() {
        let norm = Normalization::mnist();
        let bytes: Vec<u8> = (0..=255).collect();
        let t = normalize(&bytes, [16, 16, 1], &norm);
        let back = denormalize(&t, &norm);
        for (i, &v) in back.data().iter().enumerate() {
            assert!((v - bytes[i] as f32 / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn augment_identity_offsets() {
        let shape = [3, 3, 1];
        let bytes: Vec<u8> = (1..=9).collect();
        let out = augment_with(&bytes, shape, 2, &[(2, 2)], &[false]);
        assert_eq!(out, bytes);
    }

    #[test]
    fn augment_preserves_shape_and_pixel_provenance() {
        let shape = [4, 4, 1];
        let bytes: Vec<u8> = (0..16).map(|v| v + 10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let out = augment(&bytes, shape, 2, true, &mut rng);
            assert_eq!(out.len(), bytes.len());
            // Every output pixel is either zero padding or from the source.
            for &v in &out {
                assert!(v == 0 || bytes.contains(&v));
            }
        }
    }

    #[test]
    fn augment_flip_mirrors_rows() {
        let shape = [1, 4, 1];
        let bytes = vec![1u8, 2, 3, 4];
        let out = augment_with(&bytes, shape, 0, &[(0, 0)], &[true]);
        assert_eq!(out, vec![4, 3, 2, 1]);
    }

    #[test]
    fn cifar_record_layout() {
        // One record: label 9 then R,G,B planes with distinct constants.
        let mut rec = vec![9u8];
        rec.extend(std::iter::repeat(10u8).take(1024)); // R
        rec.extend(std::iter::repeat(20u8).take(1024)); // G
        rec.extend(std::iter::repeat(30u8).take(1024)); // B
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        std::fs::write(&path, &rec).unwrap();
        let ds = load_cifar_binary(&[path.clone()], 10).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels[0], 9);
        assert_eq!(&ds.images[0..3], &[10, 20, 30]); // NHWC interleave
        // Length not divisible by the record size errors.
        std::fs::write(&path, &rec[..3072]).unwrap();
        assert!(load_cifar_binary(&[path], 10).is_err());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        // Valid 2-sample 2x2 image file.
        let imgs = dir.path().join("imgs.idx");
        let mut bytes = vec![];
        bytes.extend(0x0803u32.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend([1, 2, 3, 4, 5, 6, 7, 8]);
        std::fs::write(&imgs, &bytes).unwrap();
        let labels = dir.path().join("labels.idx");
        let mut lb = vec![];
        lb.extend(0x0801u32.to_be_bytes());
        lb.extend(2u32.to_be_bytes());
        lb.extend([0u8, 3]);
        std::fs::write(&labels, &lb).unwrap();
        let ds = load_idx_pair(&imgs, &labels, 10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.shape, [2, 2, 1]);
        assert_eq!(ds.sample(1), &[5, 6, 7, 8]);
        // Label out of range for a 3-class problem.
        assert!(matches!(
            load_idx_pair(&imgs, &labels, 3),
            Err(DataError::LabelRange { value: 3, .. })
        ));
        // Truncated image payload names the byte counts.
        std::fs::write(&imgs, &bytes[..bytes.len() - 2]).unwrap();
        match load_idx_pair(&imgs, &labels, 10) {
            Err(DataError::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, 8);
                assert_eq!(actual, 6);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
        // Bad magic.
        let mut bad = bytes.clone();
        bad[3] = 0x99;
        std::fs::write(&imgs, &bad).unwrap();
        assert!(matches!(
            load_idx_images(&imgs),
            Err(DataError::BadMagic { .. })
        ));
    }

    #[test]
    fn gzip_transparent_read() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.idx.gz");
        let mut lb = vec![];
        lb.extend(0x0801u32.to_be_bytes());
        lb.extend(3u32.to_be_bytes());
        lb.extend([1u8, 2, 3]);
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&lb).unwrap();
        std::fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx_labels(&path).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn batches_are_deterministic_per_seed() {
        let ds = Dataset {
            images: (0..40u8).collect(),
            shape: [2, 2, 1],
            labels: vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4],
            num_classes: 5,
        };
        let norm = Normalization::identity(1);
        let order1 = shuffled_indices(ds.len(), &mut ChaCha8Rng::seed_from_u64(9));
        let order2 = shuffled_indices(ds.len(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(order1, order2);
        let (x1, y1) = make_batch(&ds, &order1[..4], &norm, None, &mut ChaCha8Rng::seed_from_u64(1));
        let (x2, y2) = make_batch(&ds, &order2[..4], &norm, None, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(x1.data(), x2.data());
        assert_eq!(y1, y2);
        assert_eq!(x1.shape(), &[4, 2, 2, 1]);
    }
}
