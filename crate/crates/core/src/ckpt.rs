//! Checkpoint persistence. A checkpoint is a single binary file:
//!
//! ```text
//! magic      8 bytes  b"SPIKCKPT"
//! version    u32 LE   currently 1
//! meta_len   u64 LE
//! meta       UTF-8 JSON (CkptMeta)
//! count      u64 LE   number of tensor entries
//! entry*     name_len u64 LE, name UTF-8,
//!            dtype u8 (0 = f32), ndim u64 LE, dims u64 LE each,
//!            payload little-endian f32
//! ```
//!
//! Saves are atomic (temp file + rename) and deterministic: saving the same
//! model twice produces byte-identical files, and save→load→save round-trips
//! at the bit level. Loading validates the header, the metadata schema, and
//! the full tensor-name/shape table against a freshly built architecture
//! before copying any weight.

use crate::nn::{build_arch, Layer, NetMode, Network, NnError};
use crate::snn::SnnConfig;
use crate::tensor::Tensor;
use crate::train::ObjectiveKind;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"SPIKCKPT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MAX_NAME: u64 = 4096;
const MAX_NDIM: u64 = 8;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {found} (supported: {VERSION})")]
    UnknownVersion { path: PathBuf, found: u32 },
    #[error("{path}: malformed metadata: {reason}")]
    InvalidMeta { path: PathBuf, reason: String },
    #[error("{path}: truncated or trailing bytes in tensor table")]
    Truncated { path: PathBuf },
    #[error("{path}: tensor table does not match architecture {arch} (missing: {missing:?}, unexpected: {unexpected:?})")]
    ArchMismatch {
        path: PathBuf,
        arch: String,
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("{path}: tensor {name} has shape {found:?}, architecture expects {expected:?}")]
    TensorShape {
        path: PathBuf,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is {found:?} mode, this step needs {required:?}")]
    ModeMismatch { required: NetMode, found: NetMode },
    #[error(transparent)]
    Arch(#[from] NnError),
    #[error("inconsistent save request: {0}")]
    Config(String),
}

/// Where a model came from: the objective that trained it, its budget and
/// seed, and (for converted/finetuned models) the hash of the checkpoint it
/// was derived from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub objective: ObjectiveKind,
    pub epsilon: f32,
    pub seed: u64,
    pub epochs: usize,
    pub source_sha256: Option<String>,
}

impl Provenance {
    pub fn new(objective: ObjectiveKind, epsilon: f32, seed: u64, epochs: usize) -> Self {
        Provenance {
            objective,
            epsilon,
            seed,
            epochs,
            source_sha256: None,
        }
    }

    pub fn derived_from(mut self, source_hash: String) -> Self {
        self.source_sha256 = Some(source_hash);
        self
    }
}

/// The JSON metadata block. Everything needed to rebuild the architecture
/// and judge pipeline compatibility without touching the tensor table.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CkptMeta {
    pub arch: String,
    pub in_shape: [usize; 3],
    pub num_classes: usize,
    pub mode: NetMode,
    pub snn: Option<SnnConfig>,
    /// Firing thresholds per neuron layer, in layer order (a human-readable
    /// mirror of the `.v_th` tensors).
    pub thresholds: Vec<f32>,
    pub provenance: Provenance,
}

impl CkptMeta {
    /// Gate a pipeline step on checkpoint mode (convert wants ANN, finetune
    /// wants SNN, attack/eval accept both).
    pub fn require_mode(&self, required: NetMode) -> Result<(), CkptError> {
        if self.mode != required {
            return Err(CkptError::ModeMismatch {
                required,
                found: self.mode,
            });
        }
        Ok(())
    }
}

fn gather_thresholds(net: &Network) -> Vec<f32> {
    net.layers
        .iter()
        .filter_map(|l| match l {
            Layer::Neuron { v_th } => Some(v_th.data()[0]),
            _ => None,
        })
        .collect()
}

fn encode(net: &Network, meta: &CkptMeta) -> Vec<u8> {
    let meta_json = serde_json::to_vec(meta).expect("metadata serializes");
    let names = net.tensor_names();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    out.write_u64::<LittleEndian>(meta_json.len() as u64).unwrap();
    out.extend_from_slice(&meta_json);
    out.write_u64::<LittleEndian>(names.len() as u64).unwrap();
    for name in &names {
        let t = net.tensor(name).expect("named tensor exists");
        out.write_u64::<LittleEndian>(name.len() as u64).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.write_u64::<LittleEndian>(t.shape().len() as u64).unwrap();
        for &d in t.shape() {
            out.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for &v in t.data() {
            out.write_u32::<LittleEndian>(v.to_bits()).unwrap();
        }
    }
    out
}

fn decode(bytes: &[u8], path: &Path) -> Result<(Network, CkptMeta), CkptError> {
    let truncated = || CkptError::Truncated {
        path: path.to_path_buf(),
    };
    let mut cur = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| truncated())?;
    if &magic != MAGIC {
        return Err(CkptError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = cur.read_u32::<LittleEndian>().map_err(|_| truncated())?;
    if version != VERSION {
        return Err(CkptError::UnknownVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let meta_len = cur.read_u64::<LittleEndian>().map_err(|_| truncated())? as usize;
    let meta_start = cur.position() as usize;
    let meta_end = meta_start.checked_add(meta_len).ok_or_else(truncated)?;
    if meta_end > bytes.len() {
        return Err(truncated());
    }
    let meta: CkptMeta =
        serde_json::from_slice(&bytes[meta_start..meta_end]).map_err(|e| CkptError::InvalidMeta {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    cur.set_position(meta_end as u64);
    let invalid = |reason: String| CkptError::InvalidMeta {
        path: path.to_path_buf(),
        reason,
    };
    match (meta.mode, &meta.snn) {
        (NetMode::Snn, None) => {
            return Err(invalid("snn-mode checkpoint lacks an snn config".into()))
        }
        (NetMode::Ann, Some(_)) => {
            return Err(invalid("ann-mode checkpoint carries an snn config".into()))
        }
        _ => {}
    }

    let count = cur.read_u64::<LittleEndian>().map_err(|_| truncated())?;
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let name_len = cur.read_u64::<LittleEndian>().map_err(|_| truncated())?;
        if name_len > MAX_NAME {
            return Err(invalid(format!("tensor name length {name_len} too large")));
        }
        let mut name_buf = vec![0u8; name_len as usize];
        cur.read_exact(&mut name_buf).map_err(|_| truncated())?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| invalid("tensor name is not UTF-8".into()))?;
        if !seen.insert(name.clone()) {
            return Err(invalid(format!("duplicate tensor entry {name}")));
        }
        let dtype = cur.read_u8().map_err(|_| truncated())?;
        if dtype != DTYPE_F32 {
            return Err(invalid(format!("unsupported dtype tag {dtype} for {name}")));
        }
        let ndim = cur.read_u64::<LittleEndian>().map_err(|_| truncated())?;
        if ndim > MAX_NDIM {
            return Err(invalid(format!("tensor {name} has ndim {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let d = cur.read_u64::<LittleEndian>().map_err(|_| truncated())? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| {
                invalid(format!("tensor {name} dimension overflow"))
            })?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f32::from_bits(
                cur.read_u32::<LittleEndian>().map_err(|_| truncated())?,
            ));
        }
        entries.push((name, shape, data));
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(truncated());
    }

    // Rebuild the architecture, then validate the complete name and shape
    // table before a single weight is copied in.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = build_arch(&meta.arch, meta.in_shape, meta.num_classes, &mut rng)?;
    net.mode = meta.mode;
    if seen.contains("output_bias") {
        net.output_bias = Some(Tensor::zeros(&[meta.num_classes]));
    }
    let expected: BTreeSet<String> = net.tensor_names().into_iter().collect();
    if expected != seen {
        return Err(CkptError::ArchMismatch {
            path: path.to_path_buf(),
            arch: meta.arch.clone(),
            missing: expected.difference(&seen).cloned().collect(),
            unexpected: seen.difference(&expected).cloned().collect(),
        });
    }
    for (name, shape, _) in &entries {
        let have = net.tensor(name).expect("validated name").shape();
        if have != shape.as_slice() {
            return Err(CkptError::TensorShape {
                path: path.to_path_buf(),
                name: name.clone(),
                expected: have.to_vec(),
                found: shape.clone(),
            });
        }
    }
    let neuron_layers = gather_thresholds(&net).len();
    if meta.thresholds.len() != neuron_layers {
        return Err(invalid(format!(
            "metadata lists {} thresholds, architecture has {} neuron layers",
            meta.thresholds.len(),
            neuron_layers
        )));
    }

    for (name, shape, data) in entries {
        *net.tensor_mut(&name).expect("validated name") =
            Tensor::new(shape, data).expect("validated shape");
    }
    Ok((net, meta))
}

/// Write `net` (plus provenance) to `path` atomically. `snn` must be given
/// exactly when the model is in spiking mode.
pub fn save(
    net: &Network,
    snn: Option<&SnnConfig>,
    provenance: &Provenance,
    path: &Path,
) -> Result<(), CkptError> {
    match (net.mode, snn) {
        (NetMode::Snn, None) => {
            return Err(CkptError::Config(
                "spiking model saved without its snn config".into(),
            ))
        }
        (NetMode::Ann, Some(_)) => {
            return Err(CkptError::Config(
                "analog model saved with an snn config".into(),
            ))
        }
        _ => {}
    }
    let meta = CkptMeta {
        arch: net.arch.clone(),
        in_shape: net.in_shape,
        num_classes: net.num_classes,
        mode: net.mode,
        snn: snn.copied(),
        thresholds: gather_thresholds(net),
        provenance: provenance.clone(),
    };
    let bytes = encode(net, &meta);
    let io_err = |source: std::io::Error| CkptError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    if let Err(e) = std::fs::write(&tmp, &bytes) {
        let _ = std::fs::remove_file(&tmp);
        return Err(io_err(e));
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io_err(e)
    })
}

/// Read, validate, and reconstruct a model and its metadata.
pub fn load(path: &Path) -> Result<(Network, CkptMeta), CkptError> {
    let bytes = std::fs::read(path).map_err(|source| CkptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}

/// Hex SHA-256 of a file, used to link derived checkpoints to their source.
pub fn sha256_hex(path: &Path) -> Result<String, CkptError> {
    let bytes = std::fs::read(path).map_err(|source| CkptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample_net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = build_arch("mlp-small", [3, 3, 1], 2, &mut rng).unwrap();
        // Perturb running stats and thresholds so the round trip covers
        // non-default state.
        for name in net.tensor_names() {
            if name.ends_with(".running_mean") || name.ends_with(".running_var") {
                for v in net.tensor_mut(&name).unwrap().data_mut() {
                    *v += rng.gen_range(0.0..0.5);
                }
            }
        }
        net
    }

    fn prov() -> Provenance {
        Provenance::new(ObjectiveKind::At, 0.1, 7, 3)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = sample_net(1);
        save(&net, None, &prov(), &path).unwrap();
        let (loaded, meta) = load(&path).unwrap();
        assert_eq!(meta.arch, "mlp-small");
        assert_eq!(meta.mode, NetMode::Ann);
        assert_eq!(meta.provenance, prov());
        for name in net.tensor_names() {
            let a = net.tensor(&name).unwrap();
            let b = loaded.tensor(&name).unwrap();
            assert_eq!(a.shape(), b.shape(), "{name}");
            let bits_equal = a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(bits_equal, "{name} changed across round trip");
        }
        // save(load(x)) == x byte-for-byte.
        let path2 = dir.path().join("model2.ckpt");
        save(&loaded, None, &meta.provenance, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn save_twice_is_byte_identical_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let net = sample_net(2);
        save(&net, None, &prov(), &a).unwrap();
        save(&net, None, &prov(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .is_some_and(|x| x == "tmp")
            })
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn failed_save_leaves_existing_file_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = sample_net(3);
        save(&net, None, &prov(), &path).unwrap();
        let original = std::fs::read(&path).unwrap();
        // A save into a missing directory fails before any rename can run.
        let bad = dir.path().join("no-such-dir").join("model.ckpt");
        assert!(matches!(
            save(&net, None, &prov(), &bad),
            Err(CkptError::Io { .. })
        ));
        assert_eq!(std::fs::read(&path).unwrap(), original);
    }

    #[test]
    fn bad_magic_and_bad_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT________").unwrap();
        assert!(matches!(load(&path), Err(CkptError::BadMagic { .. })));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.write_u32::<LittleEndian>(99).unwrap();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load(&path),
            Err(CkptError::UnknownVersion { found: 99, .. })
        ));
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = sample_net(4);
        save(&net, None, &prov(), &path).unwrap();
        let full = std::fs::read(&path).unwrap();

        let cut = &full[..full.len() - 5];
        std::fs::write(&path, cut).unwrap();
        assert!(matches!(load(&path), Err(CkptError::Truncated { .. })));

        let mut extended = full.clone();
        extended.extend_from_slice(&[0, 0, 0]);
        std::fs::write(&path, &extended).unwrap();
        assert!(matches!(load(&path), Err(CkptError::Truncated { .. })));
    }

    #[test]
    fn mismatched_tensor_table_rejected_before_load() {
        let net = sample_net(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        // Same architecture name, different input shape: every name matches
        // but the first weight's shape cannot.
        let mut meta = CkptMeta {
            arch: net.arch.clone(),
            in_shape: [4, 4, 1],
            num_classes: net.num_classes,
            mode: net.mode,
            snn: None,
            thresholds: gather_thresholds(&net),
            provenance: prov(),
        };
        std::fs::write(&path, encode(&net, &meta)).unwrap();
        assert!(matches!(load(&path), Err(CkptError::TensorShape { .. })));

        // Drop the final tensor entry (and fix the count): the rebuilt
        // architecture then reports exactly that name as missing.
        meta.in_shape = net.in_shape;
        let full = encode(&net, &meta);
        let names = net.tensor_names();
        let last = names.last().unwrap();
        let t = net.tensor(last).unwrap();
        let entry_len = 8 + last.len() + 1 + 8 + 8 * t.shape().len() + 4 * t.numel();
        let mut cut = full[..full.len() - entry_len].to_vec();
        let meta_len = u64::from_le_bytes(full[12..20].try_into().unwrap()) as usize;
        let count_at = 20 + meta_len;
        cut[count_at..count_at + 8]
            .copy_from_slice(&((names.len() - 1) as u64).to_le_bytes());
        std::fs::write(&path, &cut).unwrap();
        match load(&path) {
            Err(CkptError::ArchMismatch { missing, .. }) => {
                assert_eq!(missing, vec![last.clone()]);
            }
            other => panic!("expected ArchMismatch, got {other:?}"),
        }
    }

    #[test]
    fn mode_gate_matches_pipeline_contract() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.ckpt");
        let net = sample_net(6);
        save(&net, None, &prov(), &path).unwrap();
        let (_, meta) = load(&path).unwrap();
        assert!(meta.require_mode(NetMode::Ann).is_ok()); // convert accepts
        assert!(matches!(
            meta.require_mode(NetMode::Snn), // finetune rejects
            Err(CkptError::ModeMismatch { .. })
        ));
    }

    #[test]
    fn snn_round_trip_keeps_config_bias_and_provenance_hash() {
        let dir = tempfile::tempdir().unwrap();
        let ann_path = dir.path().join("ann.ckpt");
        let ann = sample_net(7);
        save(&ann, None, &prov(), &ann_path).unwrap();
        let source_hash = sha256_hex(&ann_path).unwrap();

        let mut snn = crate::convert::transfer_weights(&ann).unwrap();
        snn.output_bias = Some(Tensor::zeros(&[snn.num_classes]));
        let cfg = SnnConfig::default_if(8);
        let snn_path = dir.path().join("snn.ckpt");
        let p = Provenance::new(ObjectiveKind::ConvFinetune, 0.1, 7, 0)
            .derived_from(source_hash.clone());
        save(&snn, Some(&cfg), &p, &snn_path).unwrap();

        let (loaded, meta) = load(&snn_path).unwrap();
        assert_eq!(meta.mode, NetMode::Snn);
        assert_eq!(meta.snn, Some(cfg));
        assert_eq!(meta.provenance.source_sha256.as_deref(), Some(source_hash.as_str()));
        assert_eq!(meta.provenance.source_sha256.as_deref().map(str::len), Some(64));
        assert!(loaded.output_bias.is_some());
        assert_eq!(meta.thresholds.len(), gather_thresholds(&snn).len());

        // Saving a spiking model without its config (or an analog one with
        // a config) is an inconsistent request.
        assert!(matches!(
            save(&snn, None, &p, &snn_path),
            Err(CkptError::Config(_))
        ));
        assert!(matches!(
            save(&ann, Some(&cfg), &p, &snn_path),
            Err(CkptError::Config(_))
        ));
    }
}
