//! Flat binary tensor container with a JSON header.
//!
//! Layout: an 8-byte little-endian header length, the UTF-8 JSON header,
//! then the payload — every tensor's elements concatenated row-major in
//! declaration order, each element little-endian at the container's dtype
//! (8-byte reals by default, 4-byte optional for bulk calibration data).
//!
//! The header carries the format tag and version, the dtype, an explicit
//! byte-order marker, the shape table (name, rows, cols, element offset),
//! and a sorted string-to-string metadata map for provenance (seeds, source
//! tags, embedded configs). Sorted metadata plus fixed field order make the
//! serialized bytes — and therefore the content hash — deterministic.
//!
//! Writes are atomic: the bytes go to a temporary sibling file which is
//! then renamed over the destination.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mla::WeightSet;
use crate::reparam::{CalibrationSet, OrthogonalTransform, TransformKind};
use crate::Matrix;

const FORMAT_TAG: &str = "tensor-container";
const FORMAT_VERSION: u32 = 1;
const BYTE_ORDER: &str = "little_endian";

/// Payload element width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

/// One tensor's slot in the shape table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Element (not byte) offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContainerHeader {
    format: String,
    version: u32,
    byte_order: String,
    dtype: Dtype,
    tensors: Vec<TensorEntry>,
    meta: BTreeMap<String, String>,
}

/// In-memory container: named matrices plus metadata.
#[derive(Debug, Clone)]
pub struct Container {
    dtype: Dtype,
    tensors: Vec<(String, Matrix)>,
    meta: BTreeMap<String, String>,
}

impl Container {
    pub fn new(dtype: Dtype) -> Self {
        Container {
            dtype,
            tensors: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn push(&mut self, name: &str, m: Matrix) -> Result<()> {
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(Error::ContainerFormat(format!("duplicate tensor name '{name}'")));
        }
        self.tensors.push((name.to_string(), m));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::ContainerFormat(format!("missing tensor '{name}'")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::ContainerFormat(format!("missing metadata key '{key}'")))
    }

    pub fn meta_map(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    /// Serializes to the on-disk byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, m) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                offset,
            });
            offset += m.rows() * m.cols();
        }
        let header = ContainerHeader {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            byte_order: BYTE_ORDER.to_string(),
            dtype: self.dtype,
            tensors: entries,
            meta: self.meta.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + header_json.len() + offset * self.dtype.size());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, m) in &self.tensors {
            match self.dtype {
                Dtype::F64 => {
                    for &v in m.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Dtype::F32 => {
                    for &v in m.data() {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Parses the on-disk byte layout. `f32` payloads widen to `f64`
    /// matrices; the original dtype stays recorded on the container.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::ContainerFormat(format!(
                "file too short for a header length ({} bytes)",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                Error::ContainerFormat(format!("header length {header_len} exceeds file size"))
            })?;
        let header: ContainerHeader = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::ContainerFormat(format!("header is not valid JSON: {e}")))?;
        if header.format != FORMAT_TAG {
            return Err(Error::ContainerFormat(format!(
                "unknown format tag '{}'",
                header.format
            )));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::ContainerFormat(format!(
                "unsupported version {} (supported: {FORMAT_VERSION})",
                header.version
            )));
        }
        if header.byte_order != BYTE_ORDER {
            return Err(Error::ContainerFormat(format!(
                "unsupported byte order '{}'",
                header.byte_order
            )));
        }
        let payload = &bytes[header_end..];
        let esize = header.dtype.size();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.rows * e.cols;
            let start = e
                .offset
                .checked_mul(esize)
                .filter(|&s| s + n * esize <= payload.len())
                .ok_or_else(|| {
                    Error::ContainerFormat(format!(
                        "tensor '{}' extends past the payload ({} elements at offset {})",
                        e.name, n, e.offset
                    ))
                })?;
            let mut data = Vec::with_capacity(n);
            match header.dtype {
                Dtype::F64 => {
                    for i in 0..n {
                        let b = &payload[start + i * 8..start + (i + 1) * 8];
                        data.push(f64::from_le_bytes(b.try_into().unwrap()));
                    }
                }
                Dtype::F32 => {
                    for i in 0..n {
                        let b = &payload[start + i * 4..start + (i + 1) * 4];
                        data.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
                    }
                }
            }
            tensors.push((e.name.clone(), Matrix::from_vec(e.rows, e.cols, data)?));
        }
        Ok(Container {
            dtype: header.dtype,
            tensors,
            meta: header.meta,
        })
    }

    /// SHA-256 of the serialized bytes, hex-encoded. Stable across runs for
    /// identical contents.
    pub fn content_hash(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        Ok(hex)
    }

    /// Writes atomically: serialize to a temporary sibling, fsync, rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Write-then-rename so readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::arg("write_atomic", format!("path '{}' has no file name", path.display())))?;
    let mut tmp = path.to_path_buf();
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    tmp.set_file_name(tmp_name);
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// --- Weight sets -----------------------------------------------------------

const WEIGHT_TENSORS: [&str; 8] = [
    "kv_down", "k_rope", "q_down", "q_up", "q_rope", "k_up", "v_up", "out_proj",
];

/// Packs a weight set (with its config and optional provenance) into a
/// container.
pub fn weights_to_container(
    cfg: &ModelConfig,
    w: &WeightSet,
    meta: &[(&str, &str)],
) -> Result<Container> {
    w.validate(cfg)?;
    let mut c = Container::new(Dtype::F64);
    c.push("kv_down", w.kv_down.clone())?;
    c.push("k_rope", w.k_rope.clone())?;
    c.push("q_down", w.q_down.clone())?;
    c.push("q_up", w.q_up.clone())?;
    c.push("q_rope", w.q_rope.clone())?;
    c.push("k_up", w.k_up.clone())?;
    c.push("v_up", w.v_up.clone())?;
    c.push("out_proj", w.out_proj.clone())?;
    c.push("norm_gamma", Matrix::from_row(&w.norm_gamma))?;
    c.set_meta("kind", "weights");
    c.set_meta("config", &serde_json::to_string(cfg)?);
    for (k, v) in meta {
        c.set_meta(k, v);
    }
    Ok(c)
}

/// Reconstructs the config and weight set from a container, re-validating
/// every shape.
pub fn weights_from_container(c: &Container) -> Result<(ModelConfig, WeightSet)> {
    if c.meta("kind")? != "weights" {
        return Err(Error::ContainerFormat(format!(
            "expected a weights container, found kind '{}'",
            c.meta("kind")?
        )));
    }
    let cfg: ModelConfig = serde_json::from_str(c.meta("config")?)
        .map_err(|e| Error::ContainerFormat(format!("embedded config unreadable: {e}")))?;
    cfg.validate()?;
    let take = |name: &str| -> Result<Matrix> { Ok(c.get(name)?.clone()) };
    let w = WeightSet {
        kv_down: take(WEIGHT_TENSORS[0])?,
        k_rope: take(WEIGHT_TENSORS[1])?,
        q_down: take(WEIGHT_TENSORS[2])?,
        q_up: take(WEIGHT_TENSORS[3])?,
        q_rope: take(WEIGHT_TENSORS[4])?,
        k_up: take(WEIGHT_TENSORS[5])?,
        v_up: take(WEIGHT_TENSORS[6])?,
        out_proj: take(WEIGHT_TENSORS[7])?,
        norm_gamma: c.get("norm_gamma")?.data().to_vec(),
    };
    w.validate(&cfg)?;
    Ok((cfg, w))
}

pub fn save_weights(path: &Path, cfg: &ModelConfig, w: &WeightSet, meta: &[(&str, &str)]) -> Result<()> {
    weights_to_container(cfg, w, meta)?.write(path)
}

pub fn load_weights(path: &Path) -> Result<(ModelConfig, WeightSet)> {
    weights_from_container(&Container::read(path)?)
}

// --- Transforms --------------------------------------------------------------

/// Packs an orthogonal transform (matrix plus per-slice constants).
pub fn transform_to_container(t: &OrthogonalTransform, meta: &[(&str, &str)]) -> Result<Container> {
    let mut c = Container::new(Dtype::F64);
    c.push("u", t.matrix().clone())?;
    let s = t.scales();
    c.push("rms_scales", Matrix::from_row(&s.rms))?;
    c.push("logit_scales", Matrix::from_row(&s.logit))?;
    c.set_meta("kind", "transform");
    c.set_meta("transform_kind", &t.kind().to_string());
    c.set_meta("group_count", &t.group_count().to_string());
    for (k, v) in meta {
        c.set_meta(k, v);
    }
    Ok(c)
}

/// Reconstructs a transform. Shape checks run here; orthogonality is *not*
/// re-proved on load — that is the verification suite's job, which keeps
/// deliberately corrupted files loadable for negative tests.
pub fn transform_from_container(c: &Container) -> Result<OrthogonalTransform> {
    if c.meta("kind")? != "transform" {
        return Err(Error::ContainerFormat(format!(
            "expected a transform container, found kind '{}'",
            c.meta("kind")?
        )));
    }
    let kind: TransformKind = c.meta("transform_kind")?.parse()?;
    let group_count: usize = c
        .meta("group_count")?
        .parse()
        .map_err(|e| Error::ContainerFormat(format!("group_count unreadable: {e}")))?;
    let u = c.get("u")?.clone();
    let rms = c.get("rms_scales")?.data().to_vec();
    let logit = c.get("logit_scales")?.data().to_vec();
    OrthogonalTransform::new(u, kind, group_count, rms, logit)
}

pub fn save_transform(path: &Path, t: &OrthogonalTransform, meta: &[(&str, &str)]) -> Result<()> {
    transform_to_container(t, meta)?.write(path)
}

pub fn load_transform(path: &Path) -> Result<OrthogonalTransform> {
    transform_from_container(&Container::read(path)?)
}

// --- Calibration sets ---------------------------------------------------------

/// Packs calibration features; `dtype` may drop to `f32` for bulk data.
pub fn calibration_to_container(cal: &CalibrationSet, dtype: Dtype) -> Result<Container> {
    let mut c = Container::new(dtype);
    c.push("features", cal.features().clone())?;
    c.set_meta("kind", "calibration");
    c.set_meta("source", cal.source());
    Ok(c)
}

pub fn calibration_from_container(c: &Container) -> Result<CalibrationSet> {
    if c.meta("kind")? != "calibration" {
        return Err(Error::ContainerFormat(format!(
            "expected a calibration container, found kind '{}'",
            c.meta("kind")?
        )));
    }
    CalibrationSet::new(c.get("features")?.clone(), c.meta("source")?)
}

pub fn save_calibration(path: &Path, cal: &CalibrationSet, dtype: Dtype) -> Result<()> {
    calibration_to_container(cal, dtype)?.write(path)
}

pub fn load_calibration(path: &Path) -> Result<CalibrationSet> {
    calibration_from_container(&Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mla::init_weights;
    use crate::reparam::build_hadamard;
    use crate::SeededRng;

    #[test]
    fn bytes_round_trip_exactly() {
        let mut rng = SeededRng::new(5);
        let mut c = Container::new(Dtype::F64);
        c.push("a", rng.gaussian_matrix(3, 4, 1.0)).unwrap();
        c.push("b", rng.gaussian_matrix(1, 7, 0.1)).unwrap();
        c.set_meta("seed", "5");
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.get("a").unwrap(), c.get("a").unwrap());
        assert_eq!(back.get("b").unwrap(), c.get("b").unwrap());
        assert_eq!(back.meta("seed").unwrap(), "5");
        assert_eq!(back.names(), vec!["a", "b"]);
    }

    #[test]
    fn header_layout_is_as_documented() {
        let mut c = Container::new(Dtype::F64);
        c.push("x", Matrix::from_row(&[1.5])).unwrap();
        let bytes = c.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["format"], "tensor-container");
        assert_eq!(header["byte_order"], "little_endian");
        assert_eq!(header["dtype"], "f64");
        // Payload: exactly one little-endian f64.
        assert_eq!(bytes.len(), 8 + hlen + 8);
        assert_eq!(f64::from_le_bytes(bytes[8 + hlen..].try_into().unwrap()), 1.5);
    }

    #[test]
    fn f32_payload_widens_on_load() {
        let mut c = Container::new(Dtype::F32);
        c.push("x", Matrix::from_row(&[0.5, -2.0, 3.25])).unwrap();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        // Values exactly representable in f32 survive the round trip.
        assert_eq!(back.get("x").unwrap().row(0), &[0.5, -2.0, 3.25]);
        assert_eq!(back.dtype(), Dtype::F32);
    }

    #[test]
    fn corrupt_inputs_are_rejected_with_context() {
        assert!(Container::from_bytes(&[1, 2, 3]).is_err());
        // Header length pointing past the end.
        let mut bytes = vec![0u8; 8];
        bytes[0] = 200;
        assert!(Container::from_bytes(&bytes).is_err());
        // Valid shell, truncated payload.
        let mut c = Container::new(Dtype::F64);
        c.push("x", Matrix::from_row(&[1.0, 2.0])).unwrap();
        let mut good = c.to_bytes().unwrap();
        good.truncate(good.len() - 4);
        let err = Container::from_bytes(&good).unwrap_err();
        assert!(matches!(err, Error::ContainerFormat(_)));
        // Duplicate names never serialize.
        let mut c = Container::new(Dtype::F64);
        c.push("x", Matrix::from_row(&[1.0])).unwrap();
        assert!(c.push("x", Matrix::from_row(&[2.0])).is_err());
    }

    #[test]
    fn content_hash_is_stable_and_discriminating() {
        let mut rng = SeededRng::new(11);
        let m = rng.gaussian_matrix(4, 4, 1.0);
        let mut c1 = Container::new(Dtype::F64);
        c1.push("m", m.clone()).unwrap();
        let mut c2 = Container::new(Dtype::F64);
        c2.push("m", m.clone()).unwrap();
        assert_eq!(c1.content_hash().unwrap(), c2.content_hash().unwrap());
        let mut m2 = m.clone();
        m2.set(0, 0, m.get(0, 0) + 1e-12);
        let mut c3 = Container::new(Dtype::F64);
        c3.push("m", m2).unwrap();
        assert_ne!(c1.content_hash().unwrap(), c3.content_hash().unwrap());
        assert_eq!(c1.content_hash().unwrap().len(), 64);
    }

    #[test]
    fn weights_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let cfg = ModelConfig::toy();
        let mut rng = SeededRng::new(77);
        let w = init_weights(&cfg, &mut rng, 1.0).unwrap();
        save_weights(&path, &cfg, &w, &[("seed", "77")]).unwrap();
        let (cfg2, w2) = load_weights(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(w2.kv_down, w.kv_down);
        assert_eq!(w2.out_proj, w.out_proj);
        assert_eq!(w2.norm_gamma, w.norm_gamma);
    }

    #[test]
    fn transform_round_trip_preserves_constants() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transform.bin");
        let mut rng = SeededRng::new(3);
        let t = build_hadamard(8, 2, &mut rng, true).unwrap();
        save_transform(&path, &t, &[("seed", "3")]).unwrap();
        let t2 = load_transform(&path).unwrap();
        assert_eq!(t2.matrix(), t.matrix());
        assert_eq!(t2.kind(), t.kind());
        assert_eq!(t2.group_count(), t.group_count());
        assert_eq!(t2.scales().rms, t.scales().rms);
        assert_eq!(t2.scales().logit, t.scales().logit);
    }

    #[test]
    fn corrupted_transform_still_loads_for_negative_testing() {
        // Flipping payload bytes must not make the file unreadable — the
        // orthogonality check lives in the verification suite, and negative
        // tests depend on being able to load a broken transform. The `u`
        // matrix is the first tensor, so its first element sits right after
        // the header; zeroing that element's exponent bits knocks a 0.5
        // entry down to a denormal and breaks orthogonality by ~0.25.
        let mut rng = SeededRng::new(9);
        let t = build_hadamard(4, 2, &mut rng, false).unwrap();
        let mut bytes = transform_to_container(&t, &[]).unwrap().to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let first_elem_high_byte = 8 + hlen + 7;
        bytes[first_elem_high_byte] ^= 0x3f;
        let c = Container::from_bytes(&bytes).unwrap();
        let t2 = transform_from_container(&c).unwrap();
        assert!(t2.orthogonality_error() > 1e-10);
    }

    #[test]
    fn calibration_round_trip_and_f32_compaction() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(21);
        let cal = CalibrationSet::new(rng.gaussian_matrix(16, 8, 1.0), "unit-test").unwrap();
        let p64 = dir.path().join("cal64.bin");
        let p32 = dir.path().join("cal32.bin");
        save_calibration(&p64, &cal, Dtype::F64).unwrap();
        save_calibration(&p32, &cal, Dtype::F32).unwrap();
        let back = load_calibration(&p64).unwrap();
        assert_eq!(back.features(), cal.features());
        assert_eq!(back.source(), "unit-test");
        // f32 storage is half the payload and loses only low bits.
        let s64 = std::fs::metadata(&p64).unwrap().len();
        let s32 = std::fs::metadata(&p32).unwrap().len();
        assert!(s32 < s64);
        let lossy = load_calibration(&p32).unwrap();
        let err = lossy.features().max_abs_diff(cal.features()).unwrap();
        assert!(err > 0.0 && err < 1e-6);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let mut rng = SeededRng::new(2);
        let cal = CalibrationSet::new(rng.gaussian_matrix(4, 4, 1.0), "x").unwrap();
        let c = calibration_to_container(&cal, Dtype::F64).unwrap();
        assert!(weights_from_container(&c).is_err());
        assert!(transform_from_container(&c).is_err());
    }

    #[test]
    fn atomic_write_replaces_existing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        std::fs::write(&path, b"garbage that must disappear").unwrap();
        let mut c = Container::new(Dtype::F64);
        c.push("x", Matrix::from_row(&[4.0])).unwrap();
        c.write(&path).unwrap();
        let back = Container::read(&path).unwrap();
        assert_eq!(back.get("x").unwrap().get(0, 0), 4.0);
        // No temporary remains.
        assert!(!dir.path().join("out.bin.tmp").exists());
    }
}
