// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary file formats.
//!
//! Activation file:
//!
//! ```text
//! magic    16 bytes  "GAE-ACTIVATIONS\0"
//! version  u32 LE
//! flags    u32 LE    bit 0: a paired target block follows the data block
//! n        u64 LE
//! d        u64 LE
//! d_target u64 LE    only when bit 0 is set
//! data     n*d f64 LE, row-major
//! target   n*d_target f64 LE, row-major (optional)
//! ```
//!
//! Tensor container (dictionary checkpoints, logit heads, second moments):
//!
//! ```text
//! magic    16 bytes  "GAE-TENSORS\0\0\0\0\0"
//! version  u32 LE
//! reserved u32 LE
//! meta_len u64 LE
//! meta     meta_len bytes of UTF-8 JSON, including a manifest of tensors
//! blocks   f64 LE row-major tensors at the manifest offsets
//! ```

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GaeError, Result};
use crate::explainer::{ActivationBatch, Dictionary, ExplainerKind, Sparsifier};
use crate::metrics::LogitHead;
use crate::spectral::SecondMoment;

pub const ACTIVATION_MAGIC: &[u8; 16] = b"GAE-ACTIVATIONS\0";
pub const TENSOR_MAGIC: &[u8; 16] = b"GAE-TENSORS\0\0\0\0\0";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_TARGET: u32 = 1;
/// Upper bound on a metadata document, to reject garbage lengths early.
const MAX_META_BYTES: u64 = 1 << 24;

pub fn write_activations<W: Write>(mut w: W, batch: &ActivationBatch) -> Result<()> {
    w.write_all(ACTIVATION_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let flags = if batch.has_target() { FLAG_TARGET } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&(batch.n() as u64).to_le_bytes())?;
    w.write_all(&(batch.d() as u64).to_le_bytes())?;
    if batch.has_target() {
        w.write_all(&(batch.target().ncols() as u64).to_le_bytes())?;
    }
    write_row_major(&mut w, batch.data())?;
    if batch.has_target() {
        write_row_major(&mut w, batch.target())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_activations<R: Read>(mut r: R) -> Result<ActivationBatch> {
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != ACTIVATION_MAGIC {
        return Err(GaeError::Format("not an activation file (bad magic bytes)".into()));
    }
    check_version(read_u32(&mut r)?)?;
    let flags = read_u32(&mut r)?;
    if flags & !FLAG_TARGET != 0 {
        return Err(GaeError::Format(format!("unknown activation flags {flags:#x}")));
    }
    let n = read_len(&mut r)?;
    let d = read_len(&mut r)?;
    let d_target = if flags & FLAG_TARGET != 0 {
        Some(read_len(&mut r)?)
    } else {
        None
    };
    let data = read_row_major(&mut r, n, d)?;
    match d_target {
        Some(dt) => {
            let target = read_row_major(&mut r, n, dt)?;
            ActivationBatch::with_target(data, target)
        }
        None => ActivationBatch::new(data),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset from the start of the block section.
    pub offset: u64,
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    /// Seeds used along the way, oldest first.
    pub seeds: Vec<u64>,
    /// Free-form description of each producing step, oldest first.
    pub steps: Vec<String>,
}

impl Lineage {
    pub fn root(seed: u64, step: impl Into<String>) -> Self {
        Self {
            seeds: vec![seed],
            steps: vec![step.into()],
        }
    }

    pub fn then(&self, seed: u64, step: impl Into<String>) -> Self {
        let mut out = self.clone();
        out.seeds.push(seed);
        out.steps.push(step.into());
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerMeta {
    content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dictionary: Option<DictionaryMeta>,
    lineage: Lineage,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DictionaryMeta {
    d: usize,
    d_in: usize,
    k: usize,
    sparsifier: Sparsifier,
    explainer_kind: ExplainerKind,
}

pub fn write_dictionary<W: Write>(w: W, dict: &Dictionary, lineage: &Lineage) -> Result<()> {
    let meta = DictionaryMeta {
        d: dict.d(),
        d_in: dict.d_in(),
        k: dict.k(),
        sparsifier: dict.sparsifier(),
        explainer_kind: dict.kind(),
    };
    let b_enc = as_row(dict.b_enc());
    let b_dec = as_row(dict.b_dec());
    write_container(
        w,
        "dictionary",
        Some(meta),
        lineage,
        &[
            ("w_enc", dict.w_enc()),
            ("b_enc", &b_enc),
            ("w_dec", dict.w_dec()),
            ("b_dec", &b_dec),
        ],
    )
}

pub fn read_dictionary<R: Read>(r: R) -> Result<(Dictionary, Lineage)> {
    let (meta, mut tensors) = read_container(r, "dictionary")?;
    let dm = meta
        .dictionary
        .ok_or_else(|| GaeError::Format("dictionary metadata missing".into()))?;
    let w_enc = take(&mut tensors, "w_enc", dm.k, dm.d_in)?;
    let b_enc = take(&mut tensors, "b_enc", 1, dm.k)?;
    let w_dec = take(&mut tensors, "w_dec", dm.d, dm.k)?;
    let b_dec = take(&mut tensors, "b_dec", 1, dm.d)?;
    let dict = Dictionary::new(
        w_enc,
        from_row(&b_enc),
        w_dec,
        from_row(&b_dec),
        dm.sparsifier,
        dm.explainer_kind,
    )?;
    Ok((dict, meta.lineage))
}

pub fn write_head<W: Write>(w: W, head: &LogitHead) -> Result<()> {
    let bias = as_row(head.bias());
    write_container(
        w,
        "logit_head",
        None,
        &Lineage::default(),
        &[("weight", head.weight()), ("bias", &bias)],
    )
}

pub fn read_head<R: Read>(r: R) -> Result<LogitHead> {
    let (_, mut tensors) = read_container(r, "logit_head")?;
    let weight = tensors
        .iter()
        .position(|(n, _)| n == "weight")
        .map(|i| tensors.swap_remove(i).1)
        .ok_or_else(|| GaeError::Format("tensor 'weight' missing".into()))?;
    let bias = take(&mut tensors, "bias", 1, weight.nrows())?;
    LogitHead::new(weight, from_row(&bias))
}

pub fn write_second_moment<W: Write>(w: W, m: &SecondMoment) -> Result<()> {
    write_container(w, "second_moment", None, &Lineage::default(), &[("matrix", m.matrix())])
}

pub fn read_second_moment<R: Read>(r: R) -> Result<SecondMoment> {
    let (_, mut tensors) = read_container(r, "second_moment")?;
    let dim = tensors
        .iter()
        .find(|(n, _)| n == "matrix")
        .map(|(_, m)| m.nrows())
        .ok_or_else(|| GaeError::Format("tensor 'matrix' missing".into()))?;
    SecondMoment::from_matrix(take(&mut tensors, "matrix", dim, dim)?)
}

/// What a file holds, judged from its leading magic bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Activations,
    Tensors,
}

pub fn sniff(magic: &[u8]) -> Result<FileKind> {
    match magic.get(..16) {
        Some(m) if m == ACTIVATION_MAGIC => Ok(FileKind::Activations),
        Some(m) if m == TENSOR_MAGIC => Ok(FileKind::Tensors),
        _ => Err(GaeError::Format("unrecognized magic bytes".into())),
    }
}

fn write_container<W: Write>(
    mut w: W,
    content: &str,
    dictionary: Option<DictionaryMeta>,
    lineage: &Lineage,
    tensors: &[(&str, &DMatrix<f64>)],
) -> Result<()> {
    let mut offset = 0u64;
    let manifest = tensors
        .iter()
        .map(|(name, m)| {
            let e = TensorEntry {
                name: name.to_string(),
                rows: m.nrows(),
                cols: m.ncols(),
                offset,
            };
            offset += (m.len() * 8) as u64;
            e
        })
        .collect();
    let meta = ContainerMeta {
        content: content.to_string(),
        dictionary,
        lineage: lineage.clone(),
        tensors: manifest,
    };
    let json = serde_json::to_vec(&meta)?;
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, m) in tensors {
        write_row_major(&mut w, m)?;
    }
    w.flush()?;
    Ok(())
}

type NamedTensors = Vec<(String, DMatrix<f64>)>;

fn read_container<R: Read>(mut r: R, expected: &str) -> Result<(ContainerMeta, NamedTensors)> {
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != TENSOR_MAGIC {
        return Err(GaeError::Format("not a tensor container (bad magic bytes)".into()));
    }
    check_version(read_u32(&mut r)?)?;
    let _reserved = read_u32(&mut r)?;
    let meta_len = read_u64(&mut r)?;
    if meta_len > MAX_META_BYTES {
        return Err(GaeError::Format(format!("metadata length {meta_len} is implausible")));
    }
    let mut json = vec![0u8; meta_len as usize];
    r.read_exact(&mut json).map_err(truncated)?;
    let meta: ContainerMeta =
        serde_json::from_slice(&json).map_err(|e| GaeError::Format(format!("metadata: {e}")))?;
    if meta.content != expected {
        return Err(GaeError::Format(format!(
            "expected a {expected} container, found {}",
            meta.content
        )));
    }
    let mut entries = meta.tensors.clone();
    entries.sort_by_key(|e| e.offset);
    let mut pos = 0u64;
    let mut tensors = Vec::with_capacity(entries.len());
    for e in &entries {
        if e.offset != pos {
            return Err(GaeError::Format(format!("tensor '{}' is not contiguous", e.name)));
        }
        let m = read_row_major(&mut r, e.rows, e.cols)?;
        pos += (e.rows * e.cols * 8) as u64;
        tensors.push((e.name.clone(), m));
    }
    Ok((meta, tensors))
}

fn take(tensors: &mut NamedTensors, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let i = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| GaeError::Format(format!("tensor '{name}' missing")))?;
    let (_, m) = tensors.swap_remove(i);
    if m.shape() != (rows, cols) {
        return Err(GaeError::Format(format!(
            "tensor '{name}' has shape {:?}, expected {:?}",
            m.shape(),
            (rows, cols)
        )));
    }
    Ok(m)
}

fn as_row(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

fn from_row(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.iter().copied())
}

fn write_row_major<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(m.ncols() * 8);
    for i in 0..m.nrows() {
        buf.clear();
        for v in m.row(i).iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_row_major<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let count = rows
        .checked_mul(cols)
        .filter(|c| c.checked_mul(8).is_some())
        .ok_or_else(|| GaeError::Format(format!("tensor shape {rows}x{cols} overflows")))?;
    let mut data = Vec::with_capacity(count.min(1 << 26));
    let mut row = vec![0u8; cols * 8];
    for _ in 0..rows {
        r.read_exact(&mut row).map_err(truncated)?;
        data.extend(row.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R) -> Result<usize> {
    let v = read_u64(r)?;
    usize::try_from(v).map_err(|_| GaeError::Format(format!("length {v} does not fit in memory")))
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(GaeError::Format(format!(
            "unsupported format version {v} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> GaeError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        GaeError::Format("file is truncated".into())
    } else {
        GaeError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, seeded};

    fn sample_dict() -> Dictionary {
        let mut rng = seeded(1);
        Dictionary::new(
            gaussian_matrix(&mut rng, 6, 4, 1.0),
            DVector::from_column_slice(gaussian_matrix(&mut rng, 6, 1, 1.0).as_slice()),
            gaussian_matrix(&mut rng, 3, 6, 1.0),
            DVector::from_column_slice(gaussian_matrix(&mut rng, 3, 1, 1.0).as_slice()),
            Sparsifier::TopK { k_active: 2 },
            ExplainerKind::Transcoder,
        )
        .unwrap()
    }

    #[test]
    fn second_moment_round_trip() {
        let mut rng = seeded(4);
        let a = gaussian_matrix(&mut rng, 4, 4, 1.0);
        let m = SecondMoment::from_matrix(&a * a.transpose()).unwrap();
        let mut buf = Vec::new();
        write_second_moment(&mut buf, &m).unwrap();
        assert_eq!(sniff(&buf).unwrap(), FileKind::Tensors);
        let back = read_second_moment(buf.as_slice()).unwrap();
        assert_eq!(back.matrix(), m.matrix());
        assert!(read_dictionary(buf.as_slice()).is_err());
        assert!(sniff(b"nonsense").is_err());
    }

    #[test]
    fn activations_round_trip_bit_exact() {
        let mut rng = seeded(2);
        let data = gaussian_matrix(&mut rng, 5, 3, 1.0);
        let target = gaussian_matrix(&mut rng, 5, 2, 1.0);
        for batch in [
            ActivationBatch::new(data.clone()).unwrap(),
            ActivationBatch::with_target(data.clone(), target).unwrap(),
        ] {
            let mut buf = Vec::new();
            write_activations(&mut buf, &batch).unwrap();
            let back = read_activations(buf.as_slice()).unwrap();
            assert_eq!(back, batch);
        }
    }

    #[test]
    fn activation_layout_is_row_major() {
        let batch = ActivationBatch::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let mut buf = Vec::new();
        write_activations(&mut buf, &batch).unwrap();
        assert_eq!(buf.len(), 16 + 4 + 4 + 8 + 8 + 32);
        let first = f64::from_le_bytes(buf[40..48].try_into().unwrap());
        let second = f64::from_le_bytes(buf[48..56].try_into().unwrap());
        assert_eq!((first, second), (1.0, 2.0));
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let batch = ActivationBatch::new(DMatrix::zeros(1, 1)).unwrap();
        let mut buf = Vec::new();
        write_activations(&mut buf, &batch).unwrap();
        buf[0] ^= 0xFF;
        assert!(matches!(read_activations(buf.as_slice()), Err(GaeError::Format(_))));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let batch = ActivationBatch::new(DMatrix::zeros(3, 3)).unwrap();
        let mut buf = Vec::new();
        write_activations(&mut buf, &batch).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(read_activations(buf.as_slice()), Err(GaeError::Format(_))));
    }

    #[test]
    fn dictionary_round_trip_bit_exact() {
        let dict = sample_dict();
        let lineage = Lineage::root(7, "trained").then(9, "adapted");
        let mut buf = Vec::new();
        write_dictionary(&mut buf, &dict, &lineage).unwrap();
        let (back, lin) = read_dictionary(buf.as_slice()).unwrap();
        assert_eq!(back, dict);
        assert_eq!(lin, lineage);
    }

    #[test]
    fn head_round_trip() {
        let mut rng = seeded(3);
        let head = LogitHead::new(
            gaussian_matrix(&mut rng, 4, 3, 1.0),
            DVector::from_row_slice(&[0.1, 0.2, 0.3, 0.4]),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_head(&mut buf, &head).unwrap();
        assert_eq!(read_head(buf.as_slice()).unwrap(), head);
    }

    #[test]
    fn container_kind_is_checked() {
        let mut buf = Vec::new();
        write_dictionary(&mut buf, &sample_dict(), &Lineage::default()).unwrap();
        assert!(matches!(read_head(buf.as_slice()), Err(GaeError::Format(_))));
    }
}
