//! Binary checkpoint formats.
//!
//! Both formats share one envelope. All integers are little-endian and
//! every field has an explicit width; there is no padding.
//!
//! ```text
//! magic        [u8; 4]  "PRNK"
//! version      u32      1
//! kind         u32      0 = dense checkpoint, 1 = sparse checkpoint
//! payload_len  u64
//! payload      [u8; payload_len]
//! checksum     u64      FNV-1a 64 over payload
//! ```
//!
//! Payload:
//!
//! ```text
//! config       vocab_size u32, d_model u32, n_heads u32, n_layers u32,
//!              d_ff u32, context_len u32, seed u64
//! n_tensors    u32
//! per tensor   name_len u32, name [u8] (UTF-8), rank u32, dims u32 × rank,
//!   dense:     values f64 × numel
//!   sparse:    encoding u8
//!                0 → values f64 × numel
//!                1 → nnz u32, row_ptr u32 × (rows+1), col_idx u32 × nnz,
//!                    values f64 × nnz                       (CSR)
//! mask (dense only)
//!              has_mask u8; if 1: n_entries u32, then per entry
//!              name_len u32, name, n_flags u64, ceil(n_flags/8) bytes,
//!              flag i in bit (i % 8) of byte i / 8, 1 = kept
//! ```
//!
//! Tensors appear in parameter order. In sparse files every prunable matrix
//! is CSR-encoded and stores exactly its surviving positions, so the mask
//! is implied by the CSR structure.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, is_prunable_name, ModelConfig, TransformerModel};
use crate::pruning::{MaskEntry, PruningMask};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PRNK";
pub const FORMAT_VERSION: u32 = 1;
pub const KIND_DENSE: u32 = 0;
pub const KIND_SPARSE: u32 = 1;
const ENCODING_DENSE: u8 = 0;
const ENCODING_CSR: u8 = 1;
/// magic + version + kind + payload_len
pub const HEADER_BYTES: usize = 4 + 4 + 4 + 8;
pub const CHECKSUM_BYTES: usize = 8;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Compressed sparse row matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<u32>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Stores the positions where `keep` is true, whatever their value.
    pub fn from_dense_kept(data: &[f64], rows: usize, cols: usize, keep: &[bool]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if keep[i] {
                    col_idx.push(c as u32);
                    values.push(data[i]);
                }
            }
            row_ptr.push(col_idx.len() as u32);
        }
        CsrMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let nnz = self.values.len();
        if self.row_ptr.len() != self.rows + 1 || self.col_idx.len() != nnz {
            return Err(Error::Format("CSR array lengths are inconsistent".into()));
        }
        if self.row_ptr[0] != 0 {
            return Err(Error::Format("CSR row_ptr must start at 0".into()));
        }
        if self.row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Format("CSR row_ptr is decreasing".into()));
        }
        if self.row_ptr[self.rows] as usize != nnz {
            return Err(Error::Format(format!(
                "CSR row_ptr ends at {} but nnz is {nnz}",
                self.row_ptr[self.rows]
            )));
        }
        for r in 0..self.rows {
            let cols = &self.col_idx[self.row_ptr[r] as usize..self.row_ptr[r + 1] as usize];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format(format!(
                    "CSR column indices not strictly increasing in row {r}"
                )));
            }
            if cols.last().is_some_and(|&c| c as usize >= self.cols) {
                return Err(Error::Format(format!("CSR column index out of range in row {r}")));
            }
        }
        Ok(())
    }

    /// Dense values (zeros at absent positions) and survival flags.
    pub fn to_dense(&self) -> (Vec<f64>, Vec<bool>) {
        let mut data = vec![0.0; self.rows * self.cols];
        let mut keep = vec![false; self.rows * self.cols];
        for r in 0..self.rows {
            for k in self.row_ptr[r] as usize..self.row_ptr[r + 1] as usize {
                let i = r * self.cols + self.col_idx[k] as usize;
                data[i] = self.values[k];
                keep[i] = true;
            }
        }
        (data, keep)
    }

    /// Bytes of `row_ptr`, `col_idx` and `values` on disk.
    pub fn payload_bytes(&self) -> usize {
        4 * (self.rows + 1) + 4 * self.nnz() + 8 * self.nnz()
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn u32s(&mut self, vs: &[u32]) {
        for &v in vs {
            self.u32(v);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn shape(&mut self, shape: &[usize]) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
    }
    fn config(&mut self, c: &ModelConfig) {
        for v in [
            c.vocab_size,
            c.d_model,
            c.n_heads,
            c.n_layers,
            c.d_ff,
            c.context_len,
        ] {
            self.u32(v as u32);
        }
        self.u64(c.seed);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        (0..rank).map(|_| self.u32().map(|d| d as usize)).collect()
    }
    fn config(&mut self) -> Result<ModelConfig> {
        let mut v = [0usize; 6];
        for x in &mut v {
            *x = self.u32()? as usize;
        }
        Ok(ModelConfig {
            vocab_size: v[0],
            d_model: v[1],
            n_heads: v[2],
            n_layers: v[3],
            d_ff: v[4],
            context_len: v[5],
            seed: self.u64()?,
        })
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing payload bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn envelope(kind: u32, payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + payload.len() + CHECKSUM_BYTES);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    let checksum = fnv1a64(&payload);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

/// Validates the envelope and returns the payload.
fn open_envelope(bytes: &[u8], expected_kind: u32) -> Result<&[u8]> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::Format("missing PRNK magic".into()));
    }
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format("truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if kind != expected_kind {
        return Err(Error::Format(format!(
            "file kind {kind}, expected {expected_kind}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let expected_total = (HEADER_BYTES as u64)
        .checked_add(len)
        .and_then(|n| n.checked_add(CHECKSUM_BYTES as u64));
    match expected_total {
        Some(n) if n == bytes.len() as u64 => {}
        Some(n) if n > bytes.len() as u64 => {
            return Err(Error::Format(format!(
                "truncated file: {} of {n} bytes",
                bytes.len()
            )))
        }
        _ => return Err(Error::Format("payload length does not match file size".into())),
    }
    let payload = &bytes[HEADER_BYTES..HEADER_BYTES + len as usize];
    let stored = u64::from_le_bytes(bytes[HEADER_BYTES + len as usize..].try_into().expect("8 bytes"));
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(payload)
}

/// Rebuilds a model from decoded tensors, which must be exactly the
/// parameters of `config` in order.
fn assemble_model(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<TransformerModel> {
    config
        .validate()
        .map_err(|e| Error::Format(format!("stored config is invalid: {e}")))?;
    let mut model = build_model(&config)?;
    let mut params = model.parameters_mut();
    if params.len() != tensors.len() {
        return Err(Error::Format(format!(
            "file holds {} tensors, config implies {}",
            tensors.len(),
            params.len()
        )));
    }
    for ((name, slot), (stored_name, t)) in params.iter_mut().zip(tensors) {
        if *name != stored_name || slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor {stored_name} {:?} does not match expected {name} {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        **slot = t;
    }
    drop(params);
    Ok(model)
}

fn check_mask(model: &TransformerModel, mask: &PruningMask) -> Result<()> {
    mask.check_matches(model)
}

/// Encodes a dense checkpoint in memory.
pub fn encode_checkpoint(model: &TransformerModel, mask: Option<&PruningMask>) -> Result<Vec<u8>> {
    if let Some(m) = mask {
        check_mask(model, m)?;
    }
    let mut w = Writer { buf: Vec::new() };
    w.config(&model.config);
    let params = model.parameters();
    w.u32(params.len() as u32);
    for (name, t) in &params {
        w.str(name);
        w.shape(t.shape());
        w.f64s(t.data());
    }
    match mask {
        None => w.u8(0),
        Some(m) => {
            w.u8(1);
            w.u32(m.entries().len() as u32);
            for e in m.entries() {
                w.str(&e.name);
                w.u64(e.keep.len() as u64);
                let mut bytes = vec![0u8; e.keep.len().div_ceil(8)];
                for (i, &k) in e.keep.iter().enumerate() {
                    if k {
                        bytes[i / 8] |= 1 << (i % 8);
                    }
                }
                w.buf.extend_from_slice(&bytes);
            }
        }
    }
    Ok(envelope(KIND_DENSE, w.buf))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TransformerModel, Option<PruningMask>)> {
    let payload = open_envelope(bytes, KIND_DENSE)?;
    let mut r = Reader { buf: payload, pos: 0 };
    let config = r.config()?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = r.str()?;
        let shape = r.shape()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let data = r.f64s(numel)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        tensors.push((name, t));
    }
    let model = assemble_model(config, tensors)?;
    let mask = match r.u8()? {
        0 => None,
        1 => {
            let count = r.u32()? as usize;
            let expected = model.prunable_parameters();
            if count != expected.len() {
                return Err(Error::Format(format!(
                    "mask has {count} entries, model has {} prunable matrices",
                    expected.len()
                )));
            }
            let mut entries = Vec::with_capacity(count);
            for (name, t) in expected {
                let stored = r.str()?;
                if stored != name {
                    return Err(Error::Format(format!(
                        "mask entry {stored} does not name prunable matrix {name}"
                    )));
                }
                let n_flags = r.u64()? as usize;
                if n_flags != t.len() {
                    return Err(Error::Format(format!("mask entry {name} has {n_flags} flags")));
                }
                let bytes = r.take(n_flags.div_ceil(8))?;
                let keep = (0..n_flags).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
                entries.push(MaskEntry {
                    name,
                    shape: t.shape().to_vec(),
                    keep,
                });
            }
            Some(PruningMask::from_entries(entries)?)
        }
        other => return Err(Error::Format(format!("bad mask flag {other}"))),
    };
    r.finish()?;
    Ok((model, mask))
}

/// Writes a dense checkpoint and returns its size in bytes. Identical
/// inputs always produce identical bytes.
pub fn save_checkpoint(model: &TransformerModel, mask: Option<&PruningMask>, path: &Path) -> Result<u64> {
    let bytes = encode_checkpoint(model, mask)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint(path: &Path) -> Result<(TransformerModel, Option<PruningMask>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Encodes a sparse checkpoint in memory. Fails if a pruned position holds
/// a nonzero weight.
pub fn encode_sparse(model: &TransformerModel, mask: &PruningMask) -> Result<Vec<u8>> {
    check_mask(model, mask)?;
    let mut w = Writer { buf: Vec::new() };
    w.config(&model.config);
    let params = model.parameters();
    w.u32(params.len() as u32);
    let mut entries = mask.entries().iter();
    for (name, t) in &params {
        w.str(name);
        w.shape(t.shape());
        if !is_prunable_name(name) {
            w.u8(ENCODING_DENSE);
            w.f64s(t.data());
            continue;
        }
        let e = entries.next().expect("mask checked against model");
        if let Some(i) = t.data().iter().zip(&e.keep).position(|(v, k)| !k && *v != 0.0) {
            return Err(Error::Contract(format!(
                "{name}[{i}] is pruned but holds {}; apply the mask before export",
                t.data()[i]
            )));
        }
        let (rows, cols) = t.dims2("export_sparse")?;
        let csr = CsrMatrix::from_dense_kept(t.data(), rows, cols, &e.keep);
        w.u8(ENCODING_CSR);
        w.u32(csr.nnz() as u32);
        w.u32s(&csr.row_ptr);
        w.u32s(&csr.col_idx);
        w.f64s(&csr.values);
    }
    Ok(envelope(KIND_SPARSE, w.buf))
}

pub fn decode_sparse(bytes: &[u8]) -> Result<(TransformerModel, PruningMask)> {
    let payload = open_envelope(bytes, KIND_SPARSE)?;
    let mut r = Reader { buf: payload, pos: 0 };
    let config = r.config()?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n.min(1 << 16));
    let mut entries = Vec::new();
    for _ in 0..n {
        let name = r.str()?;
        let shape = r.shape()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let prunable = is_prunable_name(&name);
        let data = match r.u8()? {
            ENCODING_DENSE if !prunable => r.f64s(numel)?,
            ENCODING_CSR if prunable && shape.len() == 2 => {
                let nnz = r.u32()? as usize;
                if nnz > numel {
                    return Err(Error::Format(format!("{name}: nnz {nnz} exceeds {numel}")));
                }
                let csr = CsrMatrix {
                    rows: shape[0],
                    cols: shape[1],
                    row_ptr: r.u32s(shape[0] + 1)?,
                    col_idx: r.u32s(nnz)?,
                    values: r.f64s(nnz)?,
                };
                csr.validate()
                    .map_err(|e| Error::Format(format!("{name}: {e}")))?;
                let (data, keep) = csr.to_dense();
                entries.push(MaskEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    keep,
                });
                data
            }
            other => return Err(Error::Format(format!("{name}: unexpected encoding {other}"))),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        tensors.push((name, t));
    }
    r.finish()?;
    let model = assemble_model(config, tensors)?;
    let mask = PruningMask::from_entries(entries)?;
    mask.check_matches(&model)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((model, mask))
}

/// Size accounting for one sparse export.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseExport {
    pub sparse_bytes: u64,
    pub dense_bytes: u64,
    /// `dense_bytes / sparse_bytes`; below 1 when CSR overhead dominates.
    pub compression_ratio: f64,
}

/// Writes a sparse checkpoint. The ratio compares against a dense
/// checkpoint of the same model without a mask section.
pub fn export_sparse(model: &TransformerModel, mask: &PruningMask, path: &Path) -> Result<SparseExport> {
    let sparse = encode_sparse(model, mask)?;
    let dense_bytes = encode_checkpoint(model, None)?.len() as u64;
    std::fs::write(path, &sparse).map_err(|e| Error::io(path, e))?;
    let sparse_bytes = sparse.len() as u64;
    Ok(SparseExport {
        sparse_bytes,
        dense_bytes,
        compression_ratio: dense_bytes as f64 / sparse_bytes as f64,
    })
}

pub fn import_sparse(path: &Path) -> Result<(TransformerModel, PruningMask)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sparse(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::{apply_mask, build_mask, PruneScope};

    fn model() -> TransformerModel {
        build_model(&ModelConfig {
            vocab_size: 9,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            context_len: 6,
            seed: 21,
        })
        .unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn dense_roundtrip_with_mask() {
        let mut m = model();
        let mask = build_mask(&m, 0.37, PruneScope::PerLayer, None).unwrap();
        apply_mask(&mut m, &mask).unwrap();
        let bytes = encode_checkpoint(&m, Some(&mask)).unwrap();
        let (m2, mask2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(m, m2);
        assert_eq!(Some(mask), mask2);
        assert_eq!(bytes, encode_checkpoint(&m2, mask2.as_ref()).unwrap());
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&model(), None).unwrap();
        assert_eq!(&bytes[..4], b"PRNK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), HEADER_BYTES + len + CHECKSUM_BYTES);
        // vocab_size is the first payload field
        assert_eq!(&bytes[20..24], &9u32.to_le_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&model(), None).unwrap();
        let mut bad = bytes.clone();
        bad[HEADER_BYTES + 100] ^= 0x01;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checksum { .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));

        assert!(matches!(decode_checkpoint(&[]), Err(Error::Format(_))));
        for cut in [3, 10, 25, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn kinds_are_not_interchangeable() {
        let m = model();
        let mask = PruningMask::all_true(&m);
        let sparse = encode_sparse(&m, &mask).unwrap();
        assert!(decode_checkpoint(&sparse).is_err());
        let dense = encode_checkpoint(&m, None).unwrap();
        assert!(decode_sparse(&dense).is_err());
    }

    #[test]
    fn sparse_roundtrip() {
        let mut m = model();
        let mask = build_mask(&m, 0.6, PruneScope::Global, None).unwrap();
        apply_mask(&mut m, &mask).unwrap();
        let bytes = encode_sparse(&m, &mask).unwrap();
        let (m2, mask2) = decode_sparse(&bytes).unwrap();
        assert_eq!(mask, mask2);
        let a: Vec<u64> = m
            .parameters()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
            .collect();
        let b: Vec<u64> = m2
            .parameters()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn unmasked_nonzero_is_rejected() {
        let m = model();
        let mask = build_mask(&m, 0.5, PruneScope::Global, None).unwrap();
        assert!(matches!(encode_sparse(&m, &mask), Err(Error::Contract(_))));
    }

    #[test]
    fn fully_pruned_matrix_roundtrips() {
        let mut m = model();
        let mask = PruningMask::all_false(&m);
        apply_mask(&mut m, &mask).unwrap();
        let (_, mask2) = decode_sparse(&encode_sparse(&m, &mask).unwrap()).unwrap();
        assert!(mask2.entries().iter().all(|e| e.keep.iter().all(|k| !k)));
    }

    #[test]
    fn csr_validation() {
        let data = [1.0, 0.0, 2.0, 0.0, 0.0, 3.0];
        let keep: Vec<bool> = data.iter().map(|v| *v != 0.0).collect();
        let csr = CsrMatrix::from_dense_kept(&data, 2, 3, &keep);
        assert_eq!(csr.row_ptr, vec![0, 2, 3]);
        assert_eq!(csr.col_idx, vec![0, 2, 2]);
        csr.validate().unwrap();
        assert_eq!(csr.to_dense(), (data.to_vec(), keep));

        let mut bad = csr.clone();
        bad.row_ptr = vec![0, 3, 2];
        assert!(bad.validate().is_err());
        let mut bad = csr.clone();
        bad.col_idx = vec![2, 0, 2];
        assert!(bad.validate().is_err());
        let mut bad = csr;
        bad.col_idx = vec![0, 2, 3];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dense_sparsity_zero_export_is_larger() {
        let m = model();
        let mask = PruningMask::all_true(&m);
        let sparse = encode_sparse(&m, &mask).unwrap().len();
        let dense = encode_checkpoint(&m, None).unwrap().len();
        assert!(sparse > dense);
    }
}
