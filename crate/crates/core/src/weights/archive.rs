//! Named-tensor archive: an 8-byte little-endian header length, a UTF-8 JSON
//! header mapping tensor names to `{dtype, shape, data_offsets}`, then the raw
//! little-endian payload. Offsets are relative to the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ProbeError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const METADATA_KEY: &str = "__metadata__";
/// Headers beyond this size are rejected before allocation.
const MAX_HEADER_BYTES: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F64,
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data_offsets: (usize, usize),
}

#[derive(Debug, Clone, Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensorArchive {
    entries: BTreeMap<String, TensorEntry>,
    metadata: BTreeMap<String, String>,
    payload: Vec<u8>,
}

fn parse_err(entry: &str, reason: impl Into<String>) -> ProbeError {
    ProbeError::Parse {
        entry: entry.to_string(),
        reason: reason.into(),
    }
}

impl NamedTensorArchive {
    /// Parses an archive, validating the whole header before any tensor is
    /// decoded.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(parse_err("<header>", "file shorter than the 8-byte length prefix"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER_BYTES || 8 + header_len > bytes.len() as u64 {
            return Err(parse_err(
                "<header>",
                format!("declared header length {header_len} exceeds file size {}", bytes.len()),
            ));
        }
        let header_end = 8 + header_len as usize;
        let header: BTreeMap<String, Value> = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| parse_err("<header>", format!("invalid JSON header: {e}")))?;

        let payload_len = bytes.len() - header_end;
        let mut entries = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                metadata = serde_json::from_value(value)
                    .map_err(|e| parse_err(METADATA_KEY, format!("metadata must map strings: {e}")))?;
                continue;
            }
            let raw: RawEntry = serde_json::from_value(value)
                .map_err(|e| parse_err(&name, format!("malformed entry: {e}")))?;
            let dtype = match raw.dtype.as_str() {
                "F64" => Dtype::F64,
                "F32" => Dtype::F32,
                "F16" => Dtype::F16,
                "BF16" => Dtype::BF16,
                other => return Err(parse_err(&name, format!("unsupported dtype {other}"))),
            };
            let (begin, end) = raw.data_offsets;
            if begin > end || end > payload_len {
                return Err(parse_err(
                    &name,
                    format!("byte range [{begin}, {end}) outside payload of {payload_len} bytes"),
                ));
            }
            let numel = raw
                .shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| parse_err(&name, "shape overflows"))?;
            if numel * dtype.size() != end - begin {
                return Err(parse_err(
                    &name,
                    format!(
                        "shape {:?} of {:?} needs {} bytes, range holds {}",
                        raw.shape,
                        dtype,
                        numel * dtype.size(),
                        end - begin
                    ),
                ));
            }
            entries.insert(
                name,
                TensorEntry {
                    dtype,
                    shape: raw.shape,
                    data_offsets: (begin, end),
                },
            );
        }

        let mut ranges: Vec<(usize, usize, &str)> = entries
            .iter()
            .map(|(n, e)| (e.data_offsets.0, e.data_offsets.1, n.as_str()))
            .collect();
        ranges.sort_unstable();
        let mut cursor = 0;
        for (begin, end, name) in &ranges {
            if *begin < cursor {
                return Err(parse_err(name, "byte range overlaps another entry"));
            }
            cursor = *end;
        }
        if cursor != payload_len {
            return Err(parse_err(
                "<payload>",
                format!("entries cover {cursor} bytes but payload holds {payload_len}"),
            ));
        }

        let mut payload = bytes;
        payload.drain(..header_end);
        Ok(Self {
            entries,
            metadata,
            payload,
        })
    }

    pub fn entries(&self) -> &BTreeMap<String, TensorEntry> {
        &self.entries
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.get(name).map(|e| e.shape.as_slice())
    }

    /// Decodes one tensor, up-converting half-precision payloads.
    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| ProbeError::Load(format!("missing tensor `{name}`")))?;
        let bytes = &self.payload[entry.data_offsets.0..entry.data_offsets.1];
        let data: Vec<S> = match entry.dtype {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| S::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| S::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| S::from_f64_lossy(f16::from_le_bytes([c[0], c[1]]).to_f64()))
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|c| S::from_f64_lossy(bf16::from_le_bytes([c[0], c[1]]).to_f64()))
                .collect(),
        };
        Tensor::new(entry.shape.clone(), data)
    }
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<NamedTensorArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|e| ProbeError::Load(format!("cannot read {}: {e}", path.display())))?;
    NamedTensorArchive::from_bytes(bytes)
}

/// Serializes tensors in the archive layout. Entries are written in name
/// order and the header is space-padded to an 8-byte boundary.
pub fn encode_archive<S: Scalar>(tensors: &[(String, Tensor<S>)], dtype: Dtype) -> Result<Vec<u8>> {
    let mut sorted: Vec<&(String, Tensor<S>)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut header = serde_json::Map::new();
    let mut payload = Vec::new();
    for (name, t) in sorted {
        if name == METADATA_KEY || header.contains_key(name) {
            return Err(parse_err(name, "duplicate or reserved tensor name"));
        }
        let begin = payload.len();
        for v in t.data() {
            let v = v.as_f64();
            match dtype {
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F16 => payload.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
                Dtype::BF16 => payload.extend_from_slice(&bf16::from_f64(v).to_le_bytes()),
            }
        }
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": dtype,
                "shape": t.shape(),
                "data_offsets": [begin, payload.len()],
            }),
        );
    }
    let mut header_bytes = serde_json::to_vec(&header)?;
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_archive<S: Scalar>(
    path: impl AsRef<Path>,
    tensors: &[(String, Tensor<S>)],
    dtype: Dtype,
) -> Result<()> {
    fs::write(path, encode_archive(tensors, dtype)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw_archive(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn loads_single_tensor() {
        let payload: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = raw_archive(r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#, &payload);
        let a = NamedTensorArchive::from_bytes(bytes).unwrap();
        let t: Tensor<f32> = a.tensor("w").unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rejects_length_mismatch() {
        let bytes = raw_archive(r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,12]}}"#, &[0; 12]);
        let err = NamedTensorArchive::from_bytes(bytes).unwrap_err();
        assert!(matches!(err, ProbeError::Parse { ref entry, .. } if entry == "w"), "{err}");
        // truncated payload
        let bytes = raw_archive(r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#, &[0; 10]);
        assert!(NamedTensorArchive::from_bytes(bytes).is_err());
        // trailing bytes nobody claims
        let bytes = raw_archive(r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#, &[0; 8]);
        assert!(NamedTensorArchive::from_bytes(bytes).is_err());
    }

    #[test]
    fn rejects_unsupported_dtype_and_overlap() {
        let bytes = raw_archive(r#"{"ids":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}}"#, &[0; 8]);
        match NamedTensorArchive::from_bytes(bytes).unwrap_err() {
            ProbeError::Parse { entry, reason } => {
                assert_eq!(entry, "ids");
                assert!(reason.contains("I64"));
            }
            e => panic!("unexpected {e}"),
        }
        let bytes = raw_archive(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
            &[0; 8],
        );
        assert!(NamedTensorArchive::from_bytes(bytes).is_err());
        assert!(NamedTensorArchive::from_bytes(vec![1, 2, 3]).is_err());
        assert!(NamedTensorArchive::from_bytes(raw_archive("{not json", &[])).is_err());
    }

    #[test]
    fn half_precision_up_converts() {
        let t = Tensor::new(vec![3], vec![0.5f32, -2.0, 1.25]).unwrap();
        for dtype in [Dtype::F16, Dtype::BF16] {
            let bytes = encode_archive(&[("h".to_string(), t.clone())], dtype).unwrap();
            let a = NamedTensorArchive::from_bytes(bytes).unwrap();
            assert_eq!(a.entries()["h"].dtype, dtype);
            assert_eq!(a.tensor::<f32>("h").unwrap(), t);
        }
    }

    #[test]
    fn metadata_is_kept() {
        let bytes = raw_archive(r#"{"__metadata__":{"format":"pt"}}"#, &[]);
        let a = NamedTensorArchive::from_bytes(bytes).unwrap();
        assert_eq!(a.metadata()["format"], "pt");
        assert!(a.entries().is_empty());
    }

    proptest! {
        #[test]
        fn encode_then_load_is_bit_identical(
            a in proptest::collection::vec(-1e6f32..1e6, 1..20),
            b in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 6),
        ) {
            let ta = Tensor::new(vec![a.len()], a).unwrap();
            let tb = Tensor::new(vec![2, 3], b).unwrap();
            let bytes = encode_archive(&[("x.b".into(), tb.clone()), ("x.a".into(), ta.clone())], Dtype::F32).unwrap();
            prop_assert_eq!(u64::from_le_bytes(bytes[..8].try_into().unwrap()) % 8, 0);
            let arc = NamedTensorArchive::from_bytes(bytes).unwrap();
            let la: Tensor<f32> = arc.tensor("x.a").unwrap();
            let lb: Tensor<f32> = arc.tensor("x.b").unwrap();
            prop_assert!(la.data().iter().zip(ta.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert!(lb.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
