//! In-memory checkpoint model and the uncompressed `EXTS` container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic "EXTS" | version u16 = 1 | header length u32 | header (UTF-8 JSON)
//!   | concatenated raw tensor payloads | SHA-256 of everything before it (32 bytes)
//! ```
//!
//! The JSON header carries the step counter, the scalar map, a weights-only
//! flag and an ordered tensor index (name, section, dtype, shape, payload
//! offset and byte length). Offsets are relative to the start of the payload
//! area. Payload elements are row-major, little-endian, in the tensor's own
//! dtype; f16 payloads are raw IEEE binary16.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"EXTS";
pub const CONTAINER_VERSION: u16 = 1;

const DIGEST_LEN: usize = 32;
const PREAMBLE_LEN: usize = 4 + 2 + 4;

/// Element type of a stored tensor. Arithmetic always happens in f32 or wider.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F16),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }

    /// Round an f32 to the nearest value representable in this dtype.
    pub fn round(self, value: f32) -> f32 {
        match self {
            DType::F32 => value,
            DType::F16 => f16::from_f32(value).to_f32(),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
        })
    }
}

/// Number of elements implied by a shape; the empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A named, typed, shaped flat array in row-major order.
///
/// Values are held widened to f32. For [`DType::F16`] every value is exactly
/// representable in binary16, so narrowing on write is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorRecord {
    /// Builds a record, rounding to `dtype` and rejecting non-finite values.
    pub fn new(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<usize>,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::EmptyName);
        }
        let expected = numel(&shape);
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                tensor: name,
                shape,
                expected,
                found: data.len(),
            });
        }
        if dtype == DType::F16 {
            for v in &mut data {
                *v = DType::F16.round(*v);
            }
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: name,
                index,
            });
        }
        Ok(Self {
            name,
            dtype,
            shape,
            data,
        })
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(name, DType::F32, shape, data)
    }

    pub fn zeros(name: impl Into<String>, dtype: DType, shape: Vec<usize>) -> Result<Self> {
        let n = numel(&shape);
        Self::new(name, dtype, shape, vec![0.0; n])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same name, dtype and shape with new values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.name.clone(), self.dtype, self.shape.clone(), data)
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * self.dtype.size_bytes());
        self.write_payload(&mut out);
        out
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self.dtype {
            DType::F32 => {
                for v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            DType::F16 => {
                for v in &self.data {
                    out.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
                }
            }
        }
    }

    fn from_payload(name: String, dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let width = dtype.size_bytes();
        let expected = numel(&shape);
        if bytes.len() != expected * width {
            return Err(Error::LengthMismatch {
                tensor: name,
                shape,
                expected,
                found: bytes.len() / width,
            });
        }
        let data = match dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DType::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        };
        Self::new(name, dtype, shape, data)
    }
}

/// Tensors keyed by name. Sorted iteration gives the canonical order.
pub type TensorMap = BTreeMap<String, TensorRecord>;

/// Collects records into a [`TensorMap`], rejecting duplicate names.
pub fn tensor_map(records: impl IntoIterator<Item = TensorRecord>) -> Result<TensorMap> {
    let mut map = TensorMap::new();
    for record in records {
        let name = record.name.clone();
        if map.insert(name.clone(), record).is_some() {
            return Err(Error::DuplicateName(name));
        }
    }
    Ok(map)
}

/// Checks that two maps have the same keys and per-key shapes.
pub fn check_aligned(reference: &TensorMap, other: &TensorMap, what: &str) -> Result<()> {
    if reference.len() != other.len() || reference.keys().ne(other.keys()) {
        let missing: Vec<_> = reference.keys().filter(|k| !other.contains_key(*k)).collect();
        let extra: Vec<_> = other.keys().filter(|k| !reference.contains_key(*k)).collect();
        return Err(Error::KeyMismatch(format!(
            "{what}: missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for (name, record) in reference {
        let o = &other[name];
        if o.shape != record.shape {
            return Err(Error::ShapeMismatch {
                tensor: name.clone(),
                expected: record.shape.clone(),
                found: o.shape.clone(),
            });
        }
    }
    Ok(())
}

/// Model weights, Adam moments and scalar metadata at one training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointBundle {
    pub weights: TensorMap,
    /// Adam first moment (exp-avg of gradients).
    pub first_moments: TensorMap,
    /// Adam second raw moment (exp-avg of squared gradients), elementwise >= 0.
    pub second_moments: TensorMap,
    pub step: u64,
    /// Small metadata such as learning rate and betas. Never pruned or quantized.
    pub scalars: BTreeMap<String, f64>,
}

impl CheckpointBundle {
    pub fn weights_only(weights: TensorMap, step: u64) -> Self {
        Self {
            weights,
            step,
            ..Self::default()
        }
    }

    pub fn is_weights_only(&self) -> bool {
        self.first_moments.is_empty() && self.second_moments.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for map in [&self.weights, &self.first_moments, &self.second_moments] {
            for (key, record) in map {
                if key != &record.name {
                    return Err(Error::Format(format!(
                        "map key `{key}` does not match tensor name `{}`",
                        record.name
                    )));
                }
            }
        }
        if !self.is_weights_only() {
            check_aligned(&self.weights, &self.first_moments, "first moments")?;
            check_aligned(&self.weights, &self.second_moments, "second moments")?;
        }
        for record in self.second_moments.values() {
            if let Some(index) = record.data.iter().position(|v| *v < 0.0) {
                return Err(Error::NegativeMoment {
                    tensor: record.name.clone(),
                    index,
                });
            }
        }
        if let Some((k, _)) = self.scalars.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: format!("scalar:{k}"),
                index: 0,
            });
        }
        Ok(())
    }

    /// Element count over weights and both moment sections.
    pub fn numel(&self) -> usize {
        [&self.weights, &self.first_moments, &self.second_moments]
            .iter()
            .flat_map(|m| m.values())
            .map(TensorRecord::numel)
            .sum()
    }

    /// Bytes the three sections occupy in their native dtypes.
    pub fn raw_bytes(&self) -> u64 {
        [&self.weights, &self.first_moments, &self.second_moments]
            .iter()
            .flat_map(|m| m.values())
            .map(|r| (r.numel() * r.dtype.size_bytes()) as u64)
            .sum()
    }
}

/// SHA-256 digest used for bundle hashes and chain links.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl FromStr for Digest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Format(format!("bad digest hex: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Format("digest must be 32 bytes".into()))?;
        Ok(Digest(arr))
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn hash_section(hasher: &mut Sha256, tag: u8, map: &TensorMap) {
    hasher.update([tag]);
    hasher.update((map.len() as u32).to_le_bytes());
    let mut buf = Vec::new();
    for record in map.values() {
        hasher.update((record.name.len() as u32).to_le_bytes());
        hasher.update(record.name.as_bytes());
        hasher.update([record.dtype.tag()]);
        hasher.update((record.shape.len() as u32).to_le_bytes());
        for d in &record.shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        buf.clear();
        record.write_payload(&mut buf);
        hasher.update((buf.len() as u64).to_le_bytes());
        hasher.update(&buf);
    }
}

fn canonical_digest(
    weights: &TensorMap,
    first: &TensorMap,
    second: &TensorMap,
    step: u64,
    scalars: &BTreeMap<String, f64>,
) -> Digest {
    let mut hasher = Sha256::new();
    hasher.update(b"EXTS-canonical\0");
    hash_section(&mut hasher, Section::Weights.tag(), weights);
    hash_section(&mut hasher, Section::FirstMoments.tag(), first);
    hash_section(&mut hasher, Section::SecondMoments.tag(), second);
    hasher.update(step.to_le_bytes());
    hasher.update((scalars.len() as u32).to_le_bytes());
    for (k, v) in scalars {
        hasher.update((k.len() as u32).to_le_bytes());
        hasher.update(k.as_bytes());
        hasher.update(v.to_bits().to_le_bytes());
    }
    Digest(hasher.finalize().into())
}

/// Deterministic digest over the canonical serialization: sorted names,
/// little-endian payloads in native dtype, then step and scalars.
pub fn bundle_hash(bundle: &CheckpointBundle) -> Result<Digest> {
    bundle.validate()?;
    Ok(canonical_digest(
        &bundle.weights,
        &bundle.first_moments,
        &bundle.second_moments,
        bundle.step,
        &bundle.scalars,
    ))
}

/// Digest of a weights map alone; this is what chain links refer to.
pub fn weights_digest(weights: &TensorMap) -> Digest {
    let empty = TensorMap::new();
    canonical_digest(weights, &empty, &empty, 0, &BTreeMap::new())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Section {
    #[serde(rename = "weights")]
    Weights,
    #[serde(rename = "m1")]
    FirstMoments,
    #[serde(rename = "m2")]
    SecondMoments,
}

impl Section {
    pub const ALL: [Section; 3] = [Section::Weights, Section::FirstMoments, Section::SecondMoments];

    fn tag(self) -> u8 {
        match self {
            Section::Weights => 0,
            Section::FirstMoments => 1,
            Section::SecondMoments => 2,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    section: Section,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    step: u64,
    weights_only: bool,
    scalars: BTreeMap<String, f64>,
    tensors: Vec<IndexEntry>,
}

/// Serializes a bundle to container bytes.
pub fn encode_bundle(bundle: &CheckpointBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut index = Vec::new();
    let mut payload = Vec::new();
    for (section, map) in Section::ALL.into_iter().zip([
        &bundle.weights,
        &bundle.first_moments,
        &bundle.second_moments,
    ]) {
        for record in map.values() {
            let bytes = record.payload_bytes();
            index.push(IndexEntry {
                name: record.name.clone(),
                section,
                dtype: record.dtype,
                shape: record.shape.clone(),
                offset: payload.len() as u64,
                length: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
        }
    }
    let header = ContainerHeader {
        step: bundle.step,
        weights_only: bundle.is_weights_only(),
        scalars: bundle.scalars.clone(),
        tensors: index,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses container bytes back into a validated bundle.
pub fn decode_bundle(bytes: &[u8]) -> Result<CheckpointBundle> {
    if bytes.len() < 4 || &bytes[..4] != CONTAINER_MAGIC {
        return Err(Error::BadMagic { expected: "EXTS" });
    }
    if bytes.len() < PREAMBLE_LEN + DIGEST_LEN {
        return Err(Error::Truncated("container shorter than its fixed fields".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CONTAINER_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < PREAMBLE_LEN + header_len + DIGEST_LEN {
        return Err(Error::Truncated("header extends past end of file".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let digest: [u8; 32] = Sha256::digest(body).into();
    if digest.as_slice() != trailer {
        return Err(Error::ChecksumMismatch);
    }
    let header: ContainerHeader =
        serde_json::from_slice(&body[PREAMBLE_LEN..PREAMBLE_LEN + header_len])
            .map_err(|e| Error::Format(format!("container header: {e}")))?;
    let payload = &body[PREAMBLE_LEN + header_len..];

    let mut bundle = CheckpointBundle {
        step: header.step,
        scalars: header.scalars,
        ..CheckpointBundle::default()
    };
    for entry in header.tensors {
        let start = entry.offset as usize;
        let end = start
            .checked_add(entry.length as usize)
            .filter(|end| *end <= payload.len())
            .ok_or_else(|| Error::Truncated(format!("payload of `{}`", entry.name)))?;
        let record =
            TensorRecord::from_payload(entry.name, entry.dtype, entry.shape, &payload[start..end])?;
        let map = match entry.section {
            Section::Weights => &mut bundle.weights,
            Section::FirstMoments => &mut bundle.first_moments,
            Section::SecondMoments => &mut bundle.second_moments,
        };
        if map.contains_key(&record.name) {
            return Err(Error::DuplicateName(record.name));
        }
        map.insert(record.name.clone(), record);
    }
    if header.weights_only != bundle.is_weights_only() {
        return Err(Error::Format("weights-only flag disagrees with tensor index".into()));
    }
    bundle.validate()?;
    Ok(bundle)
}

pub fn write_bundle(bundle: &CheckpointBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bundle(bundle)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<CheckpointBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}

/// True when the file starts with the container magic.
pub fn is_container(path: impl AsRef<Path>) -> bool {
    use std::io::Read;
    let mut magic = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map(|_| &magic == CONTAINER_MAGIC)
        .unwrap_or(false)
}
