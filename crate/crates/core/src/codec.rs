//! `EXCP` compressed archive format.
//!
//! ```text
//! file    = "EXCP" | version u16 = 1 | compressor_id u8 | reserved u8
//!           | SHA-256(payload) 32B | compressed(payload)
//! payload = step u64 | base_ref 32B | scalars | section(weights)
//!           | section(first moments) | section(second moments)
//! scalars = flags u8 (bit 0: weight section holds residuals) | count u32
//!           | count x { name_len u16 | name | value f64 }
//! section = count u32 | count x entry | code_bytes_len u64 | code bytes
//! entry   = name_len u16 | name | dtype u8 | ndim u8 | ndim x u64
//!           | bits u8 | codebook_len u16 | codebook_len x f32
//!           | offset u64 | length u64
//! ```
//!
//! All integers and floats are little-endian. `bits` is 2, 4 or 8 for
//! codebook-quantized tensors; 32 and 64 mark raw f32 / f64 values stored in
//! the code range (used when quantization is off). Codes of all tensors in a
//! section are concatenated so zero runs compress across tensor boundaries.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::quant::{dequantize, packed_len, QuantizedTensor};
use crate::tensor_store::{numel, DType, Digest, TensorRecord};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"EXCP";
pub const ARCHIVE_VERSION: u16 = 1;
const OUTER_HEADER_LEN: usize = 4 + 2 + 1 + 1 + 32;
const FLAG_DELTAS: u8 = 0x01;

const LZMA_PRESET: u32 = 6 | liblzma::stream::PRESET_EXTREME;

/// Final general-purpose compression stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compressor {
    /// LZMA2 in an xz stream, preset 6 extreme.
    #[default]
    Lzma,
    /// Deflate (zlib framing) at best compression.
    Deflate,
    /// bzip2 at level 9.
    Bzip2,
}

impl Compressor {
    pub const ALL: [Compressor; 3] = [Compressor::Lzma, Compressor::Deflate, Compressor::Bzip2];

    pub fn id(self) -> u8 {
        match self {
            Compressor::Lzma => 1,
            Compressor::Deflate => 2,
            Compressor::Bzip2 => 3,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Compressor::Lzma),
            2 => Ok(Compressor::Deflate),
            3 => Ok(Compressor::Bzip2),
            other => Err(Error::UnsupportedCompressor(other)),
        }
    }

    pub fn compress(self, data: &[u8]) -> Result<Vec<u8>> {
        let fail = |e: std::io::Error| Error::Compressor(format!("{self}: {e}"));
        match self {
            Compressor::Lzma => liblzma::encode_all(data, LZMA_PRESET).map_err(fail),
            Compressor::Deflate => {
                let mut enc =
                    flate2::write::ZlibEncoder::new(Vec::new(), flate2::Compression::best());
                enc.write_all(data).map_err(fail)?;
                enc.finish().map_err(fail)
            }
            Compressor::Bzip2 => {
                let mut enc = bzip2::write::BzEncoder::new(Vec::new(), bzip2::Compression::best());
                enc.write_all(data).map_err(fail)?;
                enc.finish().map_err(fail)
            }
        }
    }

    pub fn decompress(self, data: &[u8]) -> Result<Vec<u8>> {
        let fail = |e: std::io::Error| Error::Compressor(format!("{self}: {e}"));
        let mut out = Vec::new();
        match self {
            Compressor::Lzma => return liblzma::decode_all(data).map_err(fail),
            Compressor::Deflate => flate2::read::ZlibDecoder::new(data)
                .read_to_end(&mut out)
                .map_err(fail)?,
            Compressor::Bzip2 => bzip2::read::BzDecoder::new(data)
                .read_to_end(&mut out)
                .map_err(fail)?,
        };
        Ok(out)
    }
}

impl fmt::Display for Compressor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Compressor::Lzma => "lzma",
            Compressor::Deflate => "deflate",
            Compressor::Bzip2 => "bzip2",
        })
    }
}

impl std::str::FromStr for Compressor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lzma" | "xz" | "7z" => Ok(Compressor::Lzma),
            "deflate" | "zip" | "zlib" => Ok(Compressor::Deflate),
            "bzip2" | "bz2" => Ok(Compressor::Bzip2),
            other => Err(Error::InvalidConfig(format!("unknown compressor `{other}`"))),
        }
    }
}

/// How one tensor's values are stored.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoding {
    Codebook {
        bits: u8,
        codebook: Vec<f32>,
        packed: Vec<u8>,
    },
    RawF32(Vec<f32>),
    RawF64(Vec<f64>),
}

impl Encoding {
    fn bits(&self) -> u8 {
        match self {
            Encoding::Codebook { bits, .. } => *bits,
            Encoding::RawF32(_) => 32,
            Encoding::RawF64(_) => 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub encoding: Encoding,
}

impl ArchiveTensor {
    pub fn quantized(q: QuantizedTensor, dtype: DType) -> Self {
        Self {
            name: q.name,
            dtype,
            shape: q.shape,
            encoding: Encoding::Codebook {
                bits: q.bits,
                codebook: q.codebook,
                packed: q.packed,
            },
        }
    }

    pub fn as_quantized(&self) -> Option<QuantizedTensor> {
        match &self.encoding {
            Encoding::Codebook {
                bits,
                codebook,
                packed,
            } => Some(QuantizedTensor {
                name: self.name.clone(),
                shape: self.shape.clone(),
                bits: *bits,
                codebook: codebook.clone(),
                packed: packed.clone(),
            }),
            _ => None,
        }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    /// Decoded values widened to f64.
    pub fn values(&self) -> Result<Vec<f64>> {
        Ok(match &self.encoding {
            Encoding::Codebook { .. } => {
                let q = self.as_quantized().expect("codebook encoding");
                dequantize(&q)?.into_iter().map(f64::from).collect()
            }
            Encoding::RawF32(v) => v.iter().map(|x| f64::from(*x)).collect(),
            Encoding::RawF64(v) => v.clone(),
        })
    }

    /// Decoded values as a tensor record; with `non_negative`, negative
    /// values (possible only from a malformed codebook) clamp to zero.
    pub fn to_record(&self, non_negative: bool) -> Result<TensorRecord> {
        let data = self
            .values()?
            .into_iter()
            .map(|v| {
                let v = v as f32;
                if non_negative && v < 0.0 {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        TensorRecord::new(self.name.clone(), self.dtype, self.shape.clone(), data)
    }

    /// Number of entries stored as exact zero.
    pub fn zero_count(&self) -> Result<usize> {
        Ok(match &self.encoding {
            Encoding::Codebook { .. } => self
                .as_quantized()
                .expect("codebook encoding")
                .codes()?
                .iter()
                .filter(|c| **c == 0)
                .count(),
            Encoding::RawF32(v) => v.iter().filter(|x| **x == 0.0).count(),
            Encoding::RawF64(v) => v.iter().filter(|x| **x == 0.0).count(),
        })
    }
}

/// One compressed checkpoint: quantized weight residuals and moments.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedArchive {
    pub step: u64,
    /// Digest of the weights this archive must be applied to.
    pub base_ref: Digest,
    /// When false, the weight section holds absolute weights, not residuals.
    pub weights_are_deltas: bool,
    pub weights: Vec<ArchiveTensor>,
    pub first_moments: Vec<ArchiveTensor>,
    pub second_moments: Vec<ArchiveTensor>,
    pub scalars: BTreeMap<String, f64>,
    pub compressor: Compressor,
}

impl CompressedArchive {
    pub fn sections(&self) -> [&[ArchiveTensor]; 3] {
        [&self.weights, &self.first_moments, &self.second_moments]
    }

    /// Bytes of the checkpoint this archive stands for, in native dtypes.
    pub fn raw_equivalent_bytes(&self) -> u64 {
        self.sections()
            .iter()
            .flat_map(|s| s.iter())
            .map(|t| (t.numel() * t.dtype.size_bytes()) as u64)
            .sum()
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len())
            .map_err(|_| Error::Format(format!("name longer than 65535 bytes: {s:.32}…")))?;
        self.u16(len);
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
}

fn write_section(w: &mut Writer, tensors: &[ArchiveTensor]) -> Result<()> {
    w.u32(tensors.len() as u32);
    let mut codes = Vec::new();
    for t in tensors {
        w.name(&t.name)?;
        w.u8(t.dtype.tag());
        w.u8(u8::try_from(t.shape.len()).map_err(|_| Error::Format("rank above 255".into()))?);
        for d in &t.shape {
            w.u64(*d as u64);
        }
        w.u8(t.encoding.bits());
        let offset = codes.len() as u64;
        match &t.encoding {
            Encoding::Codebook {
                codebook, packed, ..
            } => {
                w.u16(u16::try_from(codebook.len()).map_err(|_| Error::Format("codebook too long".into()))?);
                for c in codebook {
                    w.0.extend_from_slice(&c.to_le_bytes());
                }
                codes.extend_from_slice(packed);
            }
            Encoding::RawF32(values) => {
                w.u16(0);
                for v in values {
                    codes.extend_from_slice(&v.to_le_bytes());
                }
            }
            Encoding::RawF64(values) => {
                w.u16(0);
                for v in values {
                    codes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w.u64(offset);
        w.u64(codes.len() as u64 - offset);
    }
    w.u64(codes.len() as u64);
    w.0.extend_from_slice(&codes);
    Ok(())
}

/// Canonical uncompressed payload bytes.
pub fn encode_payload(archive: &CompressedArchive) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.u64(archive.step);
    w.0.extend_from_slice(archive.base_ref.as_bytes());
    w.u8(if archive.weights_are_deltas { FLAG_DELTAS } else { 0 });
    w.u32(archive.scalars.len() as u32);
    for (k, v) in &archive.scalars {
        w.name(k)?;
        w.0.extend_from_slice(&v.to_le_bytes());
    }
    for section in archive.sections() {
        write_section(&mut w, section)?;
    }
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("payload ends inside {what}")))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }
    fn name(&mut self) -> Result<String> {
        let len = self.u16("name length")? as usize;
        String::from_utf8(self.take(len, "name")?.to_vec())
            .map_err(|_| Error::Format("name is not UTF-8".into()))
    }
}

struct EntryHeader {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    bits: u8,
    codebook: Vec<f32>,
    offset: usize,
    length: usize,
}

fn read_section(r: &mut Reader<'_>) -> Result<Vec<ArchiveTensor>> {
    let count = r.u32("section count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.name()?;
        let dtype = DType::from_tag(r.u8("dtype")?)?;
        let ndim = r.u8("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64("shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let bits = r.u8("bits")?;
        let cb_len = r.u16("codebook length")? as usize;
        let codebook = r
            .take(cb_len * 4, "codebook")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let offset = r.u64("code offset")? as usize;
        let length = r.u64("code length")? as usize;
        entries.push(EntryHeader {
            name,
            dtype,
            shape,
            bits,
            codebook,
            offset,
            length,
        });
    }
    let total = r.u64("section code length")? as usize;
    let codes = r.take(total, "section codes")?;
    entries
        .into_iter()
        .map(|e| {
            let range = codes
                .get(e.offset..e.offset.saturating_add(e.length))
                .ok_or_else(|| Error::Truncated(format!("code range of `{}`", e.name)))?;
            let n = numel(&e.shape);
            let expected = match e.bits {
                2 | 4 | 8 => packed_len(n, e.bits),
                32 => n * 4,
                64 => n * 8,
                other => return Err(Error::Format(format!("`{}`: unsupported bits {other}", e.name))),
            };
            if range.len() != expected {
                return Err(Error::LengthMismatch {
                    tensor: e.name,
                    shape: e.shape,
                    expected,
                    found: range.len(),
                });
            }
            let encoding = match e.bits {
                32 => Encoding::RawF32(
                    range
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                64 => Encoding::RawF64(
                    range
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                bits => {
                    if e.codebook.len() >= 1usize << bits {
                        return Err(Error::Format(format!(
                            "`{}`: {} centers exceed {bits}-bit codes",
                            e.name,
                            e.codebook.len()
                        )));
                    }
                    Encoding::Codebook {
                        bits,
                        codebook: e.codebook,
                        packed: range.to_vec(),
                    }
                }
            };
            Ok(ArchiveTensor {
                name: e.name,
                dtype: e.dtype,
                shape: e.shape,
                encoding,
            })
        })
        .collect()
}

pub fn decode_payload(payload: &[u8], compressor: Compressor) -> Result<CompressedArchive> {
    let mut r = Reader { buf: payload, pos: 0 };
    let step = r.u64("step")?;
    let base_ref = Digest(r.take(32, "base_ref")?.try_into().expect("32 bytes"));
    let flags = r.u8("flags")?;
    let n_scalars = r.u32("scalar count")? as usize;
    let mut scalars = BTreeMap::new();
    for _ in 0..n_scalars {
        let k = r.name()?;
        let v = r.f64("scalar")?;
        scalars.insert(k, v);
    }
    let weights = read_section(&mut r)?;
    let first_moments = read_section(&mut r)?;
    let second_moments = read_section(&mut r)?;
    if r.pos != payload.len() {
        return Err(Error::Format(format!(
            "{} trailing payload bytes",
            payload.len() - r.pos
        )));
    }
    Ok(CompressedArchive {
        step,
        base_ref,
        weights_are_deltas: flags & FLAG_DELTAS != 0,
        weights,
        first_moments,
        second_moments,
        scalars,
        compressor,
    })
}

pub fn encode_archive_bytes(archive: &CompressedArchive) -> Result<Vec<u8>> {
    let payload = encode_payload(archive)?;
    let checksum: [u8; 32] = Sha256::digest(&payload).into();
    let body = archive.compressor.compress(&payload)?;
    let mut out = Vec::with_capacity(OUTER_HEADER_LEN + body.len());
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.push(archive.compressor.id());
    out.push(0);
    out.extend_from_slice(&checksum);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode_archive_bytes(bytes: &[u8]) -> Result<CompressedArchive> {
    if bytes.len() < 4 || &bytes[..4] != ARCHIVE_MAGIC {
        return Err(Error::BadMagic { expected: "EXCP" });
    }
    if bytes.len() < OUTER_HEADER_LEN {
        return Err(Error::Truncated("archive header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != ARCHIVE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let compressor = Compressor::from_id(bytes[6])?;
    let checksum = &bytes[8..OUTER_HEADER_LEN];
    let payload = compressor.decompress(&bytes[OUTER_HEADER_LEN..])?;
    if Sha256::digest(&payload).as_slice() != checksum {
        return Err(Error::ChecksumMismatch);
    }
    decode_payload(&payload, compressor)
}

pub fn encode_archive(archive: &CompressedArchive, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_archive_bytes(archive)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn decode_archive(path: impl AsRef<Path>) -> Result<CompressedArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive_bytes(&bytes)
}

/// Raw-equivalent versus stored size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeReport {
    pub raw_bytes: u64,
    pub compressed_bytes: u64,
}

impl SizeReport {
    pub fn ratio(&self) -> f64 {
        if self.compressed_bytes == 0 {
            return 0.0;
        }
        self.raw_bytes as f64 / self.compressed_bytes as f64
    }

    /// Sums raw and compressed bytes; the ratio is sum(raw) / sum(compressed).
    pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a SizeReport>) -> SizeReport {
        reports.into_iter().fold(SizeReport::default(), |acc, r| SizeReport {
            raw_bytes: acc.raw_bytes + r.raw_bytes,
            compressed_bytes: acc.compressed_bytes + r.compressed_bytes,
        })
    }
}

impl fmt::Display for SizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "raw={}, compressed={}, ratio={:.2}",
            self.raw_bytes,
            self.compressed_bytes,
            self.ratio()
        )
    }
}

/// Size report for an archive held in memory.
pub fn measure_archive(archive: &CompressedArchive) -> Result<SizeReport> {
    Ok(SizeReport {
        raw_bytes: archive.raw_equivalent_bytes(),
        compressed_bytes: encode_archive_bytes(archive)?.len() as u64,
    })
}

/// Size reports for archive files, plus their aggregate.
pub fn measure_sizes<P: AsRef<Path>>(paths: &[P]) -> Result<(Vec<SizeReport>, SizeReport)> {
    let reports = paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            let archive = decode_archive(p)?;
            let len = fs::metadata(p).map_err(|e| Error::io(p, e))?.len();
            Ok(SizeReport {
                raw_bytes: archive.raw_equivalent_bytes(),
                compressed_bytes: len,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total = SizeReport::aggregate(&reports);
    Ok((reports, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize, QuantConfig};

    fn sample_archive(compressor: Compressor) -> CompressedArchive {
        let values: Vec<f32> = (0..300).map(|i| if i % 5 == 0 { (i as f32).sin() } else { 0.0 }).collect();
        let q = quantize("fc.weight", &[10, 30], &values, &QuantConfig::default()).unwrap();
        let m1 = quantize("fc.weight", &[10, 30], &values, &QuantConfig::with_bits(2)).unwrap();
        CompressedArchive {
            step: 42,
            base_ref: Digest([7; 32]),
            weights_are_deltas: true,
            weights: vec![
                ArchiveTensor::quantized(q, DType::F32),
                ArchiveTensor {
                    name: "fc.bias".into(),
                    dtype: DType::F16,
                    shape: vec![3],
                    encoding: Encoding::RawF64(vec![0.5, -1e-300, 0.0]),
                },
            ],
            first_moments: vec![ArchiveTensor::quantized(m1, DType::F32)],
            second_moments: vec![ArchiveTensor {
                name: "fc.weight".into(),
                dtype: DType::F32,
                shape: vec![],
                encoding: Encoding::RawF32(vec![3.5]),
            }],
            scalars: BTreeMap::from([("lr".into(), 1e-3)]),
            compressor,
        }
    }

    #[test]
    fn round_trip_every_backend() {
        for c in Compressor::ALL {
            let a = sample_archive(c);
            let bytes = encode_archive_bytes(&a).unwrap();
            assert_eq!(bytes[6], c.id());
            let back = decode_archive_bytes(&bytes).unwrap();
            assert_eq!(back, a);
            assert_eq!(encode_archive_bytes(&back).unwrap(), bytes, "{c} not byte-deterministic");
        }
    }

    #[test]
    fn empty_sections_archive() {
        let a = CompressedArchive {
            step: 0,
            base_ref: Digest::default(),
            weights_are_deltas: false,
            weights: vec![],
            first_moments: vec![],
            second_moments: vec![],
            scalars: BTreeMap::new(),
            compressor: Compressor::Lzma,
        };
        let bytes = encode_archive_bytes(&a).unwrap();
        assert_eq!(decode_archive_bytes(&bytes).unwrap(), a);
        assert_eq!(a.raw_equivalent_bytes(), 0);
    }

    #[test]
    fn all_zero_codes_compress_away() {
        let n = 100_000;
        let q = quantize("z", &[n], &vec![0.0; n], &QuantConfig::default()).unwrap();
        let a = CompressedArchive {
            weights: vec![ArchiveTensor::quantized(q, DType::F32)],
            first_moments: vec![],
            second_moments: vec![],
            ..sample_archive(Compressor::Lzma)
        };
        let size = encode_archive_bytes(&a).unwrap().len();
        assert!(size * 100 < n * 4, "archive of {size} bytes");
    }

    #[test]
    fn corruption_is_never_silent() {
        let bytes = encode_archive_bytes(&sample_archive(Compressor::Lzma)).unwrap();
        for pos in [OUTER_HEADER_LEN + 2, bytes.len() / 2, bytes.len() - 3] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            let err = decode_archive_bytes(&bad).unwrap_err();
            assert!(
                matches!(err, Error::ChecksumMismatch | Error::Compressor(_)),
                "byte {pos}: {err:?}"
            );
        }
        let mut bad = bytes.clone();
        bad[10] ^= 1;
        assert!(matches!(decode_archive_bytes(&bad), Err(Error::ChecksumMismatch)));
        assert!(matches!(decode_archive_bytes(b"EXTS...."), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(matches!(decode_archive_bytes(&bad), Err(Error::UnsupportedCompressor(9))));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(decode_archive_bytes(&bad), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncated_payload() {
        let payload = encode_payload(&sample_archive(Compressor::Lzma)).unwrap();
        for cut in [0, 10, 45, payload.len() - 1] {
            assert!(decode_payload(&payload[..cut], Compressor::Lzma).is_err());
        }
    }

    #[test]
    fn raw_equivalent_counts_native_dtypes() {
        let n = 1000;
        let raw = |name: &str| ArchiveTensor {
            name: name.into(),
            dtype: DType::F32,
            shape: vec![n],
            encoding: Encoding::RawF32(vec![0.0; n]),
        };
        let a = CompressedArchive {
            weights: vec![raw("w")],
            first_moments: vec![raw("w")],
            second_moments: vec![raw("w")],
            ..sample_archive(Compressor::Lzma)
        };
        assert_eq!(a.raw_equivalent_bytes(), 12 * n as u64);
        let r = [
            SizeReport { raw_bytes: 100, compressed_bytes: 10 },
            SizeReport { raw_bytes: 300, compressed_bytes: 30 },
        ];
        let total = SizeReport::aggregate(&r);
        assert_eq!(total.ratio(), 400.0 / 40.0);
    }
}
