//! Compression chains: compress a checkpoint against the last reconstructed
//! weights, reconstruct the next checkpoint, replay any step from the chain
//! base, and prune old reconstructed bundles.
//!
//! A chain lives in one directory:
//!
//! ```text
//! run/
//!   chain.json            manifest (base spec, config snapshot, entries)
//!   chain.json.lock       present while a writer holds the chain
//!   step-00001000.excp    one archive per saved step
//!   step-00001000.exts    optional reconstructed bundle (latest only, after retention)
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{
    decode_archive, encode_archive, ArchiveTensor, CompressedArchive, Compressor, Encoding,
    SizeReport,
};
use crate::error::{Error, Result, StageExt};
use crate::init::InitSpec;
use crate::prune::{apply_masks, joint_masks, MaskStats, PruneConfig};
use crate::quant::{quantize, QuantConfig};
use crate::residual::{
    absolute_weights, apply_residual, compute_residual, DeltaMap, DeltaTensor, ResidualBundle,
};
use crate::tensor_store::{
    check_aligned, read_bundle, weights_digest, write_bundle, CheckpointBundle, Digest, TensorMap,
    TensorRecord,
};

/// Which stages run when a checkpoint is compressed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressConfig {
    /// Store `W_t - W_{t-1}` instead of absolute weights.
    pub residual: bool,
    /// Joint weight-momentum pruning; `None` keeps everything.
    pub prune: Option<PruneConfig>,
    /// Codebook quantization; `None` stores raw values.
    pub quant: Option<QuantConfig>,
    #[serde(default)]
    pub compressor: Compressor,
}

impl Default for CompressConfig {
    /// Residuals on, alpha = 5e-5, beta = 2, 4-bit codebooks, LZMA.
    fn default() -> Self {
        Self {
            residual: true,
            prune: Some(PruneConfig::default()),
            quant: Some(QuantConfig::default()),
            compressor: Compressor::Lzma,
        }
    }
}

impl CompressConfig {
    /// Residual on, pruning and quantization off: reconstruction is bit-exact.
    pub fn lossless() -> Self {
        Self {
            residual: true,
            prune: None,
            quant: None,
            compressor: Compressor::Lzma,
        }
    }

    /// Every stage off: absolute raw values through the final compressor.
    pub fn passthrough() -> Self {
        Self {
            residual: false,
            ..Self::lossless()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.prune {
            p.validate()?;
        }
        if let Some(q) = &self.quant {
            q.validate()?;
        }
        Ok(())
    }

    /// Short label such as `res+prune+q4`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.residual {
            parts.push("res".to_string());
        }
        if self.prune.is_some() {
            parts.push("prune".to_string());
        }
        if let Some(q) = &self.quant {
            parts.push(format!("q{}", q.bits));
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Result of [`compress_step`].
#[derive(Clone, Debug)]
pub struct Compressed {
    pub archive: CompressedArchive,
    /// The checkpoint as reconstruction will produce it: `Ŵ_t` plus decoded moments.
    pub reconstructed: CheckpointBundle,
    /// Kept counts when pruning ran.
    pub stats: Option<MaskStats>,
}

fn encode_weight(delta: &DeltaTensor, cfg: &CompressConfig) -> Result<ArchiveTensor> {
    let encoding = match &cfg.quant {
        Some(q) => {
            let values: Vec<f32> = delta.data.iter().map(|v| *v as f32).collect();
            return Ok(ArchiveTensor::quantized(
                quantize(&delta.name, &delta.shape, &values, q)?,
                delta.dtype,
            ));
        }
        // Absolute weights are f32-exact; residuals need f64 to invert exactly.
        None if cfg.residual => Encoding::RawF64(delta.data.clone()),
        None => Encoding::RawF32(delta.data.iter().map(|v| *v as f32).collect()),
    };
    Ok(ArchiveTensor {
        name: delta.name.clone(),
        dtype: delta.dtype,
        shape: delta.shape.clone(),
        encoding,
    })
}

fn encode_moment(record: &TensorRecord, cfg: &CompressConfig) -> Result<ArchiveTensor> {
    Ok(match &cfg.quant {
        Some(q) => ArchiveTensor::quantized(
            quantize(record.name(), record.shape(), record.data(), q)?,
            record.dtype(),
        ),
        None => ArchiveTensor {
            name: record.name().to_string(),
            dtype: record.dtype(),
            shape: record.shape().to_vec(),
            encoding: Encoding::RawF32(record.data().to_vec()),
        },
    })
}

/// Compresses `current` against the previous reconstructed weights and
/// returns the archive together with the reconstruction it implies.
pub fn compress_step(
    prev: &TensorMap,
    current: &CheckpointBundle,
    cfg: &CompressConfig,
) -> Result<Compressed> {
    cfg.validate()?;
    let residual = if cfg.residual {
        compute_residual(prev, current)
    } else {
        check_aligned(prev, &current.weights, "previous vs current weights")
            .and_then(|_| ResidualBundle::absolute(current))
    }
    .stage("residual")?;

    let (residual, stats) = match &cfg.prune {
        Some(p) => {
            let masks = joint_masks(&residual, p).stage("prune")?;
            let pruned = apply_masks(&residual, &masks).stage("prune")?;
            (pruned, Some(masks.totals()))
        }
        None => (residual, None),
    };

    let quantized = || -> Result<_> {
        let weights = residual
            .weight_deltas
            .values()
            .map(|d| encode_weight(d, cfg))
            .collect::<Result<Vec<_>>>()?;
        let first = residual
            .first_moments
            .values()
            .map(|r| encode_moment(r, cfg))
            .collect::<Result<Vec<_>>>()?;
        let second = residual
            .second_moments
            .values()
            .map(|r| encode_moment(r, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok((weights, first, second))
    };
    let (weights, first_moments, second_moments) = quantized().stage("quantize")?;

    let archive = CompressedArchive {
        step: current.step,
        base_ref: weights_digest(prev),
        weights_are_deltas: cfg.residual,
        weights,
        first_moments,
        second_moments,
        scalars: residual.scalars,
        compressor: cfg.compressor,
    };
    let reconstructed = reconstruct_step(prev, &archive).stage("reconstruct")?;
    Ok(Compressed {
        archive,
        reconstructed,
        stats,
    })
}

fn decode_moments(section: &[ArchiveTensor], non_negative: bool) -> Result<TensorMap> {
    section
        .iter()
        .map(|t| Ok((t.name.clone(), t.to_record(non_negative)?)))
        .collect()
}

/// Applies an archive to the previous reconstructed weights. The base digest
/// is checked before any arithmetic.
pub fn reconstruct_step(prev: &TensorMap, archive: &CompressedArchive) -> Result<CheckpointBundle> {
    let found = weights_digest(prev);
    if found != archive.base_ref {
        return Err(Error::BaseMismatch {
            expected: archive.base_ref,
            found,
        });
    }
    let mut deltas = DeltaMap::new();
    for t in &archive.weights {
        let delta = DeltaTensor {
            name: t.name.clone(),
            dtype: t.dtype,
            shape: t.shape.clone(),
            data: t.values()?,
        };
        if deltas.insert(t.name.clone(), delta).is_some() {
            return Err(Error::DuplicateName(t.name.clone()));
        }
    }
    let weights = if archive.weights_are_deltas {
        apply_residual(prev, &deltas)?
    } else {
        let w = absolute_weights(&deltas)?;
        check_aligned(prev, &w, "previous vs archived weights")?;
        w
    };
    let bundle = CheckpointBundle {
        weights,
        first_moments: decode_moments(&archive.first_moments, false)?,
        second_moments: decode_moments(&archive.second_moments, true)?,
        step: archive.step,
        scalars: archive.scalars.clone(),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Where a chain's `Ŵ_0` comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseSpec {
    /// Replayed from a seeded initializer.
    Seeded { seed: u64, init: InitSpec },
    /// A full bundle stored next to the manifest (path relative to it).
    Stored { path: String, digest: Digest },
}

impl BaseSpec {
    /// Writes `weights` as a container in `dir` and returns a spec pointing at it.
    pub fn store(dir: impl AsRef<Path>, file_name: &str, weights: &TensorMap) -> Result<Self> {
        let bundle = CheckpointBundle::weights_only(weights.clone(), 0);
        write_bundle(&bundle, dir.as_ref().join(file_name))?;
        Ok(BaseSpec::Stored {
            path: file_name.to_string(),
            digest: weights_digest(weights),
        })
    }

    pub fn materialize(&self, dir: &Path) -> Result<TensorMap> {
        match self {
            BaseSpec::Seeded { seed, init } => init.materialize(*seed),
            BaseSpec::Stored { path, digest } => {
                let weights = read_bundle(dir.join(path))?.weights;
                let found = weights_digest(&weights);
                if found != *digest {
                    return Err(Error::BaseMismatch {
                        expected: *digest,
                        found,
                    });
                }
                Ok(weights)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainEntry {
    pub step: u64,
    /// Archive path relative to the manifest directory.
    pub archive: String,
    /// Digest of `Ŵ_t` after this archive is applied.
    pub post_digest: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstructed: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainManifest {
    pub version: u32,
    pub base: BaseSpec,
    pub config: CompressConfig,
    pub entries: Vec<ChainEntry>,
}

impl ChainManifest {
    pub const VERSION: u32 = 1;

    pub fn new(base: BaseSpec, config: CompressConfig) -> Self {
        Self {
            version: Self::VERSION,
            base,
            config,
            entries: Vec::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))?;
        if manifest.version != Self::VERSION {
            return Err(Error::UnsupportedVersion(manifest.version as u16));
        }
        manifest.check_steps()?;
        Ok(manifest)
    }

    /// Writes atomically (temp file + rename in the same directory).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = manifest_dir(path);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
        tmp.write_all(text.as_bytes())
            .map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    fn check_steps(&self) -> Result<()> {
        for pair in self.entries.windows(2) {
            if pair[1].step <= pair[0].step {
                return Err(Error::NonIncreasingStep {
                    prev: pair[0].step,
                    found: pair[1].step,
                });
            }
        }
        Ok(())
    }

    pub fn position(&self, step: u64) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.step == step)
            .ok_or(Error::MissingStep(step))
    }

    pub fn last_step(&self) -> Option<u64> {
        self.entries.last().map(|e| e.step)
    }
}

/// Directory holding a manifest and its archives.
pub fn manifest_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn archive_file_name(step: u64) -> String {
    format!("step-{step:08}.excp")
}

pub fn reconstructed_file_name(step: u64) -> String {
    format!("step-{step:08}.exts")
}

/// Exclusive writer lock: `<manifest>.lock`, removed on drop.
#[derive(Debug)]
pub struct ManifestLock {
    path: PathBuf,
}

impl ManifestLock {
    pub fn acquire(manifest: impl AsRef<Path>) -> Result<Self> {
        let mut name = manifest.as_ref().as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(manifest.as_ref().to_path_buf()))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for ManifestLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn entry_error(index: usize, step: u64) -> impl FnOnce(Error) -> Error {
    move |e| Error::ChainEntry {
        index,
        step,
        source: Box::new(e),
    }
}

/// Replays the chain from its base up to `target_step`, verifying every
/// link. Entry indices in errors are 1-based.
pub fn replay_manifest(manifest: &ChainManifest, dir: &Path, target_step: u64) -> Result<CheckpointBundle> {
    let target = manifest.position(target_step)?;
    let mut weights = manifest.base.materialize(dir).stage("base")?;
    let mut bundle = None;
    for (i, entry) in manifest.entries[..=target].iter().enumerate() {
        let index = i + 1;
        let archive = decode_archive(dir.join(&entry.archive)).map_err(entry_error(index, entry.step))?;
        if archive.step != entry.step {
            return Err(entry_error(index, entry.step)(Error::Format(format!(
                "archive holds step {}",
                archive.step
            ))));
        }
        let next = reconstruct_step(&weights, &archive).map_err(entry_error(index, entry.step))?;
        if weights_digest(&next.weights) != entry.post_digest {
            return Err(Error::ChainDigestMismatch {
                index,
                step: entry.step,
            });
        }
        weights = next.weights.clone();
        bundle = Some(next);
    }
    Ok(bundle.expect("target index is within entries"))
}

/// Reconstructs the checkpoint at `target_step` from a manifest file.
pub fn replay_chain(manifest_path: impl AsRef<Path>, target_step: u64) -> Result<CheckpointBundle> {
    let path = manifest_path.as_ref();
    let manifest = ChainManifest::load(path)?;
    replay_manifest(&manifest, &manifest_dir(path), target_step)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetentionPolicy {
    /// Reconstructed bundles to keep, newest first. At least 1.
    pub keep_latest: usize,
    /// List candidates without touching the filesystem or the manifest.
    pub dry_run: bool,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        Self {
            keep_latest: 1,
            dry_run: false,
        }
    }
}

fn retention_candidates(manifest: &ChainManifest, policy: &RetentionPolicy) -> Vec<usize> {
    let with_bundle: Vec<usize> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.reconstructed.is_some())
        .map(|(i, _)| i)
        .collect();
    let keep = policy.keep_latest.max(1);
    with_bundle[..with_bundle.len().saturating_sub(keep)].to_vec()
}

fn apply_retention(
    manifest: &mut ChainManifest,
    dir: &Path,
    policy: &RetentionPolicy,
) -> Result<Vec<PathBuf>> {
    let doomed = retention_candidates(manifest, policy);
    let mut paths = Vec::with_capacity(doomed.len());
    for i in doomed {
        let rel = manifest.entries[i].reconstructed.clone().expect("candidate has a bundle");
        let path = dir.join(&rel);
        if !policy.dry_run {
            match fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(Error::io(&path, e)),
            }
            manifest.entries[i].reconstructed = None;
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Deletes reconstructed bundles older than the newest `keep_latest`.
/// Archives are never touched. Returns the affected paths.
pub fn retention_apply(manifest_path: impl AsRef<Path>, policy: RetentionPolicy) -> Result<Vec<PathBuf>> {
    let path = manifest_path.as_ref();
    let _lock = ManifestLock::acquire(path)?;
    let mut manifest = ChainManifest::load(path)?;
    let deleted = apply_retention(&mut manifest, &manifest_dir(path), &policy)?;
    if !policy.dry_run && !deleted.is_empty() {
        manifest.save(path)?;
    }
    Ok(deleted)
}

/// Outcome of [`Chain::append`].
#[derive(Clone, Debug)]
pub struct AppendOutcome {
    pub entry: ChainEntry,
    pub size: SizeReport,
    pub reconstructed: CheckpointBundle,
    pub stats: Option<MaskStats>,
}

/// A writable chain: holds the lock, the manifest and the live `Ŵ_t`.
#[derive(Debug)]
pub struct Chain {
    manifest_path: PathBuf,
    dir: PathBuf,
    manifest: ChainManifest,
    live: TensorMap,
    keep_reconstructed: bool,
    _lock: ManifestLock,
}

impl Chain {
    /// Starts a new chain; fails if the manifest already exists.
    pub fn create(manifest_path: impl AsRef<Path>, base: BaseSpec, config: CompressConfig) -> Result<Self> {
        config.validate()?;
        let manifest_path = manifest_path.as_ref().to_path_buf();
        let dir = manifest_dir(&manifest_path);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let lock = ManifestLock::acquire(&manifest_path)?;
        if manifest_path.exists() {
            return Err(Error::InvalidConfig(format!(
                "manifest {} already exists",
                manifest_path.display()
            )));
        }
        let live = base.materialize(&dir)?;
        let manifest = ChainManifest::new(base, config);
        manifest.save(&manifest_path)?;
        Ok(Self {
            manifest_path,
            dir,
            manifest,
            live,
            keep_reconstructed: false,
            _lock: lock,
        })
    }

    /// Opens an existing chain. The live weights come from the newest
    /// retained reconstructed bundle when its digest checks out, otherwise
    /// from a full replay.
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref().to_path_buf();
        let lock = ManifestLock::acquire(&manifest_path)?;
        let manifest = ChainManifest::load(&manifest_path)?;
        let dir = manifest_dir(&manifest_path);
        let retained = manifest.entries.last().and_then(|e| {
            let rel = e.reconstructed.as_ref()?;
            let weights = read_bundle(dir.join(rel)).ok()?.weights;
            (weights_digest(&weights) == e.post_digest).then_some(weights)
        });
        let live = match (retained, manifest.last_step()) {
            (Some(w), _) => w,
            (None, Some(step)) => replay_manifest(&manifest, &dir, step)?.weights,
            (None, None) => manifest.base.materialize(&dir)?,
        };
        Ok(Self {
            manifest_path,
            dir,
            manifest,
            live,
            keep_reconstructed: false,
            _lock: lock,
        })
    }

    /// Also write each reconstructed bundle next to its archive.
    pub fn keep_reconstructed(mut self, keep: bool) -> Self {
        self.keep_reconstructed = keep;
        self
    }

    pub fn manifest(&self) -> &ChainManifest {
        &self.manifest
    }

    pub fn manifest_path(&self) -> &Path {
        &self.manifest_path
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// `Ŵ` at the chain tail (the base before the first append).
    pub fn live_weights(&self) -> &TensorMap {
        &self.live
    }

    pub fn config(&self) -> &CompressConfig {
        &self.manifest.config
    }

    /// Compresses `current` against the live weights, writes its archive and
    /// records the entry.
    pub fn append(&mut self, current: &CheckpointBundle) -> Result<AppendOutcome> {
        if let Some(prev) = self.manifest.last_step() {
            if current.step <= prev {
                return Err(Error::NonIncreasingStep {
                    prev,
                    found: current.step,
                });
            }
        }
        let out = compress_step(&self.live, current, &self.manifest.config)?;
        let archive_name = archive_file_name(current.step);
        let compressed_bytes = encode_archive(&out.archive, self.dir.join(&archive_name)).stage("encode")?;
        let reconstructed = if self.keep_reconstructed {
            let name = reconstructed_file_name(current.step);
            write_bundle(&out.reconstructed, self.dir.join(&name))?;
            Some(name)
        } else {
            None
        };
        let entry = ChainEntry {
            step: current.step,
            archive: archive_name,
            post_digest: weights_digest(&out.reconstructed.weights),
            reconstructed,
        };
        self.manifest.entries.push(entry.clone());
        self.manifest.save(&self.manifest_path)?;
        self.live = out.reconstructed.weights.clone();
        Ok(AppendOutcome {
            entry,
            size: SizeReport {
                raw_bytes: out.archive.raw_equivalent_bytes(),
                compressed_bytes,
            },
            reconstructed: out.reconstructed,
            stats: out.stats,
        })
    }

    pub fn replay(&self, step: u64) -> Result<CheckpointBundle> {
        replay_manifest(&self.manifest, &self.dir, step)
    }

    pub fn archive_paths(&self) -> Vec<PathBuf> {
        self.manifest
            .entries
            .iter()
            .map(|e| self.dir.join(&e.archive))
            .collect()
    }

    pub fn retention_apply(&mut self, policy: RetentionPolicy) -> Result<Vec<PathBuf>> {
        let deleted = apply_retention(&mut self.manifest, &self.dir, &policy)?;
        if !policy.dry_run && !deleted.is_empty() {
            self.manifest.save(&self.manifest_path)?;
        }
        Ok(deleted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{decode_archive_bytes, encode_archive_bytes};
    use crate::init::{InitTensor, Initializer};
    use crate::tensor_store::{tensor_map, DType};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> InitSpec {
        InitSpec {
            tensors: vec![
                InitTensor {
                    name: "fc.weight".into(),
                    dtype: DType::F32,
                    shape: vec![8, 16],
                    init: Initializer::Uniform { bound: 0.25 },
                },
                InitTensor {
                    name: "fc.bias".into(),
                    dtype: DType::F32,
                    shape: vec![8],
                    init: Initializer::Zeros,
                },
            ],
        }
    }

    fn perturb(weights: &TensorMap, step: u64, rng: &mut ChaCha8Rng) -> CheckpointBundle {
        let mut first = TensorMap::new();
        let mut second = TensorMap::new();
        let mut next = TensorMap::new();
        for (name, w) in weights {
            let n = w.numel();
            let g: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let data = w.data().iter().zip(&g).map(|(v, g)| v - 1e-3 * g).collect();
            next.insert(name.clone(), w.with_data(data).unwrap());
            first.insert(name.clone(), w.with_data(g.iter().map(|g| 0.1 * g).collect()).unwrap());
            second.insert(name.clone(), w.with_data(g.iter().map(|g| 1e-3 * g * g).collect()).unwrap());
        }
        CheckpointBundle {
            weights: next,
            first_moments: first,
            second_moments: second,
            step,
            scalars: [("lr".to_string(), 1e-3)].into(),
        }
    }

    #[test]
    fn fixed_point_archive() {
        let prev = spec().materialize(1).unwrap();
        let cur = CheckpointBundle {
            weights: prev.clone(),
            first_moments: prev.clone(),
            second_moments: prev.iter().map(|(k, r)| {
                (k.clone(), r.with_data(r.data().iter().map(|v| v.abs()).collect()).unwrap())
            }).collect(),
            step: 1,
            scalars: Default::default(),
        };
        let out = compress_step(&prev, &cur, &CompressConfig::default()).unwrap();
        for t in &out.archive.weights {
            assert_eq!(t.zero_count().unwrap(), t.numel());
        }
        assert_eq!(out.reconstructed.weights, prev);
        // nothing survives M_w, so nothing survives M_o
        for m in out.reconstructed.first_moments.values() {
            assert!(m.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn lossless_mode_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prev = spec().materialize(2).unwrap();
        let cur = perturb(&prev, 10, &mut rng);
        let out = compress_step(&prev, &cur, &CompressConfig::lossless()).unwrap();
        assert_eq!(out.reconstructed, cur);
        let back = decode_archive_bytes(&encode_archive_bytes(&out.archive).unwrap()).unwrap();
        assert_eq!(reconstruct_step(&prev, &back).unwrap(), cur);
        let raw = compress_step(&prev, &cur, &CompressConfig::passthrough()).unwrap();
        assert_eq!(raw.reconstructed, cur);
        assert!(!raw.archive.weights_are_deltas);
    }

    #[test]
    fn wrong_base_is_rejected_before_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prev = spec().materialize(2).unwrap();
        let cur = perturb(&prev, 1, &mut rng);
        let out = compress_step(&prev, &cur, &CompressConfig::default()).unwrap();
        let other = spec().materialize(3).unwrap();
        assert!(matches!(
            reconstruct_step(&other, &out.archive),
            Err(Error::BaseMismatch { .. })
        ));
    }

    #[test]
    fn inline_and_decoded_reconstruction_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut prev = spec().materialize(7).unwrap();
        for step in 1..=3 {
            let cur = perturb(&prev, step, &mut rng);
            let out = compress_step(&prev, &cur, &CompressConfig::default()).unwrap();
            let back = decode_archive_bytes(&encode_archive_bytes(&out.archive).unwrap()).unwrap();
            let again = reconstruct_step(&prev, &back).unwrap();
            assert_eq!(again, out.reconstructed);
            assert!(again.second_moments.values().all(|r| r.data().iter().all(|v| *v >= 0.0)));
            prev = out.reconstructed.weights;
        }
    }

    #[test]
    fn stage_errors_are_tagged() {
        let prev = spec().materialize(1).unwrap();
        let other = tensor_map([TensorRecord::f32("x", vec![1], vec![0.0]).unwrap()]).unwrap();
        let err = compress_step(&prev, &CheckpointBundle::weights_only(other, 1), &CompressConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "residual", .. }), "{err:?}");
        assert!(matches!(err.root(), Error::KeyMismatch(_)));
    }

    fn build_chain(dir: &Path, n: u64, keep: bool) -> (PathBuf, Vec<TensorMap>) {
        let manifest = dir.join("chain.json");
        let base = BaseSpec::Seeded { seed: 11, init: spec() };
        let mut chain = Chain::create(&manifest, base, CompressConfig::default())
            .unwrap()
            .keep_reconstructed(keep);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut truth = chain.live_weights().clone();
        let mut live = Vec::new();
        for step in 1..=n {
            let cur = perturb(&truth, step * 100, &mut rng);
            truth = cur.weights.clone();
            chain.append(&cur).unwrap();
            live.push(chain.live_weights().clone());
        }
        (manifest, live)
    }

    #[test]
    fn replay_matches_live_copies() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, live) = build_chain(dir.path(), 5, false);
        for (i, w) in live.iter().enumerate() {
            let step = (i as u64 + 1) * 100;
            assert_eq!(&replay_chain(&manifest, step).unwrap().weights, w);
        }
        assert!(matches!(replay_chain(&manifest, 150), Err(Error::MissingStep(150))));
        let reopened = Chain::open(&manifest).unwrap();
        assert_eq!(reopened.live_weights(), live.last().unwrap());
    }

    #[test]
    fn tampering_names_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) = build_chain(dir.path(), 5, false);
        let target = dir.path().join(archive_file_name(300));
        let original = fs::read(&target).unwrap();
        let mut bytes = original.clone();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&target, bytes).unwrap();
        replay_chain(&manifest, 200).unwrap();
        let err = replay_chain(&manifest, 500).unwrap_err();
        assert!(matches!(err, Error::ChainEntry { index: 3, step: 300, .. }), "{err:?}");

        // intact archives, wrong recorded digest
        fs::write(&target, original).unwrap();
        let mut m = ChainManifest::load(&manifest).unwrap();
        m.entries[3].post_digest = Digest([0; 32]);
        let err = replay_manifest(&m, dir.path(), 400).unwrap_err();
        assert!(matches!(err, Error::ChainDigestMismatch { index: 4, step: 400 }), "{err:?}");
    }

    #[test]
    fn retention_keeps_latest_only() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) = build_chain(dir.path(), 4, true);
        let listing = |d: &Path| {
            let mut v: Vec<_> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
            v.sort();
            v
        };
        let before = listing(dir.path());
        let dry = retention_apply(&manifest, RetentionPolicy { dry_run: true, ..Default::default() }).unwrap();
        assert_eq!(listing(dir.path()), before);
        let names: Vec<_> = dry.iter().map(|p| p.file_name().unwrap().to_owned()).collect();
        assert_eq!(names, ["step-00000100.exts", "step-00000200.exts", "step-00000300.exts"]);
        let real = retention_apply(&manifest, RetentionPolicy::default()).unwrap();
        assert_eq!(real, dry);
        for p in &real {
            assert!(!p.exists());
        }
        assert!(dir.path().join("step-00000400.exts").exists());
        for step in [100, 200, 300, 400] {
            assert!(dir.path().join(archive_file_name(step)).exists());
        }
        assert!(retention_apply(&manifest, RetentionPolicy::default()).unwrap().is_empty());
    }

    #[test]
    fn single_entry_chain_has_nothing_to_delete() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) = build_chain(dir.path(), 1, true);
        assert!(retention_apply(&manifest, RetentionPolicy::default()).unwrap().is_empty());
    }

    #[test]
    fn lock_and_step_order() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("chain.json");
        let base = BaseSpec::Seeded { seed: 1, init: spec() };
        let mut chain = Chain::create(&manifest, base, CompressConfig::default()).unwrap();
        assert!(matches!(Chain::open(&manifest), Err(Error::Locked(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cur = perturb(chain.live_weights(), 5, &mut rng);
        chain.append(&cur).unwrap();
        assert!(matches!(chain.append(&cur), Err(Error::NonIncreasingStep { prev: 5, found: 5 })));
        drop(chain);
        Chain::open(&manifest).unwrap();
    }

    #[test]
    fn stored_base() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w0 = perturb(&spec().materialize(0).unwrap(), 0, &mut rng).weights;
        let base = BaseSpec::store(dir.path(), "base.exts", &w0).unwrap();
        let manifest = dir.path().join("chain.json");
        let mut chain = Chain::create(&manifest, base, CompressConfig::lossless()).unwrap();
        assert_eq!(chain.live_weights(), &w0);
        let cur = perturb(&w0, 1, &mut rng);
        chain.append(&cur).unwrap();
        drop(chain);
        assert_eq!(replay_chain(&manifest, 1).unwrap(), cur);
    }
}
