//! Stage ablations, bit-width sweep and compressor comparison.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::{csv_err, csv_writer, run_training, TrainConfig};
use crate::codec::{decode_archive, encode_archive_bytes, Compressor};
use crate::error::{Error, Result};
use crate::pipeline::CompressConfig;
use crate::prune::PruneConfig;
use crate::quant::QuantConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub residual: bool,
    pub prune: bool,
    pub bits: Option<u8>,
    pub raw_bytes: u64,
    pub compressed_bytes: u64,
    pub ratio: f64,
    /// Eval loss of the reconstructed final checkpoint (lower is better).
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Final eval loss of the uncompressed, unbroken run.
    pub baseline_loss: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, residual: bool, prune: bool, bits: Option<u8>) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.residual == residual && r.prune == prune && r.bits == bits)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv_writer(path)?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// The 2x2x2 grid over {residual, prune, 4-bit quant}, then 2- and 8-bit
/// variants of the full pipeline.
pub fn ablation_cells(base: &CompressConfig) -> Vec<CompressConfig> {
    let prune = base.prune.unwrap_or_default();
    let quant = base.quant.unwrap_or_default();
    let mut cells = Vec::new();
    for residual in [false, true] {
        for pruning in [false, true] {
            for q in [None, Some(QuantConfig { bits: 4, ..quant })] {
                cells.push(CompressConfig {
                    residual,
                    prune: pruning.then_some(prune),
                    quant: q,
                    compressor: base.compressor,
                });
            }
        }
    }
    for bits in [2, 8] {
        cells.push(CompressConfig {
            residual: true,
            prune: Some(prune),
            quant: Some(QuantConfig { bits, ..quant }),
            compressor: base.compressor,
        });
    }
    cells
}

/// Trains once per cell (with the kill/resume schedule of `cfg`) and once
/// uncompressed.
pub fn ablation_suite(cfg: &TrainConfig) -> Result<AblationTable> {
    let base = cfg.compression.unwrap_or_default();
    let baseline = run_training(&cfg.without_compression(), None)?;
    let rows = ablation_cells(&base)
        .into_iter()
        .map(|cell| {
            let run = run_training(
                &TrainConfig {
                    compression: Some(cell),
                    ..cfg.clone()
                },
                None,
            )?;
            Ok(AblationRow {
                label: cell.label(),
                residual: cell.residual,
                prune: cell.prune.is_some(),
                bits: cell.quant.map(|q| q.bits),
                raw_bytes: run.aggregate.raw_bytes,
                compressed_bytes: run.aggregate.compressed_bytes,
                ratio: run.aggregate.ratio(),
                final_loss: run.final_metric(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        baseline_loss: baseline.final_eval_loss,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressorRow {
    pub compressor: Compressor,
    pub bytes: u64,
    pub ratio: f64,
}

/// Re-encodes every archive with each backend and totals the sizes.
pub fn compressor_sweep<P: AsRef<Path>>(archives: &[P]) -> Result<Vec<CompressorRow>> {
    let decoded = archives
        .iter()
        .map(decode_archive)
        .collect::<Result<Vec<_>>>()?;
    let raw: u64 = decoded.iter().map(|a| a.raw_equivalent_bytes()).sum();
    Compressor::ALL
        .iter()
        .map(|&c| {
            let mut bytes = 0u64;
            for a in &decoded {
                let mut a = a.clone();
                a.compressor = c;
                bytes += encode_archive_bytes(&a)?.len() as u64;
            }
            Ok(CompressorRow {
                compressor: c,
                bytes,
                ratio: raw as f64 / bytes.max(1) as f64,
            })
        })
        .collect()
}

/// Archive paths of a chain directory, in manifest order.
pub fn chain_archives(chain_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = chain_dir.as_ref();
    let manifest = crate::pipeline::ChainManifest::load(dir.join("chain.json"))?;
    Ok(manifest.entries.iter().map(|e| dir.join(&e.archive)).collect())
}

/// Default prune settings with a different alpha; handy for sweeps.
pub fn with_alpha(alpha: f64) -> PruneConfig {
    PruneConfig {
        alpha,
        ..PruneConfig::default()
    }
}
