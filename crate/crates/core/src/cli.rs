//! Command-line front end.
//!
//! Exit codes: 0 success; 1 invalid arguments, configuration or input data;
//! 2 I/O failure (including a manifest held by another process); 3 integrity
//! failure (corrupt compressed stream, checksum, base or chain digest
//! mismatch). Results go to stdout, diagnostics to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::codec::{decode_archive_bytes, encode_archive, ArchiveTensor, Compressor, Encoding, SizeReport};
use crate::error::{Error, Result};
use crate::harness::{ablation_suite, regret_experiment, run_paired, MaskRule, RegretConfig, TrainConfig};
use crate::pipeline::{
    compress_step, manifest_dir, reconstruct_step, replay_manifest, BaseSpec, Chain, ChainManifest, CompressConfig,
    ManifestLock,
};
use crate::prune::{MaskStats, PruneConfig};
use crate::quant::QuantConfig;
use crate::tensor_store::{is_container, read_bundle, weights_digest, write_bundle, CheckpointBundle};

/// Environment variable naming the default config overlay.
pub const CONFIG_ENV: &str = "EXCP_CONFIG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_INTEGRITY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "excp", version, about = "Compress training checkpoints (weights + Adam moments)")]
pub struct Cli {
    /// Print a JSON summary on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// JSON config overlay for compression settings; flags take precedence.
    /// Defaults to the file named by $EXCP_CONFIG.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress one checkpoint against the previous reconstructed weights.
    Compress(CompressArgs),
    /// Apply one archive to the previous reconstructed weights.
    Reconstruct(ReconstructArgs),
    /// Rebuild the checkpoint at any step of a chain from its base.
    Replay(ReplayArgs),
    /// Print an archive's header, per-tensor sparsity and codebooks.
    Inspect(InspectArgs),
    /// Run the desk-scale training, regret or ablation experiment.
    TrainDemo(TrainDemoArgs),
}

/// Compression knobs shared by `compress` and `train-demo`.
#[derive(Debug, Clone, Default, Args)]
pub struct Knobs {
    /// Weight pruning strength.
    #[arg(long, conflicts_with = "no_prune", allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// Moment pruning threshold, in multiples of mean(v).
    #[arg(long, conflicts_with = "no_prune", allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// Codebook bits: 2, 4 or 8.
    #[arg(long, conflicts_with = "no_quant")]
    pub bits: Option<u8>,
    /// Store absolute weights instead of the residual
    #[arg(long)]
    pub no_residual: bool,
    /// Skip weight and moment pruning
    #[arg(long)]
    pub no_prune: bool,
    /// Skip codebook quantization (keep raw values)
    #[arg(long)]
    pub no_quant: bool,
    /// Seed for k-means initialisation.
    #[arg(long, conflicts_with = "no_quant")]
    pub seed: Option<u64>,
    /// Final compressor: lzma, deflate or bzip2.
    #[arg(long)]
    pub compressor: Option<Compressor>,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// Previous reconstructed bundle, or a chain manifest to append to.
    #[arg(long)]
    pub prev: PathBuf,
    /// Bundle holding the current weights (and optionally the moments).
    #[arg(long)]
    pub weights: PathBuf,
    /// Bundle holding the moments; defaults to the weights bundle.
    #[arg(long)]
    pub optimizer: Option<PathBuf>,
    /// Archive to write; required unless a manifest names it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Start a new chain at this manifest path with `--prev` as its base.
    #[arg(long, conflicts_with = "out")]
    pub manifest: Option<PathBuf>,
    /// Keep the reconstructed bundle next to the archive (chains only).
    #[arg(long)]
    pub keep_reconstructed: bool,
    #[command(flatten)]
    pub knobs: Knobs,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub prev: PathBuf,
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Target step; defaults to the chain tail.
    #[arg(long)]
    pub step: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub archive: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// Paired compressed/uncompressed MLP training with kill/resume.
    Resume,
    /// Average regret of online Adam with moments pruned mid-run.
    Regret,
    /// The {residual, prune, quant} grid plus a bit-width sweep.
    Ablation,
}

#[derive(Debug, Args)]
pub struct TrainDemoArgs {
    #[arg(long, value_enum, default_value_t = Task::Resume)]
    pub task: Task,
    /// Training steps (regret: rounds).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Steps between saved checkpoints
    #[arg(long)]
    pub save_every: Option<u64>,
    /// Steps between kill/resume events; a multiple of --save-every
    #[arg(long)]
    pub break_every: Option<u64>,
    /// Adam learning rate
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    /// Regret task: round after which moments are pruned.
    #[arg(long, default_value_t = 500)]
    pub tau: u64,
    /// Write CSV/JSON reports (and the chain, for `resume`) here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub knobs: Knobs,
}

/// Config overlay file. Every field is optional; flags win over the file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub bits: Option<u8>,
    pub residual: Option<bool>,
    pub prune: Option<bool>,
    pub quant: Option<bool>,
    pub seed: Option<u64>,
    pub compressor: Option<Compressor>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("config {}: {e}", path.display())))
    }
}

/// Defaults, then the overlay file, then flags.
pub fn resolve_config(file: &FileConfig, knobs: &Knobs) -> Result<CompressConfig> {
    let defaults = CompressConfig::default();
    let prune_defaults = defaults.prune.unwrap_or_default();
    let quant_defaults = defaults.quant.unwrap_or_default();
    let prune = (!knobs.no_prune && file.prune.unwrap_or(true)).then(|| PruneConfig {
        alpha: knobs.alpha.or(file.alpha).unwrap_or(prune_defaults.alpha),
        beta: knobs.beta.or(file.beta).unwrap_or(prune_defaults.beta),
        ..prune_defaults
    });
    let quant = (!knobs.no_quant && file.quant.unwrap_or(true)).then(|| QuantConfig {
        bits: knobs.bits.or(file.bits).unwrap_or(quant_defaults.bits),
        rng_seed: knobs.seed.or(file.seed).unwrap_or(quant_defaults.rng_seed),
        ..quant_defaults
    });
    if prune.is_none() && (knobs.alpha.is_some() || knobs.beta.is_some()) {
        return Err(Error::InvalidConfig("--alpha/--beta need pruning enabled".into()));
    }
    if quant.is_none() && (knobs.bits.is_some() || knobs.seed.is_some()) {
        return Err(Error::InvalidConfig("--bits/--seed need quantization enabled".into()));
    }
    let cfg = CompressConfig {
        residual: !knobs.no_residual && file.residual.unwrap_or(true),
        prune,
        quant,
        compressor: knobs.compressor.or(file.compressor).unwrap_or(defaults.compressor),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Io { .. } | Error::Locked(_) => EXIT_IO,
        Error::ChecksumMismatch
        | Error::Compressor(_)
        | Error::BaseMismatch { .. }
        | Error::ChainDigestMismatch { .. } => EXIT_INTEGRITY,
        _ => EXIT_INVALID,
    }
}

/// What a command produced: text and JSON renderings plus stderr notes.
struct Report {
    text: String,
    json: Value,
    notes: Vec<String>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{e}");
                    EXIT_INVALID
                }
            };
            return code;
        }
    };
    match execute(&cli) {
        Ok(report) => {
            for note in &report.notes {
                let _ = writeln!(err, "{note}");
            }
            let body = if cli.json {
                serde_json::to_string_pretty(&report.json).unwrap_or_default()
            } else {
                report.text
            };
            let _ = writeln!(out, "{}", body.trim_end());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli) -> Result<Report> {
    match &cli.command {
        Command::Compress(a) => cmd_compress(a, &overlay(cli)?),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::TrainDemo(a) => cmd_train_demo(a, &overlay(cli)?),
    }
}

fn overlay(cli: &Cli) -> Result<FileConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
    path.map_or(Ok(FileConfig::default()), |p| FileConfig::load(&p))
}

enum Prev {
    Bundle(CheckpointBundle),
    Manifest(PathBuf),
}

fn classify_prev(path: &Path) -> Result<Prev> {
    fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if is_container(path) {
        return Ok(Prev::Bundle(read_bundle(path)?));
    }
    match ChainManifest::load(path) {
        Ok(_) => Ok(Prev::Manifest(path.to_path_buf())),
        Err(e @ Error::Io { .. }) => Err(e),
        Err(_) => Err(Error::InvalidConfig(format!(
            "{} is neither a bundle nor a chain manifest",
            path.display()
        ))),
    }
}

/// Current bundle: weights from one file, moments from another if given.
fn load_current(weights: &Path, optimizer: Option<&Path>) -> Result<CheckpointBundle> {
    let mut bundle = read_bundle(weights)?;
    if let Some(opt) = optimizer.filter(|p| *p != weights) {
        let o = read_bundle(opt)?;
        if o.first_moments.is_empty() && o.second_moments.is_empty() {
            return Err(Error::InvalidConfig(format!("{} holds no optimizer moments", opt.display())));
        }
        bundle.first_moments = o.first_moments;
        bundle.second_moments = o.second_moments;
        for (k, v) in o.scalars {
            bundle.scalars.entry(k).or_insert(v);
        }
    }
    bundle.validate()?;
    Ok(bundle)
}

fn density(kept: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        kept as f64 / total as f64
    }
}

fn compress_report(archive: &Path, step: u64, size: SizeReport, stats: Option<MaskStats>, manifest: Option<&Path>) -> Report {
    let mut json = json!({
        "archive": archive,
        "step": step,
        "raw_bytes": size.raw_bytes,
        "compressed_bytes": size.compressed_bytes,
        "ratio": size.ratio(),
    });
    if let Some(s) = stats {
        json["weights_kept"] = json!(density(s.weights_kept, s.total));
        json["moments_kept"] = json!(density(s.moments_kept, s.total));
    }
    if let Some(m) = manifest {
        json["manifest"] = json!(m);
    }
    Report {
        text: size.to_string(),
        json,
        notes: vec![format!("wrote {}", archive.display())],
    }
}

fn cmd_compress(a: &CompressArgs, file: &FileConfig) -> Result<Report> {
    let cfg = resolve_config(file, &a.knobs)?;
    let prev = classify_prev(&a.prev)?;
    let current = load_current(&a.weights, a.optimizer.as_deref())?;
    let append = |chain: Chain, manifest: &Path| -> Result<Report> {
        let mut chain = chain.keep_reconstructed(a.keep_reconstructed);
        let outcome = chain.append(&current)?;
        let archive = chain.dir().join(&outcome.entry.archive);
        Ok(compress_report(&archive, current.step, outcome.size, outcome.stats, Some(manifest)))
    };
    match prev {
        Prev::Manifest(path) => {
            if a.out.is_some() || a.manifest.is_some() {
                return Err(Error::InvalidConfig(
                    "--out/--manifest do not apply when --prev is a manifest; the chain names its archives".into(),
                ));
            }
            let chain = Chain::open(&path)?;
            if *chain.config() != cfg {
                return Err(Error::InvalidConfig(format!(
                    "settings `{}` differ from the chain's `{}`",
                    cfg.label(),
                    chain.config().label()
                )));
            }
            append(chain, &path)
        }
        Prev::Bundle(prev) => match &a.manifest {
            Some(manifest) => {
                if manifest.exists() {
                    return Err(Error::InvalidConfig(format!(
                        "{} exists; pass it as --prev to append",
                        manifest.display()
                    )));
                }
                let dir = manifest_dir(manifest);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let base = BaseSpec::store(&dir, "base.exts", &prev.weights)?;
                append(Chain::create(manifest, base, cfg)?, manifest)
            }
            None => {
                let out = a
                    .out
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("--out is required when --prev is a bundle".into()))?;
                let c = compress_step(&prev.weights, &current, &cfg)?;
                let size = SizeReport {
                    raw_bytes: c.archive.raw_equivalent_bytes(),
                    compressed_bytes: encode_archive(&c.archive, out)?,
                };
                Ok(compress_report(out, current.step, size, c.stats, None))
            }
        },
    }
}

fn bundle_report(bundle: &CheckpointBundle, out: &Path) -> Report {
    let digest = weights_digest(&bundle.weights);
    Report {
        text: format!("step={} digest={digest}", bundle.step),
        json: json!({ "step": bundle.step, "digest": digest.to_hex(), "out": out }),
        notes: vec![format!("wrote {}", out.display())],
    }
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<Report> {
    let prev = read_bundle(&a.prev)?;
    let bytes = fs::read(&a.archive).map_err(|e| Error::io(&a.archive, e))?;
    let archive = decode_archive_bytes(&bytes)?;
    let bundle = reconstruct_step(&prev.weights, &archive)?;
    write_bundle(&bundle, &a.out)?;
    Ok(bundle_report(&bundle, &a.out))
}

fn cmd_replay(a: &ReplayArgs) -> Result<Report> {
    fs::metadata(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?;
    let _lock = ManifestLock::acquire(&a.manifest)?;
    let manifest = ChainManifest::load(&a.manifest)?;
    let step = a
        .step
        .or(manifest.last_step())
        .ok_or_else(|| Error::InvalidConfig("the chain has no entries".into()))?;
    let bundle = replay_manifest(&manifest, &manifest_dir(&a.manifest), step)?;
    write_bundle(&bundle, &a.out)?;
    Ok(bundle_report(&bundle, &a.out))
}

fn tensor_summary(section: &str, t: &ArchiveTensor) -> Result<(String, Value)> {
    let n = t.numel();
    let nonzero = density(n - t.zero_count()?, n);
    let shape = t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
    let (encoding, codebook) = match &t.encoding {
        Encoding::Codebook { bits, codebook, .. } => {
            let lo = codebook.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = codebook.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let range = if codebook.is_empty() { None } else { Some((lo, hi)) };
            (format!("q{bits}"), Some((codebook.len(), range)))
        }
        Encoding::RawF32(_) => ("raw32".into(), None),
        Encoding::RawF64(_) => ("raw64".into(), None),
    };
    let cb_text = match codebook {
        Some((k, Some((lo, hi)))) => format!("{k}:[{lo:.6e},{hi:.6e}]"),
        Some((k, None)) => format!("{k}:[]"),
        None => "-".into(),
    };
    let text = format!("{section}\t{}\t{}\t{shape}\t{encoding}\t{nonzero:.4}\t{cb_text}", t.name, t.dtype);
    let json = json!({
        "section": section,
        "name": t.name,
        "dtype": t.dtype.to_string(),
        "shape": t.shape,
        "encoding": encoding,
        "nonzero": nonzero,
        "codebook_len": codebook.map(|c| c.0),
        "codebook_range": codebook.and_then(|c| c.1).map(|(lo, hi)| [lo, hi]),
    });
    Ok((text, json))
}

fn cmd_inspect(a: &InspectArgs) -> Result<Report> {
    let bytes = fs::read(&a.archive).map_err(|e| Error::io(&a.archive, e))?;
    let archive = decode_archive_bytes(&bytes)?;
    let size = SizeReport {
        raw_bytes: archive.raw_equivalent_bytes(),
        compressed_bytes: bytes.len() as u64,
    };
    let kind = if archive.weights_are_deltas { "residual" } else { "absolute" };
    let mut text = format!(
        "step\t{}\ncompressor\t{}\nweights\t{kind}\nbase\t{}\nraw_bytes\t{}\ncompressed_bytes\t{}\nratio\t{:.3}\n",
        archive.step, archive.compressor, archive.base_ref, size.raw_bytes, size.compressed_bytes, size.ratio()
    );
    for (k, v) in &archive.scalars {
        text.push_str(&format!("scalar\t{k}\t{v}\n"));
    }
    text.push_str("section\ttensor\tdtype\tshape\tencoding\tnonzero\tcodebook\n");
    let mut tensors = Vec::new();
    for (name, section) in ["weights", "first_moments", "second_moments"].into_iter().zip(archive.sections()) {
        for t in section {
            let (line, json) = tensor_summary(name, t)?;
            text.push_str(&line);
            text.push('\n');
            tensors.push(json);
        }
    }
    Ok(Report {
        text,
        json: json!({
            "step": archive.step,
            "compressor": archive.compressor.to_string(),
            "weights": kind,
            "base": archive.base_ref.to_hex(),
            "raw_bytes": size.raw_bytes,
            "compressed_bytes": size.compressed_bytes,
            "ratio": size.ratio(),
            "scalars": archive.scalars,
            "tensors": tensors,
        }),
        notes: Vec::new(),
    })
}

fn train_config(a: &TrainDemoArgs, compression: CompressConfig) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let mut cfg = TrainConfig {
        total_steps: a.steps.unwrap_or(defaults.total_steps),
        save_every: a.save_every.unwrap_or(defaults.save_every),
        break_every: a.break_every.unwrap_or(defaults.break_every),
        compression: Some(compression),
        ..defaults
    };
    if let Some(lr) = a.lr {
        cfg.adam.lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train_demo(a: &TrainDemoArgs, file: &FileConfig) -> Result<Report> {
    let compression = resolve_config(file, &a.knobs)?;
    match a.task {
        Task::Resume => demo_resume(a, train_config(a, compression)?),
        Task::Regret => demo_regret(a),
        Task::Ablation => demo_ablation(a, train_config(a, compression)?),
    }
}

fn demo_resume(a: &TrainDemoArgs, cfg: TrainConfig) -> Result<Report> {
    let chain_dir = a.out_dir.as_ref().map(|d| d.join("chain"));
    let report = run_paired(&cfg, chain_dir.as_deref())?;
    let mut notes = Vec::new();
    if let Some(dir) = &a.out_dir {
        for path in report
            .baseline
            .write(dir, "baseline")?
            .into_iter()
            .chain(report.compressed.write(dir, "compressed")?)
        {
            notes.push(format!("wrote {}", path.display()));
        }
    }
    let (b, c) = (&report.baseline, &report.compressed);
    let text = format!(
        "baseline_final_loss={:.6}\ncompressed_final_loss={:.6}\nfinal_rel_diff={:.4}\nmax_curve_rel_dev={:.4}\nresumed_at={:?}\n{}\n",
        b.final_eval_loss, c.final_eval_loss, report.final_rel_diff, report.max_curve_rel_dev, c.resumed_at, c.aggregate
    );
    Ok(Report {
        text,
        json: json!({
            "label": c.label,
            "baseline_final_loss": b.final_eval_loss,
            "compressed_final_loss": c.final_eval_loss,
            "final_rel_diff": report.final_rel_diff,
            "max_curve_rel_dev": report.max_curve_rel_dev,
            "resumed_at": c.resumed_at,
            "raw_bytes": c.aggregate.raw_bytes,
            "compressed_bytes": c.aggregate.compressed_bytes,
            "ratio": c.aggregate.ratio(),
        }),
        notes,
    })
}

fn demo_regret(a: &TrainDemoArgs) -> Result<Report> {
    let mut cfg = RegretConfig::default();
    if let Some(rounds) = a.steps {
        cfg.rounds = rounds;
        cfg.report_at.retain(|t| *t < rounds);
        cfg.report_at.push(rounds);
    }
    if let Some(lr) = a.lr {
        cfg.adam.lr = lr;
    }
    cfg.validate()?;
    if a.tau == 0 || a.tau > cfg.rounds {
        return Err(Error::InvalidConfig(format!("--tau must lie in 1..={}", cfg.rounds)));
    }
    let runs = [
        ("none", None, MaskRule::None),
        ("below_mean", Some(a.tau), MaskRule::BelowMean),
        ("all", Some(a.tau), MaskRule::All),
    ];
    let mut text = String::from("rule\tpruned\tT\tregret\taverage\n");
    let mut rows = Vec::new();
    for (label, at, rule) in runs {
        let r = regret_experiment(&cfg, at, rule)?;
        for p in &r.points {
            text.push_str(&format!("{label}\t{}\t{}\t{:.6}\t{:.6}\n", r.pruned, p.t, p.regret, p.average));
        }
        rows.push(json!({ "rule": label, "pruned": r.pruned, "decreasing": r.is_decreasing(), "points": r.points }));
    }
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("regret.tsv");
        fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(Report {
        text,
        json: json!({ "tau": a.tau, "rounds": cfg.rounds, "runs": rows }),
        notes: Vec::new(),
    })
}

fn demo_ablation(a: &TrainDemoArgs, cfg: TrainConfig) -> Result<Report> {
    let table = ablation_suite(&cfg)?;
    let mut notes = Vec::new();
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("ablation.csv");
        table.write_csv(&path)?;
        notes.push(format!("wrote {}", path.display()));
    }
    let mut text = format!("baseline_final_loss={:.6}\ncell\traw_bytes\tcompressed_bytes\tratio\tfinal_loss\n", table.baseline_loss);
    for r in &table.rows {
        text.push_str(&format!(
            "{}\t{}\t{}\t{:.3}\t{:.6}\n",
            r.label, r.raw_bytes, r.compressed_bytes, r.ratio, r.final_loss
        ));
    }
    Ok(Report {
        text,
        json: serde_json::to_value(&table).map_err(|e| Error::Format(e.to_string()))?,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("excp").chain(args.iter().copied()))
    }

    fn knobs(args: &[&str]) -> Knobs {
        let mut all = vec!["compress", "--prev", "p", "--weights", "w", "--out", "o"];
        all.extend_from_slice(args);
        match parse(&all).unwrap().command {
            Command::Compress(c) => c.knobs,
            _ => unreachable!(),
        }
    }

    #[test]
    fn bare_flags_give_library_defaults() {
        let cfg = resolve_config(&FileConfig::default(), &knobs(&[])).unwrap();
        assert_eq!(cfg, CompressConfig::default());
        assert_eq!(cfg.label(), "res+prune+q4");
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let file = FileConfig {
            alpha: Some(1e-3),
            bits: Some(8),
            compressor: Some(Compressor::Bzip2),
            ..FileConfig::default()
        };
        let cfg = resolve_config(&file, &knobs(&["--bits", "2"])).unwrap();
        assert_eq!(cfg.prune.unwrap().alpha, 1e-3);
        assert_eq!(cfg.quant.unwrap().bits, 2);
        assert_eq!(cfg.compressor, Compressor::Bzip2);
        let off = FileConfig {
            residual: Some(false),
            quant: Some(false),
            ..FileConfig::default()
        };
        let cfg = resolve_config(&off, &knobs(&[])).unwrap();
        assert!(!cfg.residual && cfg.quant.is_none() && cfg.prune.is_some());
    }

    #[test]
    fn invalid_knobs_are_rejected_before_work() {
        assert!(resolve_config(&FileConfig::default(), &knobs(&["--bits", "3"])).is_err());
        assert!(resolve_config(&FileConfig::default(), &knobs(&["--alpha", "-1"])).is_err());
        let file = FileConfig {
            prune: Some(false),
            ..FileConfig::default()
        };
        assert!(resolve_config(&file, &knobs(&["--beta", "2"])).is_err());
        assert!(parse(&["compress", "--prev", "p", "--weights", "w", "--no-quant", "--bits", "4"]).is_err());
        assert!(parse(&["compress", "--prev", "p", "--weights", "w", "--compressor", "rar"]).is_err());
    }

    #[test]
    fn overlay_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"alpha": 1e-4, "compressor": "deflate"}"#).unwrap();
        let f = FileConfig::load(&path).unwrap();
        assert_eq!(f.compressor, Some(Compressor::Deflate));
        fs::write(&path, r#"{"alpah": 1e-4}"#).unwrap();
        assert_eq!(exit_code(&FileConfig::load(&path).unwrap_err()), EXIT_INVALID);
        assert_eq!(exit_code(&FileConfig::load(&dir.path().join("nope.json")).unwrap_err()), EXIT_IO);
    }

    #[test]
    fn exit_codes_follow_the_root_cause() {
        let digest = crate::tensor_store::Digest([0; 32]);
        let wrapped = Error::Stage {
            stage: "reconstruct",
            source: Box::new(Error::BaseMismatch {
                expected: digest,
                found: digest,
            }),
        };
        assert_eq!(exit_code(&wrapped), EXIT_INTEGRITY);
        assert_eq!(exit_code(&Error::ChecksumMismatch), EXIT_INTEGRITY);
        assert_eq!(exit_code(&Error::Locked("m".into())), EXIT_IO);
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), EXIT_INVALID);
        assert_eq!(exit_code(&Error::BadMagic { expected: "EXCP" }), EXIT_INVALID);
    }

    #[test]
    fn usage_errors_exit_one_and_help_exits_zero() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["excp", "frobnicate"], &mut out, &mut err), EXIT_INVALID);
        assert!(!err.is_empty());
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["excp", "--help"], &mut out, &mut err), EXIT_OK);
        assert!(String::from_utf8(out).unwrap().contains("train-demo"));
    }
}
