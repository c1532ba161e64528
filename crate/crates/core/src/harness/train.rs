//! Training runs with periodic checkpoint compression and kill/resume.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig};
use super::mlp::{loss_and_grad, mse, DataSpec, Dataset, MlpParams, MlpSpec, Workspace};
use crate::codec::SizeReport;
use crate::error::{Error, Result};
use crate::pipeline::{BaseSpec, Chain, CompressConfig};
use crate::tensor_store::{CheckpointBundle, TensorMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: MlpSpec,
    pub init_seed: u64,
    pub data: DataSpec,
    /// Seeds the per-step minibatch draws.
    pub batch_seed: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub total_steps: u64,
    pub save_every: u64,
    /// Steps between kill/resume events; a multiple of `save_every`.
    pub break_every: u64,
    pub eval_every: u64,
    /// `None` trains straight through without saving.
    pub compression: Option<CompressConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: MlpSpec::default(),
            init_seed: 1,
            data: DataSpec::default(),
            batch_seed: 2,
            batch_size: 32,
            adam: AdamConfig::default(),
            total_steps: 20_000,
            save_every: 1_000,
            break_every: 5_000,
            eval_every: 100,
            compression: Some(CompressConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        self.adam.validate()?;
        if let Some(c) = &self.compression {
            c.validate()?;
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("total_steps, batch_size and eval_every must be positive");
        }
        if self.save_every == 0 || self.break_every == 0 || self.break_every % self.save_every != 0 {
            return bad("save_every must be positive and divide break_every");
        }
        if self.data.train == 0 || self.data.eval == 0 {
            return bad("dataset splits must be non-empty");
        }
        Ok(())
    }

    pub fn without_compression(&self) -> Self {
        Self {
            compression: None,
            ..self.clone()
        }
    }
}

/// Per-checkpoint bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub step: u64,
    pub raw_bytes: u64,
    pub compressed_bytes: u64,
    /// Fraction of weight residual entries kept by pruning (1 without pruning).
    pub weight_density: f64,
    /// Fraction of moment entries kept by pruning (1 without pruning).
    pub moment_density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub param_count: usize,
    pub eval_steps: Vec<u64>,
    pub eval_losses: Vec<f64>,
    /// Mean minibatch loss over each eval interval.
    pub train_losses: Vec<f64>,
    pub final_eval_loss: f64,
    /// Eval loss of the final checkpoint as reconstructed from the chain.
    pub reconstructed_eval_loss: Option<f64>,
    pub resumed_at: Vec<u64>,
    pub checkpoints: Vec<CheckpointReport>,
    pub aggregate: SizeReport,
}

impl RunReport {
    /// Final metric for comparisons: the reconstructed checkpoint's eval
    /// loss when one exists, otherwise the live model's.
    pub fn final_metric(&self) -> f64 {
        self.reconstructed_eval_loss.unwrap_or(self.final_eval_loss)
    }

    /// Writes `<stem>_curve.csv`, `<stem>_checkpoints.csv` and `<stem>_summary.json`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let curve = dir.join(format!("{stem}_curve.csv"));
        let mut w = csv_writer(&curve)?;
        write_row(&mut w, &curve, ["step", "eval_loss", "train_loss"])?;
        for ((s, e), t) in self.eval_steps.iter().zip(&self.eval_losses).zip(&self.train_losses) {
            write_row(&mut w, &curve, [s.to_string(), e.to_string(), t.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&curve, e))?;

        let ckpt = dir.join(format!("{stem}_checkpoints.csv"));
        let mut w = csv_writer(&ckpt)?;
        for c in &self.checkpoints {
            w.serialize(c).map_err(|e| csv_err(&ckpt, e))?;
        }
        w.flush().map_err(|e| Error::io(&ckpt, e))?;

        let summary = dir.join(format!("{stem}_summary.json"));
        let json = serde_json::json!({
            "label": self.label,
            "param_count": self.param_count,
            "final_eval_loss": self.final_eval_loss,
            "reconstructed_eval_loss": self.reconstructed_eval_loss,
            "resumed_at": self.resumed_at,
            "raw_bytes": self.aggregate.raw_bytes,
            "compressed_bytes": self.aggregate.compressed_bytes,
            "ratio": self.aggregate.ratio(),
        });
        fs::write(&summary, serde_json::to_string_pretty(&json).expect("json"))
            .map_err(|e| Error::io(&summary, e))?;
        Ok(vec![curve, ckpt, summary])
    }
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

pub(crate) fn write_row<I, T>(w: &mut csv::Writer<fs::File>, path: &Path, row: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    w.write_record(row).map_err(|e| csv_err(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Live training state for the MLP task.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    params: MlpParams,
    m: MlpParams,
    v: MlpParams,
    t: u64,
    grad: MlpParams,
    ws: Workspace,
    rows: Vec<usize>,
    xb: Vec<f32>,
    yb: Vec<f32>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, data: &'a Dataset, init: &TensorMap) -> Result<Self> {
        let spec = &cfg.model;
        Ok(Self {
            cfg,
            data,
            params: MlpParams::from_map(spec, init)?,
            m: MlpParams::zeros(spec),
            v: MlpParams::zeros(spec),
            t: 0,
            grad: MlpParams::zeros(spec),
            ws: Workspace::default(),
            rows: Vec::with_capacity(cfg.batch_size),
            xb: Vec::new(),
            yb: Vec::new(),
        })
    }

    /// Rebuilds the trainer from a checkpoint; missing moments start at zero.
    pub fn from_bundle(cfg: &'a TrainConfig, data: &'a Dataset, bundle: &CheckpointBundle) -> Result<Self> {
        let spec = &cfg.model;
        let mut tr = Self::new(cfg, data, &bundle.weights)?;
        if !bundle.is_weights_only() {
            tr.m = MlpParams::from_map(spec, &bundle.first_moments)?;
            tr.v = MlpParams::from_map(spec, &bundle.second_moments)?;
        }
        tr.t = bundle.step;
        Ok(tr)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    /// One minibatch step; the batch depends only on the step number.
    pub fn step(&mut self) -> Result<f64> {
        self.t += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.batch_seed);
        rng.set_stream(self.t);
        let n = self.data.train_len();
        self.rows.clear();
        self.rows.extend((0..self.cfg.batch_size).map(|_| rng.random_range(0..n)));
        self.data.gather(&self.rows, &mut self.xb, &mut self.yb);
        let loss = loss_and_grad(&self.cfg.model, &self.params, &self.xb, &self.yb, &mut self.grad, &mut self.ws);
        let lr = self.cfg.adam.lr_at(self.t, self.cfg.total_steps);
        let params = self.params.slices_mut();
        let m = self.m.slices_mut();
        let v = self.v.slices_mut();
        let g = self.grad.slices();
        for i in 0..4 {
            adam_step(params[i], m[i], v[i], g[i], &self.cfg.adam, lr, self.t)?;
        }
        Ok(loss)
    }

    pub fn eval_loss(&mut self) -> f64 {
        mse(&self.cfg.model, &self.params, &self.data.eval_x, &self.data.eval_y, &mut self.ws)
    }

    pub fn bundle(&self) -> Result<CheckpointBundle> {
        let spec = &self.cfg.model;
        let a = &self.cfg.adam;
        Ok(CheckpointBundle {
            weights: self.params.to_map(spec)?,
            first_moments: self.m.to_map(spec)?,
            second_moments: self.v.to_map(spec)?,
            step: self.t,
            scalars: [
                ("lr".to_string(), a.lr_at(self.t.max(1), self.cfg.total_steps)),
                ("beta1".to_string(), a.beta1),
                ("beta2".to_string(), a.beta2),
                ("eps".to_string(), a.eps),
            ]
            .into(),
        })
    }
}

/// Eval loss of an arbitrary weight map under `cfg`'s model and data.
pub fn eval_weights(cfg: &TrainConfig, data: &Dataset, weights: &TensorMap) -> Result<f64> {
    let p = MlpParams::from_map(&cfg.model, weights)?;
    Ok(mse(&cfg.model, &p, &data.eval_x, &data.eval_y, &mut Workspace::default()))
}

/// Trains the MLP. With compression on, every `save_every` steps the state is
/// appended to a chain in `chain_dir` (a temporary directory when `None`),
/// and every `break_every` steps the live state is dropped and rebuilt by
/// replaying the chain from its seed.
pub fn run_training(cfg: &TrainConfig, chain_dir: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let data = cfg.data.generate(cfg.model.input, cfg.model.output);
    let init_spec = cfg.model.init_spec();
    let init = init_spec.materialize(cfg.init_seed)?;

    let tmp;
    let mut chain = match &cfg.compression {
        Some(c) => {
            let dir = match chain_dir {
                Some(d) => d.to_path_buf(),
                None => {
                    tmp = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
                    tmp.path().to_path_buf()
                }
            };
            let base = BaseSpec::Seeded {
                seed: cfg.init_seed,
                init: init_spec.clone(),
            };
            Some(Chain::create(dir.join("chain.json"), base, *c)?)
        }
        None => None,
    };

    let mut trainer = Trainer::new(cfg, &data, &init)?;
    let mut report = RunReport {
        label: cfg.compression.map_or("uncompressed".into(), |c| c.label()),
        param_count: cfg.model.param_count(),
        eval_steps: Vec::new(),
        eval_losses: Vec::new(),
        train_losses: Vec::new(),
        final_eval_loss: f64::NAN,
        reconstructed_eval_loss: None,
        resumed_at: Vec::new(),
        checkpoints: Vec::new(),
        aggregate: SizeReport::default(),
    };
    let mut interval_loss = 0.0;
    let mut interval_n = 0u64;
    for step in 1..=cfg.total_steps {
        interval_loss += trainer.step()?;
        interval_n += 1;
        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            report.eval_steps.push(step);
            report.eval_losses.push(trainer.eval_loss());
            report.train_losses.push(interval_loss / interval_n as f64);
            interval_loss = 0.0;
            interval_n = 0;
        }
        let Some(chain) = chain.as_mut() else { continue };
        if step % cfg.save_every != 0 {
            continue;
        }
        let out = chain.append(&trainer.bundle()?)?;
        let density = |kept: usize, total: usize| if total == 0 { 1.0 } else { kept as f64 / total as f64 };
        let (wd, md) = out.stats.map_or((1.0, 1.0), |s| {
            (density(s.weights_kept, s.total), density(s.moments_kept, s.total))
        });
        report.checkpoints.push(CheckpointReport {
            step,
            raw_bytes: out.size.raw_bytes,
            compressed_bytes: out.size.compressed_bytes,
            weight_density: wd,
            moment_density: md,
        });
        if step == cfg.total_steps {
            report.reconstructed_eval_loss = Some(eval_weights(cfg, &data, chain.live_weights())?);
        }
        if step % cfg.break_every == 0 && step < cfg.total_steps {
            // kill: the trainer is rebuilt from the seed and the archives alone
            let restored = chain.replay(step)?;
            trainer = Trainer::from_bundle(cfg, &data, &restored)?;
            report.resumed_at.push(step);
        }
    }
    report.final_eval_loss = trainer.eval_loss();
    report.aggregate = SizeReport::aggregate(
        &report
            .checkpoints
            .iter()
            .map(|c| SizeReport {
                raw_bytes: c.raw_bytes,
                compressed_bytes: c.compressed_bytes,
            })
            .collect::<Vec<_>>(),
    );
    Ok(report)
}

/// A compressed run next to its unbroken uncompressed twin.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairedReport {
    pub baseline: RunReport,
    pub compressed: RunReport,
    /// `|final_c - final_b| / final_b`.
    pub final_rel_diff: f64,
    /// Max over eval points of `|c - b| / b`.
    pub max_curve_rel_dev: f64,
}

pub fn run_paired(cfg: &TrainConfig, chain_dir: Option<&Path>) -> Result<PairedReport> {
    if cfg.compression.is_none() {
        return Err(Error::InvalidConfig("paired run needs a compression config".into()));
    }
    let baseline = run_training(&cfg.without_compression(), None)?;
    let compressed = run_training(cfg, chain_dir)?;
    Ok(pair(baseline, compressed))
}

pub fn pair(baseline: RunReport, compressed: RunReport) -> PairedReport {
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let final_rel_diff = rel(compressed.final_eval_loss, baseline.final_eval_loss);
    let max_curve_rel_dev = compressed
        .eval_losses
        .iter()
        .zip(&baseline.eval_losses)
        .map(|(c, b)| rel(*c, *b))
        .fold(0.0, f64::max);
    PairedReport {
        baseline,
        compressed,
        final_rel_diff,
        max_curve_rel_dev,
    }
}
