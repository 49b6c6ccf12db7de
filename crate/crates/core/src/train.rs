//! Training loop: Adam with coupled L2 decay, gradient accumulation,
//! per-epoch validation, best/final checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{ExtractorConfig, ExtractorVariant, FeatureExtractor};
use crate::losses::{composite_loss, composite_loss_grad, LossBreakdown, LossWeights};
use crate::optim::Adam;
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::unet::{self, build_model, forward, fuse_inputs, Mode, ModelConfig, NetworkWeights, SIZE_DIVISOR};
use crate::volume::{PairedSample, Volume};

pub const CHECKPOINT_BEST: &str = "checkpoint_best";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub accumulation_steps: usize,
    pub per_step_batch: usize,
    /// Seeds the per-epoch data order.
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub extractor: ExtractorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            accumulation_steps: 8,
            per_step_batch: 1,
            seed: 0,
            loss_weights: LossWeights::default(),
            extractor: ExtractorConfig {
                variant: ExtractorVariant::Pretrained,
                ..ExtractorConfig::default()
            },
        }
    }
}

impl TrainConfig {
    /// Settings that train the tiny model on 32³ phantoms within minutes.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            learning_rate: 2e-3,
            accumulation_steps: 2,
            extractor: ExtractorConfig::default(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.accumulation_steps == 0 || self.per_step_batch == 0 {
            return Err(Error::Parameter(format!(
                "epochs, accumulation_steps and per_step_batch must be ≥ 1 (got {}, {}, {})",
                self.epochs, self.accumulation_steps, self.per_step_batch
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Parameter(format!("weight_decay must be ≥ 0, got {}", self.weight_decay)));
        }
        self.loss_weights.validate()
    }
}

/// One network input/target pair, built once and reused every epoch.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    /// `[1, C, D, H, W]`.
    pub input: Tensor,
    /// `[1, 1, D, H, W]`.
    pub target: Tensor,
}

impl TrainSample {
    /// Input from the sample's CBCT plus, for fusion models, the given
    /// (possibly misaligned) CT. The target is always the aligned CT.
    pub fn from_paired(sample: &PairedSample, ct_input: Option<&Volume>) -> Result<Self> {
        Ok(Self {
            id: sample.id.clone(),
            input: fuse_inputs(&sample.cbct, ct_input)?,
            target: Tensor::from_volume(&sample.ct),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub optimizer_steps: u64,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,optimizer_steps,train_total,train_mae,train_one_minus_ssim,train_perceptual,\
             val_total,val_mae,val_one_minus_ssim,val_perceptual,wall_time_s\n",
        );
        for r in &self.records {
            let v = |f: fn(&LossBreakdown) -> f64| r.val.as_ref().map(|b| f(b).to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{:.3}",
                r.epoch,
                r.optimizer_steps,
                r.train.total,
                r.train.mae,
                r.train.one_minus_ssim,
                r.train.perceptual,
                v(|b| b.total),
                v(|b| b.mae),
                v(|b| b.one_minus_ssim),
                v(|b| b.perceptual),
                r.wall_time_s
            );
        }
        s
    }

    /// History with wall-clock times removed, for determinism checks.
    pub fn without_timing(&self) -> TrainHistory {
        TrainHistory {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord {
                    wall_time_s: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub final_weights: NetworkWeights,
    pub best_weights: NetworkWeights,
    /// 1-based epoch of the best checkpoint.
    pub best_epoch: usize,
    pub history: TrainHistory,
    /// Loss of every micro-batch in order (training mode).
    pub step_losses: Vec<f64>,
}

/// Where checkpoints go; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct CheckpointDir(pub Option<PathBuf>);

impl CheckpointDir {
    pub fn best(&self) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join(CHECKPOINT_BEST))
    }

    pub fn final_(&self) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join(CHECKPOINT_FINAL))
    }
}

fn check_samples(cfg: &ModelConfig, set: &[TrainSample]) -> Result<()> {
    for s in set {
        let [n, c, d, h, w] = s.input.dims5();
        if n != 1 || c != cfg.in_channels {
            return Err(Error::Shape(format!(
                "sample {}: input {:?} does not fit a {}-channel model",
                s.id,
                s.input.shape(),
                cfg.in_channels
            )));
        }
        if s.target.shape() != [1, 1, d, h, w] {
            return Err(Error::Shape(format!("sample {}: target {:?} vs input {:?}", s.id, s.target.shape(), s.input.shape())));
        }
        if [d, h, w].iter().any(|x| x % SIZE_DIVISOR != 0) {
            return Err(Error::Shape(format!(
                "sample {}: dims {:?} are not divisible by {SIZE_DIVISOR}",
                s.id,
                [d, h, w]
            )));
        }
    }
    Ok(())
}

/// Mean composite loss over `set` in evaluation mode.
pub fn evaluate_loss(weights: &NetworkWeights, set: &[TrainSample], w: &LossWeights, ext: &FeatureExtractor) -> Result<LossBreakdown> {
    if set.is_empty() {
        return Err(Error::Parameter("cannot evaluate an empty set".into()));
    }
    let mut acc = LossBreakdown::default();
    for s in set {
        let (y, _) = forward(weights, &s.input, Mode::Eval)?;
        let b = composite_loss(&y, &s.target, w, ext)?;
        acc.mae += b.mae;
        acc.one_minus_ssim += b.one_minus_ssim;
        acc.perceptual += b.perceptual;
        acc.total += b.total;
    }
    let n = set.len() as f64;
    Ok(LossBreakdown {
        mae: acc.mae / n,
        one_minus_ssim: acc.one_minus_ssim / n,
        perceptual: acc.perceptual / n,
        total: acc.total / n,
    })
}

fn checkpoint_metadata(epoch: usize, val: Option<&LossBreakdown>, train: &LossBreakdown) -> serde_json::Value {
    serde_json::json!({ "epoch": epoch, "val": val, "train": train })
}

/// Trains a freshly initialized model. `init_seed` seeds the weights,
/// `cfg.seed` the data order.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    init_seed: u64,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    checkpoints: &CheckpointDir,
) -> Result<TrainOutput> {
    let ext = cfg.extractor.build()?;
    train_with_extractor(model, cfg, init_seed, train_set, val_set, checkpoints, &ext)
}

pub fn train_with_extractor(
    model: &ModelConfig,
    cfg: &TrainConfig,
    init_seed: u64,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    checkpoints: &CheckpointDir,
    ext: &FeatureExtractor,
) -> Result<TrainOutput> {
    cfg.validate()?;
    model.validate()?;
    if train_set.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    check_samples(model, train_set)?;
    check_samples(model, val_set)?;
    if let Some(dir) = &checkpoints.0 {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut weights = build_model(model, init_seed)?;
    let mut opt = Adam::new(&weights, cfg.learning_rate, cfg.weight_decay);
    let mut grads = weights.zero_grads();
    let mut history = TrainHistory::default();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, NetworkWeights)> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[epoch as u64]));

        let mut sum = LossBreakdown::default();
        let mut micro = 0usize;
        let mut pending = 0usize;
        let batches: Vec<&[usize]> = order.chunks(cfg.per_step_batch).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let inputs: Vec<Tensor> = batch.iter().map(|&i| train_set[i].input.clone()).collect();
            let targets: Vec<Tensor> = batch.iter().map(|&i| train_set[i].target.clone()).collect();
            let x = Tensor::stack(&inputs)?;
            let t = Tensor::stack(&targets)?;
            let ids = || batch.iter().map(|&i| train_set[i].id.as_str()).collect::<Vec<_>>().join(",");

            let (y, trace) = forward(&weights, &x, Mode::Train)?;
            let (loss, gy) = composite_loss_grad(&y, &t, &cfg.loss_weights, ext)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    sample_id: ids(),
                    epoch,
                    detail: format!("{loss:?}"),
                });
            }
            weights.update_running_stats(&trace);
            let g = unet::backward(&weights, &trace, &gy)?;
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    sample_id: ids(),
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            grads.add_assign(&g);
            pending += 1;
            micro += 1;
            step_losses.push(loss.total);
            sum.mae += loss.mae;
            sum.one_minus_ssim += loss.one_minus_ssim;
            sum.perceptual += loss.perceptual;
            sum.total += loss.total;

            if pending == cfg.accumulation_steps || bi + 1 == batches.len() {
                grads.scale(1.0 / pending as f64);
                opt.step(&mut weights, &grads);
                grads.zero();
                pending = 0;
            }
        }
        let m = micro as f64;
        let train_loss = LossBreakdown {
            mae: sum.mae / m,
            one_minus_ssim: sum.one_minus_ssim / m,
            perceptual: sum.perceptual / m,
            total: sum.total / m,
        };
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_loss(&weights, val_set, &cfg.loss_weights, ext)?)
        };
        let score = val_loss.map(|v| v.total).unwrap_or(train_loss.total);
        if best.as_ref().map_or(true, |(b, ..)| score < *b) {
            if let Some(p) = checkpoints.best() {
                unet::save_weights_with_metadata(&weights, checkpoint_metadata(epoch, val_loss.as_ref(), &train_loss), p)?;
            }
            best = Some((score, epoch, weights.clone()));
        }
        let record = EpochRecord {
            epoch,
            optimizer_steps: opt.steps_taken(),
            train: train_loss,
            val: val_loss,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: train {:.5} val {} ({:.1}s)",
            cfg.epochs,
            train_loss.total,
            val_loss.map(|v| format!("{:.5}", v.total)).unwrap_or_else(|| "-".into()),
            record.wall_time_s
        );
        history.records.push(record);
    }

    let last = history.records.last().expect("epochs ≥ 1");
    if let Some(p) = checkpoints.final_() {
        unet::save_weights_with_metadata(&weights, checkpoint_metadata(last.epoch, last.val.as_ref(), &last.train), p)?;
    }
    if let Some(dir) = &checkpoints.0 {
        write_atomic(&dir.join("history.csv"), history.to_csv().as_bytes())?;
    }
    let (_, best_epoch, best_weights) = best.expect("at least one epoch");
    Ok(TrainOutput {
        final_weights: weights,
        best_weights,
        best_epoch,
        history,
        step_losses,
    })
}

/// Writes via a temporary file in the same directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
