//! Grid experiments: one training per (modality, α_a, quality, split) cell,
//! with unimodal models shared across α_a and model-free CT-only cells.
//!
//! Layout under the run directory:
//! `manifest.json`, `metrics.csv`, and `cells/<cell-id>/` holding
//! `checkpoint_best`, `checkpoint_final`, `history.csv`, `metrics.csv`,
//! `metrics_final.csv`, `misalign_params.json` and a `done` marker.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{aggregate, ct_only_record, evaluate_model, read_records, records_to_csv, ExperimentResult, MetricRecord, Modality, RecordContext};
use crate::extractor::FeatureExtractor;
use crate::misalign::{apply_affine, sample_affine, AffineParams, MisalignmentSpec};
use crate::rng::{derive_seed, hash_str};
use crate::split::SplitSet;
use crate::train::{train_with_extractor, write_atomic, CheckpointDir, TrainConfig, TrainSample, CHECKPOINT_BEST, CHECKPOINT_FINAL};
use crate::unet::{load_weights_for, ModelConfig};
use crate::volume::Volume;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DONE_MARKER: &str = "done";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub modalities: Vec<Modality>,
    pub alphas: Vec<f64>,
    pub qualities: Vec<u32>,
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() || self.qualities.is_empty() {
            return Err(Error::Config("grid needs at least one modality and one quality".into()));
        }
        if self.alphas.is_empty() && self.modalities.iter().any(|m| m.uses_alpha()) {
            return Err(Error::Config("grid has no alpha_a values".into()));
        }
        for &a in &self.alphas {
            MisalignmentSpec::new(a, 0).map_err(|e| Error::Config(e.to_string()))?;
        }
        let mut a = self.alphas.clone();
        a.sort_by(f64::total_cmp);
        a.dedup();
        let mut q = self.qualities.clone();
        q.sort_unstable();
        q.dedup();
        let mut m = self.modalities.clone();
        m.sort();
        m.dedup();
        if a.len() != self.alphas.len() || q.len() != self.qualities.len() || m.len() != self.modalities.len() {
            return Err(Error::Config("grid axes contain duplicates".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub modality: Modality,
    pub alpha_a: Option<f64>,
    pub quality: u32,
    pub split: usize,
}

impl CellSpec {
    pub fn id(&self) -> String {
        match self.alpha_a {
            Some(a) => format!("{}_a{a}_q{}_s{}", self.modality.as_str(), self.quality, self.split),
            None => format!("{}_q{}_s{}", self.modality.as_str(), self.quality, self.split),
        }
    }

    /// Whether this cell trains a network.
    pub fn trains(&self) -> bool {
        self.modality != Modality::CtOnly
    }

    fn context(&self) -> RecordContext {
        RecordContext {
            modality: self.modality,
            alpha_a: self.alpha_a,
            quality: self.quality,
            split: self.split,
        }
    }
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// Cells in execution order. Unimodal models do not see the CT, so they are
/// planned once per (quality, split) with no α_a.
pub fn plan_cells(grid: &Grid, n_splits: usize) -> Result<Vec<CellSpec>> {
    grid.validate()?;
    if n_splits == 0 {
        return Err(Error::Config("at least one split is required".into()));
    }
    let mut cells = Vec::new();
    for &quality in &grid.qualities {
        for split in 0..n_splits {
            let cell = |modality, alpha_a| CellSpec {
                modality,
                alpha_a,
                quality,
                split,
            };
            if grid.modalities.contains(&Modality::Unimodal) {
                cells.push(cell(Modality::Unimodal, None));
            }
            for &a in &grid.alphas {
                for m in [Modality::Multimodal, Modality::CtOnly] {
                    if grid.modalities.contains(&m) {
                        cells.push(cell(m, Some(a)));
                    }
                }
            }
        }
    }
    Ok(cells)
}

/// Per-sample misalignment seed, shared by every α_a, quality and split so
/// that the same draw is only rescaled as α_a changes.
pub fn sample_misalign_seed(misalign_seed: u64, id: &str) -> u64 {
    derive_seed(misalign_seed, &[hash_str(id)])
}

pub fn misalignment_for(misalign_seed: u64, id: &str, alpha_a: f64) -> Result<AffineParams> {
    sample_affine(&MisalignmentSpec::new(alpha_a, sample_misalign_seed(misalign_seed, id))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: Grid,
    /// Architecture template; `in_channels` is set per modality.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub misalign_seed: u64,
}

/// Everything a run needs, bound to a run directory.
pub struct Experiment<'a> {
    pub dataset: &'a Dataset,
    pub splits: &'a SplitSet,
    pub config: ExperimentConfig,
    pub run_dir: PathBuf,
    extractor: FeatureExtractor,
    cells: Vec<CellSpec>,
    misaligned: HashMap<(String, u64), (Volume, AffineParams)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub id: String,
    pub cell: CellSpec,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub fingerprint: String,
    pub cells: Vec<CellStatus>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
}

fn fnv_hex(bytes: &[u8]) -> String {
    format!("{:016x}", hash_str(&String::from_utf8_lossy(bytes)))
}

impl<'a> Experiment<'a> {
    pub fn new(dataset: &'a Dataset, splits: &'a SplitSet, config: ExperimentConfig, run_dir: impl Into<PathBuf>) -> Result<Self> {
        let extractor = config.train.extractor.build()?;
        Self::with_extractor(dataset, splits, config, run_dir, extractor)
    }

    pub fn with_extractor(
        dataset: &'a Dataset,
        splits: &'a SplitSet,
        config: ExperimentConfig,
        run_dir: impl Into<PathBuf>,
        extractor: FeatureExtractor,
    ) -> Result<Self> {
        config.train.validate()?;
        let cells = plan_cells(&config.grid, splits.splits.len())?;
        for q in &config.grid.qualities {
            if !dataset.qualities().contains(q) {
                return Err(Error::Config(format!("dataset has no quality tier {q}")));
            }
        }
        for (k, s) in splits.splits.iter().enumerate() {
            if s.train.is_empty() {
                return Err(Error::Config(format!("split {k} has an empty training set")));
            }
            for id in s.train.iter().chain(&s.val).chain(&s.test) {
                dataset.ct(id).map_err(|_| Error::Config(format!("split {k} names unknown sample {id}")))?;
            }
        }
        for m in &config.grid.modalities {
            if let Some(c) = m.in_channels() {
                ModelConfig {
                    in_channels: c,
                    ..config.model.clone()
                }
                .validate()?;
            }
        }
        Ok(Self {
            dataset,
            splits,
            config,
            run_dir: run_dir.into(),
            extractor,
            cells,
            misaligned: HashMap::new(),
        })
    }

    pub fn cells(&self) -> &[CellSpec] {
        &self.cells
    }

    pub fn cell_dir(&self, cell: &CellSpec) -> PathBuf {
        self.run_dir.join("cells").join(cell.id())
    }

    pub fn is_done(&self, cell: &CellSpec) -> bool {
        self.cell_dir(cell).join(DONE_MARKER).is_file()
    }

    /// Hash of everything that determines the run's results.
    pub fn fingerprint(&self) -> String {
        let first = self.dataset.ct(&self.dataset.ids()[0]).expect("dataset is non-empty");
        let doc = serde_json::json!({
            "config": self.config,
            "splits": self.splits,
            "ids": self.dataset.ids(),
            "qualities": self.dataset.qualities(),
            "dims": first.dims(),
            "spacing": first.spacing(),
        });
        fnv_hex(doc.to_string().as_bytes())
    }

    pub fn status(&self) -> Vec<CellStatus> {
        self.cells
            .iter()
            .map(|c| CellStatus {
                id: c.id(),
                cell: *c,
                done: self.is_done(c),
            })
            .collect()
    }

    /// Resolves cell ids; unknown ids are a configuration error.
    pub fn select(&self, ids: &[String]) -> Result<Vec<CellSpec>> {
        let by_id: BTreeMap<String, CellSpec> = self.cells.iter().map(|c| (c.id(), *c)).collect();
        ids.iter()
            .map(|id| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("unknown cell `{id}`")))
            })
            .collect()
    }

    /// Checks an existing manifest against this configuration and rewrites
    /// it from the cells' done markers.
    pub fn sync_manifest(&self) -> Result<RunManifest> {
        std::fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        let path = self.run_dir.join(MANIFEST_FILE);
        let fingerprint = self.fingerprint();
        if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let old: RunManifest =
                serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            if old.fingerprint != fingerprint {
                return Err(Error::Config(format!(
                    "{} belongs to a different configuration (fingerprint {} vs {fingerprint}); use a fresh output directory",
                    path.display(),
                    old.fingerprint
                )));
            }
        }
        let manifest = RunManifest {
            fingerprint,
            cells: self.status(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&path, text.as_bytes())?;
        Ok(manifest)
    }

    /// The sample's CT under its fixed misalignment at `alpha_a` (cached).
    pub fn misaligned_ct(&mut self, id: &str, alpha_a: f64) -> Result<&(Volume, AffineParams)> {
        let key = (id.to_string(), alpha_a.to_bits());
        if !self.misaligned.contains_key(&key) {
            let params = misalignment_for(self.config.misalign_seed, id, alpha_a)?;
            let v = apply_affine(self.dataset.ct(id)?, &params)?;
            self.misaligned.insert(key.clone(), (v, params));
        }
        Ok(&self.misaligned[&key])
    }

    /// Network inputs and targets of `ids` as seen by `cell`.
    pub fn samples(&mut self, cell: &CellSpec, ids: &[String]) -> Result<Vec<TrainSample>> {
        ids.iter()
            .map(|id| {
                let pair = self.dataset.paired(cell.quality, id)?;
                match (cell.modality, cell.alpha_a) {
                    (Modality::Multimodal, Some(a)) => {
                        let ct = self.misaligned_ct(id, a)?.0.clone();
                        TrainSample::from_paired(&pair, Some(&ct))
                    }
                    _ => TrainSample::from_paired(&pair, None),
                }
            })
            .collect()
    }

    fn write_misalign_params(&mut self, cell: &CellSpec, dir: &Path) -> Result<()> {
        let Some(a) = cell.alpha_a else { return Ok(()) };
        let split = &self.splits.splits[cell.split];
        let mut params = BTreeMap::new();
        for id in split.train.iter().chain(&split.val).chain(&split.test) {
            params.insert(id.clone(), self.misaligned_ct(id, a)?.1.clone());
        }
        let doc = serde_json::json!({
            "alpha_a": a,
            "misalign_seed": self.config.misalign_seed,
            "samples": params,
        });
        write_atomic(&dir.join("misalign_params.json"), serde_json::to_string_pretty(&doc).expect("json").as_bytes())
    }

    pub fn model_config(&self, cell: &CellSpec) -> Option<ModelConfig> {
        cell.modality.in_channels().map(|c| ModelConfig {
            in_channels: c,
            ..self.config.model.clone()
        })
    }

    /// Evaluates a trained cell's checkpoint on its test set.
    pub fn evaluate_cell(&mut self, cell: &CellSpec, checkpoint: &str) -> Result<Vec<MetricRecord>> {
        let test = self.splits.splits[cell.split].test.clone();
        match self.model_config(cell) {
            Some(model) => {
                let weights = load_weights_for(self.cell_dir(cell).join(checkpoint), &model)?;
                let samples = self.samples(cell, &test)?;
                evaluate_model(&weights, &samples, &self.extractor, cell.context())
            }
            None => {
                let a = cell.alpha_a.expect("ct-only cells carry alpha");
                let mut out = Vec::with_capacity(test.len());
                for id in &test {
                    let unaligned = self.misaligned_ct(id, a)?.0.clone();
                    out.push(ct_only_record(id, &unaligned, self.dataset.ct(id)?, &self.extractor, cell.context())?);
                }
                Ok(out)
            }
        }
    }

    fn write_metrics(&mut self, cell: &CellSpec) -> Result<()> {
        let dir = self.cell_dir(cell);
        if cell.trains() {
            let records = self.evaluate_cell(cell, CHECKPOINT_FINAL)?;
            write_atomic(&dir.join("metrics_final.csv"), records_to_csv(&records)?.as_bytes())?;
        }
        let records = self.evaluate_cell(cell, CHECKPOINT_BEST)?;
        write_atomic(&dir.join("metrics.csv"), records_to_csv(&records)?.as_bytes())
    }

    /// Recomputes a finished cell's metric files from its checkpoints.
    pub fn reevaluate_cell(&mut self, cell: &CellSpec) -> Result<()> {
        if !self.is_done(cell) {
            return Err(Error::Resource(format!("cell {cell} has not finished")));
        }
        self.write_metrics(cell)
    }

    /// Trains (if needed) and evaluates one cell, then marks it done.
    pub fn run_cell(&mut self, cell: &CellSpec) -> Result<()> {
        let dir = self.cell_dir(cell);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let _ = std::fs::remove_file(dir.join(DONE_MARKER));
        self.write_misalign_params(cell, &dir)?;
        if let Some(model) = self.model_config(cell) {
            let split = self.splits.splits[cell.split].clone();
            let train_set = self.samples(cell, &split.train)?;
            let val_set = self.samples(cell, &split.val)?;
            let cfg = TrainConfig {
                seed: derive_seed(self.config.train.seed, &[cell.split as u64]),
                ..self.config.train.clone()
            };
            let init = derive_seed(self.config.init_seed, &[cell.split as u64]);
            let out = train_with_extractor(&model, &cfg, init, &train_set, &val_set, &CheckpointDir(Some(dir.clone())), &self.extractor)?;
            log::info!("{cell}: best epoch {}", out.best_epoch);
        }
        self.write_metrics(cell)?;
        write_atomic(&dir.join(DONE_MARKER), b"ok\n")
    }

    /// Runs the selected cells (all when `None`), skipping finished ones.
    pub fn run_cells(&mut self, selection: Option<&[CellSpec]>) -> Result<RunSummary> {
        self.sync_manifest()?;
        let todo: Vec<CellSpec> = selection.map(<[CellSpec]>::to_vec).unwrap_or_else(|| self.cells.clone());
        let mut summary = RunSummary::default();
        for cell in todo {
            if self.is_done(&cell) {
                log::info!("{cell}: already done, skipping");
                summary.skipped.push(cell.id());
                continue;
            }
            log::info!("{cell}: running");
            let result = self.run_cell(&cell);
            self.sync_manifest()?;
            result?;
            summary.ran.push(cell.id());
        }
        Ok(summary)
    }

    /// Reads every cell's records in plan order; all cells must be done.
    pub fn collect_records(&self) -> Result<Vec<MetricRecord>> {
        let pending: Vec<String> = self.cells.iter().filter(|c| !self.is_done(c)).map(CellSpec::id).collect();
        if !pending.is_empty() {
            return Err(Error::Resource(format!("unfinished cells: {}", pending.join(", "))));
        }
        let mut all = Vec::new();
        for c in &self.cells {
            all.extend(read_records(self.cell_dir(c).join("metrics.csv"))?);
        }
        Ok(all)
    }

    /// Writes the run-level `metrics.csv` and returns the aggregates.
    pub fn finalize(&self) -> Result<Vec<ExperimentResult>> {
        let records = self.collect_records()?;
        write_atomic(&self.run_dir.join("metrics.csv"), records_to_csv(&records)?.as_bytes())?;
        aggregate(&records)
    }
}

/// Runs every pending cell and aggregates the results.
pub fn run_experiment(exp: &mut Experiment<'_>) -> Result<Vec<ExperimentResult>> {
    exp.run_cells(None)?;
    exp.finalize()
}
