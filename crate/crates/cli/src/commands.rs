//! The subcommands. Each takes a validated [`RunConfig`] and returns what
//! it wrote; `main` maps errors to exit codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use sctfusion_core::experiment::{misalignment_for, RunSummary};
use sctfusion_core::tensor::Tensor;
use sctfusion_core::unet::{load_weights_for, Mode};
use sctfusion_core::{
    aggregate, build_dataset, emit_report, eval, forward, load_dataset, make_splits, save_dataset, save_volume, train::write_atomic,
    apply_affine, CellSpec, Dataset, Error, Experiment, ExperimentConfig, Grid, LoadOptions, Modality, Result, SplitSet,
};

use crate::config::{DataSource, RunConfig};

pub const MISALIGN_PARAMS_FILE: &str = "misalign_params.json";

/// Builds (phantom source) or loads (manifest source) the dataset.
pub fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.dataset.source {
        DataSource::Phantom => {
            let tiers = cfg.tiers()?;
            Dataset::from_tiers(build_dataset(cfg.dataset.n_samples, &cfg.phantom_config(), &tiers)?)
        }
        DataSource::Manifest => {
            let path = cfg.dataset.manifest.as_ref().expect("validated");
            let opts = LoadOptions {
                window: cfg.dataset.window,
                downscale: cfg.dataset.downscale,
            };
            load_dataset(path, &opts)
        }
    }
}

pub fn splits(cfg: &RunConfig, ds: &Dataset) -> Result<SplitSet> {
    make_splits(ds.ids(), cfg.split_ratios(), cfg.seeds.split, cfg.splits.n_splits)
}

pub fn experiment_config(cfg: &RunConfig, ds: &Dataset) -> ExperimentConfig {
    ExperimentConfig {
        grid: Grid {
            modalities: cfg.grid.modalities.clone(),
            alphas: cfg.misalignment.alphas.clone(),
            qualities: cfg.grid.qualities.clone().unwrap_or_else(|| ds.qualities().to_vec()),
        },
        model: cfg.model_template(),
        train: cfg.train_config(),
        init_seed: cfg.seeds.init,
        misalign_seed: cfg.seeds.misalign,
    }
}

/// Loaded dataset and splits shared by the experiment commands.
pub struct Workspace {
    pub dataset: Dataset,
    pub splits: SplitSet,
}

impl Workspace {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let dataset = dataset(cfg)?;
        let splits = splits(cfg, &dataset)?;
        Ok(Self { dataset, splits })
    }

    pub fn experiment(&self, cfg: &RunConfig) -> Result<Experiment<'_>> {
        let exp = Experiment::new(&self.dataset, &self.splits, experiment_config(cfg, &self.dataset), cfg.run_dir())?;
        std::fs::create_dir_all(cfg.run_dir()).map_err(|e| io_err(&cfg.run_dir(), e))?;
        let text = serde_json::to_string_pretty(&self.splits).expect("splits serialize");
        write_atomic(&cfg.run_dir().join("splits.json"), text.as_bytes())?;
        Ok(exp)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes the phantom dataset and its manifest; returns the manifest path.
pub fn cmd_phantom(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.dataset.source != DataSource::Phantom {
        return Err(Error::Config("phantom needs dataset.source = \"phantom\"".into()));
    }
    let ds = dataset(cfg)?;
    let generator = serde_json::json!({
        "n_samples": cfg.dataset.n_samples,
        "phantom": cfg.phantom_config(),
        "tiers": cfg.tiers()?,
        "seeds": { "phantom": cfg.seeds.phantom },
    });
    save_dataset(&ds, cfg.data_dir(), Some(generator))
}

pub fn alpha_tag(alpha: f64) -> String {
    format!("{alpha}")
}

/// Writes `<id>/ct_unaligned_<alpha>.nii.gz` for every sample and α_a,
/// plus the affine parameters needed to replay them.
pub fn cmd_misalign(cfg: &RunConfig) -> Result<PathBuf> {
    let ds = dataset(cfg)?;
    let root = cfg.misaligned_dir();
    let mut params = BTreeMap::new();
    for id in ds.ids() {
        let dir = root.join(id);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let mut per_alpha = BTreeMap::new();
        for &a in &cfg.misalignment.alphas {
            let p = misalignment_for(cfg.seeds.misalign, id, a)?;
            let v = apply_affine(ds.ct(id)?, &p)?;
            save_volume(&v, dir.join(format!("ct_unaligned_{}.nii.gz", alpha_tag(a))))?;
            per_alpha.insert(alpha_tag(a), p);
        }
        params.insert(id.clone(), per_alpha);
    }
    let doc = serde_json::json!({ "misalign_seed": cfg.seeds.misalign, "samples": params });
    let path = root.join(MISALIGN_PARAMS_FILE);
    write_atomic(&path, serde_json::to_string_pretty(&doc).expect("json").as_bytes())?;
    Ok(path)
}

/// Trains the selected cells (all when `None`), skipping finished ones.
pub fn cmd_train(cfg: &RunConfig, cells: Option<&[String]>) -> Result<RunSummary> {
    let ws = Workspace::open(cfg)?;
    let mut exp = ws.experiment(cfg)?;
    let selection = cells.map(|ids| exp.select(ids)).transpose()?;
    exp.run_cells(selection.as_deref())
}

/// Recomputes every cell's metrics from its checkpoints and writes the
/// run-level `metrics.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<PathBuf> {
    let ws = Workspace::open(cfg)?;
    let mut exp = ws.experiment(cfg)?;
    for cell in exp.cells().to_vec() {
        exp.reevaluate_cell(&cell)?;
    }
    exp.finalize()?;
    Ok(cfg.run_dir().join("metrics.csv"))
}

/// Aggregates the run-level `metrics.csv` into tables, plots and slices.
pub fn cmd_report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let metrics = cfg.run_dir().join("metrics.csv");
    if !metrics.is_file() {
        return Err(Error::Resource(format!("{} not found; run eval or sweep first", metrics.display())));
    }
    let results = aggregate(&eval::read_records(&metrics)?)?;
    let mut files = emit_report(&results, cfg.report_dir(), &cfg.report.formats, cfg.report.plots)?;
    if cfg.report.slices {
        files.extend(dump_slices(cfg)?);
    }
    Ok(files)
}

/// Middle axial slices of the first test sample of split 0 at the lowest
/// tier: CT, CBCT, each misaligned CT and each trained model's output.
fn dump_slices(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ws = Workspace::open(cfg)?;
    let mut exp = ws.experiment(cfg)?;
    let Some(id) = ws.splits.splits[0].test.first().cloned() else {
        return Ok(Vec::new());
    };
    let quality = exp.config.grid.qualities.iter().copied().min().expect("validated grid");
    let dir = cfg.report_dir().join("slices");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let ct = ws.dataset.ct(&id)?.clone();
    let mid = ct.dims()[0] / 2;
    let mut out = Vec::new();
    let mut put = |name: String, v: &sctfusion_core::Volume| -> Result<()> {
        let p = dir.join(name);
        eval::save_slice_png(v, mid, &p)?;
        out.push(p);
        Ok(())
    };
    put(format!("{id}_ct.png"), &ct)?;
    put(format!("{id}_cbct_q{quality}.png"), ws.dataset.cbct(quality, &id)?)?;
    for &a in &cfg.misalignment.alphas.clone() {
        let v = exp.misaligned_ct(&id, a)?.0.clone();
        put(format!("{id}_ct_unaligned_{}.png", alpha_tag(a)), &v)?;
    }
    let cells: Vec<CellSpec> = exp
        .cells()
        .iter()
        .filter(|c| c.trains() && c.split == 0 && c.quality == quality && exp.is_done(c))
        .copied()
        .collect();
    for cell in cells {
        let model = exp.model_config(&cell).expect("trainable cell");
        let weights = load_weights_for(exp.cell_dir(&cell).join(sctfusion_core::train::CHECKPOINT_BEST), &model)?;
        let sample = exp.samples(&cell, std::slice::from_ref(&id))?.remove(0);
        let (y, _) = forward(&weights, &sample.input, Mode::Eval)?;
        let v = Tensor::to_volume(&y, &ct)?;
        put(format!("{id}_sct_{}.png", cell.id()), &v)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub dry_run: bool,
    pub parallel_cells: usize,
    /// Executable spawned for parallel workers (normally this binary).
    pub worker_exe: Option<PathBuf>,
    /// Config path and overrides forwarded to workers.
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepOutcome {
    Planned(Vec<(String, bool)>),
    Completed { ran: usize, skipped: usize, report: Vec<PathBuf> },
}

/// Phantom → misalign → train → eval → report.
pub fn cmd_sweep(cfg: &RunConfig, opts: &SweepOptions) -> Result<SweepOutcome> {
    let ws = Workspace::open(cfg)?;
    if opts.dry_run {
        let exp = Experiment::new(&ws.dataset, &ws.splits, experiment_config(cfg, &ws.dataset), cfg.run_dir())?;
        return Ok(SweepOutcome::Planned(exp.status().into_iter().map(|s| (s.id, s.done)).collect()));
    }
    if cfg.dataset.source == DataSource::Phantom {
        cmd_phantom(cfg)?;
    }
    cmd_misalign(cfg)?;
    let mut exp = ws.experiment(cfg)?;
    exp.sync_manifest()?;
    let pending: Vec<CellSpec> = exp.cells().iter().filter(|c| !exp.is_done(c)).copied().collect();
    let skipped = exp.cells().len() - pending.len();
    if opts.parallel_cells > 1 && pending.len() > 1 {
        run_workers(&pending, opts)?;
        exp.sync_manifest()?;
    } else {
        exp.run_cells(Some(&pending))?;
    }
    exp.finalize()?;
    let report = cmd_report(cfg)?;
    Ok(SweepOutcome::Completed {
        ran: pending.len(),
        skipped,
        report,
    })
}

fn run_workers(pending: &[CellSpec], opts: &SweepOptions) -> Result<()> {
    let exe = opts
        .worker_exe
        .clone()
        .ok_or_else(|| Error::Config("parallel cells need a worker executable".into()))?;
    let config = opts
        .config_path
        .clone()
        .ok_or_else(|| Error::Config("parallel cells need the config path".into()))?;
    let n = opts.parallel_cells.min(pending.len());
    let mut groups: Vec<Vec<String>> = vec![Vec::new(); n];
    // trainings first so the expensive cells spread across workers
    let mut order: Vec<&CellSpec> = pending.iter().filter(|c| c.trains()).collect();
    order.extend(pending.iter().filter(|c| c.modality == Modality::CtOnly));
    for (i, c) in order.iter().enumerate() {
        groups[i % n].push(c.id());
    }
    let mut children = Vec::new();
    for g in groups.iter().filter(|g| !g.is_empty()) {
        let mut cmd = Command::new(&exe);
        cmd.arg("--config").arg(&config);
        for (k, v) in &opts.overrides {
            cmd.arg("--set").arg(format!("{k}={v}"));
        }
        cmd.arg("train").arg("--cells").arg(g.join(","));
        log::info!("spawning worker for {}", g.join(","));
        children.push((g.join(","), cmd.spawn().map_err(|e| io_err(&exe, e))?));
    }
    let mut failed = Vec::new();
    for (cells, mut child) in children {
        let status = child.wait().map_err(|e| io_err(&exe, e))?;
        if !status.success() {
            failed.push(format!("[{cells}] exited with {status}"));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Resource(format!("worker failures: {}", failed.join("; "))))
    }
}
