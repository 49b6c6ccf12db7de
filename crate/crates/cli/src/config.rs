//! The TOML run configuration. One document drives a whole experiment;
//! relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sctfusion_core::volume::DEFAULT_HU_WINDOW;
use sctfusion_core::{
    default_tier, Error, ExtractorConfig, LossWeights, Modality, ModelConfig, PhantomConfig, QualityTier, Result, SplitRatios,
    TrainConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_output_root")]
    pub output_root: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub splits: SplitSection,
    #[serde(default)]
    pub misalignment: MisalignSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_output_root() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Phantom,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: DataSource,
    /// Number of phantoms to generate.
    pub n_samples: usize,
    /// Dataset manifest (JSON) when `source = "manifest"`.
    pub manifest: Option<PathBuf>,
    /// HU window mapped to [0, 1] for volumes stored in HU.
    pub window: (f64, f64),
    /// Halve every dimension after loading (manifest source only).
    pub downscale: bool,
    pub phantom: PhantomSection,
    pub tiers: Vec<TierEntry>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Phantom,
            n_samples: 20,
            manifest: None,
            window: DEFAULT_HU_WINDOW,
            downscale: false,
            phantom: PhantomSection::default(),
            tiers: vec![TierEntry::Label(32), TierEntry::Label(256)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub n_ellipsoids: usize,
    pub intensity_range: (f64, f64),
    pub background_smoothness: usize,
    pub background_level: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let p = PhantomConfig::default();
        Self {
            dims: p.dims,
            spacing: p.spacing,
            n_ellipsoids: p.n_ellipsoids,
            intensity_range: p.intensity_range,
            background_smoothness: p.background_smoothness,
            background_level: p.background_level,
        }
    }
}

/// A default tier by label, or a fully specified one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TierEntry {
    Label(u32),
    Custom(QualityTier),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub n_splits: usize,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let r = SplitRatios::default();
        Self {
            n_splits: 2,
            train: r.train,
            val: r.val,
            test: r.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MisalignSection {
    pub alphas: Vec<f64>,
}

impl Default for MisalignSection {
    fn default() -> Self {
        Self { alphas: vec![1.0, 0.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub modalities: Vec<Modality>,
    /// Tiers to train on; all dataset tiers when absent.
    pub qualities: Option<Vec<u32>>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            modalities: vec![Modality::Multimodal, Modality::Unimodal, Modality::CtOnly],
            qualities: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub feature_maps: Vec<usize>,
    pub batch_norm: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::tiny(1);
        Self {
            feature_maps: m.feature_maps,
            batch_norm: m.batch_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub accumulation_steps: usize,
    pub per_step_batch: usize,
    pub loss_weights: LossWeights,
    pub extractor: ExtractorConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::desk();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            accumulation_steps: t.accumulation_steps,
            per_step_batch: t.per_step_batch,
            loss_weights: t.loss_weights,
            extractor: t.extractor,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub phantom: u64,
    pub split: u64,
    pub misalign: u64,
    pub init: u64,
    pub data_order: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub formats: Vec<sctfusion_core::ReportFormat>,
    pub plots: bool,
    /// PNG dumps of one test sample's middle axial slice.
    pub slices: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            formats: vec![sctfusion_core::ReportFormat::Csv, sctfusion_core::ReportFormat::Markdown],
            plots: true,
            slices: true,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            output_root: default_output_root(),
            dataset: DatasetSection::default(),
            splits: SplitSection::default(),
            misalignment: MisalignSection::default(),
            grid: GridSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            seeds: Seeds::default(),
            report: ReportSection::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Sets a dotted `key` to `raw` (parsed as a TOML value, else taken as a
/// string). Only scalar fields can be overridden.
pub fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    if value.is_table() || value.is_array() {
        return Err(config_err(format!("--set {key}: only scalar values are accepted")));
    }
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("--set: malformed key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("--set {key}: `{p}` is not a table")))?;
    }
    if matches!(table.get(*last), Some(v) if v.is_table() || v.is_array()) {
        return Err(config_err(format!("--set {key}: only scalar fields can be overridden")));
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses `KEY=VALUE`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| config_err(format!("--set expects KEY=VALUE, got `{s}`")))
}

impl RunConfig {
    /// Reads, overrides, validates and resolves paths against the file's directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_str_in(&text, overrides, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_str_in(text: &str, overrides: &[(String, String)], base: &Path) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(config_err)?;
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(doc).try_into().map_err(config_err)?;
        cfg.validate()?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_root);
        if let Some(m) = &mut self.dataset.manifest {
            join(m);
        }
        if let Some(w) = &mut self.train.extractor.weights_path {
            join(w);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let d = &self.dataset;
        match d.source {
            DataSource::Phantom => {
                if d.n_samples == 0 {
                    return Err(config_err("dataset.n_samples must be ≥ 1"));
                }
                self.phantom_config().validate().map_err(config_err)?;
                let tiers = self.tiers()?;
                let mut labels: Vec<u32> = tiers.iter().map(|t| t.label).collect();
                labels.sort_unstable();
                labels.dedup();
                if labels.len() != tiers.len() {
                    return Err(config_err("dataset.tiers contains duplicate labels"));
                }
            }
            DataSource::Manifest => {
                if d.manifest.is_none() {
                    return Err(config_err("dataset.manifest is required when source = \"manifest\""));
                }
            }
        }
        if !(d.window.0 < d.window.1) {
            return Err(config_err(format!("dataset.window must be increasing, got {:?}", d.window)));
        }
        if self.splits.n_splits == 0 {
            return Err(config_err("splits.n_splits must be ≥ 1"));
        }
        self.split_ratios().validate().map_err(config_err)?;
        self.train_config().validate().map_err(config_err)?;
        self.model_template().validate().map_err(config_err)?;
        let grid = sctfusion_core::Grid {
            modalities: self.grid.modalities.clone(),
            alphas: self.misalignment.alphas.clone(),
            qualities: self.grid.qualities.clone().unwrap_or_else(|| vec![1]),
        };
        grid.validate()?;
        if self.report.formats.is_empty() && !self.report.plots {
            return Err(config_err("report produces nothing: no formats and plots disabled"));
        }
        Ok(())
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        let p = &self.dataset.phantom;
        PhantomConfig {
            dims: p.dims,
            spacing: p.spacing,
            n_ellipsoids: p.n_ellipsoids,
            intensity_range: p.intensity_range,
            background_smoothness: p.background_smoothness,
            background_level: p.background_level,
            seed: self.seeds.phantom,
        }
    }

    pub fn tiers(&self) -> Result<Vec<QualityTier>> {
        if self.dataset.tiers.is_empty() {
            return Err(config_err("dataset.tiers is empty"));
        }
        self.dataset
            .tiers
            .iter()
            .map(|t| match t {
                TierEntry::Label(l) => default_tier(*l).ok_or_else(|| {
                    config_err(format!("no default tier labelled {l}; give noise_sigma, n_streaks, blur_sigma and contrast_scale"))
                }),
                TierEntry::Custom(q) => q.validate().map(|_| q.clone()).map_err(config_err),
            })
            .collect()
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.splits.train,
            val: self.splits.val,
            test: self.splits.test,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            accumulation_steps: t.accumulation_steps,
            per_step_batch: t.per_step_batch,
            seed: self.seeds.data_order,
            loss_weights: t.loss_weights,
            extractor: t.extractor.clone(),
        }
    }

    /// Architecture with a placeholder channel count.
    pub fn model_template(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            feature_maps: self.model.feature_maps.clone(),
            batch_norm: self.model.batch_norm,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_root.join("data")
    }

    pub fn misaligned_dir(&self) -> PathBuf {
        self.output_root.join("misaligned")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root.join("run")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_root.join("report")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, sets: &[(&str, &str)]) -> Result<RunConfig> {
        let o: Vec<(String, String)> = sets.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        RunConfig::from_str_in(text, &o, Path::new("/cfg"))
    }

    #[test]
    fn minimal_document_takes_defaults() {
        let cfg = parse("schema_version = 1", &[]).unwrap();
        assert_eq!(cfg.output_root, PathBuf::from("/cfg/out"));
        assert_eq!(cfg.dataset.n_samples, 20);
        assert_eq!(cfg.tiers().unwrap().len(), 2);
        assert_eq!(cfg.train_config().epochs, TrainConfig::desk().epochs);
    }

    #[test]
    fn unknown_keys_and_bad_versions_are_rejected() {
        assert!(parse("schema_version = 1\nbogus = 3", &[]).is_err());
        assert!(parse("schema_version = 1\n[train]\nepoch = 3", &[]).is_err());
        assert!(parse("schema_version = 2", &[]).is_err());
        assert!(parse("schema_version = 1\n[dataset]\ntiers = [33]", &[]).is_err());
        assert!(parse("schema_version = 1\n[misalignment]\nalphas = [2.0]", &[]).is_err());
        assert!(parse("schema_version = 1\n[train]\nepochs = 0", &[]).is_err());
    }

    #[test]
    fn overrides_touch_only_scalars() {
        let cfg = parse("schema_version = 1\n[train]\nepochs = 3", &[("train.epochs", "5"), ("seeds.init", "9")]).unwrap();
        assert_eq!((cfg.train.epochs, cfg.seeds.init), (5, 9));
        let cfg = parse("schema_version = 1", &[("train.extractor.variant", "pretrained")]).unwrap();
        assert_eq!(cfg.train.extractor.variant, sctfusion_core::ExtractorVariant::Pretrained);
        assert!(parse("schema_version = 1\n[misalignment]\nalphas = [1.0]", &[("misalignment.alphas", "0.5")]).is_err());
        assert!(parse("schema_version = 1", &[("train.epochs", "[1, 2]")]).is_err());
        assert!(parse("schema_version = 1", &[("train.nope", "1")]).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn custom_tiers_parse() {
        let text = "schema_version = 1\n[[dataset.tiers]]\nlabel = 7\nnoise_sigma = 0.1\nn_streaks = 1\nblur_sigma = 0.5\ncontrast_scale = 0.9\n";
        let cfg = parse(text, &[]).unwrap();
        assert_eq!(cfg.tiers().unwrap()[0].label, 7);
    }
}
