//! Test-set metrics, the model-free CT-only baseline, aggregation across
//! splits, and report emission (CSV, markdown table, SVG line plots, PNG
//! slices).

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::losses::{composite_loss, LossWeights};
use crate::tensor::Tensor;
use crate::train::{write_atomic, TrainSample};
use crate::unet::{forward, Mode, NetworkWeights};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Multimodal,
    Unimodal,
    CtOnly,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Multimodal => "multimodal",
            Modality::Unimodal => "unimodal",
            Modality::CtOnly => "ct-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multimodal" => Some(Modality::Multimodal),
            "unimodal" => Some(Modality::Unimodal),
            "ct-only" => Some(Modality::CtOnly),
            _ => None,
        }
    }

    /// Network input channels; `None` for the model-free baseline.
    pub fn in_channels(self) -> Option<usize> {
        match self {
            Modality::Multimodal => Some(2),
            Modality::Unimodal => Some(1),
            Modality::CtOnly => None,
        }
    }

    /// Whether the misalignment strength affects this modality.
    pub fn uses_alpha(self) -> bool {
        self != Modality::Unimodal
    }
}

/// The three reported metrics (all lower-is-better).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub one_minus_ssim: f64,
    pub perceptual: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 3] = ["mae", "one_minus_ssim", "perceptual"];

    pub fn get(&self, i: usize) -> f64 {
        [self.mae, self.one_minus_ssim, self.perceptual][i]
    }
}

/// Metrics of `pred` against `target`, through the loss implementations.
pub fn metrics(pred: &Tensor, target: &Tensor, ext: &FeatureExtractor) -> Result<Metrics> {
    let b = composite_loss(pred, target, &LossWeights { a1: 1.0, a2: 1.0, a3: 1.0 }, ext)?;
    Ok(Metrics {
        mae: b.mae,
        one_minus_ssim: b.one_minus_ssim,
        perceptual: b.perceptual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub sample_id: String,
    pub modality: Modality,
    pub alpha_a: Option<f64>,
    pub quality: u32,
    pub split: usize,
    pub mae: f64,
    pub one_minus_ssim: f64,
    pub perceptual: f64,
}

impl MetricRecord {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            mae: self.mae,
            one_minus_ssim: self.one_minus_ssim,
            perceptual: self.perceptual,
        }
    }

    pub fn key(&self) -> CellKey {
        CellKey {
            modality: self.modality,
            alpha_a: self.alpha_a,
            quality: self.quality,
        }
    }
}

/// Identifies where records of one evaluation come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordContext {
    pub modality: Modality,
    pub alpha_a: Option<f64>,
    pub quality: u32,
    pub split: usize,
}

impl RecordContext {
    fn record(&self, sample_id: &str, m: Metrics) -> Result<MetricRecord> {
        if [m.mae, m.one_minus_ssim, m.perceptual].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                sample_id: sample_id.to_string(),
                epoch: 0,
                detail: format!("evaluation metrics {m:?}"),
            });
        }
        Ok(MetricRecord {
            sample_id: sample_id.to_string(),
            modality: self.modality,
            alpha_a: self.alpha_a,
            quality: self.quality,
            split: self.split,
            mae: m.mae,
            // SSIM can exceed 1 only through rounding; clamp the tiny negative residue
            one_minus_ssim: m.one_minus_ssim.max(0.0),
            perceptual: m.perceptual,
        })
    }
}

/// Runs the model on every test sample and scores the output against the
/// aligned CT.
pub fn evaluate_model(
    weights: &NetworkWeights,
    samples: &[TrainSample],
    ext: &FeatureExtractor,
    ctx: RecordContext,
) -> Result<Vec<MetricRecord>> {
    if ctx.modality.in_channels() != Some(weights.config.in_channels) {
        return Err(Error::Config(format!(
            "{} evaluation needs a {:?}-channel model, checkpoint has {}",
            ctx.modality.as_str(),
            ctx.modality.in_channels(),
            weights.config.in_channels
        )));
    }
    samples
        .iter()
        .map(|s| {
            let (y, _) = forward(weights, &s.input, Mode::Eval)?;
            ctx.record(&s.id, metrics(&y, &s.target, ext)?)
        })
        .collect()
}

/// Model-free baseline: the misaligned CT scored directly against the
/// aligned CT.
pub fn ct_only_baseline(unaligned_ct: &Volume, aligned_ct: &Volume, ext: &FeatureExtractor) -> Result<Metrics> {
    if unaligned_ct.dims() != aligned_ct.dims() {
        return Err(Error::Shape(format!(
            "unaligned CT {:?} vs aligned CT {:?}",
            unaligned_ct.dims(),
            aligned_ct.dims()
        )));
    }
    metrics(&Tensor::from_volume(unaligned_ct), &Tensor::from_volume(aligned_ct), ext)
}

pub fn ct_only_record(sample_id: &str, unaligned_ct: &Volume, aligned_ct: &Volume, ext: &FeatureExtractor, ctx: RecordContext) -> Result<MetricRecord> {
    ctx.record(sample_id, ct_only_baseline(unaligned_ct, aligned_ct, ext)?)
}

// ---------------------------------------------------------------------------
// aggregation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub modality: Modality,
    pub alpha_a: Option<f64>,
    pub quality: u32,
}

impl Eq for CellKey {}

impl Ord for CellKey {
    /// Quality ascending, then modality, then α descending (no α first).
    fn cmp(&self, other: &Self) -> Ordering {
        self.quality
            .cmp(&other.quality)
            .then(self.modality.cmp(&other.modality))
            .then(match (self.alpha_a, other.alpha_a) {
                (None, None) => Ordering::Equal,
                (None, Some(_)) => Ordering::Less,
                (Some(_), None) => Ordering::Greater,
                (Some(a), Some(b)) => b.total_cmp(&a),
            })
    }
}

impl PartialOrd for CellKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub key: CellKey,
    pub records: Vec<MetricRecord>,
    pub n: usize,
    pub mean: Metrics,
    /// Sample standard deviation (n − 1); 0 when `n == 1`.
    pub std: Metrics,
    /// False when `n == 1` and the std is a placeholder.
    pub std_defined: bool,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    // shifted by the first value so constant inputs give exactly zero spread
    let x0 = values[0];
    let shift = values.iter().map(|v| v - x0).sum::<f64>() / n;
    let mean = x0 + shift;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - x0 - shift).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pools records per (modality, α, quality) across samples and splits.
pub fn aggregate(records: &[MetricRecord]) -> Result<Vec<ExperimentResult>> {
    if records.is_empty() {
        return Err(Error::Parameter("no records to aggregate".into()));
    }
    let mut groups: std::collections::BTreeMap<CellKey, Vec<MetricRecord>> = Default::default();
    for r in records {
        groups.entry(r.key()).or_default().push(r.clone());
    }
    Ok(groups
        .into_iter()
        .map(|(key, recs)| {
            let col = |f: fn(&MetricRecord) -> f64| mean_std(&recs.iter().map(f).collect::<Vec<_>>());
            let (m0, s0) = col(|r| r.mae);
            let (m1, s1) = col(|r| r.one_minus_ssim);
            let (m2, s2) = col(|r| r.perceptual);
            ExperimentResult {
                key,
                n: recs.len(),
                std_defined: recs.len() > 1,
                records: recs,
                mean: Metrics {
                    mae: m0,
                    one_minus_ssim: m1,
                    perceptual: m2,
                },
                std: Metrics {
                    mae: s0,
                    one_minus_ssim: s1,
                    perceptual: s2,
                },
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// CSV

pub fn records_to_csv(records: &[MetricRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        if r.sample_id.contains([',', '\n', '"']) {
            return Err(Error::Parameter(format!("sample id {:?} cannot be written to CSV", r.sample_id)));
        }
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    if records.is_empty() {
        return Ok("sample_id,modality,alpha_a,quality,split,mae,one_minus_ssim,perceptual\n".into());
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn records_from_csv(text: &str) -> Result<Vec<MetricRecord>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("metrics csv: {e}"))))
        .collect()
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    records_from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub modality: Modality,
    pub alpha_a: Option<f64>,
    pub quality: u32,
    pub n: usize,
    pub std_defined: bool,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub one_minus_ssim_mean: f64,
    pub one_minus_ssim_std: f64,
    pub perceptual_mean: f64,
    pub perceptual_std: f64,
}

impl From<&ExperimentResult> for AggregateRow {
    fn from(r: &ExperimentResult) -> Self {
        Self {
            modality: r.key.modality,
            alpha_a: r.key.alpha_a,
            quality: r.key.quality,
            n: r.n,
            std_defined: r.std_defined,
            mae_mean: r.mean.mae,
            mae_std: r.std.mae,
            one_minus_ssim_mean: r.mean.one_minus_ssim,
            one_minus_ssim_std: r.std.one_minus_ssim,
            perceptual_mean: r.mean.perceptual,
            perceptual_std: r.std.perceptual,
        }
    }
}

pub fn aggregates_to_csv(results: &[ExperimentResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(AggregateRow::from(r)).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn aggregates_from_csv(text: &str) -> Result<Vec<AggregateRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("aggregate csv: {e}"))))
        .collect()
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

fn find(results: &[ExperimentResult], modality: Modality, alpha: Option<f64>, quality: u32) -> Option<&ExperimentResult> {
    results
        .iter()
        .find(|r| r.key.modality == modality && r.key.quality == quality && r.key.alpha_a == alpha)
}

fn fmt_cell(r: Option<&ExperimentResult>, metric: usize) -> String {
    match r {
        Some(r) => format!("{:.3} ± {:.3}", r.mean.get(metric), r.std.get(metric)),
        None => String::new(),
    }
}

fn alphas_desc(results: &[ExperimentResult]) -> Vec<f64> {
    let mut a: Vec<f64> = results.iter().filter_map(|r| r.key.alpha_a).collect();
    a.sort_by(|x, y| y.total_cmp(x));
    a.dedup();
    a
}

fn qualities(results: &[ExperimentResult]) -> Vec<u32> {
    let mut q: Vec<u32> = results.iter().map(|r| r.key.quality).collect();
    q.sort_unstable();
    q.dedup();
    q
}

/// Markdown table: per quality one unimodal row (blank α) followed by one
/// multimodal row per α (descending), each metric next to its CT-only value.
pub fn markdown_table(results: &[ExperimentResult]) -> String {
    let alphas = alphas_desc(results);
    let mut s = String::new();
    s.push_str("| α_np | α_a | MAE | CT-only | 1-SSIM | CT-only | Perceptual | CT-only |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for q in qualities(results) {
        let uni = find(results, Modality::Unimodal, None, q);
        let _ = writeln!(
            s,
            "| {q} |  | {} |  | {} |  | {} |  |",
            fmt_cell(uni, 0),
            fmt_cell(uni, 1),
            fmt_cell(uni, 2)
        );
        for &a in &alphas {
            let multi = find(results, Modality::Multimodal, Some(a), q);
            let base = find(results, Modality::CtOnly, Some(a), q);
            let _ = writeln!(
                s,
                "| {q} | {a} | {} | {} | {} | {} | {} | {} |",
                fmt_cell(multi, 0),
                fmt_cell(base, 0),
                fmt_cell(multi, 1),
                fmt_cell(base, 1),
                fmt_cell(multi, 2),
                fmt_cell(base, 2)
            );
        }
    }
    s
}

const PALETTE: [&str; 6] = ["#e8710a", "#2ca02c", "#9467bd", "#1f77b4", "#d62728", "#8c564b"];

/// One line plot per metric: x = α (largest misalignment on the left),
/// a color per quality tier, solid multimodal, dashed unimodal, dotted
/// CT-only.
pub fn svg_plot(results: &[ExperimentResult], metric: usize) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 420.0, 70.0, 150.0, 40.0, 50.0);
    let alphas = alphas_desc(results);
    let quals = qualities(results);
    let ymax = results
        .iter()
        .map(|r| r.mean.get(metric) + r.std.get(metric))
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.05;
    let (amin, amax) = match (alphas.last(), alphas.first()) {
        (Some(&lo), Some(&hi)) if hi > lo => (lo, hi),
        (Some(&v), _) => (v - 0.5, v + 0.5),
        _ => (0.0, 1.0),
    };
    let px = |a: f64| ml + (amax - a) / (amax - amin) * (w - ml - mr);
    let py = |v: f64| h - mb - v / ymax * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (w - mr + ml) / 2.0, Metrics::NAMES[metric]);
    let _ = writeln!(s, r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - mb, w - mr, h - mb);
    let _ = writeln!(s, r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#, h - mb);
    for &a in &alphas {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{a}</text>"#, px(a), h - mb + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">alpha_a</text>"#, (w - mr + ml) / 2.0, h - 8.0);
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, ml - 6.0, py(v) + 4.0);
    }
    let styles = [
        (Modality::Multimodal, ""),
        (Modality::Unimodal, r#" stroke-dasharray="8 5""#),
        (Modality::CtOnly, r#" stroke-dasharray="2 4""#),
    ];
    for (qi, &q) in quals.iter().enumerate() {
        let color = PALETTE[qi % PALETTE.len()];
        for (m, dash) in styles {
            let pts: Vec<(f64, f64)> = match m {
                Modality::Unimodal => match find(results, m, None, q) {
                    Some(r) => vec![(px(amax), py(r.mean.get(metric))), (px(amin), py(r.mean.get(metric)))],
                    None => vec![],
                },
                _ => alphas
                    .iter()
                    .filter_map(|&a| find(results, m, Some(a), q).map(|r| (px(a), py(r.mean.get(metric)))))
                    .collect(),
            };
            if pts.is_empty() {
                continue;
            }
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#, path.join(" "));
        }
        let ly = mt + 10.0 + 18.0 * qi as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - mr + 12.0, w - mr + 36.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">alpha_np = {q}</text>"#, w - mr + 42.0, ly + 4.0);
    }
    let ly = mt + 20.0 + 18.0 * quals.len() as f64;
    for (i, (m, dash)) in styles.iter().enumerate() {
        let y = ly + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="gray" stroke-width="2"{dash}/>"#, w - mr + 12.0, w - mr + 36.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - mr + 42.0, y + 4.0, m.as_str());
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the requested report files into `out_dir` and returns their paths.
pub fn emit_report(results: &[ExperimentResult], out_dir: impl AsRef<Path>, formats: &[ReportFormat], plots: bool) -> Result<Vec<PathBuf>> {
    if results.is_empty() {
        return Err(Error::Parameter("no results to report".into()));
    }
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, text.as_bytes())?;
        written.push(p);
        Ok(())
    };
    for f in formats {
        match f {
            ReportFormat::Csv => put("aggregates.csv", aggregates_to_csv(results)?)?,
            ReportFormat::Markdown => {
                let mut md = String::from("# Evaluation results (mean ± std over test volumes of all splits)\n\n");
                md.push_str(&markdown_table(results));
                put("report.md", md)?;
            }
        }
    }
    if plots {
        for (i, name) in Metrics::NAMES.iter().enumerate() {
            put(&format!("plot_{name}.svg"), svg_plot(results, i))?;
        }
    }
    Ok(written)
}

/// Grayscale PNG of one axial slice, intensities clamped to `[0, 1]`.
pub fn save_slice_png(v: &Volume, depth: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [d, h, w] = v.dims();
    if depth >= d {
        return Err(Error::Parameter(format!("slice {depth} outside depth {d}")));
    }
    let plane = &v.data()[depth * h * w..(depth + 1) * h * w];
    let bytes: Vec<u8> = plane.iter().map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dims");
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}
