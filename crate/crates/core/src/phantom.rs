//! Synthetic paired (CT, CBCT) phantoms.
//!
//! A phantom is a smooth random background plus a set of constant-valued
//! ellipsoids. Its CBCT counterpart is produced by a heuristic degradation
//! (blur, contrast loss, radial streaks through the volume center, Gaussian
//! noise) whose strength is controlled by a [`QualityTier`]. Tier labels are
//! ordinal tags only; they are not projection counts.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};
use crate::volume::{Domain, PairedSample, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    pub n_ellipsoids: usize,
    /// Range ellipsoid interiors are drawn from.
    pub intensity_range: (f64, f64),
    /// Box-blur radius (voxels) applied to the background noise field.
    pub background_smoothness: usize,
    /// Peak background intensity; `0` disables the background.
    #[serde(default = "default_background_level")]
    pub background_level: f64,
    pub seed: u64,
}

fn default_spacing() -> [f64; 3] {
    [1.6; 3]
}

fn default_background_level() -> f64 {
    0.2
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing: default_spacing(),
            n_ellipsoids: 6,
            intensity_range: (0.35, 1.0),
            background_smoothness: 3,
            background_level: default_background_level(),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::Parameter(format!("phantom dims must be >= 16, got {:?}", self.dims)));
        }
        if self.n_ellipsoids == 0 {
            return Err(Error::Parameter("phantom needs at least one ellipsoid".into()));
        }
        let (lo, hi) = self.intensity_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Parameter(format!(
                "intensity_range must satisfy 0 <= lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return Err(Error::Parameter(format!(
                "background_level must lie in [0, 1], got {}",
                self.background_level
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Parameter(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// CBCT degradation strength. Lower labels mean worse quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityTier {
    pub label: u32,
    pub noise_sigma: f64,
    pub n_streaks: usize,
    pub blur_sigma: f64,
    pub contrast_scale: f64,
}

impl QualityTier {
    pub fn identity(label: u32) -> Self {
        Self {
            label,
            noise_sigma: 0.0,
            n_streaks: 0,
            blur_sigma: 0.0,
            contrast_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label == 0 {
            return Err(Error::Parameter("tier label must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.blur_sigma >= 0.0) {
            return Err(Error::Parameter(format!("tier {}: sigmas must be >= 0", self.label)));
        }
        if !(self.contrast_scale > 0.0 && self.contrast_scale <= 1.0) {
            return Err(Error::Parameter(format!(
                "tier {}: contrast_scale must lie in (0, 1], got {}",
                self.label, self.contrast_scale
            )));
        }
        Ok(())
    }
}

/// The four default tiers, labelled like the projection-count axis.
pub fn default_tiers() -> Vec<QualityTier> {
    vec![
        QualityTier { label: 32, noise_sigma: 0.08, n_streaks: 8, blur_sigma: 1.0, contrast_scale: 0.80 },
        QualityTier { label: 64, noise_sigma: 0.06, n_streaks: 6, blur_sigma: 0.8, contrast_scale: 0.85 },
        QualityTier { label: 128, noise_sigma: 0.04, n_streaks: 4, blur_sigma: 0.6, contrast_scale: 0.90 },
        QualityTier { label: 256, noise_sigma: 0.02, n_streaks: 2, blur_sigma: 0.4, contrast_scale: 0.95 },
    ]
}

pub fn default_tier(label: u32) -> Option<QualityTier> {
    default_tiers().into_iter().find(|t| t.label == label)
}

/// Checks the ordering contract: a lower label never has less noise or fewer streaks.
pub fn check_tier_monotonicity(tiers: &[QualityTier]) -> Result<()> {
    for a in tiers {
        for b in tiers {
            if a.label < b.label && (a.noise_sigma < b.noise_sigma || a.n_streaks < b.n_streaks) {
                return Err(Error::Parameter(format!(
                    "tier {} is cleaner than tier {}: lower labels must be at least as degraded",
                    a.label, b.label
                )));
            }
        }
    }
    Ok(())
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Volume> {
    cfg.validate()?;
    let [nd, nh, nw] = cfg.dims;
    let n = nd * nh * nw;
    let mut rng = rng_for(cfg.seed, &[0x9a17]);

    let mut data = vec![0.0f64; n];
    if cfg.background_level > 0.0 {
        let mut field: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        for _ in 0..3 {
            box_blur(&mut field, cfg.dims, cfg.background_smoothness);
        }
        let (lo, hi) = field
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        let span = (hi - lo).max(1e-12);
        for (d, f) in data.iter_mut().zip(&field) {
            *d = cfg.background_level * (f - lo) / span;
        }
    }

    let (lo, hi) = cfg.intensity_range;
    for _ in 0..cfg.n_ellipsoids {
        let center: Vec<f64> = cfg
            .dims
            .iter()
            .map(|&d| rng.gen_range(0.3..0.7) * (d as f64 - 1.0))
            .collect();
        let semi: Vec<f64> = cfg
            .dims
            .iter()
            .map(|&d| rng.gen_range(0.08..0.28) * d as f64)
            .collect();
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let value = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let (s, c) = theta.sin_cos();
        for d in 0..nd {
            let z = (d as f64 - center[0]) / semi[0];
            if z.abs() > 1.0 {
                continue;
            }
            for h in 0..nh {
                let y0 = h as f64 - center[1];
                for w in 0..nw {
                    let x0 = w as f64 - center[2];
                    // in-plane rotation about the depth axis
                    let y = (c * y0 - s * x0) / semi[1];
                    let x = (s * y0 + c * x0) / semi[2];
                    if z * z + y * y + x * x <= 1.0 {
                        data[(d * nh + h) * nw + w] = value;
                    }
                }
            }
        }
    }

    let data = data.into_iter().map(|x| x.clamp(0.0, 1.0) as f32).collect();
    Volume::new(cfg.dims, cfg.spacing, [0.0; 3], Domain::Normalized, data)
}

/// `clamp(contrast · blur(v) + streaks + noise, 0, 1)`.
pub fn degrade_to_cbct(v: &Volume, tier: &QualityTier, seed: u64) -> Result<Volume> {
    if v.domain() != Domain::Normalized {
        return Err(Error::Domain("CBCT degradation expects a normalized volume".into()));
    }
    tier.validate()?;
    let dims = v.dims();
    let [nd, nh, nw] = dims;
    let mut data: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    if tier.blur_sigma > 0.0 {
        gaussian_blur(&mut data, dims, tier.blur_sigma);
    }
    if tier.contrast_scale != 1.0 {
        for x in data.iter_mut() {
            *x *= tier.contrast_scale;
        }
    }

    // Streams are shared across tiers: more streaks extend the same sequence
    // and every tier scales one noise field.
    if tier.n_streaks > 0 {
        let mut rng = rng_for(seed, &[0x57ea]);
        let mut streaks = vec![0.0f64; nh * nw];
        let cy = (nh as f64 - 1.0) / 2.0;
        let cx = (nw as f64 - 1.0) / 2.0;
        let width = 0.75f64;
        for _ in 0..tier.n_streaks {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let amp: f64 = rng.gen_range(0.06..0.14) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let (s, c) = theta.sin_cos();
            for h in 0..nh {
                for w in 0..nw {
                    let dist = -s * (w as f64 - cx) + c * (h as f64 - cy);
                    streaks[h * nw + w] += amp * (-dist * dist / (2.0 * width * width)).exp();
                }
            }
        }
        for d in 0..nd {
            for (x, s) in data[d * nh * nw..(d + 1) * nh * nw].iter_mut().zip(&streaks) {
                *x += s;
            }
        }
    }
    if tier.noise_sigma > 0.0 {
        let mut rng = rng_for(seed, &[0x401e]);
        for x in data.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x += tier.noise_sigma * z;
        }
    }
    let out = data.into_iter().map(|x| x.clamp(0.0, 1.0) as f32).collect();
    v.with_data(Domain::Normalized, out)
}

/// Samples for one quality tier.
#[derive(Debug, Clone)]
pub struct TierSamples {
    pub tier: QualityTier,
    pub samples: Vec<PairedSample>,
}

pub fn phantom_id(i: usize) -> String {
    format!("phantom_{i:03}")
}

pub fn phantom_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, &[index as u64])
}

pub fn degrade_seed(base: u64, index: usize, label: u32) -> u64 {
    derive_seed(base, &[index as u64, label as u64, 0xcbc7])
}

/// `n` phantoms, each degraded once per tier; every tier shares the same CTs.
pub fn build_dataset(n: usize, cfg: &PhantomConfig, tiers: &[QualityTier]) -> Result<Vec<TierSamples>> {
    if n == 0 {
        return Err(Error::Parameter("dataset needs at least one phantom".into()));
    }
    cfg.validate()?;
    for t in tiers {
        t.validate()?;
    }
    let cts = (0..n)
        .map(|i| generate_phantom(&cfg.with_seed(phantom_seed(cfg.seed, i))))
        .collect::<Result<Vec<_>>>()?;
    tiers
        .iter()
        .map(|tier| {
            let samples = cts
                .iter()
                .enumerate()
                .map(|(i, ct)| {
                    let cbct = degrade_to_cbct(ct, tier, degrade_seed(cfg.seed, i, tier.label))?;
                    PairedSample::new(phantom_id(i), ct.clone(), cbct, tier.label)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TierSamples {
                tier: tier.clone(),
                samples,
            })
        })
        .collect()
}

/// Separable box blur with clamped edges, in place.
fn box_blur(data: &mut [f64], dims: [usize; 3], radius: usize) {
    if radius == 0 {
        return;
    }
    let taps: Vec<f64> = vec![1.0 / (2 * radius + 1) as f64; 2 * radius + 1];
    for axis in 0..3 {
        convolve_axis(data, dims, axis, &taps);
    }
}

fn gaussian_blur(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    for axis in 0..3 {
        convolve_axis(data, dims, axis, &taps);
    }
}

/// Centered 1D convolution along `axis` with edge clamping.
fn convolve_axis(data: &mut [f64], dims: [usize; 3], axis: usize, taps: &[f64]) {
    let len = dims[axis];
    let stride: usize = dims[axis + 1..].iter().product();
    let radius = (taps.len() / 2) as i64;
    let outer: usize = dims[..axis].iter().product();
    let mut line = vec![0.0f64; len];
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * len * stride + inner;
            for (i, l) in line.iter_mut().enumerate() {
                *l = data[base + i * stride];
            }
            for i in 0..len {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let j = (i as i64 + k as i64 - radius).clamp(0, len as i64 - 1) as usize;
                    acc += t * line[j];
                }
                data[base + i * stride] = acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mae(a: &Volume, b: &Volume) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / a.len() as f64
    }

    #[test]
    fn deterministic_and_in_range() {
        let cfg = PhantomConfig { seed: 42, ..Default::default() };
        let a = generate_phantom(&cfg).unwrap();
        let b = generate_phantom(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(a.domain(), Domain::Normalized);
        let c = generate_phantom(&cfg.with_seed(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_binary_ellipsoid_without_background() {
        let cfg = PhantomConfig {
            n_ellipsoids: 1,
            intensity_range: (1.0, 1.0),
            background_level: 0.0,
            ..Default::default()
        };
        let v = generate_phantom(&cfg).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0 || x == 1.0));
        assert!(v.data().iter().any(|&x| x == 1.0));
        assert!(v.data().iter().any(|&x| x == 0.0));
    }

    #[test]
    fn rejects_invalid_config() {
        let small = PhantomConfig { dims: [8, 32, 32], ..Default::default() };
        assert!(generate_phantom(&small).is_err());
        let none = PhantomConfig { n_ellipsoids: 0, ..Default::default() };
        assert!(generate_phantom(&none).is_err());
        let inverted = PhantomConfig { intensity_range: (0.9, 0.2), ..Default::default() };
        assert!(generate_phantom(&inverted).is_err());
    }

    #[test]
    fn identity_tier_is_identity() {
        let v = generate_phantom(&PhantomConfig::default()).unwrap();
        let out = degrade_to_cbct(&v, &QualityTier::identity(1), 5).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn degradation_is_deterministic_and_needs_normalized_input() {
        let v = generate_phantom(&PhantomConfig::default()).unwrap();
        let t = default_tier(64).unwrap();
        assert_eq!(degrade_to_cbct(&v, &t, 9).unwrap(), degrade_to_cbct(&v, &t, 9).unwrap());
        let hu = Volume::filled([16, 16, 16], Domain::Hu, 0.0).unwrap();
        assert!(matches!(degrade_to_cbct(&hu, &t, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn lower_tier_is_worse() {
        for seed in 0..4 {
            let v = generate_phantom(&PhantomConfig { seed, ..Default::default() }).unwrap();
            let maes: Vec<f64> = default_tiers()
                .iter()
                .map(|t| mae(&degrade_to_cbct(&v, t, seed + 100).unwrap(), &v))
                .collect();
            assert!(maes.windows(2).all(|w| w[0] >= w[1]), "seed {seed}: {maes:?}");
            assert!(maes[0] > maes[3]);
        }
    }

    #[test]
    fn default_tiers_satisfy_ordering_contract() {
        check_tier_monotonicity(&default_tiers()).unwrap();
        let mut bad = default_tiers();
        bad[0].noise_sigma = 0.0;
        assert!(check_tier_monotonicity(&bad).is_err());
    }

    #[test]
    fn dataset_shares_ct_across_tiers() {
        let tiers = vec![default_tier(32).unwrap(), default_tier(256).unwrap()];
        let cfg = PhantomConfig { dims: [16, 16, 16], seed: 3, ..Default::default() };
        let ds = build_dataset(3, &cfg, &tiers).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.iter().map(|t| t.samples.len()).sum::<usize>(), 6);
        for i in 0..3 {
            assert_eq!(ds[0].samples[i].ct, ds[1].samples[i].ct);
            assert_eq!(ds[0].samples[i].id, ds[1].samples[i].id);
            assert_eq!(ds[0].samples[i].ct.dims(), ds[0].samples[i].cbct.dims());
        }
        assert_ne!(ds[0].samples[0].ct, ds[0].samples[1].ct);
        assert!(build_dataset(0, &cfg, &tiers).is_err());
    }
}
