//! Volumetric images and the intensity/geometry operations the pipeline
//! needs: HU windowing, isotropic ×2 downscaling and trilinear sampling.
//!
//! Index order is depth × height × width everywhere (width fastest in
//! memory); an axial slice is a fixed-depth plane. Per-axis metadata
//! (`spacing`, `origin`) follows the same order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default HU window mapped onto `[0, 1]` by [`normalize`].
pub const DEFAULT_HU_WINDOW: (f64, f64) = (-1024.0, 2048.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Domain {
    /// Calibrated Hounsfield units.
    #[serde(rename = "HU")]
    Hu,
    /// Windowed intensities in `[0, 1]`.
    Normalized,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Hu => "HU",
            Domain::Normalized => "NORMALIZED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "HU" => Some(Domain::Hu),
            "NORMALIZED" => Some(Domain::Normalized),
            _ => None,
        }
    }
}

/// A 3D scalar grid with physical metadata.
///
/// Construction validates the invariants (positive dims and spacing, finite
/// data, `[0, 1]` range for normalized volumes); a `Volume` is immutable
/// afterwards, so every operation returns a new one.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    domain: Domain,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        domain: Domain,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("volume dims must be >= 1, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "volume dims {dims:?} need {n} voxels, got {}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Parameter(format!("origin must be finite, got {origin:?}")));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite intensity at voxel {pos}")));
        }
        if domain == Domain::Normalized {
            if let Some(pos) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain(format!(
                    "normalized volume has intensity {} outside [0, 1] at voxel {pos}",
                    data[pos]
                )));
            }
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            domain,
            data,
        })
    }

    /// Constant-valued volume with unit spacing and zero origin.
    pub fn filled(dims: [usize; 3], domain: Domain, value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, [1.0; 3], [0.0; 3], domain, vec![value; n])
    }

    /// Builds a volume from a function of the voxel index `(d, h, w)`.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        domain: Domain,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Self::new(dims, spacing, [0.0; 3], domain, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(d, h, w)]
    }

    /// Same geometry, new intensities. Validates the data against `domain`.
    pub fn with_data(&self, domain: Domain, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.origin, domain, data)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-6)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Trilinear interpolation at a continuous voxel coordinate.
    ///
    /// Coordinates are in index units (voxel centers at integers). Corners
    /// that fall outside the grid contribute `fill`.
    pub fn sample_trilinear(&self, pos: [f64; 3], fill: f32) -> f32 {
        let [nd, nh, nw] = self.dims;
        let fl = [pos[0].floor(), pos[1].floor(), pos[2].floor()];
        let t = [pos[0] - fl[0], pos[1] - fl[1], pos[2] - fl[2]];
        let base = [fl[0] as i64, fl[1] as i64, fl[2] as i64];
        let n = [nd as i64, nh as i64, nw as i64];
        if base[0] < -1 || base[1] < -1 || base[2] < -1 || base[0] >= n[0] || base[1] >= n[1] || base[2] >= n[2] {
            return fill;
        }
        let mut acc = 0.0f64;
        for (cd, wd) in [(0i64, 1.0 - t[0]), (1, t[0])] {
            if wd == 0.0 {
                continue;
            }
            let d = base[0] + cd;
            for (ch, wh) in [(0i64, 1.0 - t[1]), (1, t[1])] {
                if wh == 0.0 {
                    continue;
                }
                let h = base[1] + ch;
                for (cw, ww) in [(0i64, 1.0 - t[2]), (1, t[2])] {
                    if ww == 0.0 {
                        continue;
                    }
                    let w = base[2] + cw;
                    let v = if d < 0 || h < 0 || w < 0 || d >= n[0] || h >= n[1] || w >= n[2] {
                        fill
                    } else {
                        self.data[((d as usize) * nh + h as usize) * nw + w as usize]
                    };
                    acc += wd * wh * ww * v as f64;
                }
            }
        }
        acc as f32
    }
}

/// A perfectly aligned (CT, CBCT) pair of one subject at one CBCT quality.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    /// Ground-truth aligned CT; the synthesis target.
    pub ct: Volume,
    pub cbct: Volume,
    /// CBCT quality tag; lower means more artifacts.
    pub quality: u32,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, ct: Volume, cbct: Volume, quality: u32) -> Result<Self> {
        if !ct.same_geometry(&cbct) {
            return Err(Error::Shape(format!(
                "CT {:?}/{:?} and CBCT {:?}/{:?} must share dims and spacing",
                ct.dims(),
                ct.spacing(),
                cbct.dims(),
                cbct.spacing()
            )));
        }
        if quality == 0 {
            return Err(Error::Parameter("quality tag must be positive".into()));
        }
        Ok(Self {
            id: id.into(),
            ct,
            cbct,
            quality,
        })
    }
}

/// Maps HU intensities through `window = (lo, hi)` onto `[0, 1]`, clamping.
pub fn normalize(v: &Volume, window: (f64, f64)) -> Result<Volume> {
    let (lo, hi) = window;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Parameter(format!(
            "normalization window needs lo < hi, got ({lo}, {hi})"
        )));
    }
    if v.domain() != Domain::Hu {
        return Err(Error::Domain("normalize expects an HU-domain volume".into()));
    }
    let scale = 1.0 / (hi - lo);
    let data = v
        .data()
        .iter()
        .map(|&x| (((x as f64) - lo) * scale).clamp(0.0, 1.0) as f32)
        .collect();
    v.with_data(Domain::Normalized, data)
}

/// Halves every dimension (floor) with trilinear resampling.
///
/// Output sample `i` sits at input coordinate `2i + 0.5` (align-corners
/// false), so each output voxel is the mean of a 2×2×2 input block. Spacing
/// doubles and the origin moves to the new first voxel center.
pub fn downscale2(v: &Volume) -> Result<Volume> {
    let dims = v.dims();
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::Parameter(format!(
            "downscale2 needs every dim >= 2, got {dims:?}"
        )));
    }
    let out_dims = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for d in 0..out_dims[0] {
        for h in 0..out_dims[1] {
            for w in 0..out_dims[2] {
                let pos = [2.0 * d as f64 + 0.5, 2.0 * h as f64 + 0.5, 2.0 * w as f64 + 0.5];
                data.push(v.sample_trilinear(pos, 0.0));
            }
        }
    }
    let sp = v.spacing();
    let org = v.origin();
    let spacing = [sp[0] * 2.0, sp[1] * 2.0, sp[2] * 2.0];
    let origin = [org[0] + 0.5 * sp[0], org[1] + 0.5 * sp[1], org[2] + 0.5 * sp[2]];
    Volume::new(out_dims, spacing, origin, v.domain(), data)
}
