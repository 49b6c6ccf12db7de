//! Synthetic CT misalignment controlled by a single strength `alpha_a ∈ [0, 1]`.
//!
//! One draw consists of per-axis scaling factors from `U(1 − 0.5α, 1 + 0.5α)`,
//! per-axis rotation angles (degrees) from `U(−22.5α, 22.5α)` and per-axis
//! translations whose magnitude is drawn from `U(0, 0.05α)` with a random
//! sign. Translations are interpreted as fractions of the axis extent.
//!
//! The forward map acts in physical (mm) space about the rotation center:
//! `T(p) = R·S·p + t` with `R = R_0·R_1·R_2`, where `R_k` rotates the plane
//! of the two axes other than `k` (cyclic order, right-handed) and axes are
//! in index order (depth, height, width). The warped volume is
//! `out(x) = v(T⁻¹(x))`, sampled trilinearly with zero fill outside the field.
//!
//! All draws use the same underlying uniforms for a given seed, scaled by
//! `alpha_a`, so one seed describes a family of misalignments of growing
//! strength.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::volume::{PairedSample, Volume};

pub const SCALE_SPAN: f64 = 0.5;
pub const ROTATION_SPAN_DEG: f64 = 22.5;
pub const TRANSLATION_SPAN: f64 = 0.05;

/// Voxel count above which displacement statistics are estimated from a
/// uniform subsample instead of the dense grid.
const DENSE_LIMIT: usize = 256 * 256 * 256;
const SUBSAMPLE_POINTS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentSpec {
    pub alpha_a: f64,
    pub seed: u64,
}

impl MisalignmentSpec {
    pub fn new(alpha_a: f64, seed: u64) -> Result<Self> {
        let spec = Self { alpha_a, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_a) {
            return Err(Error::Parameter(format!(
                "alpha_a must lie in [0, 1], got {}",
                self.alpha_a
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub scale: [f64; 3],
    pub rotation_deg: [f64; 3],
    pub translation_frac: [f64; 3],
    /// Rotation/scaling center in voxel coordinates; `None` is the volume center.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 3]>,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            scale: [1.0; 3],
            rotation_deg: [0.0; 3],
            translation_frac: [0.0; 3],
            center: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == [1.0; 3] && self.rotation_deg == [0.0; 3] && self.translation_frac == [0.0; 3]
    }

    fn center_for(&self, dims: [usize; 3]) -> [f64; 3] {
        self.center
            .unwrap_or([0, 1, 2].map(|i| (dims[i] as f64 - 1.0) / 2.0))
    }

    /// Voxel-space form of the map: `F(q) = c + A·(q − c) + b`.
    fn voxel_map(&self, dims: [usize; 3], spacing: [f64; 3]) -> VoxelMap {
        let r = rotation_matrix(self.rotation_deg);
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = r[i][j] * self.scale[j] * spacing[j] / spacing[i];
            }
        }
        let b = [0, 1, 2].map(|i| self.translation_frac[i] * dims[i] as f64);
        VoxelMap {
            a,
            b,
            c: self.center_for(dims),
        }
    }
}

struct VoxelMap {
    a: [[f64; 3]; 3],
    b: [f64; 3],
    c: [f64; 3],
}

impl VoxelMap {
    fn inverse(&self) -> Result<VoxelMap> {
        let a = invert3(self.a)
            .ok_or_else(|| Error::Parameter("affine map is singular (zero scale?)".into()))?;
        // q = c + A⁻¹(y − c − b)  ⇒  q = c + A⁻¹(y − c) − A⁻¹b
        let mut b = [0.0; 3];
        for i in 0..3 {
            b[i] = -(0..3).map(|j| a[i][j] * self.b[j]).sum::<f64>();
        }
        Ok(VoxelMap { a, b, c: self.c })
    }
}

fn rotation_matrix(deg: [f64; 3]) -> [[f64; 3]; 3] {
    let mut m = identity3();
    for (k, angle) in deg.iter().enumerate() {
        let (s, c) = angle.to_radians().sin_cos();
        let (i, j) = ((k + 1) % 3, (k + 2) % 3);
        let mut rk = identity3();
        rk[i][i] = c;
        rk[i][j] = -s;
        rk[j][i] = s;
        rk[j][j] = c;
        m = matmul3(m, rk);
    }
    m
}

fn identity3() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn matmul3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn invert3(m: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * cof(1, 2, 1, 2) - m[0][1] * cof(1, 2, 0, 2) + m[0][2] * cof(1, 2, 0, 1);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    Some([
        [cof(1, 2, 1, 2) * inv_det, -cof(0, 2, 1, 2) * inv_det, cof(0, 1, 1, 2) * inv_det],
        [-cof(1, 2, 0, 2) * inv_det, cof(0, 2, 0, 2) * inv_det, -cof(0, 1, 0, 2) * inv_det],
        [cof(1, 2, 0, 1) * inv_det, -cof(0, 2, 0, 1) * inv_det, cof(0, 1, 0, 1) * inv_det],
    ])
}

pub fn sample_affine(spec: &MisalignmentSpec) -> Result<AffineParams> {
    spec.validate()?;
    let a = spec.alpha_a;
    let mut rng = rng_for(spec.seed, &[0xaff1]);
    let mut sym = || 2.0 * rng.gen::<f64>() - 1.0;
    let scale = [0; 3].map(|_| 1.0 + SCALE_SPAN * a * sym());
    let rotation_deg = [0; 3].map(|_| ROTATION_SPAN_DEG * a * sym());
    let mut rng = rng_for(spec.seed, &[0x7a45]);
    let translation_frac = [0; 3].map(|_| {
        let mag = TRANSLATION_SPAN * a * rng.gen::<f64>();
        if rng.gen::<bool>() {
            mag
        } else {
            -mag
        }
    });
    Ok(AffineParams {
        scale,
        rotation_deg,
        translation_frac,
        center: None,
    })
}

pub fn apply_affine(v: &Volume, p: &AffineParams) -> Result<Volume> {
    let dims = v.dims();
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::Parameter(format!("apply_affine needs dims >= 2, got {dims:?}")));
    }
    if p.scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Parameter(format!("scale factors must be positive, got {:?}", p.scale)));
    }
    if p.is_identity() {
        return Ok(v.clone());
    }
    let inv = p.voxel_map(dims, v.spacing()).inverse()?;
    let [nd, nh, nw] = dims;
    let mut data = Vec::with_capacity(v.len());
    for d in 0..nd {
        for h in 0..nh {
            let y = [d as f64 - inv.c[0], h as f64 - inv.c[1]];
            for w in 0..nw {
                let x = w as f64 - inv.c[2];
                let pos = [0, 1, 2].map(|i| inv.c[i] + inv.a[i][0] * y[0] + inv.a[i][1] * y[1] + inv.a[i][2] * x + inv.b[i]);
                data.push(v.sample_trilinear(pos, 0.0));
            }
        }
    }
    v.with_data(v.domain(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplacementStats {
    /// Mean Euclidean displacement of voxel centers, in voxels.
    pub mean_voxels: f64,
    /// Same displacements measured in millimetres.
    pub mean_mm: f64,
}

/// Mean displacement `‖T(x) − x‖` over all voxel centers of a grid.
///
/// Dense for grids up to 256³; larger grids use a seeded uniform subsample.
pub fn mean_voxel_displacement(p: &AffineParams, dims: [usize; 3], spacing: [f64; 3]) -> Result<DisplacementStats> {
    if dims.iter().any(|&d| d == 0) || spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Parameter(format!("invalid grid {dims:?} / {spacing:?}")));
    }
    let map = p.voxel_map(dims, spacing);
    // δ(q) = (A − I)(q − c) + b
    let mut m = map.a;
    for (i, row) in m.iter_mut().enumerate() {
        row[i] -= 1.0;
    }
    let disp = |q: [f64; 3]| -> (f64, f64) {
        let r = [q[0] - map.c[0], q[1] - map.c[1], q[2] - map.c[2]];
        let mut vox = 0.0;
        let mut mm = 0.0;
        for i in 0..3 {
            let di = m[i][0] * r[0] + m[i][1] * r[1] + m[i][2] * r[2] + map.b[i];
            vox += di * di;
            mm += di * di * spacing[i] * spacing[i];
        }
        (vox.sqrt(), mm.sqrt())
    };
    let n: usize = dims.iter().product();
    let (sum_vox, sum_mm, count) = if n <= DENSE_LIMIT {
        let mut sv = 0.0;
        let mut sm = 0.0;
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                let mut row_v = 0.0;
                let mut row_m = 0.0;
                for w in 0..dims[2] {
                    let (a, b) = disp([d as f64, h as f64, w as f64]);
                    row_v += a;
                    row_m += b;
                }
                sv += row_v;
                sm += row_m;
            }
        }
        (sv, sm, n)
    } else {
        let mut rng = rng_for(0, &[0xd15b]);
        let mut sv = 0.0;
        let mut sm = 0.0;
        for _ in 0..SUBSAMPLE_POINTS {
            let q = [0, 1, 2].map(|i| rng.gen_range(0..dims[i]) as f64);
            let (a, b) = disp(q);
            sv += a;
            sm += b;
        }
        (sv, sm, SUBSAMPLE_POINTS)
    };
    Ok(DisplacementStats {
        mean_voxels: sum_vox / count as f64,
        mean_mm: sum_mm / count as f64,
    })
}

/// Draws a misalignment and applies it to the sample's CT.
pub fn misalign_ct(sample: &PairedSample, spec: &MisalignmentSpec) -> Result<(Volume, AffineParams)> {
    let params = sample_affine(spec)?;
    let out = apply_affine(&sample.ct, &params)?;
    Ok((out, params))
}
