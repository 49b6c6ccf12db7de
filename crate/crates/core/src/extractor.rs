//! Fixed 2D feature extractor for the perceptual loss.
//!
//! Topology is the VGG-16 convolutional stack truncated after `relu4_3`
//! (the first 23 modules of torchvision's `vgg16().features`): four blocks
//! of 3×3 convolutions with ReLU, max pooling between blocks, output stride
//! 8. Two weight sources share that topology:
//!
//! * `Pretrained`: ImageNet weights read from a safetensors file using the
//!   torchvision key names (`features.0.weight`, ...).
//! * `SeededRandom`: He-uniform weights from a seed, with channel widths
//!   divided by `width_divisor`. Needs no downloads.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ConvGeom};
use crate::rng::rng_for;

/// Environment variable naming the directory that holds pretrained weights.
pub const WEIGHT_CACHE_ENV: &str = "SCTFUSION_WEIGHT_CACHE";
/// File looked up inside the weight cache directory.
pub const PRETRAINED_FILE: &str = "vgg16_features.safetensors";

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Spatial reduction between input slice and feature map.
pub const OUTPUT_STRIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Conv,
    Relu,
    Pool,
}

use Op::{Conv as C, Pool as P, Relu as R};

const TOPOLOGY: [Op; 23] = [
    C, R, C, R, P, // block 1
    C, R, C, R, P, // block 2
    C, R, C, R, C, R, P, // block 3
    C, R, C, R, C, R, // block 4, through relu4_3
];

/// Output widths of the ten convolutions at full scale.
const WIDTHS: [usize; 10] = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorVariant {
    Pretrained,
    SeededRandom,
}

/// How to obtain the extractor; part of the training configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub variant: ExtractorVariant,
    #[serde(default)]
    pub seed: u64,
    /// Channel-width divisor for the seeded-random variant.
    #[serde(default = "default_divisor")]
    pub width_divisor: usize,
    /// Explicit weight file for the pretrained variant; otherwise the cache
    /// directory from the environment is searched.
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
}

fn default_divisor() -> usize {
    8
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            variant: ExtractorVariant::SeededRandom,
            seed: 0,
            width_divisor: default_divisor(),
            weights_path: None,
        }
    }
}

impl ExtractorConfig {
    pub fn build(&self) -> Result<FeatureExtractor> {
        match self.variant {
            ExtractorVariant::SeededRandom => FeatureExtractor::seeded_random(self.seed, self.width_divisor),
            ExtractorVariant::Pretrained => {
                let path = match &self.weights_path {
                    Some(p) => p.clone(),
                    None => locate_pretrained()?,
                };
                FeatureExtractor::pretrained(path)
            }
        }
    }
}

/// Resolves the pretrained weight file from [`WEIGHT_CACHE_ENV`].
pub fn locate_pretrained() -> Result<PathBuf> {
    let dir = std::env::var_os(WEIGHT_CACHE_ENV).ok_or_else(|| {
        Error::Resource(format!(
            "pretrained VGG-16 weights unavailable: {WEIGHT_CACHE_ENV} is not set; \
             place {PRETRAINED_FILE} there or use the offline fallback extractor variant `seeded-random`"
        ))
    })?;
    Ok(PathBuf::from(dir).join(PRETRAINED_FILE))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub cin: usize,
    pub cout: usize,
    /// `[cout, cin, 3, 3]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    variant: ExtractorVariant,
    convs: Vec<ConvLayer>,
}

enum Saved {
    Conv { input: Vec<f64>, size: [usize; 2] },
    Relu { output: Vec<f64> },
    Pool { arg: Vec<u32>, nc: usize, in_positions: usize },
}

/// Activations of a forward pass, for [`FeatureExtractor::input_vjp`].
pub struct FeatureTrace {
    n: usize,
    saved: Vec<Saved>,
}

impl FeatureExtractor {
    pub fn seeded_random(seed: u64, width_divisor: usize) -> Result<Self> {
        if width_divisor == 0 || WIDTHS.iter().any(|w| w % width_divisor != 0) {
            return Err(Error::Parameter(format!(
                "width_divisor {width_divisor} must divide 64"
            )));
        }
        let mut rng = rng_for(seed, &[0x766767]);
        let mut cin = 3;
        let mut convs = Vec::with_capacity(WIDTHS.len());
        for &w in &WIDTHS {
            let cout = w / width_divisor;
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            let weight = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect();
            let bias = (0..cout).map(|_| rng.gen_range(-0.05..0.05)).collect();
            convs.push(ConvLayer { cin, cout, weight, bias });
            cin = cout;
        }
        Ok(Self {
            variant: ExtractorVariant::SeededRandom,
            convs,
        })
    }

    /// Loads torchvision-named weights from a safetensors file. Reduced
    /// widths are accepted as long as all layers scale consistently.
    pub fn pretrained(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Resource(format!(
                "pretrained VGG-16 weights not found at {}; set {WEIGHT_CACHE_ENV} to a directory containing \
                 {PRETRAINED_FILE} or use the offline fallback extractor variant `seeded-random`",
                path.display()
            )));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let read = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = st
                .tensor(name)
                .map_err(|e| Error::Format(format!("{}: {name}: {e}", path.display())))?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "{}: {name} has shape {:?}, expected {shape:?}",
                    path.display(),
                    t.shape()
                )));
            }
            let data = t.data();
            match t.dtype() {
                safetensors::Dtype::F32 => Ok(data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()),
                safetensors::Dtype::F64 => Ok(data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()),
                other => Err(Error::Format(format!("{}: {name} has unsupported dtype {other:?}", path.display()))),
            }
        };
        let first = st
            .tensor("features.0.weight")
            .map_err(|e| Error::Format(format!("{}: features.0.weight: {e}", path.display())))?;
        let c0 = first.shape().first().copied().unwrap_or(0);
        if c0 == 0 || 64 % c0 != 0 {
            return Err(Error::Format(format!("{}: unexpected first-layer width {c0}", path.display())));
        }
        let divisor = 64 / c0;
        let mut convs = Vec::with_capacity(WIDTHS.len());
        let mut cin = 3;
        let conv_modules = TOPOLOGY.iter().enumerate().filter(|(_, op)| **op == Op::Conv).map(|(i, _)| i);
        for (module, &w) in conv_modules.zip(&WIDTHS) {
            let cout = w / divisor;
            let weight = read(&format!("features.{module}.weight"), &[cout, cin, 3, 3])?;
            let bias = read(&format!("features.{module}.bias"), &[cout])?;
            convs.push(ConvLayer { cin, cout, weight, bias });
            cin = cout;
        }
        Ok(Self {
            variant: ExtractorVariant::Pretrained,
            convs,
        })
    }

    pub fn variant(&self) -> ExtractorVariant {
        self.variant
    }

    pub fn conv_layers(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn feature_channels(&self) -> usize {
        self.convs.last().map(|c| c.cout).unwrap_or(0)
    }

    /// Feature map size for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> [usize; 2] {
        [h / OUTPUT_STRIDE, w / OUTPUT_STRIDE]
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if h < OUTPUT_STRIDE || w < OUTPUT_STRIDE {
            return Err(Error::Parameter(format!(
                "slices of {h}×{w} are smaller than the extractor stride {OUTPUT_STRIDE}"
            )));
        }
        Ok(())
    }

    /// Features of `n` 3-channel `h × w` images laid out `[n, 3, h, w]`.
    pub fn features(&self, images: &[f64], n: usize, h: usize, w: usize) -> Result<Vec<f64>> {
        self.run(images, n, h, w, false).map(|(f, _)| f)
    }

    /// As [`features`](Self::features) and keeps what the backward pass needs.
    pub fn features_traced(&self, images: &[f64], n: usize, h: usize, w: usize) -> Result<(Vec<f64>, FeatureTrace)> {
        self.run(images, n, h, w, true)
    }

    fn run(&self, images: &[f64], n: usize, h: usize, w: usize, keep: bool) -> Result<(Vec<f64>, FeatureTrace)> {
        self.check(h, w)?;
        if images.len() != n * 3 * h * w {
            return Err(Error::Shape(format!(
                "extractor input has {} values, expected {}",
                images.len(),
                n * 3 * h * w
            )));
        }
        let mut x = images.to_vec();
        let mut size = [h, w];
        let mut c = 3;
        let mut convs = self.convs.iter();
        let mut saved = Vec::new();
        for op in TOPOLOGY {
            match op {
                Op::Conv => {
                    let layer = convs.next().expect("topology and layers agree");
                    let g = geom(n, layer, size);
                    let mut y = vec![0.0; n * layer.cout * size[0] * size[1]];
                    nn::conv_forward(&x, &layer.weight, &layer.bias, &g, &mut y);
                    if keep {
                        saved.push(Saved::Conv { input: x, size });
                    }
                    x = y;
                    c = layer.cout;
                }
                Op::Relu => {
                    nn::relu_inplace(&mut x);
                    if keep {
                        saved.push(Saved::Relu { output: x.clone() });
                    }
                }
                Op::Pool => {
                    let (y, arg) = nn::maxpool_forward(&x, n * c, [1, size[0], size[1]], [1, 2, 2]);
                    if keep {
                        saved.push(Saved::Pool {
                            arg,
                            nc: n * c,
                            in_positions: size[0] * size[1],
                        });
                    }
                    x = y;
                    size = [size[0] / 2, size[1] / 2];
                }
            }
        }
        Ok((x, FeatureTrace { n, saved }))
    }

    /// Gradient with respect to the input images given the gradient with
    /// respect to the features. Layer weights are fixed.
    pub fn input_vjp(&self, trace: &FeatureTrace, grad_features: &[f64]) -> Vec<f64> {
        let mut g = grad_features.to_vec();
        let mut convs = self.convs.iter().rev();
        for (op, saved) in TOPOLOGY.iter().rev().zip(trace.saved.iter().rev()) {
            match (op, saved) {
                (Op::Relu, Saved::Relu { output }) => nn::relu_backward_inplace(output, &mut g),
                (Op::Pool, Saved::Pool { arg, nc, in_positions }) => {
                    g = nn::maxpool_backward(&g, arg, *nc, *in_positions);
                }
                (Op::Conv, Saved::Conv { input, size }) => {
                    let layer = convs.next().expect("topology and layers agree");
                    let geo = geom(trace.n, layer, *size);
                    let mut dx = vec![0.0; input.len()];
                    nn::conv_input_backward(&layer.weight, &g, &geo, &mut dx);
                    g = dx;
                }
                _ => unreachable!("trace does not match topology"),
            }
        }
        g
    }
}

fn geom(n: usize, layer: &ConvLayer, size: [usize; 2]) -> ConvGeom {
    ConvGeom {
        n,
        cin: layer.cin,
        cout: layer.cout,
        size: [1, size[0], size[1]],
        kernel: [1, 3, 3],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn images(n: usize, h: usize, w: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n * 3 * h * w).map(|_| r.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn topology_has_ten_convs_and_three_pools() {
        assert_eq!(TOPOLOGY.iter().filter(|o| **o == Op::Conv).count(), 10);
        assert_eq!(TOPOLOGY.iter().filter(|o| **o == Op::Pool).count(), 3);
        assert_eq!(TOPOLOGY[22], Op::Relu);
    }

    #[test]
    fn output_shape_and_determinism() {
        let e = FeatureExtractor::seeded_random(1, 8).unwrap();
        assert_eq!(e.feature_channels(), 64);
        let x = images(2, 24, 16, 0);
        let f = e.features(&x, 2, 24, 16).unwrap();
        assert_eq!(f.len(), 2 * 64 * 3 * 2);
        assert_eq!(f, FeatureExtractor::seeded_random(1, 8).unwrap().features(&x, 2, 24, 16).unwrap());
        assert!(e.features(&images(1, 4, 16, 0), 1, 4, 16).is_err());
        assert!(FeatureExtractor::seeded_random(1, 3).is_err());
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        let e = FeatureExtractor::seeded_random(2, 16).unwrap();
        let (n, h, w) = (1, 8, 8);
        let x = images(n, h, w, 3);
        let (f, trace) = e.features_traced(&x, n, h, w).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let probe: Vec<f64> = (0..f.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let gx = e.input_vjp(&trace, &probe);
        let obj = |x: &[f64]| -> f64 {
            e.features(x, n, h, w).unwrap().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in (0..x.len()).step_by(11) {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (obj(&xp) - obj(&xm)) / (2.0 * eps);
            assert!((fd - gx[i]).abs() <= 1e-4 * fd.abs().max(1.0), "[{i}] {fd} vs {}", gx[i]);
        }
    }

    #[test]
    fn pretrained_loader_reads_torchvision_names() {
        let reference = FeatureExtractor::seeded_random(5, 16).unwrap();
        let modules = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21];
        let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (m, layer) in modules.iter().zip(reference.conv_layers()) {
            let wbytes: Vec<u8> = layer.weight.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
            let bbytes: Vec<u8> = layer.bias.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
            blobs.push((format!("features.{m}.weight"), vec![layer.cout, layer.cin, 3, 3], wbytes));
            blobs.push((format!("features.{m}.bias"), vec![layer.cout], bbytes));
        }
        let views: HashMap<String, safetensors::tensor::TensorView> = blobs
            .iter()
            .map(|(k, s, b)| {
                (k.clone(), safetensors::tensor::TensorView::new(safetensors::Dtype::F32, s.clone(), b).unwrap())
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(PRETRAINED_FILE);
        safetensors::serialize_to_file(&views, &None, &path).unwrap();
        let loaded = FeatureExtractor::pretrained(&path).unwrap();
        assert_eq!(loaded.variant(), ExtractorVariant::Pretrained);
        for (a, b) in loaded.conv_layers().iter().zip(reference.conv_layers()) {
            assert_eq!(a.cout, b.cout);
            for (x, y) in a.weight.iter().zip(&b.weight) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn missing_pretrained_weights_name_the_fallback() {
        let err = FeatureExtractor::pretrained("/nonexistent/vgg.safetensors").unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
        assert!(err.to_string().contains("seeded-random"));
    }
}
