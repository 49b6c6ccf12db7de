//! Dense row-major `f64` tensors used by the network and the losses.
//!
//! Network activations are `[N, C, D, H, W]`; a single volume is
//! `[1, 1, D, H, W]`.

use crate::error::{Error, Result};
use crate::volume::{Domain, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// `[N, C, D, H, W]` accessor; panics on other ranks.
    pub fn dims5(&self) -> [usize; 5] {
        self.shape
            .as_slice()
            .try_into()
            .unwrap_or_else(|_| panic!("expected a rank-5 tensor, got shape {:?}", self.shape))
    }

    pub fn spatial(&self) -> [usize; 3] {
        let [_, _, d, h, w] = self.dims5();
        [d, h, w]
    }

    pub fn from_volume(v: &Volume) -> Self {
        let [d, h, w] = v.dims();
        Self {
            shape: vec![1, 1, d, h, w],
            data: v.data().iter().map(|&x| x as f64).collect(),
        }
    }

    /// Stacks equally shaped `[1, C, D, H, W]` tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let [n0, c, d, h, w] = first.dims5();
        if n0 != 1 {
            return Err(Error::Shape("stack expects batch-1 tensors".into()));
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(vec![items.len(), c, d, h, w], data)
    }

    /// Converts a `[1, 1, D, H, W]` tensor back into a volume of the given
    /// geometry. Raw network outputs are unbounded, so they are tagged HU
    /// unless every value already lies in `[0, 1]`.
    pub fn to_volume(&self, like: &Volume) -> Result<Volume> {
        let [n, c, d, h, w] = self.dims5();
        if n != 1 || c != 1 || [d, h, w] != like.dims() {
            return Err(Error::Shape(format!(
                "tensor {:?} does not match volume dims {:?}",
                self.shape,
                like.dims()
            )));
        }
        let data: Vec<f32> = self.data.iter().map(|&x| x as f32).collect();
        let domain = if data.iter().all(|x| (0.0..=1.0).contains(x)) {
            Domain::Normalized
        } else {
            Domain::Hu
        };
        Volume::new(like.dims(), like.spacing(), like.origin(), domain, data)
    }
}
