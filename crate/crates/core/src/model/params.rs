use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::real::Real;
use crate::error::{Error, Result};

/// One convolution layer of the fixed architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl LayerSpec {
    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.fan_in()
    }
}

/// Encoder-decoder layers in execution order.
pub const ARCHITECTURE: [LayerSpec; 6] = [
    LayerSpec { name: "enc1", cin: 1, cout: 16, kernel: 3 },
    LayerSpec { name: "enc2", cin: 16, cout: 16, kernel: 3 },
    LayerSpec { name: "mid1", cin: 16, cout: 32, kernel: 3 },
    LayerSpec { name: "mid2", cin: 32, cout: 32, kernel: 3 },
    LayerSpec { name: "dec1", cin: 48, cout: 16, kernel: 3 },
    LayerSpec { name: "head", cin: 16, cout: 3, kernel: 1 },
];

/// A named parameter tensor (kernel `[cout, cin, k, k]` or bias `[cout]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// Parameters of the whole network: for each layer a kernel block followed
/// by a bias block.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub blocks: Vec<ParamBlock<T>>,
}

pub type ModelParams = Params<f32>;
pub type ParamGrads<T = f32> = Params<T>;

fn expected_shapes() -> Vec<(String, Vec<usize>)> {
    ARCHITECTURE
        .iter()
        .flat_map(|l| {
            [
                (format!("{}.weight", l.name), vec![l.cout, l.cin, l.kernel, l.kernel]),
                (format!("{}.bias", l.name), vec![l.cout]),
            ]
        })
        .collect()
}

impl<T: Real> Params<T> {
    pub fn zeros() -> Self {
        Self {
            blocks: expected_shapes()
                .into_iter()
                .map(|(name, shape)| {
                    let n = shape.iter().product();
                    ParamBlock { name, shape, values: vec![T::zero(); n] }
                })
                .collect(),
        }
    }

    /// Kaiming-uniform kernels with bound `sqrt(6 / fan_in)`, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros();
        for (layer, pair) in ARCHITECTURE.iter().zip(p.blocks.chunks_mut(2)) {
            let bound = (6.0 / layer.fan_in() as f64).sqrt();
            for v in pair[0].values.iter_mut() {
                *v = T::from_f64(rng.random_range(-bound..bound));
            }
        }
        p
    }

    pub fn weight(&self, layer: usize) -> &[T] {
        &self.blocks[2 * layer].values
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        &self.blocks[2 * layer + 1].values
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape<U>(&self, other: &Params<U>) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.shape == b.shape)
    }

    /// Fails unless shapes match the fixed architecture exactly.
    pub fn validate(&self) -> Result<()> {
        let shapes = expected_shapes();
        if self.blocks.len() != shapes.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter blocks, found {}",
                shapes.len(),
                self.blocks.len()
            )));
        }
        for (b, (name, shape)) in self.blocks.iter().zip(shapes) {
            if b.shape != shape || b.values.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "block {} has shape {:?}, expected {name} {shape:?}",
                    b.name, b.shape
                )));
            }
            if b.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("block {} has non-finite values", b.name)));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    values: b.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.blocks.iter().flat_map(|b| b.values.iter().copied()).collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.blocks.iter().flat_map(|b| &b.values).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: T, other: &Params<T>) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, &y) in a.values.iter_mut().zip(&b.values) {
                *x = *x + scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.blocks.iter_mut().flat_map(|b| b.values.iter_mut()).for_each(|v| *v = *v * s);
    }
}
