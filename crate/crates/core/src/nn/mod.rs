//! Fully connected tanh networks with a linear output layer.
//!
//! Parameters are stored flat, layer by layer: the weight matrix of layer `l`
//! (`n_out x n_in`, row-major) followed by its bias vector.

mod batch;
mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{backward, forward_batch, forward_with_tape, BatchOutputs, JetOrder, Tape};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden_layers: usize,
    pub width: usize,
}

impl MlpArch {
    pub fn new(in_dim: usize, out_dim: usize, hidden_layers: usize, width: usize) -> Result<Self> {
        let arch = MlpArch {
            in_dim,
            out_dim,
            hidden_layers,
            width,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.hidden_layers == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "architecture needs positive in/out dims, layers and width, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `(n_in, n_out)` per affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.in_dim, self.width)];
        shapes.extend((1..self.hidden_layers).map(|_| (self.width, self.width)));
        shapes.push((self.width, self.out_dim));
        shapes
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_layers + 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| o * i + o).sum()
    }

    /// Start offset of each layer's weights in the flat vector.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layer_shapes()
            .iter()
            .map(|(i, o)| {
                let start = off;
                off += o * i + o;
                start
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    arch: MlpArch,
    seed: u64,
    values: Vec<f64>,
    offsets: Vec<usize>,
}

/// A borrowed affine layer.
#[derive(Debug, Clone, Copy)]
pub struct Layer<'a> {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

impl MlpParams {
    pub fn from_vec(arch: MlpArch, seed: u64, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters for {arch:?}, got {}",
                arch.num_params(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(MlpParams {
            offsets: arch.layer_offsets(),
            arch,
            seed,
            values,
        })
    }

    pub fn zeros(arch: MlpArch) -> Self {
        MlpParams {
            offsets: arch.layer_offsets(),
            values: vec![0.0; arch.num_params()],
            seed: 0,
            arch,
        }
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the flat vector; the optimiser writes through this.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_values(&mut self, v: &[f64]) {
        self.values.copy_from_slice(v);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer(&self, l: usize) -> Layer<'_> {
        let (n_in, n_out) = self.arch.layer_shapes()[l];
        let start = self.offsets[l];
        let w_end = start + n_in * n_out;
        Layer {
            n_in,
            n_out,
            weights: &self.values[start..w_end],
            bias: &self.values[w_end..w_end + n_out],
        }
    }

    pub(crate) fn offset(&self, l: usize) -> usize {
        self.offsets[l]
    }
}

/// Glorot-uniform weights `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`,
/// zero biases; drawn from ChaCha8 seeded with `seed`.
pub fn init_glorot(arch: MlpArch, seed: u64) -> Result<MlpParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(arch.num_params());
    for (n_in, n_out) in arch.layer_shapes() {
        let bound = glorot_bound(n_in, n_out);
        values.extend((0..n_in * n_out).map(|_| rng.gen_range(-bound..bound)));
        values.extend(std::iter::repeat(0.0).take(n_out));
    }
    MlpParams::from_vec(arch, seed, values)
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[inline]
fn affine(layer: &Layer<'_>, input: &[f64], out: &mut [f64]) {
    for (o, row) in layer.weights.chunks_exact(layer.n_in).enumerate() {
        let mut z = layer.bias[o];
        for (w, a) in row.iter().zip(input) {
            z += w * a;
        }
        out[o] = z;
    }
}

/// Network output at `x`.
pub fn forward(params: &MlpParams, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), params.arch.in_dim, "input dimension mismatch");
    let mut a = x.to_vec();
    let last = params.arch.num_layers() - 1;
    for l in 0..=last {
        let layer = params.layer(l);
        let mut z = vec![0.0; layer.n_out];
        affine(&layer, &a, &mut z);
        if l < last {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        a = z;
    }
    a
}

/// Value, spatial gradient and spatial Hessian of every network output.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialJet {
    pub in_dim: usize,
    /// `m` outputs.
    pub value: Vec<f64>,
    /// `m x d`, row-major.
    pub gradient: Vec<f64>,
    /// `m x d x d`, row-major and symmetric in the last two indices.
    pub hessian: Vec<f64>,
}

impl SpatialJet {
    pub fn grad(&self, out: usize) -> &[f64] {
        let d = self.in_dim;
        &self.gradient[out * d..(out + 1) * d]
    }

    pub fn hess(&self, out: usize, i: usize, j: usize) -> f64 {
        let d = self.in_dim;
        self.hessian[out * d * d + i * d + j]
    }

    pub fn laplacian(&self, out: usize) -> f64 {
        (0..self.in_dim).map(|i| self.hess(out, i, i)).sum()
    }
}

/// Exact first and second spatial derivatives by forward propagation of
/// `(value, gradient, Hessian)` through every layer.
pub fn spatial_jet(params: &MlpParams, x: &[f64]) -> SpatialJet {
    let d = params.arch.in_dim;
    assert_eq!(x.len(), d, "input dimension mismatch");
    let mut a = x.to_vec();
    // Jacobian (n x d) and Hessian (n x d x d) of the current activations.
    let mut jac = vec![0.0; d * d];
    for i in 0..d {
        jac[i * d + i] = 1.0;
    }
    let mut hes = vec![0.0; d * d * d];
    let last = params.arch.num_layers() - 1;
    for l in 0..=last {
        let layer = params.layer(l);
        let n_out = layer.n_out;
        let mut z = vec![0.0; n_out];
        affine(&layer, &a, &mut z);
        let mut zj = vec![0.0; n_out * d];
        let mut zh = vec![0.0; n_out * d * d];
        for (o, row) in layer.weights.chunks_exact(layer.n_in).enumerate() {
            for (k, w) in row.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                for p in 0..d {
                    zj[o * d + p] += w * jac[k * d + p];
                }
                for pq in 0..d * d {
                    zh[o * d * d + pq] += w * hes[k * d * d + pq];
                }
            }
        }
        if l < last {
            for o in 0..n_out {
                let t = z[o].tanh();
                let s1 = 1.0 - t * t;
                let s2 = -2.0 * t * s1;
                for p in 0..d {
                    for q in 0..d {
                        let idx = o * d * d + p * d + q;
                        zh[idx] = s2 * zj[o * d + p] * zj[o * d + q] + s1 * zh[idx];
                    }
                }
                for p in 0..d {
                    zj[o * d + p] *= s1;
                }
                z[o] = t;
            }
        }
        a = z;
        jac = zj;
        hes = zh;
    }
    SpatialJet {
        in_dim: d,
        value: a,
        gradient: jac,
        hessian: hes,
    }
}
