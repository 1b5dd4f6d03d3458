//! Batched evaluation of the network together with spatial derivative
//! channels, and the reverse pass for parameter gradients.
//!
//! For a batch of `n` points the activations of a layer are a row-major
//! `width x (C n)` matrix: column block `c` holds channel `c` for every point.
//! Channel 0 is the value, channels `1..=d` the first derivatives and, for
//! [`JetOrder::Laplacian`], channels `d+1..=2d` the pure second derivatives
//! `d^2/dx_i^2`. Every channel transforms linearly under an affine layer, so
//! one matrix product per layer moves all of them; the tanh layer mixes them
//! pointwise.

use super::MlpParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JetOrder {
    Value,
    Gradient,
    Laplacian,
}

impl JetOrder {
    pub fn channels(self, dim: usize) -> usize {
        match self {
            JetOrder::Value => 1,
            JetOrder::Gradient => 1 + dim,
            JetOrder::Laplacian => 1 + 2 * dim,
        }
    }

    fn grad_channels(self, dim: usize) -> usize {
        match self {
            JetOrder::Value => 0,
            _ => dim,
        }
    }

    fn has_second(self) -> bool {
        self == JetOrder::Laplacian
    }
}

/// Output channels for a batch, `out_dim x (C n)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutputs {
    pub n: usize,
    pub dim: usize,
    pub out_dim: usize,
    pub order: JetOrder,
    data: Vec<f64>,
}

impl BatchOutputs {
    pub fn zeros(n: usize, dim: usize, out_dim: usize, order: JetOrder) -> Self {
        BatchOutputs {
            n,
            dim,
            out_dim,
            order,
            data: vec![0.0; out_dim * order.channels(dim) * n],
        }
    }

    pub fn zeros_like(other: &BatchOutputs) -> Self {
        BatchOutputs {
            data: vec![0.0; other.data.len()],
            ..*other
        }
    }

    fn width(&self) -> usize {
        self.order.channels(self.dim) * self.n
    }

    pub fn channel(&self, out: usize, c: usize) -> &[f64] {
        let start = out * self.width() + c * self.n;
        &self.data[start..start + self.n]
    }

    pub fn channel_mut(&mut self, out: usize, c: usize) -> &mut [f64] {
        let start = out * self.width() + c * self.n;
        let n = self.n;
        &mut self.data[start..start + n]
    }

    pub fn value(&self, out: usize) -> &[f64] {
        self.channel(out, 0)
    }

    pub fn grad(&self, out: usize, axis: usize) -> &[f64] {
        self.channel(out, 1 + axis)
    }

    pub fn second(&self, out: usize, axis: usize) -> &[f64] {
        assert!(self.order.has_second());
        self.channel(out, 1 + self.dim + axis)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Intermediate activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct Tape {
    order: JetOrder,
    n: usize,
    /// Input of every layer, `n_in x (C n)`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer, `n_out x (C n)`.
    pre: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the strides above describe matrices that lie inside the given
    // slices; callers build every buffer with exactly these shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn input_channels(points: &[f64], dim: usize, order: JetOrder) -> Vec<f64> {
    let n = points.len() / dim;
    let cols = order.channels(dim) * n;
    let mut a = vec![0.0; dim * cols];
    for i in 0..dim {
        let row = &mut a[i * cols..(i + 1) * cols];
        for (p, x) in points.chunks_exact(dim).enumerate() {
            row[p] = x[i];
        }
        if order.grad_channels(dim) > 0 {
            row[(1 + i) * n..(2 + i) * n].fill(1.0);
        }
    }
    a
}

fn activate(z: &[f64], n_out: usize, n: usize, dim: usize, order: JetOrder) -> Vec<f64> {
    let cols = order.channels(dim) * n;
    let ng = order.grad_channels(dim);
    let second = order.has_second();
    let mut a = vec![0.0; z.len()];
    for o in 0..n_out {
        let zr = &z[o * cols..(o + 1) * cols];
        let ar = &mut a[o * cols..(o + 1) * cols];
        for p in 0..n {
            let t = zr[p].tanh();
            let s1 = 1.0 - t * t;
            ar[p] = t;
            if ng == 0 {
                continue;
            }
            let s2 = -2.0 * t * s1;
            for i in 0..ng {
                let gi = (1 + i) * n + p;
                let zg = zr[gi];
                ar[gi] = s1 * zg;
                if second {
                    let si = (1 + dim + i) * n + p;
                    ar[si] = s2 * zg * zg + s1 * zr[si];
                }
            }
        }
    }
    a
}

fn run(params: &MlpParams, points: &[f64], order: JetOrder, keep: bool) -> (BatchOutputs, Option<Tape>) {
    let arch = *params.arch();
    let dim = arch.in_dim;
    assert_eq!(points.len() % dim, 0, "point buffer is not a multiple of the input dimension");
    let n = points.len() / dim;
    let cols = order.channels(dim) * n;
    let mut a = input_channels(points, dim, order);
    let mut tape = keep.then(|| Tape {
        order,
        n,
        inputs: Vec::with_capacity(arch.num_layers()),
        pre: Vec::with_capacity(arch.hidden_layers),
    });
    let last = arch.num_layers() - 1;
    for l in 0..=last {
        let layer = params.layer(l);
        let mut z = vec![0.0; layer.n_out * cols];
        for (o, b) in layer.bias.iter().enumerate() {
            z[o * cols..o * cols + n].fill(*b);
        }
        gemm(layer.n_out, layer.n_in, cols, layer.weights, layer.n_in, 1, &a, cols, 1, 1.0, &mut z, cols);
        let next = if l < last {
            Some(activate(&z, layer.n_out, n, dim, order))
        } else {
            None
        };
        match (&mut tape, next) {
            (Some(t), Some(next)) => {
                t.inputs.push(std::mem::replace(&mut a, next));
                t.pre.push(z);
            }
            (None, Some(next)) => a = next,
            (Some(t), None) => {
                t.inputs.push(std::mem::take(&mut a));
                a = z;
            }
            (None, None) => a = z,
        }
    }
    (
        BatchOutputs {
            n,
            dim,
            out_dim: arch.out_dim,
            order,
            data: a,
        },
        tape,
    )
}

/// Network outputs and derivative channels at every point of `points`.
pub fn forward_batch(params: &MlpParams, points: &[f64], order: JetOrder) -> BatchOutputs {
    run(params, points, order, false).0
}

/// As [`forward_batch`], also returning the tape needed by [`backward`].
pub fn forward_with_tape(params: &MlpParams, points: &[f64], order: JetOrder) -> (BatchOutputs, Tape) {
    let (out, tape) = run(params, points, order, true);
    (out, tape.expect("tape requested"))
}

/// Reverse pass: accumulates `d/dtheta sum(adjoint * outputs)` into `grad`.
///
/// `adjoint` has the shape of the outputs the tape was recorded for.
pub fn backward(params: &MlpParams, tape: &Tape, adjoint: &BatchOutputs, grad: &mut [f64]) {
    let arch = *params.arch();
    let dim = arch.in_dim;
    let order = tape.order;
    let n = tape.n;
    assert_eq!(adjoint.n, n);
    assert_eq!(adjoint.order, order);
    assert_eq!(grad.len(), params.len());
    let cols = order.channels(dim) * n;
    let ng = order.grad_channels(dim);
    let second = order.has_second();

    let mut zbar = adjoint.data.clone();
    for l in (0..arch.num_layers()).rev() {
        let layer = params.layer(l);
        let (n_in, n_out) = (layer.n_in, layer.n_out);
        let a = &tape.inputs[l];
        let off = params.offset(l);
        let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
        // dW += zbar A^T
        gemm(n_out, cols, n_in, &zbar, cols, 1, a, 1, cols, 1.0, gw, n_in);
        for (o, b) in gb.iter_mut().enumerate() {
            *b += zbar[o * cols..o * cols + n].iter().sum::<f64>();
        }
        if l == 0 {
            break;
        }
        // abar = W^T zbar
        let mut abar = vec![0.0; n_in * cols];
        gemm(n_in, n_out, cols, layer.weights, 1, n_in, &zbar, cols, 1, 0.0, &mut abar, cols);

        // Back through the tanh of layer l-1, whose output is `a`.
        let z = &tape.pre[l - 1];
        let mut next = vec![0.0; abar.len()];
        for k in 0..n_in {
            let r = k * cols..(k + 1) * cols;
            let (ab, zr, ar, nb) = (&abar[r.clone()], &z[r.clone()], &a[r.clone()], &mut next[r]);
            for p in 0..n {
                let t = ar[p];
                let s1 = 1.0 - t * t;
                let mut zv = ab[p] * s1;
                if ng > 0 {
                    let s2 = -2.0 * t * s1;
                    let s3 = -2.0 * (s1 * s1 + t * s2);
                    for i in 0..ng {
                        let gi = (1 + i) * n + p;
                        let zg = zr[gi];
                        let agb = ab[gi];
                        let mut zgb = agb * s1;
                        zv += agb * s2 * zg;
                        if second {
                            let si = (1 + dim + i) * n + p;
                            let asb = ab[si];
                            zgb += asb * 2.0 * s2 * zg;
                            zv += asb * (s3 * zg * zg + s2 * zr[si]);
                            nb[si] = asb * s1;
                        }
                        nb[gi] = zgb;
                    }
                }
                nb[p] = zv;
            }
        }
        zbar = next;
    }
}

#[cfg(test)]
mod tests {
    use super::super::{forward, init_glorot, spatial_jet, MlpArch};
    use super::*;

    fn points(n: usize, dim: usize) -> Vec<f64> {
        (0..n * dim).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.3).collect()
    }

    #[test]
    fn batch_matches_pointwise_jet() {
        for dim in 1..=3 {
            let p = init_glorot(MlpArch::new(dim, 1, 3, 9).unwrap(), 11).unwrap();
            let pts = points(17, dim);
            let out = forward_batch(&p, &pts, JetOrder::Laplacian);
            for (q, x) in pts.chunks(dim).enumerate() {
                let jet = spatial_jet(&p, x);
                assert!((out.value(0)[q] - forward(&p, x)[0]).abs() < 1e-13);
                for i in 0..dim {
                    assert!((out.grad(0, i)[q] - jet.grad(0)[i]).abs() < 1e-12);
                    assert!((out.second(0, i)[q] - jet.hess(0, i, i)).abs() < 1e-12);
                }
            }
            let g = forward_batch(&p, &pts, JetOrder::Gradient);
            assert_eq!(g.grad(0, dim - 1), out.grad(0, dim - 1));
        }
    }

    /// Finite-difference check of the reverse pass on `sum_c sum_p r_c * out_c`.
    #[test]
    fn reverse_pass_matches_finite_differences() {
        for order in [JetOrder::Value, JetOrder::Gradient, JetOrder::Laplacian] {
            let dim = 2;
            let mut p = init_glorot(MlpArch::new(dim, 1, 2, 6).unwrap(), 5).unwrap();
            let pts = points(9, dim);
            let (out, tape) = forward_with_tape(&p, &pts, order);
            let mut adj = BatchOutputs::zeros_like(&out);
            for (k, v) in adj.data.iter_mut().enumerate() {
                *v = ((k * 37) % 11) as f64 / 11.0 - 0.5;
            }
            let weights = adj.data.clone();
            let mut grad = vec![0.0; p.len()];
            backward(&p, &tape, &adj, &mut grad);
            let objective = |p: &MlpParams| -> f64 {
                let o = forward_batch(p, &pts, order);
                o.data.iter().zip(&weights).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            for k in 0..p.len() {
                let orig = p.values()[k];
                p.values_mut()[k] = orig + h;
                let fp = objective(&p);
                p.values_mut()[k] = orig - h;
                let fm = objective(&p);
                p.values_mut()[k] = orig;
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - grad[k]).abs() <= 1e-6 * grad[k].abs().max(1.0),
                    "{order:?} param {k}: fd {fd} vs {}",
                    grad[k]
                );
            }
        }
    }
}
