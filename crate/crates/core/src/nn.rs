//! Small fully connected networks with exact reverse-mode gradients.
//!
//! Every network in the workbench is a stack of dense layers with `tanh`
//! between them and a linear output head. Batches are row-major matrices and
//! the heavy lifting is done by `matrixmultiply`, so a forward/backward pass
//! over a 128-row batch stays cheap on a single core.
//!
//! The module also carries the [`Adam`] optimizer and the soft target blend
//! used for the lagged critic and policy copies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("layer {layer}: expected width {expected}, got {got}")]
    Dimension {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("parameter sets disagree in shape at layer {layer}")]
    Shape { layer: usize },
    #[error("non-finite gradient at layer {layer} {part}[{index}]")]
    NonFinite {
        layer: usize,
        part: &'static str,
        index: usize,
    },
    #[error("blend factor {0} outside (0, 1]")]
    Tau(f64),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Row-major dense matrix; one row per batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// One dense layer. `weight` is `n_out x n_in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weight: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.n_in == other.n_in && self.n_out == other.n_out
    }
}

/// Parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layers: Vec<Layer>,
    seed: u64,
}

/// Gradient of a scalar with respect to every entry of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub layers: Vec<Layer>,
}

/// Activations recorded by a batched forward pass, consumed by
/// [`ParamSet::backward_batch`].
#[derive(Debug, Clone)]
pub struct Tape {
    input: Matrix,
    acts: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("tape of an empty network")
    }

    pub fn input(&self) -> &Matrix {
        &self.input
    }
}

#[allow(clippy::too_many_arguments)]
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
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + usize::from(k > 0));
    debug_assert!(c.len() >= (m - 1) * rsc + (n - 1) * csc + 1);
    // SAFETY: strides and extents are checked against slice lengths above (debug)
    // and by construction of every caller in this module.
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
            csc as isize,
        );
    }
}

impl ParamSet {
    /// Fan-in scaled uniform initialization; a pure function of `(sizes, seed)`.
    ///
    /// `sizes` lists the widths from input to output, e.g. `[40, 64, 64, 2]`.
    pub fn new(sizes: &[usize], seed: u64) -> Self {
        assert!(sizes.len() >= 2, "a network needs at least input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let bound = 1.0 / (n_in as f64).sqrt();
                let mut layer = Layer::zeros(n_in, n_out);
                for x in layer.weight.iter_mut() {
                    *x = rng.gen_range(-bound..bound);
                }
                for x in layer.bias.iter_mut() {
                    *x = rng.gen_range(-bound..bound);
                }
                layer
            })
            .collect();
        Self { layers, seed }
    }

    /// Builds a set from explicit layers; shapes must chain.
    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.n_in * l.n_out || l.bias.len() != l.n_out {
                return Err(NnError::Shape { layer: i });
            }
            if i > 0 && layers[i - 1].n_out != l.n_in {
                return Err(NnError::Dimension {
                    layer: i,
                    expected: l.n_in,
                    got: layers[i - 1].n_out,
                });
            }
        }
        Ok(Self { layers, seed })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out
    }

    /// Layer widths from input to output.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zero_grads(&self) -> GradSet {
        GradSet {
            layers: self.layers.iter().map(|l| Layer::zeros(l.n_in, l.n_out)).collect(),
        }
    }

    /// Single-input forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Matrix {
            rows: 1,
            cols: input.len(),
            data: input.to_vec(),
        };
        let tape = self.forward_batch(x)?;
        Ok(tape.output().data.clone())
    }

    /// Reverse-mode gradients of `<output, output_adjoint>` for a single input.
    /// Returns the parameter gradients and the adjoint of the input.
    pub fn backward(&self, input: &[f64], output_adjoint: &[f64]) -> Result<(GradSet, Vec<f64>)> {
        let x = Matrix {
            rows: 1,
            cols: input.len(),
            data: input.to_vec(),
        };
        let tape = self.forward_batch(x)?;
        let adj = Matrix {
            rows: 1,
            cols: output_adjoint.len(),
            data: output_adjoint.to_vec(),
        };
        let mut grads = self.zero_grads();
        let dx = self.backward_batch(&tape, &adj, &mut grads)?;
        Ok((grads, dx.data))
    }

    pub fn forward_batch(&self, input: Matrix) -> Result<Tape> {
        if input.cols != self.input_dim() {
            return Err(NnError::Dimension {
                layer: 0,
                expected: self.input_dim(),
                got: input.cols,
            });
        }
        let rows = input.rows;
        let last = self.layers.len() - 1;
        let mut acts: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let x = if li == 0 { &input } else { &acts[li - 1] };
            let mut y = Matrix::zeros(rows, layer.n_out);
            for r in 0..rows {
                y.row_mut(r).copy_from_slice(&layer.bias);
            }
            // y += x * W^T
            gemm(
                rows,
                layer.n_in,
                layer.n_out,
                &x.data,
                layer.n_in,
                1,
                &layer.weight,
                1,
                layer.n_in,
                1.0,
                &mut y.data,
                layer.n_out,
                1,
            );
            if li != last {
                y.data.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
        }
        Ok(Tape { input, acts })
    }

    /// Accumulates parameter gradients of `sum_rows <output_row, adjoint_row>`
    /// into `grads` and returns the input adjoint.
    pub fn backward_batch(&self, tape: &Tape, adjoint: &Matrix, grads: &mut GradSet) -> Result<Matrix> {
        let last = self.layers.len() - 1;
        if adjoint.cols != self.output_dim() || adjoint.rows != tape.input.rows {
            return Err(NnError::Dimension {
                layer: last,
                expected: self.output_dim(),
                got: adjoint.cols,
            });
        }
        if grads.layers.len() != self.layers.len() {
            return Err(NnError::Shape { layer: 0 });
        }
        let rows = adjoint.rows;
        let mut delta = adjoint.clone();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let g = &mut grads.layers[li];
            if !layer.same_shape(g) {
                return Err(NnError::Shape { layer: li });
            }
            if li != last {
                // through tanh: d pre = d post * (1 - post^2)
                for (d, y) in delta.data.iter_mut().zip(&tape.acts[li].data) {
                    *d *= 1.0 - y * y;
                }
            }
            let x = if li == 0 { &tape.input } else { &tape.acts[li - 1] };
            // dW += delta^T * x
            gemm(
                layer.n_out,
                rows,
                layer.n_in,
                &delta.data,
                1,
                layer.n_out,
                &x.data,
                layer.n_in,
                1,
                1.0,
                &mut g.weight,
                layer.n_in,
                1,
            );
            for r in 0..rows {
                for (gb, d) in g.bias.iter_mut().zip(delta.row(r)) {
                    *gb += d;
                }
            }
            // dx = delta * W
            let mut dx = Matrix::zeros(rows, layer.n_in);
            gemm(
                rows,
                layer.n_out,
                layer.n_in,
                &delta.data,
                layer.n_out,
                1,
                &layer.weight,
                layer.n_in,
                1,
                0.0,
                &mut dx.data,
                layer.n_in,
                1,
            );
            delta = dx;
        }
        Ok(delta)
    }

    /// Soft target update: `self <- self + tau * (online - self)`.
    ///
    /// `tau == 1` copies exactly and blending a set with itself is the identity.
    pub fn polyak_blend(&mut self, online: &ParamSet, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(NnError::Tau(tau));
        }
        self.check_shape(online)?;
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            if tau == 1.0 {
                t.weight.copy_from_slice(&o.weight);
                t.bias.copy_from_slice(&o.bias);
                continue;
            }
            for (a, b) in t.weight.iter_mut().zip(&o.weight) {
                *a += tau * (b - *a);
            }
            for (a, b) in t.bias.iter_mut().zip(&o.bias) {
                *a += tau * (b - *a);
            }
        }
        Ok(())
    }

    pub fn check_shape(&self, other: &ParamSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(NnError::Shape {
                layer: self.layers.len().min(other.layers.len()),
            });
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if !a.same_shape(b) {
                return Err(NnError::Shape { layer: i });
            }
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// All parameters in layer order (weights then bias per layer).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(NnError::Shape { layer: 0 });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&values[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[at..at + nb]);
            at += nb;
        }
        Ok(())
    }
}

impl GradSet {
    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Inverse of [`GradSet::flatten`]; `false` on a length mismatch.
    pub fn unflatten(&mut self, values: &[f64]) -> bool {
        if values.len() != self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>() {
            return false;
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&values[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[at..at + nb]);
            at += nb;
        }
        true
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn first_non_finite(&self) -> Option<NnError> {
        for (li, l) in self.layers.iter().enumerate() {
            if let Some(index) = l.weight.iter().position(|v| !v.is_finite()) {
                return Some(NnError::NonFinite {
                    layer: li,
                    part: "weight",
                    index,
                });
            }
            if let Some(index) = l.bias.iter().position(|v| !v.is_finite()) {
                return Some(NnError::NonFinite {
                    layer: li,
                    part: "bias",
                    index,
                });
            }
        }
        None
    }
}

/// Adaptive-moment optimizer state for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: GradSet,
    pub v: GradSet,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    /// One descent step. Rejects the whole step if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) -> Result<()> {
        if grads.layers.len() != params.layers.len() {
            return Err(NnError::Shape { layer: 0 });
        }
        for (i, (p, g)) in params.layers.iter().zip(&grads.layers).enumerate() {
            if !p.same_shape(g) {
                return Err(NnError::Shape { layer: i });
            }
        }
        if let Some(e) = grads.first_non_finite() {
            return Err(e);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for li in 0..params.layers.len() {
            let p = &mut params.layers[li];
            let g = &grads.layers[li];
            let m = &mut self.m.layers[li];
            let v = &mut self.v.layers[li];
            let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    p[i] -= lr * mh / (vh.sqrt() + eps);
                }
            };
            update(&mut p.weight, &g.weight, &mut m.weight, &mut v.weight);
            update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
        Ok(())
    }
}
