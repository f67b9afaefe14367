//! Fully connected network `f(x; θ)` with smooth hidden activations, trained by Adam.
//!
//! Parameters live in one flat vector: for each layer the weight matrix
//! (`out × in`, column-major) followed by the bias. Inputs and outputs pass
//! through fixed affine standardizations, `x̃ = (x - μ_x) / s_x` and
//! `f = μ_f + s_f ⊙ z`, which are part of the function, so every Jacobian
//! is taken in original coordinates.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CeRegressor;
use crate::error::{check_dim, Error, Result};
use crate::prob::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation value.
    fn derivative_from_value(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpCe {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    input_shift: DVector<f64>,
    input_scale: DVector<f64>,
    output_shift: DVector<f64>,
    output_scale: DVector<f64>,
}

/// Activations of one forward pass, column per sample.
pub struct ForwardTrace {
    /// `layers[0]` is the standardized input, `layers[L]` the raw output `z`.
    layers: Vec<DMatrix<f64>>,
}

impl ForwardTrace {
    /// Network output in original units.
    pub fn output(&self, model: &MlpCe) -> DMatrix<f64> {
        let mut z = self.layers.last().expect("nonempty").clone();
        model.destandardize_output(&mut z);
        z
    }
}

impl MlpCe {
    /// Glorot-uniform weights `U(±√(6 / (fan_in + fan_out)))`, zero biases,
    /// identity standardization. Deterministic in `seed`.
    pub fn init(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer widths {widths:?}")));
        }
        let mut rng = RngStream::new(seed, 0x6d6c70);
        let total: usize = widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        let mut params = Vec::with_capacity(total);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-limit..limit));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        let (din, dout) = (widths[0], *widths.last().expect("nonempty"));
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            params,
            input_shift: DVector::zeros(din),
            input_scale: DVector::from_element(din, 1.0),
            output_shift: DVector::zeros(dout),
            output_scale: DVector::from_element(dout, 1.0),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("nonempty")
    }

    pub fn standardization(&self) -> [&DVector<f64>; 4] {
        [
            &self.input_shift,
            &self.input_scale,
            &self.output_shift,
            &self.output_scale,
        ]
    }

    pub fn set_standardization(
        &mut self,
        input_shift: DVector<f64>,
        input_scale: DVector<f64>,
        output_shift: DVector<f64>,
        output_scale: DVector<f64>,
    ) -> Result<()> {
        check_dim(self.input_dim(), input_shift.len())?;
        check_dim(self.input_dim(), input_scale.len())?;
        check_dim(self.output_dim(), output_shift.len())?;
        check_dim(self.output_dim(), output_scale.len())?;
        if input_scale
            .iter()
            .chain(output_scale.iter())
            .any(|s| !(*s > 0.0) || !s.is_finite())
        {
            return Err(Error::InvalidArgument("standardization scales must be positive".into()));
        }
        self.input_shift = input_shift;
        self.input_scale = input_scale;
        self.output_shift = output_shift;
        self.output_scale = output_scale;
        Ok(())
    }

    /// Sets the standardization to the per-feature mean and standard deviation
    /// of `inputs` (`in × N`) and `targets` (`out × N`). Constant features keep scale 1.
    pub fn standardize_from(&mut self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<()> {
        let stats = |m: &DMatrix<f64>| {
            let mean = m.column_mean();
            let mut scale = DVector::from_element(m.nrows(), 1.0);
            if m.ncols() > 1 {
                for k in 0..m.nrows() {
                    let var = m.row(k).iter().map(|v| (v - mean[k]).powi(2)).sum::<f64>() / (m.ncols() - 1) as f64;
                    let s = var.sqrt();
                    if s > 1e-12 * (1.0 + mean[k].abs()) && s.is_finite() {
                        scale[k] = s;
                    }
                }
            }
            (mean, scale)
        };
        let (mi, si) = stats(inputs);
        let (mo, so) = stats(targets);
        self.set_standardization(mi, si, mo, so)
    }

    fn layer_offsets(&self, layer: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.widths.windows(2).take(layer) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.widths[layer] * self.widths[layer + 1])
    }

    fn weight(&self, layer: usize) -> DMatrixView<'_, f64> {
        let (w_off, _) = self.layer_offsets(layer);
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        DMatrixView::from_slice(&self.params[w_off..w_off + fan_in * fan_out], fan_out, fan_in)
    }

    fn bias(&self, layer: usize) -> &[f64] {
        let (_, b_off) = self.layer_offsets(layer);
        &self.params[b_off..b_off + self.widths[layer + 1]]
    }

    /// Mutable view of the weight block of `layer` (`out × in`).
    pub fn weight_mut(&mut self, layer: usize) -> DMatrixViewMut<'_, f64> {
        let (w_off, _) = self.layer_offsets(layer);
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        DMatrixViewMut::from_slice(&mut self.params[w_off..w_off + fan_in * fan_out], fan_out, fan_in)
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let (_, b_off) = self.layer_offsets(layer);
        let width = self.widths[layer + 1];
        &mut self.params[b_off..b_off + width]
    }

    fn standardize_input(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut s = x.clone();
        for mut col in s.column_iter_mut() {
            for k in 0..col.len() {
                col[k] = (col[k] - self.input_shift[k]) / self.input_scale[k];
            }
        }
        s
    }

    fn destandardize_output(&self, z: &mut DMatrix<f64>) {
        for mut col in z.column_iter_mut() {
            for k in 0..col.len() {
                col[k] = self.output_shift[k] + self.output_scale[k] * col[k];
            }
        }
    }

    /// Forward pass on the columns of `x` (`in × B`), keeping activations.
    pub fn forward_trace(&self, x: &DMatrix<f64>) -> Result<ForwardTrace> {
        check_dim(self.input_dim(), x.nrows())?;
        let mut layers = Vec::with_capacity(self.widths.len());
        layers.push(self.standardize_input(x));
        for l in 0..self.num_layers() {
            let prev = layers.last().expect("nonempty");
            let mut next = self.weight(l) * prev;
            let bias = self.bias(l);
            let last = l + 1 == self.num_layers();
            for mut col in next.column_iter_mut() {
                for k in 0..col.len() {
                    let v = col[k] + bias[k];
                    col[k] = if last { v } else { self.activation.apply(v) };
                }
            }
            layers.push(next);
        }
        Ok(ForwardTrace { layers })
    }

    /// Outputs for the columns of `x` (`in × B`), returned as `out × B`.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_trace(x)?.output(self))
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<DVector<f64>> {
        let out = self.forward(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(out.column(0).into_owned())
    }

    /// Back-propagates `cot_z`, the cotangent of the raw output `z` (`out × B`),
    /// returning the cotangent of the standardized input and, if `grad` is
    /// given, accumulating the parameter gradient into it.
    fn backward(&self, trace: &ForwardTrace, cot_z: DMatrix<f64>, mut grad: Option<&mut [f64]>) -> DMatrix<f64> {
        let mut delta = cot_z;
        for l in (0..self.num_layers()).rev() {
            let input = &trace.layers[l];
            if let Some(g) = grad.as_deref_mut() {
                let (w_off, b_off) = self.layer_offsets(l);
                let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
                let mut gw = DMatrixViewMut::from_slice(&mut g[w_off..w_off + fan_in * fan_out], fan_out, fan_in);
                gw.gemm(1.0, &delta, &input.transpose(), 1.0);
                for (k, gb) in g[b_off..b_off + fan_out].iter_mut().enumerate() {
                    *gb += delta.row(k).sum();
                }
            }
            let mut back = self.weight(l).transpose() * &delta;
            if l > 0 {
                for (v, a) in back.iter_mut().zip(input.iter()) {
                    *v *= self.activation.derivative_from_value(*a);
                }
            }
            delta = back;
        }
        delta
    }

    /// Vector-Jacobian products `vᵢᵀ ∂f/∂x (xᵢ)` for each column pair of
    /// `x` (`in × B`) and `v` (`out × B`); returns `in × B`.
    pub fn input_vjp(&self, x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.output_dim(), v.nrows())?;
        check_dim(x.ncols(), v.ncols())?;
        let trace = self.forward_trace(x)?;
        Ok(self.vjp_from_trace(&trace, v))
    }

    fn vjp_from_trace(&self, trace: &ForwardTrace, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut cot = v.clone();
        for mut col in cot.column_iter_mut() {
            for k in 0..col.len() {
                col[k] *= self.output_scale[k];
            }
        }
        let mut g = self.backward(trace, cot, None);
        for mut col in g.column_iter_mut() {
            for k in 0..col.len() {
                col[k] /= self.input_scale[k];
            }
        }
        g
    }

    /// Full input Jacobian `∂f/∂x` (`out × in`) at one point.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let trace = self.forward_trace(&DMatrix::from_column_slice(x.len(), 1, x))?;
        let mut m = DMatrix::from_diagonal(&self.output_scale);
        for l in (0..self.num_layers()).rev() {
            m *= self.weight(l);
            if l > 0 {
                let a = &trace.layers[l];
                for (k, mut col) in m.column_iter_mut().enumerate() {
                    col *= self.activation.derivative_from_value(a[(k, 0)]);
                }
            }
        }
        for (k, mut col) in m.column_iter_mut().enumerate() {
            col /= self.input_scale[k];
        }
        Ok(m)
    }

    /// Splits the input Jacobian at `(y, d)` into `(∂f/∂y, ∂f/∂d)`, with `y`
    /// occupying the first `y.len()` inputs.
    pub fn input_jacobians(&self, y: &[f64], d: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let mut x = y.to_vec();
        x.extend_from_slice(d);
        let jac = self.input_jacobian(&x)?;
        let jy = jac.columns(0, y.len()).into_owned();
        let jd = jac.columns(y.len(), d.len()).into_owned();
        Ok((jy, jd))
    }

    /// Mean squared error `(1/B) Σ ‖t - f(x)‖²` and, if requested, its gradient
    /// with respect to the parameters.
    pub fn mse_and_gradient(&self, x: &DMatrix<f64>, targets: &DMatrix<f64>, grad: Option<&mut [f64]>) -> Result<f64> {
        check_dim(self.output_dim(), targets.nrows())?;
        check_dim(x.ncols(), targets.ncols())?;
        let trace = self.forward_trace(x)?;
        let out = trace.output(self);
        let resid = targets - out;
        let batch = x.ncols().max(1) as f64;
        let loss = resid.norm_squared() / batch;
        if let Some(g) = grad {
            check_dim(self.num_params(), g.len())?;
            g.iter_mut().for_each(|v| *v = 0.0);
            let mut cot = resid;
            for mut col in cot.column_iter_mut() {
                for k in 0..col.len() {
                    col[k] *= -2.0 * self.output_scale[k] / batch;
                }
            }
            self.backward(&trace, cot, Some(g));
        }
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        let layers = (0..self.num_layers())
            .map(|l| {
                let w = self.weight(l);
                LayerCheckpoint {
                    rows: w.nrows(),
                    cols: w.ncols(),
                    weights_row_major: (0..w.nrows())
                        .flat_map(|i| (0..w.ncols()).map(move |j| (i, j)))
                        .map(|(i, j)| w[(i, j)])
                        .collect(),
                    bias: self.bias(l).to_vec(),
                }
            })
            .collect();
        MlpCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            widths: self.widths.clone(),
            activation: self.activation,
            layers,
            input_shift: self.input_shift.as_slice().to_vec(),
            input_scale: self.input_scale.as_slice().to_vec(),
            output_shift: self.output_shift.as_slice().to_vec(),
            output_scale: self.output_scale.as_slice().to_vec(),
        }
    }

    pub fn from_checkpoint(ck: &MlpCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        let mut model = Self::init(&ck.widths, ck.activation, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.layers.len() != model.num_layers() {
            return Err(Error::Checkpoint("layer count does not match widths".into()));
        }
        for (l, layer) in ck.layers.iter().enumerate() {
            let (fan_in, fan_out) = (model.widths[l], model.widths[l + 1]);
            if layer.rows != fan_out
                || layer.cols != fan_in
                || layer.weights_row_major.len() != fan_in * fan_out
                || layer.bias.len() != fan_out
            {
                return Err(Error::Checkpoint(format!("layer {l} has the wrong shape")));
            }
            let mut w = model.weight_mut(l);
            for i in 0..fan_out {
                for j in 0..fan_in {
                    w[(i, j)] = layer.weights_row_major[i * fan_in + j];
                }
            }
            model.bias_mut(l).copy_from_slice(&layer.bias);
        }
        model
            .set_standardization(
                DVector::from_vec(ck.input_shift.clone()),
                DVector::from_vec(ck.input_scale.clone()),
                DVector::from_vec(ck.output_shift.clone()),
                DVector::from_vec(ck.output_scale.clone()),
            )
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }
}

pub const CHECKPOINT_FORMAT: &str = "pace-mlp-v1";

/// JSON checkpoint. Weights are stored row-major per layer (`rows = out`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub format: String,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<LayerCheckpoint>,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_shift: Vec<f64>,
    pub output_scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCheckpoint {
    pub rows: usize,
    pub cols: usize,
    pub weights_row_major: Vec<f64>,
    pub bias: Vec<f64>,
}

impl CeRegressor for MlpCe {
    fn input_dim(&self) -> usize {
        MlpCe::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        MlpCe::output_dim(self)
    }

    fn predict_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(&x.transpose())?.transpose())
    }
}

/// Adam with the usual defaults `β = (0.9, 0.999)`, `ε = 1e-8`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// One descent step `x ← x - lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(x.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_inputs(dim: usize, count: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = RngStream::new(seed, 1);
        DMatrix::from_fn(dim, count, |_, _| rng.standard_normal())
    }

    fn scaled_model(seed: u64) -> MlpCe {
        let mut m = MlpCe::init(&[4, 12, 9, 3], Activation::Tanh, seed).unwrap();
        m.set_standardization(
            DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]),
            DVector::from_vec(vec![0.5, 2.0, 1.5, 0.8]),
            DVector::from_vec(vec![1.0, -1.0, 0.5]),
            DVector::from_vec(vec![3.0, 0.2, 1.0]),
        )
        .unwrap();
        m
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpCe::init(&[10, 100, 100, 2], Activation::Tanh, 7).unwrap();
        let b = MlpCe::init(&[10, 100, 100, 2], Activation::Tanh, 7).unwrap();
        assert_eq!(a, b);
        let c = MlpCe::init(&[10, 100, 100, 2], Activation::Tanh, 8).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn zero_input_output_is_finite() {
        let m = MlpCe::init(&[10, 100, 100, 2], Activation::Tanh, 1).unwrap();
        assert!(m.forward_one(&[0.0; 10]).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn init_output_scale_is_moderate() {
        let m = MlpCe::init(&[10, 100, 100, 2], Activation::Tanh, 3).unwrap();
        let out = m.forward(&random_inputs(10, 1000, 4)).unwrap();
        for k in 0..2 {
            let row: Vec<f64> = out.row(k).iter().copied().collect();
            let sd = crate::prob::sample_variance(row).sqrt();
            assert!((0.1..=10.0).contains(&sd), "output std {sd}");
        }
    }

    #[test]
    fn identity_network_jacobian_is_weight() {
        let m = MlpCe::init(&[3, 2], Activation::Identity, 5).unwrap();
        let j = m.input_jacobian(&[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(j, m.weight(0).into_owned());
    }

    #[test]
    fn zero_weights_give_zero_jacobian() {
        let mut m = MlpCe::init(&[3, 5, 2], Activation::Tanh, 5).unwrap();
        m.params_mut().iter_mut().for_each(|p| *p = 0.0);
        assert_eq!(m.input_jacobian(&[1.0, 2.0, 3.0]).unwrap().amax(), 0.0);
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let m = scaled_model(11);
        let pts = random_inputs(4, 50, 12);
        let h = 1e-5;
        for c in 0..pts.ncols() {
            let x: Vec<f64> = pts.column(c).iter().copied().collect();
            let jac = m.input_jacobian(&x).unwrap();
            let mut fd = DMatrix::zeros(3, 4);
            for k in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let diff = (m.forward_one(&xp).unwrap() - m.forward_one(&xm).unwrap()) / (2.0 * h);
                fd.set_column(k, &diff);
            }
            assert!((&jac - &fd).norm() < 1e-4 * jac.norm().max(1e-8));
        }
    }

    #[test]
    fn vjp_matches_jacobian() {
        let m = scaled_model(13);
        let x = random_inputs(4, 6, 14);
        let v = random_inputs(3, 6, 15);
        let g = m.input_vjp(&x, &v).unwrap();
        for c in 0..6 {
            let xc: Vec<f64> = x.column(c).iter().copied().collect();
            let jac = m.input_jacobian(&xc).unwrap();
            let expected = jac.transpose() * v.column(c);
            assert!((g.column(c) - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn split_jacobians_are_blocks() {
        let m = scaled_model(16);
        let (jy, jd) = m.input_jacobians(&[0.1, 0.2, 0.3], &[0.4]).unwrap();
        let full = m.input_jacobian(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(jy, full.columns(0, 3).into_owned());
        assert_eq!(jd, full.columns(3, 1).into_owned());
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let m = scaled_model(17);
        let x = random_inputs(4, 7, 18);
        let t = random_inputs(3, 7, 19);
        let mut grad = vec![0.0; m.num_params()];
        m.mse_and_gradient(&x, &t, Some(&mut grad)).unwrap();
        let h = 1e-6;
        for i in (0..m.num_params()).step_by(7) {
            let mut mp = m.clone();
            mp.params_mut()[i] += h;
            let mut mm = m.clone();
            mm.params_mut()[i] -= h;
            let fd =
                (mp.mse_and_gradient(&x, &t, None).unwrap() - mm.mse_and_gradient(&x, &t, None).unwrap()) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = scaled_model(20);
        let json = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back = MlpCe::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(m, back);
        let x = random_inputs(4, 5, 21);
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(2);
        for _ in 0..5000 {
            let g = vec![2.0 * x[0], 8.0 * x[1]];
            adam.step(&mut x, &g, 0.01);
        }
        assert!(x[0].abs() < 1e-3 && x[1].abs() < 1e-3);
        let mut y = vec![1.0];
        Adam::new(1).step(&mut y, &[5.0], 0.1);
        assert_relative_eq!(y[0], 0.9, epsilon = 1e-6);
    }
}
