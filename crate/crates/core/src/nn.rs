//! Dense multilayer perceptrons with hand-written reverse-mode gradients and Adam.
//!
//! Everything is `f64`. A network is an ordered list of affine layers, each
//! followed by an activation. `forward` records a [`Tape`] that `backward`
//! consumes; nothing is shared between calls, so both are pure functions of
//! their arguments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Negative-side slope of the leaky ReLU.
pub const LRELU_SLOPE: f64 = 0.01;

const NN_MAGIC: &[u8; 5] = b"FSNN1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Sigmoid,
    #[serde(rename = "lrelu")]
    LeakyRelu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Sigmoid => 1,
            Activation::LeakyRelu => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::None),
            1 => Ok(Activation::Sigmoid),
            2 => Ok(Activation::LeakyRelu),
            t => Err(Error::Decode(format!("unknown activation tag {t}"))),
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LRELU_SLOPE * x
                }
            }
        }
    }

    /// Derivative given the pre-activation `x` and the activation output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LRELU_SLOPE
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Shape of one layer, used to build fresh networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub const fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Cached per-layer inputs and pre-activations from one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

/// Gradient (or any parameter-shaped buffer) for an [`MlpWeights`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpWeights) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.out_dim(), l.in_dim()),
                        vec![0.0; l.out_dim()],
                    )
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for (w, b) in &mut self.layers {
            w.as_mut_slice().fill(0.0);
            b.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            w.as_mut_slice().iter_mut().for_each(|g| *g *= factor);
            b.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.as_slice().iter().chain(b).all(|g| g.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.as_slice().iter().chain(b))
            .fold(0.0_f64, |m, g| m.max(g.abs()))
    }

    fn same_shape(&self, net: &MlpWeights) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|((w, b), l)| {
                w.rows() == l.out_dim() && w.cols() == l.in_dim() && b.len() == l.out_dim()
            })
    }
}

/// An ordered stack of affine layers with activations.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MlpWeights {
    pub layers: Vec<Layer>,
}

impl MlpWeights {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    /// Uniform in ±1/√fan_in, zero bias, deterministic per seed.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(specs, &mut rng)
    }

    pub fn init_with_rng<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            if spec.in_dim == 0 || spec.out_dim == 0 {
                return Err(Error::Dimension(format!(
                    "zero dimension in layer {}x{}",
                    spec.out_dim, spec.in_dim
                )));
            }
            let bound = 1.0 / (spec.in_dim as f64).sqrt();
            let data = (0..spec.in_dim * spec.out_dim)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            layers.push(Layer {
                weight: Matrix::from_vec(spec.out_dim, spec.in_dim, data)?,
                bias: vec![0.0; spec.out_dim],
                activation: spec.activation,
            });
        }
        Self::new(layers)
    }

    /// Same shapes and activations as `specs`, all parameters zero.
    pub fn zeros(specs: &[LayerSpec]) -> Self {
        Self {
            layers: specs
                .iter()
                .map(|s| Layer {
                    weight: Matrix::zeros(s.out_dim, s.in_dim),
                    bias: vec![0.0; s.out_dim],
                    activation: s.activation,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Dimension(format!(
                    "layer {k}: bias length {} != out dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if k > 0 && self.layers[k - 1].out_dim() != layer.in_dim() {
                return Err(Error::Dimension(format!(
                    "layer {k}: in dim {} does not chain from {}",
                    layer.in_dim(),
                    self.layers[k - 1].out_dim()
                )));
            }
            if !layer
                .weight
                .as_slice()
                .iter()
                .chain(&layer.bias)
                .all(|v| v.is_finite())
            {
                return Err(Error::Dimension(format!("layer {k}: non-finite parameter")));
            }
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec::new(l.in_dim(), l.out_dim(), l.activation))
            .collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.out_dim() * l.in_dim() + l.out_dim())
            .sum()
    }

    pub fn same_shape(&self, other: &MlpWeights) -> bool {
        self.specs() == other.specs()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Dimension("empty network".into()));
        }
        if input.len() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "input length {} != network input {}",
                input.len(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut y = affine(layer, &x);
            y.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            x = y;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input)?;
        let n = self.layers.len();
        let mut tape = Tape {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
        };
        let mut x = input.to_vec();
        for layer in &self.layers {
            let pre = affine(layer, &x);
            let out: Vec<f64> = pre.iter().map(|&v| layer.activation.apply(v)).collect();
            tape.inputs.push(x);
            tape.pre.push(pre);
            x = out.clone();
            tape.outputs.push(out);
        }
        Ok((x, tape))
    }

    pub fn backward(&self, tape: &Tape, output_gradient: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let mut grads = Gradients::zeros_like(self);
        let input_grad = self.backward_into(tape, output_gradient, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward_into(
        &self,
        tape: &Tape,
        output_gradient: &[f64],
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        if tape.pre.len() != self.layers.len()
            || tape
                .pre
                .iter()
                .zip(&self.layers)
                .any(|(p, l)| p.len() != l.out_dim())
        {
            return Err(Error::Dimension("tape does not match network".into()));
        }
        if output_gradient.len() != self.out_dim() {
            return Err(Error::Dimension(format!(
                "output gradient length {} != network output {}",
                output_gradient.len(),
                self.out_dim()
            )));
        }
        if !grads.same_shape(self) {
            return Err(Error::Dimension("gradient buffer does not match network".into()));
        }

        let mut upstream = output_gradient.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let pre = &tape.pre[k];
            let out = &tape.outputs[k];
            let delta: Vec<f64> = upstream
                .iter()
                .zip(pre.iter().zip(out))
                .map(|(g, (&x, &y))| g * layer.activation.derivative(x, y))
                .collect();
            let input = &tape.inputs[k];
            let (gw, gb) = &mut grads.layers[k];
            let cols = layer.in_dim();
            let mut down = vec![0.0; cols];
            for (r, &d) in delta.iter().enumerate() {
                gb[r] += d;
                if d == 0.0 {
                    continue;
                }
                let wrow = layer.weight.row(r);
                let grow = &mut gw.as_mut_slice()[r * cols..(r + 1) * cols];
                for (g, x) in grow.iter_mut().zip(input) {
                    *g += d * x;
                }
                for (dn, w) in down.iter_mut().zip(wrow) {
                    *dn += w * d;
                }
            }
            upstream = down;
        }
        Ok(upstream)
    }

    /// Serializes to the `FSNN1` little-endian blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.param_count() * 8 + self.layers.len() * 9);
        out.extend_from_slice(NN_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
            out.push(layer.activation.tag());
            for v in layer.weight.as_slice().iter().chain(&layer.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(5)? != NN_MAGIC {
            return Err(Error::Decode("bad FSNN1 magic".into()));
        }
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let activation = Activation::from_tag(r.u8()?)?;
            let weights = r.f64s(in_dim * out_dim)?;
            let bias = r.f64s(out_dim)?;
            layers.push(Layer {
                weight: Matrix::from_vec(out_dim, in_dim, weights)?,
                bias,
                activation,
            });
        }
        if !r.is_empty() {
            return Err(Error::Decode("trailing bytes after FSNN1 blob".into()));
        }
        Self::new(layers).map_err(|e| Error::Decode(e.to_string()))
    }
}

#[inline]
fn affine(layer: &Layer, x: &[f64]) -> Vec<f64> {
    (0..layer.out_dim())
        .map(|r| dot(layer.weight.row(r), x) + layer.bias[r])
        .collect()
}

/// Four independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Decode("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Decode("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn mse(prediction: &[f64], target: &[f64]) -> Result<f64> {
    if prediction.len() != target.len() {
        return Err(Error::Dimension(format!(
            "mse length mismatch: {} vs {}",
            prediction.len(),
            target.len()
        )));
    }
    if prediction.is_empty() {
        return Err(Error::Dimension("mse of empty vectors".into()));
    }
    let sum: f64 = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / prediction.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment buffers for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl AdamState {
    pub fn new(net: &MlpWeights, config: AdamConfig) -> Self {
        Self {
            config,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Weights are untouched on error.
pub fn adam_step(weights: &mut MlpWeights, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if !grads.same_shape(weights) || !state.m.same_shape(weights) || !state.v.same_shape(weights) {
        return Err(Error::Dimension("adam: shapes do not align".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);

    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    };

    for (k, layer) in weights.layers.iter_mut().enumerate() {
        let (gw, gb) = &grads.layers[k];
        let (mw, mb) = &mut state.m.layers[k];
        let (vw, vb) = &mut state.v.layers[k];
        update(
            layer.weight.as_mut_slice(),
            gw.as_slice(),
            mw.as_mut_slice(),
            vw.as_mut_slice(),
        );
        update(&mut layer.bias, gb, mb, vb);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_net(w: f64, b: f64, act: Activation) -> MlpWeights {
        MlpWeights::new(vec![Layer {
            weight: Matrix::from_vec(1, 1, vec![w]).unwrap(),
            bias: vec![b],
            activation: act,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = scalar_net(1.0, 0.0, Activation::None);
        assert_eq!(net.forward(&[3.5]).unwrap().0, vec![3.5]);
    }

    #[test]
    fn sigmoid_layer_matches_scalar_formula() {
        let net = scalar_net(2.0, 1.0, Activation::Sigmoid);
        let out = net.forward(&[0.0]).unwrap().0;
        assert!((out[0] - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn zero_lrelu_net_outputs_zero() {
        let net = MlpWeights::zeros(&[
            LayerSpec::new(3, 4, Activation::LeakyRelu),
            LayerSpec::new(4, 2, Activation::LeakyRelu),
        ]);
        assert_eq!(net.predict(&[1.0, -7.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = scalar_net(1.0, 0.0, Activation::None);
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_mse_gradient_matches_hand_derivative() {
        // y_hat = W x + b, loss = (y_hat - y)^2, dL/dW = 2 (y_hat - y) x^T
        let net = MlpWeights::new(vec![Layer {
            weight: Matrix::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap(),
            bias: vec![0.25],
            activation: Activation::None,
        }])
        .unwrap();
        let x = [1.0, 2.0, -0.5];
        let y = 3.0;
        let (out, tape) = net.forward(&x).unwrap();
        let resid = out[0] - y;
        let (grads, input_grad) = net.backward(&tape, &[2.0 * resid]).unwrap();
        let (gw, gb) = &grads.layers[0];
        for c in 0..3 {
            assert!((gw.get(0, c) - 2.0 * resid * x[c]).abs() < 1e-14);
        }
        assert!((gb[0] - 2.0 * resid).abs() < 1e-14);
        assert!((input_grad[1] - 2.0 * resid * -1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let net = MlpWeights::init(
            &[
                LayerSpec::new(3, 5, Activation::Sigmoid),
                LayerSpec::new(5, 1, Activation::None),
            ],
            7,
        )
        .unwrap();
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (grads, _) = net.backward(&tape, &[0.0]).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn backward_rejects_mismatched_tape() {
        let a = MlpWeights::init(&[LayerSpec::new(2, 3, Activation::None)], 1).unwrap();
        let b = MlpWeights::init(&[LayerSpec::new(2, 4, Activation::None)], 1).unwrap();
        let (_, tape) = a.forward(&[1.0, 1.0]).unwrap();
        assert!(b.backward(&tape, &[0.0; 4]).is_err());
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[3.0], &[1.0]).unwrap(), 4.0);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_weights_and_counts_step() {
        let mut net = scalar_net(0.3, -0.2, Activation::None);
        let before = net.clone();
        let mut state = AdamState::new(&net, AdamConfig::default());
        let grads = Gradients::zeros_like(&net);
        adam_step(&mut net, &grads, &mut state).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut net = scalar_net(0.3, -0.2, Activation::None);
        let before = net.clone();
        let mut state = AdamState::new(&net, AdamConfig::default());
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].1[0] = f64::NAN;
        assert!(matches!(
            adam_step(&mut net, &grads, &mut state),
            Err(Error::NonFiniteGradient)
        ));
        assert_eq!(net, before);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let specs = [LayerSpec::new(4, 16, Activation::Sigmoid)];
        let a = MlpWeights::init(&specs, 42).unwrap();
        let b = MlpWeights::init(&specs, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.layers[0].weight.as_slice().iter().all(|w| w.abs() <= 0.5));
        assert!(a.layers[0].bias.iter().all(|&b| b == 0.0));
        assert!(MlpWeights::init(&[LayerSpec::new(0, 3, Activation::None)], 1).is_err());
    }

    #[test]
    fn param_count_cases() {
        let net = MlpWeights::zeros(&[LayerSpec::new(3, 16, Activation::None)]);
        assert_eq!(net.param_count(), 64);
        assert_eq!(MlpWeights::default().param_count(), 0);
    }

    #[test]
    fn fsnn1_round_trip_and_rejects_garbage() {
        let net = MlpWeights::init(
            &[
                LayerSpec::new(3, 4, Activation::Sigmoid),
                LayerSpec::new(4, 1, Activation::LeakyRelu),
            ],
            9,
        )
        .unwrap();
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..5], b"FSNN1");
        assert_eq!(MlpWeights::from_bytes(&bytes).unwrap(), net);
        assert!(MlpWeights::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(MlpWeights::from_bytes(b"FSNN2\0\0\0\0").is_err());
    }
}
