//! The multi-task HFL network: `nf` head networks over dense rows, one
//! embedding network over the flattened sparse tensor, and one prediction
//! network over `[head predictions; embedding]`.
//!
//! Each head is trained on its own squared error against the label; the
//! embedding and prediction networks are trained on the final squared error.
//! By default the head predictions are detached at the prediction-network
//! input, so the final loss never reaches the heads.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{
    adam_step, Activation, AdamConfig, AdamState, ByteReader, Gradients, LayerSpec, MlpWeights,
    Tape,
};
use crate::sparse_ts::SampleWindow;

const CHECKPOINT_MAGIC: &[u8; 5] = b"FSCK1";

use Activation::{LeakyRelu as Lrelu, None as Linear, Sigmoid};

pub fn head_specs(w: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(w, 16, Sigmoid),
        LayerSpec::new(16, 256, Sigmoid),
        LayerSpec::new(256, 64, Lrelu),
        LayerSpec::new(64, 16, Lrelu),
        LayerSpec::new(16, 1, Linear),
    ]
}

pub fn embedding_specs(nf: usize, w: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(nf * w, 16, Sigmoid),
        LayerSpec::new(16, 256, Sigmoid),
        LayerSpec::new(256, 64, Lrelu),
        LayerSpec::new(64, 16, Lrelu),
        LayerSpec::new(16, w, Linear),
    ]
}

pub fn prediction_specs(nf: usize, w: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(nf + w, 32, Sigmoid),
        LayerSpec::new(32, 256, Sigmoid),
        LayerSpec::new(256, 16, Lrelu),
        LayerSpec::new(16, 1, Lrelu),
        LayerSpec::new(1, 1, Linear),
    ]
}

/// Four-layer baseline (64, 1024, 64, 1) over the flattened dense tensor.
pub fn dnn_specs(nf: usize, w: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(nf * w, 64, Lrelu),
        LayerSpec::new(64, 1024, Lrelu),
        LayerSpec::new(1024, 64, Lrelu),
        LayerSpec::new(64, 1, Linear),
    ]
}

fn spec_params(specs: &[LayerSpec]) -> usize {
    specs.iter().map(|s| s.out_dim * s.in_dim + s.out_dim).sum()
}

pub fn hfl_param_count(nf: usize, w: usize) -> usize {
    nf * spec_params(&head_specs(w))
        + spec_params(&embedding_specs(nf, w))
        + spec_params(&prediction_specs(nf, w))
}

pub fn dnn_param_count(nf: usize, w: usize) -> usize {
    spec_params(&dnn_specs(nf, w))
}

/// Mean squared errors of each head and of the final prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub head: Vec<f64>,
    pub final_mse: f64,
}

/// Which loss terms contribute to a gradient computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerms {
    All,
    HeadsOnly,
    FinalOnly,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub preliminary: Vec<f64>,
    pub embedded: Vec<f64>,
    pub prediction: f64,
    pub head_tapes: Vec<Tape>,
    pub embedding_tape: Tape,
    pub prediction_tape: Tape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradients {
    pub heads: Vec<Gradients>,
    pub embedding: Gradients,
    pub prediction: Gradients,
}

/// Anything the experiment harness can train under the batch protocol.
pub trait Regressor: Clone {
    fn predict_window(&self, window: &SampleWindow) -> Result<f64>;

    fn train_batch(&mut self, batch: &[SampleWindow]) -> Result<Losses>;

    fn evaluate(&self, windows: &[SampleWindow]) -> Result<Losses>;

    fn param_count(&self) -> usize;

    /// SHA-256 over the serialized weights.
    fn digest(&self) -> String;
}

#[derive(Clone, Debug, PartialEq)]
pub struct HflModel {
    nf: usize,
    w: usize,
    pub heads: Vec<MlpWeights>,
    pub embedding: MlpWeights,
    pub prediction: MlpWeights,
    head_opt: Vec<AdamState>,
    embedding_opt: AdamState,
    prediction_opt: AdamState,
    /// Let the final loss backpropagate into the heads.
    pub joint_grads: bool,
}

impl HflModel {
    pub fn new(nf: usize, w: usize, adam: AdamConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let heads = (0..nf)
            .map(|_| MlpWeights::init_with_rng(&head_specs(w), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let embedding = MlpWeights::init_with_rng(&embedding_specs(nf, w), &mut rng)?;
        let prediction = MlpWeights::init_with_rng(&prediction_specs(nf, w), &mut rng)?;
        Self::from_parts(heads, embedding, prediction, adam)
    }

    pub fn from_parts(
        heads: Vec<MlpWeights>,
        embedding: MlpWeights,
        prediction: MlpWeights,
        adam: AdamConfig,
    ) -> Result<Self> {
        let nf = heads.len();
        let w = embedding.out_dim();
        if nf == 0 || w == 0 {
            return Err(Error::Dimension("model needs at least one head and w >= 1".into()));
        }
        let head_shape = heads[0].specs();
        if head_shape.first().map(|s| s.in_dim) != Some(w) || heads[0].out_dim() != 1 {
            return Err(Error::Dimension(format!("head must map {w} -> 1")));
        }
        if heads.iter().any(|h| h.specs() != head_shape) {
            return Err(Error::Dimension("all heads must share one shape".into()));
        }
        if embedding.in_dim() != nf * w {
            return Err(Error::Dimension(format!(
                "embedding input {} != nf*w {}",
                embedding.in_dim(),
                nf * w
            )));
        }
        if prediction.in_dim() != nf + w || prediction.out_dim() != 1 {
            return Err(Error::Dimension(format!(
                "prediction must map {} -> 1",
                nf + w
            )));
        }
        for net in heads.iter().chain([&embedding, &prediction]) {
            net.validate()?;
        }
        Ok(Self {
            nf,
            w,
            head_opt: heads.iter().map(|h| AdamState::new(h, adam)).collect(),
            embedding_opt: AdamState::new(&embedding, adam),
            prediction_opt: AdamState::new(&prediction, adam),
            heads,
            embedding,
            prediction,
            joint_grads: false,
        })
    }

    pub fn nf(&self) -> usize {
        self.nf
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        for opt in self
            .head_opt
            .iter_mut()
            .chain([&mut self.embedding_opt, &mut self.prediction_opt])
        {
            opt.config.lr = lr;
        }
    }

    /// Number of optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.prediction_opt.t
    }

    fn check_window(&self, window: &SampleWindow) -> Result<()> {
        if window.nf() != self.nf || window.w() != self.w {
            return Err(Error::Dimension(format!(
                "window is {}x{}, model expects {}x{}",
                window.nf(),
                window.w(),
                self.nf,
                self.w
            )));
        }
        Ok(())
    }

    pub fn head_forward(&self, i: usize, dense_row: &[f64]) -> Result<f64> {
        let head = self.heads.get(i).ok_or_else(|| {
            Error::Dimension(format!("head index {i} out of range 0..{}", self.nf))
        })?;
        Ok(head.predict(dense_row)?[0])
    }

    pub fn full_forward(&self, window: &SampleWindow) -> Result<ForwardTrace> {
        self.check_window(window)?;
        let mut preliminary = Vec::with_capacity(self.nf);
        let mut head_tapes = Vec::with_capacity(self.nf);
        for (i, head) in self.heads.iter().enumerate() {
            let (out, tape) = head.forward(window.dense.row(i))?;
            preliminary.push(out[0]);
            head_tapes.push(tape);
        }
        let (embedded, embedding_tape) = self.embedding.forward(window.sparse.as_slice())?;
        let mut joined = preliminary.clone();
        joined.extend_from_slice(&embedded);
        let (out, prediction_tape) = self.prediction.forward(&joined)?;
        Ok(ForwardTrace {
            preliminary,
            embedded,
            prediction: out[0],
            head_tapes,
            embedding_tape,
            prediction_tape,
        })
    }

    /// Batch-mean gradients of the selected loss terms, plus the losses.
    pub fn gradients(
        &self,
        batch: &[SampleWindow],
        terms: LossTerms,
    ) -> Result<(ModelGradients, Losses)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut grads = ModelGradients {
            heads: self.heads.iter().map(Gradients::zeros_like).collect(),
            embedding: Gradients::zeros_like(&self.embedding),
            prediction: Gradients::zeros_like(&self.prediction),
        };
        let mut losses = Losses {
            head: vec![0.0; self.nf],
            final_mse: 0.0,
        };
        let scale = 1.0 / batch.len() as f64;
        let use_heads = terms != LossTerms::FinalOnly;
        let use_final = terms != LossTerms::HeadsOnly;

        for window in batch {
            let trace = self.full_forward(window)?;
            let y = window.label;
            for i in 0..self.nf {
                let r = trace.preliminary[i] - y;
                losses.head[i] += r * r * scale;
                if use_heads {
                    self.heads[i].backward_into(
                        &trace.head_tapes[i],
                        &[2.0 * r * scale],
                        &mut grads.heads[i],
                    )?;
                }
            }
            let r = trace.prediction - y;
            losses.final_mse += r * r * scale;
            if use_final {
                let input_grad = self.prediction.backward_into(
                    &trace.prediction_tape,
                    &[2.0 * r * scale],
                    &mut grads.prediction,
                )?;
                self.embedding.backward_into(
                    &trace.embedding_tape,
                    &input_grad[self.nf..],
                    &mut grads.embedding,
                )?;
                if self.joint_grads {
                    for i in 0..self.nf {
                        self.heads[i].backward_into(
                            &trace.head_tapes[i],
                            &input_grad[i..=i],
                            &mut grads.heads[i],
                        )?;
                    }
                }
            }
        }
        if !losses.final_mse.is_finite() || losses.head.iter().any(|l| !l.is_finite()) {
            return Err(Error::Diverged(format!("non-finite loss {losses:?}")));
        }
        Ok((grads, losses))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, config_echo: &str) -> Result<()> {
        std::fs::write(path, self.to_checkpoint(config_echo))?;
        Ok(())
    }

    /// Container of all sub-network `FSNN1` blobs (heads, embedding,
    /// prediction) preceded by a free-form config echo.
    pub fn to_checkpoint(&self, config_echo: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(config_echo.len() as u32).to_le_bytes());
        out.extend_from_slice(config_echo.as_bytes());
        out.extend_from_slice(&(self.nf as u32 + 2).to_le_bytes());
        for net in self.heads.iter().chain([&self.embedding, &self.prediction]) {
            let blob = net.to_bytes();
            out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        out
    }

    /// Returns the model (fresh optimizer state) and the config echo.
    pub fn from_checkpoint(bytes: &[u8], adam: AdamConfig) -> Result<(Self, String)> {
        let mut r = ByteReader::new(bytes);
        if r.take(5)? != CHECKPOINT_MAGIC {
            return Err(Error::Decode("bad FSCK1 magic".into()));
        }
        let n = r.u32()? as usize;
        let echo = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|e| Error::Decode(e.to_string()))?;
        let count = r.u32()? as usize;
        if count < 3 {
            return Err(Error::Decode(format!("checkpoint holds {count} networks")));
        }
        let mut nets = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            nets.push(MlpWeights::from_bytes(r.take(len)?)?);
        }
        if !r.is_empty() {
            return Err(Error::Decode("trailing bytes in checkpoint".into()));
        }
        let prediction = nets.pop().unwrap();
        let embedding = nets.pop().unwrap();
        Ok((Self::from_parts(nets, embedding, prediction, adam)?, echo))
    }
}

fn evaluate_with<F>(windows: &[SampleWindow], nf: usize, mut f: F) -> Result<Losses>
where
    F: FnMut(&SampleWindow, &mut [f64]) -> Result<f64>,
{
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut head = vec![0.0; nf];
    let mut prelim = vec![0.0; nf];
    let mut total = 0.0;
    for win in windows {
        let pred = f(win, &mut prelim)?;
        total += (pred - win.label) * (pred - win.label);
        for (acc, p) in head.iter_mut().zip(&prelim) {
            *acc += (p - win.label) * (p - win.label);
        }
    }
    let n = windows.len() as f64;
    head.iter_mut().for_each(|h| *h /= n);
    Ok(Losses {
        head,
        final_mse: total / n,
    })
}

impl Regressor for HflModel {
    fn predict_window(&self, window: &SampleWindow) -> Result<f64> {
        Ok(self.full_forward(window)?.prediction)
    }

    fn train_batch(&mut self, batch: &[SampleWindow]) -> Result<Losses> {
        let (grads, losses) = self.gradients(batch, LossTerms::All)?;
        let all_finite = grads.heads.iter().all(Gradients::is_finite)
            && grads.embedding.is_finite()
            && grads.prediction.is_finite();
        if !all_finite {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        for ((head, g), opt) in self.heads.iter_mut().zip(&grads.heads).zip(&mut self.head_opt) {
            adam_step(head, g, opt)?;
        }
        adam_step(&mut self.embedding, &grads.embedding, &mut self.embedding_opt)?;
        adam_step(&mut self.prediction, &grads.prediction, &mut self.prediction_opt)?;
        Ok(losses)
    }

    fn evaluate(&self, windows: &[SampleWindow]) -> Result<Losses> {
        for win in windows {
            self.check_window(win)?;
        }
        evaluate_with(windows, self.nf, |win, prelim| {
            for (i, p) in prelim.iter_mut().enumerate() {
                *p = self.heads[i].predict(win.dense.row(i))?[0];
            }
            let mut joined = prelim.to_vec();
            joined.extend(self.embedding.predict(win.sparse.as_slice())?);
            Ok(self.prediction.predict(&joined)?[0])
        })
    }

    fn param_count(&self) -> usize {
        self.heads
            .iter()
            .chain([&self.embedding, &self.prediction])
            .map(MlpWeights::param_count)
            .sum()
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for net in self.heads.iter().chain([&self.embedding, &self.prediction]) {
            h.update(net.to_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fully connected baseline over the flattened dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DnnModel {
    pub net: MlpWeights,
    opt: AdamState,
}

impl DnnModel {
    pub fn new(nf: usize, w: usize, adam: AdamConfig, seed: u64) -> Result<Self> {
        let net = MlpWeights::init(&dnn_specs(nf, w), seed)?;
        let opt = AdamState::new(&net, adam);
        Ok(Self { net, opt })
    }
}

impl Regressor for DnnModel {
    fn predict_window(&self, window: &SampleWindow) -> Result<f64> {
        Ok(self.net.predict(window.dense.as_slice())?[0])
    }

    fn train_batch(&mut self, batch: &[SampleWindow]) -> Result<Losses> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads = Gradients::zeros_like(&self.net);
        let mut loss = 0.0;
        for win in batch {
            let (out, tape) = self.net.forward(win.dense.as_slice())?;
            let r = out[0] - win.label;
            loss += r * r * scale;
            self.net.backward_into(&tape, &[2.0 * r * scale], &mut grads)?;
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged(format!("baseline loss {loss}")));
        }
        adam_step(&mut self.net, &grads, &mut self.opt)?;
        Ok(Losses {
            head: Vec::new(),
            final_mse: loss,
        })
    }

    fn evaluate(&self, windows: &[SampleWindow]) -> Result<Losses> {
        evaluate_with(windows, 0, |win, _| self.predict_window(win))
    }

    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn digest(&self) -> String {
        hex(&Sha256::digest(self.net.to_bytes()))
    }
}
