//! Dropout as approximate Bayesian inference.
//!
//! Every stochastic layer here samples Bernoulli masks with inverted scaling,
//! so a kept unit is multiplied by `1 / (1 - p)` and the expected output
//! equals the deterministic one. Masks are drawn from the tape's random
//! stream only when the tape is marked stochastic; otherwise the layers are
//! plain deterministic functions.

use crate::error::{Error, Result};
use crate::tensor::nn::{affine, glorot, lstm_cell, Linear, LstmParams};
use crate::tensor::{Along, Binary, ParamId, ParamStore, RngStream, Tape, Tensor, Var};

/// Where conv-stack dropout is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// on the activations entering each convolution
    BeforeLayer,
    /// on the pooled output of each block
    AfterMaxPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Avg,
}

/// Per-layer dropout configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesianLayerConfig {
    pub p: f64,
    pub placement: Placement,
    pub mc_active_at_eval: bool,
}

impl BayesianLayerConfig {
    pub fn new(p: f64, placement: Placement) -> Result<Self> {
        check_p(p)?;
        Ok(BayesianLayerConfig {
            p,
            placement,
            mc_active_at_eval: true,
        })
    }
}

/// Dropout rates for every stochastic part of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutSchedule {
    /// one rate per conv block, reused cyclically if the stack is deeper
    pub conv: Vec<f64>,
    pub fc: f64,
    pub lstm_input: f64,
    pub lstm_hidden: f64,
    pub lstm_output: f64,
    pub placement: Placement,
    pub pooling: Pooling,
}

impl Default for DropoutSchedule {
    fn default() -> Self {
        DropoutSchedule {
            conv: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            fc: 0.5,
            lstm_input: 0.3,
            lstm_hidden: 0.3,
            lstm_output: 0.5,
            placement: Placement::AfterMaxPool,
            pooling: Pooling::Max,
        }
    }
}

impl DropoutSchedule {
    /// Every rate set to zero.
    pub fn none() -> Self {
        DropoutSchedule {
            conv: vec![0.0],
            fc: 0.0,
            lstm_input: 0.0,
            lstm_hidden: 0.0,
            lstm_output: 0.0,
            ..Default::default()
        }
    }

    pub fn conv_rate(&self, layer: usize) -> f64 {
        if self.conv.is_empty() {
            0.0
        } else {
            self.conv[layer % self.conv.len()]
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &p in self.conv.iter().chain([
            &self.fc,
            &self.lstm_input,
            &self.lstm_hidden,
            &self.lstm_output,
        ]) {
            check_p(p)?;
        }
        Ok(())
    }
}

fn check_p(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("dropout rate {p} outside [0, 1]")))
    }
}

/// Bernoulli keep-mask with inverted scaling: 0 with probability `p`,
/// otherwise `1 / (1 - p)`. `p = 1` gives all zeros.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if p <= 0.0 {
        vec![1.0; n]
    } else if p >= 1.0 {
        vec![0.0; n]
    } else {
        let scale = 1.0 / (1.0 - p);
        (0..n)
            .map(|_| if rng.bernoulli(p) { 0.0 } else { scale })
            .collect()
    };
    Tensor::new(shape.to_vec(), data).expect("numel matches")
}

/// Applies a fresh mask to `x` when the tape is stochastic and `p > 0`.
/// Returns the masked node and the mask used, if any.
pub fn dropout(t: &mut Tape, x: Var, p: f64) -> Result<(Var, Option<Tensor>)> {
    if !t.stochastic || p <= 0.0 {
        return Ok((x, None));
    }
    let shape = t.shape(x).to_vec();
    let mask = dropout_mask(&shape, p, &mut t.rng);
    let m = t.constant(mask.clone());
    Ok((t.mul(x, m)?, Some(mask)))
}

/// Fully connected layer with input dropout.
#[derive(Debug, Clone, Copy)]
pub struct BayesDense {
    pub linear: Linear,
    pub p: f64,
}

impl BayesDense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        p: f64,
        rng: &mut RngStream,
    ) -> Self {
        BayesDense {
            linear: Linear::new(store, name, input, output, rng),
            p,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let (x, _) = dropout(t, x, self.p)?;
        self.linear.forward(t, x)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    kernels: ParamId,
    bias: ParamId,
    p: f64,
}

/// Stack of `conv 3×3 (pad 1) → relu → 2×2 pool` blocks with dropout.
#[derive(Debug, Clone)]
pub struct ConvStack {
    blocks: Vec<ConvBlock>,
    pub placement: Placement,
    pub pooling: Pooling,
    pub in_channels: usize,
    pub channels: Vec<usize>,
}

impl ConvStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        channels: &[usize],
        schedule: &DropoutSchedule,
        rng: &mut RngStream,
    ) -> Self {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut c_in = in_channels;
        for (i, &c_out) in channels.iter().enumerate() {
            let fan_in = c_in * 9;
            let kernels = store.add(
                format!("{name}.conv{i}.k"),
                glorot(rng, &[c_out, c_in, 3, 3], fan_in, c_out * 9),
            );
            let bias = store.add(format!("{name}.conv{i}.b"), Tensor::zeros(&[c_out]));
            blocks.push(ConvBlock {
                kernels,
                bias,
                p: schedule.conv_rate(i),
            });
            c_in = c_out;
        }
        ConvStack {
            blocks,
            placement: schedule.placement,
            pooling: schedule.pooling,
            in_channels,
            channels: channels.to_vec(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(self.in_channels)
    }

    /// Spatial side of the output grid for a square input of side `size`.
    pub fn out_size(&self, size: usize) -> usize {
        size >> self.blocks.len()
    }

    /// One stochastic draw of the region-feature grid `[c, u, v]`.
    pub fn forward(&self, t: &mut Tape, image: Var) -> Result<Var> {
        let shape = t.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::shape(format!(
                "conv stack expects [{}, h, w], got {shape:?}",
                self.in_channels
            )));
        }
        let mut x = image;
        for b in &self.blocks {
            if self.placement == Placement::BeforeLayer {
                x = dropout(t, x, b.p)?.0;
            }
            let k = t.p(b.kernels);
            let y = t.conv2d(x, k, 1, 1)?;
            let s = t.shape(y).to_vec();
            let flat = t.reshape(y, &[s[0], s[1] * s[2]])?;
            let bias = t.p(b.bias);
            let flat = t.broadcast(Binary::Add, flat, bias, Along::Cols)?;
            let y = t.reshape(flat, &s)?;
            let y = t.relu(y);
            x = match self.pooling {
                Pooling::Max => t.max_pool2d(y, 2)?,
                Pooling::Avg => t.avg_pool2d(y, 2)?,
            };
            if self.placement == Placement::AfterMaxPool {
                x = dropout(t, x, b.p)?.0;
            }
        }
        Ok(x)
    }
}

/// LSTM whose input and hidden-state masks are drawn once per sequence and
/// reused at every step.
#[derive(Debug, Clone, Copy)]
pub struct BayesLstm {
    pub params: LstmParams,
    pub p_input: f64,
    pub p_hidden: f64,
}

/// Result of unrolling a [`BayesLstm`].
#[derive(Debug, Clone)]
pub struct LstmRun {
    pub hidden: Vec<Var>,
    pub cells: Vec<Var>,
    pub input_mask: Option<Tensor>,
    pub hidden_mask: Option<Tensor>,
    /// `(input, hidden)` mask actually multiplied in at each step
    pub step_masks: Vec<(Option<Tensor>, Option<Tensor>)>,
}

impl LstmRun {
    pub fn last(&self) -> Var {
        *self.hidden.last().expect("non-empty sequence")
    }
}

impl BayesLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        schedule: &DropoutSchedule,
        rng: &mut RngStream,
    ) -> Self {
        BayesLstm {
            params: LstmParams::new(store, name, input, hidden, rng),
            p_input: schedule.lstm_input,
            p_hidden: schedule.lstm_hidden,
        }
    }

    /// Unrolls over `xs` (each `[1, input]`) from `h0` (zeros if `None`),
    /// with `c0 = 0`.
    pub fn run(&self, t: &mut Tape, xs: &[Var], h0: Option<Var>) -> Result<LstmRun> {
        if xs.is_empty() {
            return Err(Error::shape("lstm over an empty sequence"));
        }
        let hid = self.params.hidden;
        let h0 = match h0 {
            Some(h) => h,
            None => t.constant(Tensor::zeros(&[1, hid])),
        };
        let c0 = t.constant(Tensor::zeros(&[1, hid]));
        let draw = t.stochastic;
        let input_mask = (draw && self.p_input > 0.0)
            .then(|| dropout_mask(&[1, self.params.input], self.p_input, &mut t.rng));
        let hidden_mask = (draw && self.p_hidden > 0.0)
            .then(|| dropout_mask(&[1, hid], self.p_hidden, &mut t.rng));
        let mx = input_mask.clone().map(|m| t.constant(m));
        let mh = hidden_mask.clone().map(|m| t.constant(m));
        let (w, b) = (t.p(self.params.w), t.p(self.params.b));

        let (mut h, mut c) = (h0, c0);
        let mut run = LstmRun {
            hidden: Vec::with_capacity(xs.len()),
            cells: Vec::with_capacity(xs.len()),
            input_mask: input_mask.clone(),
            hidden_mask: hidden_mask.clone(),
            step_masks: Vec::with_capacity(xs.len()),
        };
        for &x in xs {
            let x = match mx {
                Some(m) => t.mul(x, m)?,
                None => x,
            };
            let hin = match mh {
                Some(m) => t.mul(h, m)?,
                None => h,
            };
            run.step_masks.push((
                mx.map(|m| t.value(m).clone()),
                mh.map(|m| t.value(m).clone()),
            ));
            (h, c) = lstm_cell(t, x, hin, c, w, b)?;
            run.hidden.push(h);
            run.cells.push(c);
        }
        Ok(run)
    }
}

/// Class probabilities and per-class predicted variance from one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct McDraw {
    pub probs: Vec<f64>,
    pub variances: Vec<f64>,
}

/// A model that can be sampled under dropout.
pub trait McModel {
    type Input: ?Sized;
    fn draw(&self, input: &Self::Input, rng: RngStream) -> Result<McDraw>;
}

/// `T` stochastic forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct McSampleSet {
    pub probs: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl McSampleSet {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    /// Monte-Carlo estimate of the predictive distribution.
    pub fn mean_probs(&self) -> Vec<f64> {
        let t = self.len() as f64;
        let mut out = vec![0.0; self.num_classes()];
        for p in &self.probs {
            out.iter_mut().zip(p).for_each(|(o, v)| *o += v / t);
        }
        out
    }
}

/// Draws `t` samples, sample `i` using `rng.substream(i)`.
pub fn predictive_posterior<M: McModel>(
    model: &M,
    input: &M::Input,
    t: usize,
    rng: &RngStream,
) -> Result<McSampleSet> {
    if t == 0 {
        return Err(Error::Usage("predictive posterior needs T >= 1".into()));
    }
    let mut set = McSampleSet {
        probs: Vec::with_capacity(t),
        variances: Vec::with_capacity(t),
    };
    for i in 0..t {
        let d = model.draw(input, rng.substream(i as u64))?;
        set.probs.push(d.probs);
        set.variances.push(d.variances);
    }
    Ok(set)
}

/// `[n, in] → [n, out]` dense layer used by small probes and tests.
pub fn dense_forward(t: &mut Tape, x: Var, w: Var, b: Var, p: f64) -> Result<Var> {
    let (x, _) = dropout(t, x, p)?;
    affine(t, x, w, b)
}
