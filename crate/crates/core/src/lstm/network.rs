//! Two stacked LSTM layers and a dense head, with exact backpropagation
//! through time over a batch of sequences.
//!
//! Gate blocks are laid out as (input, forget, candidate, output) along the
//! `4H` dimension of every weight matrix. Batches are row-major: one row per
//! sequence.

use super::{LstmError, Result, Topology};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `tanh` through one `exp`; libm's `tanh` is about three times slower and
/// dominates the forward pass. Agrees with it to a few ulps of 1.
fn tanh(x: f64) -> f64 {
    2.0 * sigmoid(2.0 * x) - 1.0
}

/// Weights of one LSTM layer with input size `I` and hidden size `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerWeights {
    /// `4H × I`
    pub w_input: Array2<f64>,
    /// `4H × H`
    pub w_recurrent: Array2<f64>,
    /// `4H`
    pub bias: Array1<f64>,
}

impl LstmLayerWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Array2::zeros((4 * hidden, input)),
            w_recurrent: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    /// Glorot-uniform input and recurrent matrices, zero biases except a
    /// forget-gate bias of 1.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut w = Self::zeros(input, hidden);
        let lim_in = (6.0 / (input + 4 * hidden) as f64).sqrt();
        let lim_rec = (6.0 / (hidden + 4 * hidden) as f64).sqrt();
        w.w_input.mapv_inplace(|_| rng.random_range(-lim_in..lim_in));
        w.w_recurrent.mapv_inplace(|_| rng.random_range(-lim_rec..lim_rec));
        w.bias.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        w
    }

    pub fn input_size(&self) -> usize {
        self.w_input.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_recurrent.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.w_input.len() + self.w_recurrent.len() + self.bias.len()
    }
}

/// Fully connected output layer, `out × H`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseWeights {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseWeights {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut d = Self::zeros(input, output);
        let lim = (6.0 / (input + output) as f64).sqrt();
        d.weight.mapv_inplace(|_| rng.random_range(-lim..lim));
        d
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Single LSTM step on unbatched vectors.
pub fn lstm_cell_forward(
    x: ArrayView1<f64>,
    h: ArrayView1<f64>,
    c: ArrayView1<f64>,
    w: &LstmLayerWeights,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let hidden = w.hidden_size();
    if x.len() != w.input_size() || h.len() != hidden || c.len() != hidden {
        return Err(LstmError::Shape(format!(
            "cell expects x:{} h,c:{hidden}, got {} {} {}",
            w.input_size(),
            x.len(),
            h.len(),
            c.len()
        )));
    }
    if x.iter().chain(h.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
        return Err(LstmError::NonFinite { timestep: 0 });
    }
    let z = w.w_input.dot(&x) + w.w_recurrent.dot(&h) + &w.bias;
    let mut h_new = Array1::zeros(hidden);
    let mut c_new = Array1::zeros(hidden);
    for j in 0..hidden {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[hidden + j]);
        let g = tanh(z[2 * hidden + j]);
        let o = sigmoid(z[3 * hidden + j]);
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * tanh(c_new[j]);
    }
    Ok((h_new, c_new))
}

/// Per-sequence dropout rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutRates {
    pub layer1_input: f64,
    pub layer1_recurrent: f64,
    pub layer2_input: f64,
    pub layer2_recurrent: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        Self {
            layer1_input: 0.10,
            layer1_recurrent: 0.10,
            layer2_input: 0.05,
            layer2_recurrent: 0.05,
        }
    }
}

impl DropoutRates {
    pub const NONE: Self = Self {
        layer1_input: 0.0,
        layer1_recurrent: 0.0,
        layer2_input: 0.0,
        layer2_recurrent: 0.0,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [
            self.layer1_input,
            self.layer1_recurrent,
            self.layer2_input,
            self.layer2_recurrent,
        ]
    }
}

/// Inverted dropout masks, one row per sequence, shared by every timestep
/// and every gate. Entries are 0 or `1 / (1 - p)`; `None` means no dropout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DropoutMasks {
    pub layer1_input: Option<Array2<f64>>,
    pub layer1_recurrent: Option<Array2<f64>>,
    pub layer2_input: Option<Array2<f64>>,
    pub layer2_recurrent: Option<Array2<f64>>,
}

fn sample_mask<R: Rng + ?Sized>(rate: f64, rows: usize, cols: usize, rng: &mut R) -> Option<Array2<f64>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    }))
}

impl DropoutMasks {
    pub const NONE: Self = Self {
        layer1_input: None,
        layer1_recurrent: None,
        layer2_input: None,
        layer2_recurrent: None,
    };

    pub fn sample<R: Rng + ?Sized>(rates: &DropoutRates, batch: usize, topo: &Topology, rng: &mut R) -> Self {
        Self {
            layer1_input: sample_mask(rates.layer1_input, batch, topo.input, rng),
            layer1_recurrent: sample_mask(rates.layer1_recurrent, batch, topo.hidden1, rng),
            layer2_input: sample_mask(rates.layer2_input, batch, topo.hidden1, rng),
            layer2_recurrent: sample_mask(rates.layer2_recurrent, batch, topo.hidden2, rng),
        }
    }
}

/// Forward activations of one layer kept for the backward pass.
struct LayerTrace {
    /// Masked inputs per timestep, `B × I`.
    xm: Vec<Array2<f64>>,
    /// Masked previous hidden state per timestep, `B × H`.
    hm: Vec<Array2<f64>>,
    /// Activated gates per timestep, `B × 4H`.
    gates: Vec<Array2<f64>>,
    /// Cell states, `c[0]` is the zero initial state.
    c: Vec<Array2<f64>>,
    tanh_c: Vec<Array2<f64>>,
    /// Unmasked outputs per timestep.
    h: Vec<Array2<f64>>,
}

fn masked(x: ArrayView2<f64>, mask: Option<&Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => &x * m,
        None => x.to_owned(),
    }
}

fn layer_forward(
    w: &LstmLayerWeights,
    inputs: &[ArrayView2<f64>],
    in_mask: Option<&Array2<f64>>,
    rec_mask: Option<&Array2<f64>>,
) -> LayerTrace {
    let steps = inputs.len();
    let batch = inputs.first().map_or(0, |x| x.nrows());
    let hidden = w.hidden_size();
    let mut tr = LayerTrace {
        xm: Vec::with_capacity(steps),
        hm: Vec::with_capacity(steps),
        gates: Vec::with_capacity(steps),
        c: Vec::with_capacity(steps + 1),
        tanh_c: Vec::with_capacity(steps),
        h: Vec::with_capacity(steps),
    };
    tr.c.push(Array2::zeros((batch, hidden)));
    let mut h_prev = Array2::<f64>::zeros((batch, hidden));
    for x in inputs {
        let xm = masked(x.view(), in_mask);
        let hm = masked(h_prev.view(), rec_mask);
        let mut z = Array2::<f64>::zeros((batch, 4 * hidden));
        general_mat_mul(1.0, &xm, &w.w_input.t(), 0.0, &mut z);
        general_mat_mul(1.0, &hm, &w.w_recurrent.t(), 1.0, &mut z);

        let c_prev = tr.c.last().expect("initial state");
        let mut c = Array2::<f64>::zeros((batch, hidden));
        let mut tc = Array2::<f64>::zeros((batch, hidden));
        let mut h = Array2::<f64>::zeros((batch, hidden));
        let bias = w.bias.as_slice().expect("contiguous bias");
        for b in 0..batch {
            let zr = z.row_mut(b).into_slice().expect("contiguous row");
            for (v, bb) in zr.iter_mut().zip(bias) {
                *v += bb;
            }
            for j in 0..hidden {
                zr[j] = sigmoid(zr[j]);
                zr[hidden + j] = sigmoid(zr[hidden + j]);
                zr[2 * hidden + j] = tanh(zr[2 * hidden + j]);
                zr[3 * hidden + j] = sigmoid(zr[3 * hidden + j]);
                let cv = zr[hidden + j] * c_prev[[b, j]] + zr[j] * zr[2 * hidden + j];
                let t = tanh(cv);
                c[[b, j]] = cv;
                tc[[b, j]] = t;
                h[[b, j]] = zr[3 * hidden + j] * t;
            }
        }
        h_prev = h.clone();
        tr.xm.push(xm);
        tr.hm.push(hm);
        tr.gates.push(z);
        tr.c.push(c);
        tr.tanh_c.push(tc);
        tr.h.push(h);
    }
    tr
}

/// Backpropagates through one layer. `dh_ext[t]` is the loss gradient
/// arriving at the layer output at step `t`. Returns the gradient with
/// respect to the unmasked layer inputs when `want_dx` is set.
fn layer_backward(
    w: &LstmLayerWeights,
    tr: &LayerTrace,
    dh_ext: &[Option<Array2<f64>>],
    in_mask: Option<&Array2<f64>>,
    rec_mask: Option<&Array2<f64>>,
    grad: &mut LstmLayerWeights,
    want_dx: bool,
) -> Vec<Array2<f64>> {
    let steps = tr.h.len();
    let batch = tr.c[0].nrows();
    let hidden = w.hidden_size();
    let mut dh_next = Array2::<f64>::zeros((batch, hidden));
    let mut dc_next = Array2::<f64>::zeros((batch, hidden));
    let mut dxs = vec![Array2::<f64>::zeros((0, 0)); if want_dx { steps } else { 0 }];
    let mut dz = Array2::<f64>::zeros((batch, 4 * hidden));

    for t in (0..steps).rev() {
        let mut dh = dh_next;
        if let Some(ext) = &dh_ext[t] {
            dh += ext;
        }
        let gates = &tr.gates[t];
        let c_prev = &tr.c[t];
        let tc = &tr.tanh_c[t];
        for b in 0..batch {
            let gr = gates.row(b);
            let dzr = dz.row_mut(b).into_slice().expect("contiguous row");
            for j in 0..hidden {
                let (i, f, g, o) = (gr[j], gr[hidden + j], gr[2 * hidden + j], gr[3 * hidden + j]);
                let dhv = dh[[b, j]];
                let tcv = tc[[b, j]];
                let d_o = dhv * tcv;
                let dc = dc_next[[b, j]] + dhv * o * (1.0 - tcv * tcv);
                let di = dc * g;
                let dg = dc * i;
                let df = dc * c_prev[[b, j]];
                dc_next[[b, j]] = dc * f;
                dzr[j] = di * i * (1.0 - i);
                dzr[hidden + j] = df * f * (1.0 - f);
                dzr[2 * hidden + j] = dg * (1.0 - g * g);
                dzr[3 * hidden + j] = d_o * o * (1.0 - o);
            }
        }
        general_mat_mul(1.0, &dz.t(), &tr.xm[t], 1.0, &mut grad.w_input);
        general_mat_mul(1.0, &dz.t(), &tr.hm[t], 1.0, &mut grad.w_recurrent);
        grad.bias += &dz.sum_axis(Axis(0));

        let mut dhm = Array2::<f64>::zeros((batch, hidden));
        general_mat_mul(1.0, &dz, &w.w_recurrent, 0.0, &mut dhm);
        if let Some(m) = rec_mask {
            dhm *= m;
        }
        dh_next = dhm;

        if want_dx {
            let mut dx = Array2::<f64>::zeros((batch, w.input_size()));
            general_mat_mul(1.0, &dz, &w.w_input, 0.0, &mut dx);
            if let Some(m) = in_mask {
                dx *= m;
            }
            dxs[t] = dx;
        }
    }
    dxs
}

/// Whether dropout is active for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Infer,
    Train(DropoutRates),
}

/// Trainable parameters of the stacked network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layer1: LstmLayerWeights,
    pub layer2: LstmLayerWeights,
    pub head: DenseWeights,
}

struct BatchTrace {
    l1: LayerTrace,
    l2: LayerTrace,
    output: Array2<f64>,
}

impl Network {
    pub fn zeros(topo: &Topology) -> Self {
        Self {
            layer1: LstmLayerWeights::zeros(topo.input, topo.hidden1),
            layer2: LstmLayerWeights::zeros(topo.hidden1, topo.hidden2),
            head: DenseWeights::zeros(topo.hidden2, topo.horizon),
        }
    }

    pub fn init<R: Rng + ?Sized>(topo: &Topology, rng: &mut R) -> Self {
        Self {
            layer1: LstmLayerWeights::init(topo.input, topo.hidden1, rng),
            layer2: LstmLayerWeights::init(topo.hidden1, topo.hidden2, rng),
            head: DenseWeights::init(topo.hidden2, topo.horizon, rng),
        }
    }

    pub fn topology(&self, timesteps: usize) -> Topology {
        Topology {
            input: self.layer1.input_size(),
            hidden1: self.layer1.hidden_size(),
            hidden2: self.layer2.hidden_size(),
            horizon: self.head.bias.len(),
            timesteps,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer1.param_count() + self.layer2.param_count() + self.head.param_count()
    }

    /// Parameter tensors in storage order.
    pub fn tensors(&self) -> [&[f64]; 8] {
        fn sl<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        [
            sl(&self.layer1.w_input),
            sl(&self.layer1.w_recurrent),
            sl(&self.layer1.bias),
            sl(&self.layer2.w_input),
            sl(&self.layer2.w_recurrent),
            sl(&self.layer2.bias),
            sl(&self.head.weight),
            sl(&self.head.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        fn sl<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let Network { layer1, layer2, head } = self;
        [
            sl(&mut layer1.w_input),
            sl(&mut layer1.w_recurrent),
            sl(&mut layer1.bias),
            sl(&mut layer2.w_input),
            sl(&mut layer2.w_recurrent),
            sl(&mut layer2.bias),
            sl(&mut head.weight),
            sl(&mut head.bias),
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layer1: LstmLayerWeights::zeros(self.layer1.input_size(), self.layer1.hidden_size()),
            layer2: LstmLayerWeights::zeros(self.layer2.input_size(), self.layer2.hidden_size()),
            head: DenseWeights::zeros(self.head.weight.ncols(), self.head.weight.nrows()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_batch(&self, x: &ArrayView3<f64>) -> Result<()> {
        if x.shape()[2] != self.layer1.input_size() {
            return Err(LstmError::Shape(format!(
                "expected {} features per timestep, got {}",
                self.layer1.input_size(),
                x.shape()[2]
            )));
        }
        Ok(())
    }

    fn run(&self, x: ArrayView3<f64>, masks: &DropoutMasks) -> BatchTrace {
        let steps = x.shape()[1];
        let inputs: Vec<_> = (0..steps).map(|t| x.slice(s![.., t, ..])).collect();
        let l1 = layer_forward(
            &self.layer1,
            &inputs,
            masks.layer1_input.as_ref(),
            masks.layer1_recurrent.as_ref(),
        );
        let inputs2: Vec<_> = l1.h.iter().map(|h| h.view()).collect();
        let l2 = layer_forward(
            &self.layer2,
            &inputs2,
            masks.layer2_input.as_ref(),
            masks.layer2_recurrent.as_ref(),
        );
        let last = l2.h.last().expect("at least one timestep");
        let mut output = Array2::<f64>::zeros((x.shape()[0], self.head.bias.len()));
        general_mat_mul(1.0, last, &self.head.weight.t(), 0.0, &mut output);
        output += &self.head.bias;
        BatchTrace { l1, l2, output }
    }

    /// Batched forward pass with explicit masks; returns `B × horizon`.
    pub fn forward_batch(&self, x: ArrayView3<f64>, masks: &DropoutMasks) -> Result<Array2<f64>> {
        self.check_batch(&x)?;
        if x.shape()[1] == 0 {
            return Err(LstmError::Shape("empty sequence".into()));
        }
        let tr = self.run(x, masks);
        for (t, h) in tr.l1.h.iter().zip(&tr.l2.h).enumerate() {
            if h.0.iter().chain(h.1.iter()).any(|v| !v.is_finite()) {
                return Err(LstmError::NonFinite { timestep: t });
            }
        }
        if tr.output.iter().any(|v| !v.is_finite()) {
            return Err(LstmError::NonFinite { timestep: x.shape()[1] - 1 });
        }
        Ok(tr.output)
    }

    /// One sequence (`timesteps × features`) to `horizon` outputs.
    pub fn forward<R: Rng + ?Sized>(&self, window: ArrayView2<f64>, mode: Mode, rng: &mut R) -> Result<Array1<f64>> {
        let x = window.insert_axis(Axis(0));
        let masks = match mode {
            Mode::Infer => DropoutMasks::NONE,
            Mode::Train(rates) => DropoutMasks::sample(&rates, 1, &self.topology(window.nrows()), rng),
        };
        Ok(self.forward_batch(x, &masks)?.row(0).to_owned())
    }

    /// Deterministic inference on one window.
    pub fn predict(&self, window: ArrayView2<f64>) -> Result<Array1<f64>> {
        let x = window.insert_axis(Axis(0));
        Ok(self.forward_batch(x, &DropoutMasks::NONE)?.row(0).to_owned())
    }

    /// Mean absolute error of a batch under fixed masks.
    pub fn batch_loss(&self, x: ArrayView3<f64>, y: ArrayView2<f64>, masks: &DropoutMasks) -> f64 {
        let tr = self.run(x, masks);
        (&tr.output - &y).mapv(f64::abs).mean().unwrap_or(0.0)
    }

    /// Loss and exact gradients of the batch-mean MAE under fixed masks.
    /// The subgradient of `|0|` is taken as 0.
    pub fn loss_and_gradients(
        &self,
        x: ArrayView3<f64>,
        y: ArrayView2<f64>,
        masks: &DropoutMasks,
    ) -> Result<(f64, Network)> {
        self.check_batch(&x)?;
        let (batch, steps) = (x.shape()[0], x.shape()[1]);
        if y.dim() != (batch, self.head.bias.len()) {
            return Err(LstmError::Shape(format!(
                "target is {:?}, expected ({batch}, {})",
                y.dim(),
                self.head.bias.len()
            )));
        }
        let tr = self.run(x, masks);
        let diff = &tr.output - &y;
        let loss = diff.mapv(f64::abs).mean().unwrap_or(0.0);
        let scale = 1.0 / (batch * self.head.bias.len()) as f64;
        let d_out = diff.mapv(|d| {
            if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            }
        });

        let mut grad = self.zeros_like();
        let last = tr.l2.h.last().expect("at least one timestep");
        general_mat_mul(1.0, &d_out.t(), last, 0.0, &mut grad.head.weight);
        grad.head.bias = d_out.sum_axis(Axis(0));
        let mut dh_last = Array2::<f64>::zeros((batch, self.layer2.hidden_size()));
        general_mat_mul(1.0, &d_out, &self.head.weight, 0.0, &mut dh_last);

        let mut dh2: Vec<Option<Array2<f64>>> = vec![None; steps];
        dh2[steps - 1] = Some(dh_last);
        let dx2 = layer_backward(
            &self.layer2,
            &tr.l2,
            &dh2,
            masks.layer2_input.as_ref(),
            masks.layer2_recurrent.as_ref(),
            &mut grad.layer2,
            true,
        );
        let dh1: Vec<Option<Array2<f64>>> = dx2.into_iter().map(Some).collect();
        layer_backward(
            &self.layer1,
            &tr.l1,
            &dh1,
            masks.layer1_input.as_ref(),
            masks.layer1_recurrent.as_ref(),
            &mut grad.layer1,
            false,
        );
        Ok((loss, grad))
    }
}

/// Mean absolute componentwise difference.
pub fn mae_loss(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "mae_loss needs equal lengths");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}
