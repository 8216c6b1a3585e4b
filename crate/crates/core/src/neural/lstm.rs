//! LSTM layers, dense layers and stacked recurrent encoders, with batched
//! forward passes that record what backpropagation through time needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{add_column_sums, fill_rows, gemm, sigmoid, Tensor2};
use crate::error::{Error, Result};

/// Gate blocks, in the order they are packed along the `4·hidden` axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Forget = 0,
    Input = 1,
    Output = 2,
    Candidate = 3,
}

/// Weights of one LSTM layer.
///
/// The four gates are packed side by side: column `gate·hidden + unit` of
/// `w_input` (`input × 4·hidden`) and `w_recurrent` (`hidden × 4·hidden`)
/// feeds `unit` of `gate`, in [`Gate`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_input: Tensor2,
    pub w_recurrent: Tensor2,
    pub bias: Vec<f64>,
}

impl LstmLayerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmLayerParams {
            input_dim,
            hidden_dim,
            w_input: Tensor2::zeros(input_dim, 4 * hidden_dim),
            w_recurrent: Tensor2::zeros(hidden_dim, 4 * hidden_dim),
            bias: vec![0.0; 4 * hidden_dim],
        }
    }

    /// `U(-1/√fan_in, 1/√fan_in)` weights, zero biases.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        LstmLayerParams {
            input_dim,
            hidden_dim,
            w_input: Tensor2::uniform(input_dim, 4 * hidden_dim, 1.0 / (input_dim as f64).sqrt(), rng),
            w_recurrent: Tensor2::uniform(hidden_dim, 4 * hidden_dim, 1.0 / (hidden_dim as f64).sqrt(), rng),
            bias: vec![0.0; 4 * hidden_dim],
        }
    }

    fn col(&self, gate: Gate, unit: usize) -> usize {
        gate as usize * self.hidden_dim + unit
    }

    /// Input weight from `input` to `unit` of `gate`.
    pub fn w(&self, gate: Gate, unit: usize, input: usize) -> f64 {
        self.w_input.get(input, self.col(gate, unit))
    }

    pub fn set_w(&mut self, gate: Gate, unit: usize, input: usize, v: f64) {
        let c = self.col(gate, unit);
        self.w_input.set(input, c, v);
    }

    /// Recurrent weight from hidden unit `from` to `unit` of `gate`.
    pub fn u(&self, gate: Gate, unit: usize, from: usize) -> f64 {
        self.w_recurrent.get(from, self.col(gate, unit))
    }

    pub fn set_u(&mut self, gate: Gate, unit: usize, from: usize, v: f64) {
        let c = self.col(gate, unit);
        self.w_recurrent.set(from, c, v);
    }

    pub fn b(&self, gate: Gate, unit: usize) -> f64 {
        self.bias[self.col(gate, unit)]
    }

    pub fn set_b(&mut self, gate: Gate, unit: usize, v: f64) {
        let c = self.col(gate, unit);
        self.bias[c] = v;
    }

    /// Run the layer over a sequence of `[batch × input]` blocks.
    pub(crate) fn forward_seq(&self, xs: &[Vec<f64>], batch: usize) -> LayerCache {
        let h = self.hidden_dim;
        let g4 = 4 * h;
        let mut cache = LayerCache {
            batch,
            inputs: xs.to_vec(),
            gates: Vec::with_capacity(xs.len()),
            cells: Vec::with_capacity(xs.len()),
            tanh_cells: Vec::with_capacity(xs.len()),
            hidden: Vec::with_capacity(xs.len()),
        };
        let mut h_prev = vec![0.0; batch * h];
        let mut c_prev = vec![0.0; batch * h];
        for x in xs {
            let mut z = vec![0.0; batch * g4];
            fill_rows(&mut z, &self.bias);
            gemm(batch, self.input_dim, g4, x, false, self.w_input.data(), false, 1.0, &mut z);
            gemm(batch, h, g4, &h_prev, false, self.w_recurrent.data(), false, 1.0, &mut z);
            let mut c = vec![0.0; batch * h];
            let mut tc = vec![0.0; batch * h];
            let mut hn = vec![0.0; batch * h];
            for b in 0..batch {
                let zr = &mut z[b * g4..(b + 1) * g4];
                for j in 0..h {
                    let f = sigmoid(zr[j]);
                    let i = sigmoid(zr[h + j]);
                    let o = sigmoid(zr[2 * h + j]);
                    let g = zr[3 * h + j].tanh();
                    zr[j] = f;
                    zr[h + j] = i;
                    zr[2 * h + j] = o;
                    zr[3 * h + j] = g;
                    let cell = f * c_prev[b * h + j] + i * g;
                    let t = cell.tanh();
                    c[b * h + j] = cell;
                    tc[b * h + j] = t;
                    hn[b * h + j] = o * t;
                }
            }
            cache.gates.push(z);
            c_prev.clone_from(&c);
            h_prev.clone_from(&hn);
            cache.cells.push(c);
            cache.tanh_cells.push(tc);
            cache.hidden.push(hn);
        }
        cache
    }

    /// Backpropagation through time. `dh_seq[t]` is the loss gradient flowing
    /// into the hidden output at step `t` from above. Accumulates parameter
    /// gradients into `grads` and returns the gradient for each input block
    /// when `need_dx` is set.
    pub(crate) fn backward_seq(
        &self,
        cache: &LayerCache,
        dh_seq: &[Vec<f64>],
        grads: &mut LstmLayerParams,
        need_dx: bool,
    ) -> Vec<Vec<f64>> {
        let h = self.hidden_dim;
        let g4 = 4 * h;
        let batch = cache.batch;
        let steps = cache.inputs.len();
        let mut dx_seq = vec![Vec::new(); if need_dx { steps } else { 0 }];
        let mut dh_next = vec![0.0; batch * h];
        let mut dc_next = vec![0.0; batch * h];
        let zeros = vec![0.0; batch * h];
        let mut dz = vec![0.0; batch * g4];
        for t in (0..steps).rev() {
            let gates = &cache.gates[t];
            let tc = &cache.tanh_cells[t];
            let c_prev = if t > 0 { &cache.cells[t - 1] } else { &zeros };
            let h_prev = if t > 0 { &cache.hidden[t - 1] } else { &zeros };
            for b in 0..batch {
                let gr = &gates[b * g4..(b + 1) * g4];
                let dzr = &mut dz[b * g4..(b + 1) * g4];
                for j in 0..h {
                    let k = b * h + j;
                    let (f, i, o, g) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                    let dh = dh_seq[t][k] + dh_next[k];
                    let dc = dh * o * (1.0 - tc[k] * tc[k]) + dc_next[k];
                    dzr[j] = dc * c_prev[k] * f * (1.0 - f);
                    dzr[h + j] = dc * g * i * (1.0 - i);
                    dzr[2 * h + j] = dh * tc[k] * o * (1.0 - o);
                    dzr[3 * h + j] = dc * i * (1.0 - g * g);
                    dc_next[k] = dc * f;
                }
            }
            gemm(self.input_dim, batch, g4, &cache.inputs[t], true, &dz, false, 1.0, grads.w_input.data_mut());
            gemm(h, batch, g4, h_prev, true, &dz, false, 1.0, grads.w_recurrent.data_mut());
            add_column_sums(&mut grads.bias, &dz);
            if need_dx {
                let mut dx = vec![0.0; batch * self.input_dim];
                gemm(batch, g4, self.input_dim, &dz, false, self.w_input.data(), true, 0.0, &mut dx);
                dx_seq[t] = dx;
            }
            if t > 0 {
                gemm(batch, g4, h, &dz, false, self.w_recurrent.data(), true, 0.0, &mut dh_next);
            }
        }
        dx_seq
    }
}

/// Activations recorded by [`LstmLayerParams::forward_seq`]; every entry is
/// a `[batch × width]` block per timestep.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub batch: usize,
    pub inputs: Vec<Vec<f64>>,
    /// Post-activation gates, packed like the weight columns.
    pub gates: Vec<Vec<f64>>,
    pub cells: Vec<Vec<f64>>,
    pub tanh_cells: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
}

/// One LSTM step for a single example.
pub fn lstm_cell_step(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    p: &LstmLayerParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let hd = p.hidden_dim;
    if x.len() != p.input_dim || h_prev.len() != hd || c_prev.len() != hd {
        return Err(Error::Shape(format!(
            "cell step: x {}, h {}, c {} for a {}→{} layer",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            p.input_dim,
            hd
        )));
    }
    let pre = |gate: Gate, unit: usize| {
        let mut z = p.b(gate, unit);
        for (k, xv) in x.iter().enumerate() {
            z += p.w(gate, unit, k) * xv;
        }
        for (k, hv) in h_prev.iter().enumerate() {
            z += p.u(gate, unit, k) * hv;
        }
        z
    };
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    for j in 0..hd {
        let f = sigmoid(pre(Gate::Forget, j));
        let i = sigmoid(pre(Gate::Input, j));
        let o = sigmoid(pre(Gate::Output, j));
        let g = pre(Gate::Candidate, j).tanh();
        c[j] = f * c_prev[j] + i * g;
        h[j] = o * c[j].tanh();
    }
    Ok((h, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
}

/// Fully connected layer `y = act(x·W + b)` with `W` stored `input × output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub input_dim: usize,
    pub output_dim: usize,
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseParams {
    pub fn zeros(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        DenseParams {
            input_dim,
            output_dim,
            weight: Tensor2::zeros(input_dim, output_dim),
            bias: vec![0.0; output_dim],
            activation,
        }
    }

    pub fn init<R: Rng>(input_dim: usize, output_dim: usize, activation: Activation, rng: &mut R) -> Self {
        DenseParams {
            input_dim,
            output_dim,
            weight: Tensor2::uniform(input_dim, output_dim, 1.0 / (input_dim as f64).sqrt(), rng),
            bias: vec![0.0; output_dim],
            activation,
        }
    }

    /// Batched forward over `[batch × input]`; returns `[batch × output]`.
    pub(crate) fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut y = vec![0.0; batch * self.output_dim];
        fill_rows(&mut y, &self.bias);
        gemm(batch, self.input_dim, self.output_dim, x, false, self.weight.data(), false, 1.0, &mut y);
        if self.activation == Activation::Tanh {
            y.iter_mut().for_each(|v| *v = v.tanh());
        }
        y
    }

    /// Given the layer input `x`, its output `y` and `dy`, accumulate
    /// parameter gradients and return `dx`.
    pub(crate) fn backward(&self, x: &[f64], y: &[f64], dy: &[f64], batch: usize, grads: &mut DenseParams) -> Vec<f64> {
        let dz: Vec<f64> = match self.activation {
            Activation::Identity => dy.to_vec(),
            Activation::Tanh => dy.iter().zip(y).map(|(d, v)| d * (1.0 - v * v)).collect(),
        };
        gemm(self.input_dim, batch, self.output_dim, x, true, &dz, false, 1.0, grads.weight.data_mut());
        add_column_sums(&mut grads.bias, &dz);
        let mut dx = vec![0.0; batch * self.input_dim];
        gemm(batch, self.output_dim, self.input_dim, &dz, false, self.weight.data(), true, 0.0, &mut dx);
        dx
    }
}

/// Stacked LSTM encoder: LSTM layers returning full sequences, the last
/// timestep of the top layer projected through a tanh dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackParams {
    pub layers: Vec<LstmLayerParams>,
    pub projection: DenseParams,
}

pub(crate) struct StackCache {
    layers: Vec<LayerCache>,
    top: Vec<f64>,
    pub output: Vec<f64>,
}

impl StackParams {
    pub fn zeros(input_dim: usize, widths: &[usize], dense: usize) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for &w in widths {
            layers.push(LstmLayerParams::zeros(prev, w));
            prev = w;
        }
        StackParams {
            layers,
            projection: DenseParams::zeros(prev, dense, Activation::Tanh),
        }
    }

    pub fn init<R: Rng>(input_dim: usize, widths: &[usize], dense: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for &w in widths {
            layers.push(LstmLayerParams::init(prev, w, rng));
            prev = w;
        }
        StackParams {
            layers,
            projection: DenseParams::init(prev, dense, Activation::Tanh, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(self.projection.input_dim, |l| l.input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.projection.output_dim
    }

    /// Encode one `[T × channels]` sequence.
    pub fn forward(&self, x_seq: &Tensor2) -> Result<Vec<f64>> {
        if x_seq.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "sequence has {} channels, stack expects {}",
                x_seq.cols(),
                self.input_dim()
            )));
        }
        if x_seq.rows() == 0 {
            return Err(Error::Shape("empty input sequence".into()));
        }
        let xs: Vec<Vec<f64>> = (0..x_seq.rows()).map(|t| x_seq.row(t).to_vec()).collect();
        Ok(self.forward_batch(&xs, 1).output)
    }

    /// `xs[t]` is the `[batch × channels]` input block at step `t`.
    pub(crate) fn forward_batch(&self, xs: &[Vec<f64>], batch: usize) -> StackCache {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input: &[Vec<f64>] = layers.last().map_or(xs, |c: &LayerCache| &c.hidden);
            let cache = layer.forward_seq(input, batch);
            layers.push(cache);
        }
        let top = layers
            .last()
            .and_then(|c| c.hidden.last().cloned())
            .unwrap_or_else(|| xs.last().cloned().unwrap_or_default());
        let output = self.projection.forward(&top, batch);
        StackCache { layers, top, output }
    }

    pub(crate) fn backward_batch(&self, cache: &StackCache, d_output: &[f64], batch: usize, grads: &mut StackParams) {
        let d_top = self
            .projection
            .backward(&cache.top, &cache.output, d_output, batch, &mut grads.projection);
        let steps = cache.layers.first().map_or(0, |c| c.inputs.len());
        let Some(top_width) = self.layers.last().map(|l| l.hidden_dim) else {
            return;
        };
        let mut dh_seq = vec![vec![0.0; batch * top_width]; steps];
        if let Some(last) = dh_seq.last_mut() {
            *last = d_top;
        }
        for (li, layer) in self.layers.iter().enumerate().rev() {
            dh_seq = layer.backward_seq(&cache.layers[li], &dh_seq, &mut grads.layers[li], li > 0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_cell_stays_zero() {
        let p = LstmLayerParams::zeros(3, 4);
        let (h, c) = lstm_cell_step(&[0.0; 3], &[0.0; 4], &[0.0; 4], &p).unwrap();
        assert_eq!(h, vec![0.0; 4]);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut p = LstmLayerParams::zeros(2, 3);
        for j in 0..3 {
            p.set_b(Gate::Forget, j, 20.0);
        }
        let (_, c) = lstm_cell_step(&[0.0; 2], &[0.0; 3], &[1.0; 3], &p).unwrap();
        for v in c {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn scalar_cell_matches_hand_computation() {
        let mut p = LstmLayerParams::zeros(1, 1);
        let set = |p: &mut LstmLayerParams, g: Gate, w: f64, u: f64, b: f64| {
            p.set_w(g, 0, 0, w);
            p.set_u(g, 0, 0, u);
            p.set_b(g, 0, b);
        };
        set(&mut p, Gate::Forget, 0.5, -0.3, 0.1);
        set(&mut p, Gate::Input, -0.7, 0.2, 0.05);
        set(&mut p, Gate::Output, 0.9, 0.4, -0.2);
        set(&mut p, Gate::Candidate, 1.1, -0.6, 0.3);
        let (x, h0, c0) = (0.8, -0.25, 0.6);
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let f = s(0.5 * x - 0.3 * h0 + 0.1);
        let i = s(-0.7 * x + 0.2 * h0 + 0.05);
        let o = s(0.9 * x + 0.4 * h0 - 0.2);
        let g = (1.1 * x - 0.6 * h0 + 0.3).tanh();
        let c = f * c0 + i * g;
        let h = o * c.tanh();
        let (hh, cc) = lstm_cell_step(&[x], &[h0], &[c0], &p).unwrap();
        assert!((hh[0] - h).abs() < 1e-12);
        assert!((cc[0] - c).abs() < 1e-12);
    }

    #[test]
    fn cell_rejects_bad_dims() {
        let p = LstmLayerParams::zeros(2, 2);
        assert!(lstm_cell_step(&[0.0; 3], &[0.0; 2], &[0.0; 2], &p).is_err());
    }

    #[test]
    fn batched_layer_matches_cell_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LstmLayerParams::init(3, 5, &mut rng);
        let seqs: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|_| (0..6).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
            .collect();
        let xs: Vec<Vec<f64>> = (0..6).map(|t| seqs.iter().flat_map(|s| s[t].clone()).collect()).collect();
        let cache = p.forward_seq(&xs, 4);
        for (b, seq) in seqs.iter().enumerate() {
            let (mut h, mut c) = (vec![0.0; 5], vec![0.0; 5]);
            for (t, x) in seq.iter().enumerate() {
                (h, c) = lstm_cell_step(x, &h, &c, &p).unwrap();
                for j in 0..5 {
                    assert!((cache.hidden[t][b * 5 + j] - h[j]).abs() < 1e-12);
                    assert!((cache.cells[t][b * 5 + j] - c[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stack_output_bounded_and_zero_on_zero() {
        let zero = StackParams::zeros(3, &[4, 4, 4, 4], 6);
        let x = Tensor2::zeros(7, 3);
        assert_eq!(zero.forward(&x).unwrap(), vec![0.0; 6]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stack = StackParams::init(3, &[8, 4, 4, 4], 6, &mut rng);
        let x = Tensor2::uniform(28, 3, 5.0, &mut rng);
        for v in stack.forward(&x).unwrap() {
            assert!(v > -1.0 && v < 1.0);
        }
        assert!(stack.forward(&Tensor2::zeros(7, 2)).is_err());
    }

    /// Straight-line forward for a stack, written independently of the
    /// batched path: explicit loops over layers, timesteps and units.
    fn reference_stack(stack: &StackParams, x: &Tensor2) -> Vec<f64> {
        let mut seq: Vec<Vec<f64>> = (0..x.rows()).map(|t| x.row(t).to_vec()).collect();
        for layer in &stack.layers {
            let hd = layer.hidden_dim;
            let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
            let mut out = Vec::new();
            for xt in &seq {
                let mut hn = vec![0.0; hd];
                let mut cn = vec![0.0; hd];
                for j in 0..hd {
                    let z = |g: Gate| {
                        layer.b(g, j)
                            + (0..layer.input_dim).map(|k| layer.w(g, j, k) * xt[k]).sum::<f64>()
                            + (0..hd).map(|k| layer.u(g, j, k) * h[k]).sum::<f64>()
                    };
                    let s = |v: f64| 1.0 / (1.0 + (-v).exp());
                    cn[j] = s(z(Gate::Forget)) * c[j] + s(z(Gate::Input)) * z(Gate::Candidate).tanh();
                    hn[j] = s(z(Gate::Output)) * cn[j].tanh();
                }
                h = hn;
                c = cn;
                out.push(h.clone());
            }
            seq = out;
        }
        let top = seq.last().unwrap();
        let p = &stack.projection;
        (0..p.output_dim)
            .map(|o| (p.bias[o] + (0..p.input_dim).map(|k| top[k] * p.weight.get(k, o)).sum::<f64>()).tanh())
            .collect()
    }

    #[test]
    fn tiny_stack_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut stack = StackParams::init(3, &[2, 2, 2, 2], 2, &mut rng);
        for l in &mut stack.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        stack.projection.bias = vec![0.1, -0.2];
        for len in [7, 28] {
            let x = Tensor2::uniform(len, 3, 1.0, &mut rng);
            let got = stack.forward(&x).unwrap();
            let want = reference_stack(&stack, &x);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
