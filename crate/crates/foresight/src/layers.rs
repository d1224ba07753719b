//! Neural building blocks: fully-connected layers, stacked LSTMs with
//! masking for variable-length sequences, inverted dropout and one-hot
//! embedding.
//!
//! Each layer owns its [`Parameter`]s and exposes two paths: a tape path for
//! training (bind parameters as leaves once per pass, run `forward`, then
//! pull gradients back with `read_grads`) and a plain-tensor `infer` path for
//! prediction and decoding. The two paths compute the same arithmetic and are
//! held equal by tests.

use rand::Rng;

use crate::nd::tape::{softmax_row, stable_sigmoid};
use crate::nd::{NdError, NodeId, Parameter, Tape, Tensor};

/// Output nonlinearity of a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

/// Fully connected layer: activation(x W + b).
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Parameter,
    pub bias: Parameter,
    pub activation: Activation,
}

/// Tape leaf ids of a dense layer's parameters for one forward/backward pass.
pub struct DenseBinding {
    w: NodeId,
    b: NodeId,
}

impl DenseBinding {
    pub fn new(w: NodeId, b: NodeId) -> Self {
        DenseBinding { w, b }
    }
}

impl DenseLayer {
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        DenseLayer {
            weight: Parameter::glorot(format!("{name}.w"), in_dim, out_dim, rng),
            bias: Parameter::zeros(format!("{name}.b"), &[out_dim]),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> DenseBinding {
        DenseBinding {
            w: tape.leaf(self.weight.value.clone()),
            b: tape.leaf(self.bias.value.clone()),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &DenseBinding,
        x: NodeId,
    ) -> Result<NodeId, NdError> {
        let z = tape.matmul(x, bind.w)?;
        let z = tape.add_row(z, bind.b)?;
        Ok(match self.activation {
            Activation::Relu => tape.relu(z),
            Activation::Softmax => tape.softmax(z),
            Activation::Identity => z,
        })
    }

    /// Plain-tensor forward, used at prediction time.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NdError> {
        let z = x.matmul(&self.weight.value)?;
        let (rows, cols) = z.dims2()?;
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(z.data()[i * cols + j] + self.bias.value.data()[j]);
            }
        }
        let z = Tensor::new(z.shape(), data)?;
        Ok(match self.activation {
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Identity => z,
            Activation::Softmax => {
                let mut out = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    out.extend(softmax_row(&z.data()[i * cols..(i + 1) * cols]));
                }
                Tensor::new(z.shape(), out)?
            }
        })
    }

    pub fn read_grads(&mut self, tape: &Tape, bind: &DenseBinding) {
        self.weight
            .grad
            .add_scaled(tape.grad(bind.w), 1.0)
            .expect("weight grad shape");
        self.bias
            .grad
            .add_scaled(tape.grad(bind.b), 1.0)
            .expect("bias grad shape");
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Gate order used throughout: input, forget, candidate, output.
const GATE_NAMES: [&str; 4] = ["i", "f", "g", "o"];
const FORGET_GATE: usize = 1;

/// One LSTM layer in the standard forget-gate formulation, no peepholes:
///
/// i = sigmoid(x W_i + h U_i + b_i)      f = sigmoid(x W_f + h U_f + b_f)
/// g = tanh   (x W_g + h U_g + b_g)      o = sigmoid(x W_o + h U_o + b_o)
/// c' = f * c + i * g                    h' = o * tanh(c')
///
/// The forget-gate bias starts at 1.0 to keep early gradients alive; all
/// other biases start at zero and weights are Glorot-uniform.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub input_weights: [Parameter; 4],
    pub recurrent_weights: [Parameter; 4],
    pub biases: [Parameter; 4],
    hidden: usize,
    in_dim: usize,
}

pub struct LstmBinding {
    w: [NodeId; 4],
    u: [NodeId; 4],
    b: [NodeId; 4],
}

impl LstmBinding {
    pub fn new(w: [NodeId; 4], u: [NodeId; 4], b: [NodeId; 4]) -> Self {
        LstmBinding { w, u, b }
    }

    /// Binding from twelve leaf ids in `parameters()` order: the four input
    /// weights, four recurrent weights, then four biases.
    pub fn from_ids(ids: &[NodeId]) -> Self {
        assert_eq!(ids.len(), 12, "an LSTM layer has 12 parameter blocks");
        LstmBinding {
            w: [ids[0], ids[1], ids[2], ids[3]],
            u: [ids[4], ids[5], ids[6], ids[7]],
            b: [ids[8], ids[9], ids[10], ids[11]],
        }
    }
}

impl LstmLayer {
    pub fn new(name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let input_weights = GATE_NAMES
            .map(|g| Parameter::glorot(format!("{name}.w_{g}"), in_dim, hidden, rng));
        let recurrent_weights = GATE_NAMES
            .map(|g| Parameter::glorot(format!("{name}.u_{g}"), hidden, hidden, rng));
        let biases: [Parameter; 4] = std::array::from_fn(|k| {
            let init = if k == FORGET_GATE { 1.0 } else { 0.0 };
            Parameter::constant(format!("{name}.b_{}", GATE_NAMES[k]), &[hidden], init)
        });
        LstmLayer {
            input_weights,
            recurrent_weights,
            biases,
            hidden,
            in_dim,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmBinding {
        LstmBinding {
            w: std::array::from_fn(|k| tape.leaf(self.input_weights[k].value.clone())),
            u: std::array::from_fn(|k| tape.leaf(self.recurrent_weights[k].value.clone())),
            b: std::array::from_fn(|k| tape.leaf(self.biases[k].value.clone())),
        }
    }

    fn gate_preact(
        &self,
        tape: &mut Tape,
        bind: &LstmBinding,
        k: usize,
        x: NodeId,
        h: NodeId,
    ) -> Result<NodeId, NdError> {
        let xw = tape.matmul(x, bind.w[k])?;
        let hu = tape.matmul(h, bind.u[k])?;
        let s = tape.add(xw, hu)?;
        tape.add_row(s, bind.b[k])
    }

    /// One time step on the tape. States are `[batch x hidden]`.
    pub fn step(
        &self,
        tape: &mut Tape,
        bind: &LstmBinding,
        x: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> Result<(NodeId, NodeId), NdError> {
        let pre_i = self.gate_preact(tape, bind, 0, x, h_prev)?;
        let pre_f = self.gate_preact(tape, bind, 1, x, h_prev)?;
        let pre_g = self.gate_preact(tape, bind, 2, x, h_prev)?;
        let pre_o = self.gate_preact(tape, bind, 3, x, h_prev)?;
        let i = tape.sigmoid(pre_i);
        let f = tape.sigmoid(pre_f);
        let g = tape.tanh(pre_g);
        let o = tape.sigmoid(pre_o);
        let fc = tape.mul(f, c_prev)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    /// Plain-tensor step for inference-time decoding.
    pub fn infer_step(
        &self,
        x: &Tensor,
        h_prev: &Tensor,
        c_prev: &Tensor,
    ) -> Result<(Tensor, Tensor), NdError> {
        let mut gates = Vec::with_capacity(4);
        for k in 0..4 {
            let xw = x.matmul(&self.input_weights[k].value)?;
            let hu = h_prev.matmul(&self.recurrent_weights[k].value)?;
            let (rows, cols) = xw.dims2()?;
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    data.push(
                        xw.data()[i * cols + j]
                            + hu.data()[i * cols + j]
                            + self.biases[k].value.data()[j],
                    );
                }
            }
            gates.push(Tensor::new(xw.shape(), data)?);
        }
        let i = gates[0].map(stable_sigmoid);
        let f = gates[1].map(stable_sigmoid);
        let g = gates[2].map(f64::tanh);
        let o = gates[3].map(stable_sigmoid);
        let c = f.zip_map(c_prev, |a, b| a * b)?.zip_map(
            &i.zip_map(&g, |a, b| a * b)?,
            |a, b| a + b,
        )?;
        let h = o.zip_map(&c.map(f64::tanh), |a, b| a * b)?;
        Ok((h, c))
    }

    pub fn read_grads(&mut self, tape: &Tape, bind: &LstmBinding) {
        for k in 0..4 {
            self.input_weights[k]
                .grad
                .add_scaled(tape.grad(bind.w[k]), 1.0)
                .expect("lstm w grad shape");
            self.recurrent_weights[k]
                .grad
                .add_scaled(tape.grad(bind.u[k]), 1.0)
                .expect("lstm u grad shape");
            self.biases[k]
                .grad
                .add_scaled(tape.grad(bind.b[k]), 1.0)
                .expect("lstm b grad shape");
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::with_capacity(12);
        out.extend(self.input_weights.iter());
        out.extend(self.recurrent_weights.iter());
        out.extend(self.biases.iter());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::with_capacity(12);
        out.extend(self.input_weights.iter_mut());
        out.extend(self.recurrent_weights.iter_mut());
        out.extend(self.biases.iter_mut());
        out
    }
}

/// Padded batch of sequences: one `[batch x dim]` tensor per time step plus a
/// 0/1 validity mask. Masked positions carry state through unchanged, so they
/// contribute neither loss nor gradient.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    steps: Vec<Tensor>,
    mask: Vec<Vec<f64>>,
    lengths: Vec<usize>,
}

impl SequenceBatch {
    /// Pad ragged per-example sequences of feature vectors to the longest
    /// length.
    pub fn from_examples(examples: &[Vec<Vec<f64>>], dim: usize) -> Result<Self, NdError> {
        if examples.is_empty() || examples.iter().any(|e| e.is_empty()) {
            return Err(NdError::EmptySequence);
        }
        let batch = examples.len();
        let max_len = examples.iter().map(|e| e.len()).max().unwrap();
        let lengths: Vec<usize> = examples.iter().map(|e| e.len()).collect();
        let mut steps = Vec::with_capacity(max_len);
        let mut mask = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let mut data = Vec::with_capacity(batch * dim);
            let mut mrow = Vec::with_capacity(batch);
            for ex in examples {
                if t < ex.len() {
                    if ex[t].len() != dim {
                        return Err(NdError::BadShape {
                            op: "sequence_batch",
                            expect: "uniform feature dimension",
                            got: vec![ex[t].len()],
                        });
                    }
                    data.extend_from_slice(&ex[t]);
                    mrow.push(1.0);
                } else {
                    data.extend(std::iter::repeat(0.0).take(dim));
                    mrow.push(0.0);
                }
            }
            steps.push(Tensor::new(&[batch, dim], data)?);
            mask.push(mrow);
        }
        Ok(SequenceBatch {
            steps,
            mask,
            lengths,
        })
    }

    /// All sequences share the same length; every position is valid.
    pub fn full(steps: Vec<Tensor>) -> Result<Self, NdError> {
        if steps.is_empty() {
            return Err(NdError::EmptySequence);
        }
        let (batch, _) = steps[0].dims2()?;
        let mask = vec![vec![1.0; batch]; steps.len()];
        let lengths = vec![steps.len(); batch];
        Ok(SequenceBatch {
            steps,
            mask,
            lengths,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn step(&self, t: usize) -> &Tensor {
        &self.steps[t]
    }

    pub fn mask_row(&self, t: usize) -> &[f64] {
        &self.mask[t]
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    fn step_fully_valid(&self, t: usize) -> bool {
        self.mask[t].iter().all(|&m| m == 1.0)
    }
}

/// Output of running a stacked LSTM over a sequence: final (h, c) of every
/// layer and the per-step hidden states of the top layer.
pub struct LstmStackOutput {
    pub final_states: Vec<(NodeId, NodeId)>,
    pub hidden_steps: Vec<NodeId>,
}

impl LstmStackOutput {
    /// Final hidden state of the top layer.
    pub fn last_hidden(&self) -> NodeId {
        self.final_states.last().expect("stack is nonempty").0
    }

    /// Per-step hidden states of the top layer.
    pub fn all_hidden(&self) -> &[NodeId] {
        &self.hidden_steps
    }
}

/// Run a stack of LSTM layers over per-step input nodes. `mask[t][b] = 0`
/// carries (h, c) of row b through step t unchanged.
pub fn lstm_forward_nodes(
    tape: &mut Tape,
    stack: &[LstmLayer],
    binds: &[LstmBinding],
    steps: &[NodeId],
    mask: Option<&[Vec<f64>]>,
) -> Result<LstmStackOutput, NdError> {
    if stack.is_empty() || steps.is_empty() {
        return Err(NdError::EmptySequence);
    }
    let (batch, _) = tape.value(steps[0]).dims2()?;
    let mut h: Vec<NodeId> = Vec::with_capacity(stack.len());
    let mut c: Vec<NodeId> = Vec::with_capacity(stack.len());
    for layer in stack {
        h.push(tape.leaf(Tensor::zeros(&[batch, layer.hidden_size()])));
        c.push(tape.leaf(Tensor::zeros(&[batch, layer.hidden_size()])));
    }
    let mut hidden_steps = Vec::with_capacity(steps.len());
    for (t, &step) in steps.iter().enumerate() {
        let mut x = step;
        let step_mask = mask.map(|m| &m[t]).filter(|m| m.iter().any(|&v| v != 1.0));
        for (li, (layer, bind)) in stack.iter().zip(binds).enumerate() {
            let (h_new, c_new) = layer.step(tape, bind, x, h[li], c[li])?;
            match step_mask {
                None => {
                    h[li] = h_new;
                    c[li] = c_new;
                }
                Some(m) => {
                    let inv: Vec<f64> = m.iter().map(|&v| 1.0 - v).collect();
                    let hn = tape.mul_row_mask(h_new, m)?;
                    let hp = tape.mul_row_mask(h[li], &inv)?;
                    h[li] = tape.add(hn, hp)?;
                    let cn = tape.mul_row_mask(c_new, m)?;
                    let cp = tape.mul_row_mask(c[li], &inv)?;
                    c[li] = tape.add(cn, cp)?;
                }
            }
            x = h[li];
        }
        hidden_steps.push(*h.last().unwrap());
    }
    Ok(LstmStackOutput {
        final_states: h.into_iter().zip(c).collect(),
        hidden_steps,
    })
}

/// Run a stack of LSTM layers over a (possibly masked) sequence batch.
/// Padded steps carry (h, c) through unchanged.
pub fn lstm_forward_sequence(
    tape: &mut Tape,
    stack: &[LstmLayer],
    binds: &[LstmBinding],
    seq: &SequenceBatch,
) -> Result<LstmStackOutput, NdError> {
    if seq.num_steps() == 0 {
        return Err(NdError::EmptySequence);
    }
    let steps: Vec<NodeId> = (0..seq.num_steps())
        .map(|t| tape.leaf(seq.step(t).clone()))
        .collect();
    let all_valid = (0..seq.num_steps()).all(|t| seq.step_fully_valid(t));
    let mask = seq.mask.clone();
    lstm_forward_nodes(
        tape,
        stack,
        binds,
        &steps,
        if all_valid { None } else { Some(&mask) },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Inverted dropout: training zeroes each element with probability `rate` and
/// scales survivors by 1/(1-rate), so eval mode is the exact identity.
#[derive(Debug, Clone, Copy)]
pub struct DropoutSpec {
    rate: f64,
    mode: DropoutMode,
}

impl DropoutSpec {
    pub fn new(rate: f64) -> Result<Self, NdError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NdError::BadShape {
                op: "dropout",
                expect: "rate in [0, 1)",
                got: vec![],
            });
        }
        Ok(DropoutSpec {
            rate,
            mode: DropoutMode::Eval,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn mode(&self) -> DropoutMode {
        self.mode
    }

    pub fn train(mut self) -> Self {
        self.mode = DropoutMode::Train;
        self
    }

    pub fn eval(mut self) -> Self {
        self.mode = DropoutMode::Eval;
        self
    }

    /// In eval mode (or at rate 0) this returns `x` itself, bit-exactly.
    pub fn apply(
        &self,
        tape: &mut Tape,
        x: NodeId,
        rng: &mut impl Rng,
    ) -> Result<NodeId, NdError> {
        if self.mode == DropoutMode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - self.rate);
        let shape = tape.value(x).shape().to_vec();
        let numel = tape.value(x).numel();
        let data: Vec<f64> = (0..numel)
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let mask = Tensor::new(&shape, data)?;
        tape.mul_mask(x, mask)
    }
}

/// Unit basis vector of length `vocab_size` with a one at `index`.
pub fn embed_onehot(vocab_size: usize, index: usize) -> Result<Tensor, NdError> {
    if index >= vocab_size {
        return Err(NdError::IndexOutOfRange {
            index,
            size: vocab_size,
        });
    }
    let mut data = vec![0.0; vocab_size];
    data[index] = 1.0;
    Tensor::from_vec(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::{grad_check, Parameter};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        use rand::Rng;
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(&[r, c], data).unwrap()
    }

    #[test]
    fn dense_identity_weight_passes_input_through() {
        let mut r = rng(0);
        let mut layer = DenseLayer::new("d", 2, 2, Activation::Identity, &mut r);
        layer.weight.value = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        layer.bias.value = Tensor::from_vec(vec![0.0, 0.0]).unwrap();
        let x = Tensor::from_rows(&[vec![3.5, -2.0], vec![0.25, 8.0]]).unwrap();
        assert_eq!(layer.infer(&x).unwrap(), x);

        let mut tape = Tape::new();
        let bind = layer.bind(&mut tape);
        let xi = tape.leaf(x.clone());
        let y = layer.forward(&mut tape, &bind, xi).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn dense_zero_weight_relu_yields_bias() {
        let mut r = rng(1);
        let mut layer = DenseLayer::new("d", 3, 2, Activation::Relu, &mut r);
        layer.weight.value = Tensor::zeros(&[3, 2]);
        layer.bias.value = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        let x = Tensor::from_rows(&[vec![5.0, -1.0, 2.0]]).unwrap();
        let y = layer.infer(&x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let mut r = rng(2);
        let layer = DenseLayer::new("d", 3, 4, Activation::Relu, &mut r);
        let x = rand_matrix(&mut r, 2, 3);
        let params = vec![layer.weight.clone(), layer.bias.clone()];
        let act = layer.activation;
        let report = grad_check(&params, 1e-5, move |t, ids| {
            let xi = t.leaf(x.clone());
            let z = t.matmul(xi, ids[0])?;
            let z = t.add_row(z, ids[1])?;
            let y = match act {
                Activation::Relu => t.relu(z),
                _ => z,
            };
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err {}", report.max_rel_err);
    }

    #[test]
    fn lstm_zero_weights_halve_cell_state() {
        let mut r = rng(3);
        let mut layer = LstmLayer::new("l", 2, 3, &mut r);
        for p in layer.parameters_mut() {
            p.value.fill(0.0);
        }
        let x = Tensor::from_rows(&[vec![0.7, -0.3]]).unwrap();
        let h0 = Tensor::zeros(&[1, 3]);
        let c0 = Tensor::from_rows(&[vec![2.0, -4.0, 1.0]]).unwrap();
        let (h, c) = layer.infer_step(&x, &h0, &c0).unwrap();
        // f = i = sigmoid(0) = 0.5 and g = tanh(0) = 0, so c' = 0.5 c and
        // h' = 0.5 tanh(c').
        for (j, &cv) in c.data().iter().enumerate() {
            assert!((cv - 0.5 * c0.data()[j]).abs() < 1e-15);
            let expect_h = 0.5 * (0.5 * c0.data()[j]).tanh();
            assert!((h.data()[j] - expect_h).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_zero_everything_gives_zero_hidden() {
        let mut r = rng(4);
        let mut layer = LstmLayer::new("l", 2, 3, &mut r);
        for p in layer.parameters_mut() {
            p.value.fill(0.0);
        }
        let x = Tensor::zeros(&[1, 2]);
        let (h, _) = layer
            .infer_step(&x, &Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 3]))
            .unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_step_gradient_matches_finite_differences_for_all_12_blocks() {
        let mut r = rng(5);
        let layer = LstmLayer::new("l", 3, 4, &mut r);
        let x = rand_matrix(&mut r, 2, 3);
        let h0 = rand_matrix(&mut r, 2, 4);
        let c0 = rand_matrix(&mut r, 2, 4);
        let params: Vec<Parameter> = layer.parameters().into_iter().cloned().collect();
        assert_eq!(params.len(), 12);
        let hidden = layer.hidden_size();
        let in_dim = layer.in_dim();
        let report = grad_check(&params, 1e-5, move |t, ids| {
            // step() reads parameter values from the binding leaves, so the
            // probe layer only supplies the structure.
            let probe = LstmLayer::new("probe", in_dim, hidden, &mut rng(0));
            let bind = LstmBinding {
                w: [ids[0], ids[1], ids[2], ids[3]],
                u: [ids[4], ids[5], ids[6], ids[7]],
                b: [ids[8], ids[9], ids[10], ids[11]],
            };
            let xi = t.leaf(x.clone());
            let hi = t.leaf(h0.clone());
            let ci = t.leaf(c0.clone());
            let (h, c) = probe.step(t, &bind, xi, hi, ci)?;
            let hs = t.sum(h);
            let cs = t.sum(c);
            let cs2 = t.scale(cs, 0.5);
            t.add(hs, cs2)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err {}", report.max_rel_err);
    }

    #[test]
    fn single_step_sequence_reduces_to_step() {
        let mut r = rng(6);
        let layer = LstmLayer::new("l", 3, 4, &mut r);
        let x = rand_matrix(&mut r, 2, 3);

        let mut tape = Tape::new();
        let bind = layer.bind(&mut tape);
        let seq = SequenceBatch::full(vec![x.clone()]).unwrap();
        let out =
            lstm_forward_sequence(&mut tape, std::slice::from_ref(&layer), &[bind], &seq).unwrap();
        let seq_h = tape.value(out.last_hidden()).clone();

        let (h, _) = layer
            .infer_step(&x, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 4]))
            .unwrap();
        assert_eq!(seq_h, h);
    }

    #[test]
    fn masked_tail_equals_truncated_run() {
        let mut r = rng(7);
        let layers = [
            LstmLayer::new("l0", 3, 4, &mut r),
            LstmLayer::new("l1", 4, 4, &mut r),
        ];
        // Two examples, lengths 2 and 4.
        let exs: Vec<Vec<Vec<f64>>> = vec![
            (0..2).map(|_| rand_row(&mut r, 3)).collect(),
            (0..4).map(|_| rand_row(&mut r, 3)).collect(),
        ];
        let seq = SequenceBatch::from_examples(&exs, 3).unwrap();
        let mut tape = Tape::new();
        let binds: Vec<LstmBinding> = layers.iter().map(|l| l.bind(&mut tape)).collect();
        let out = lstm_forward_sequence(&mut tape, &layers, &binds, &seq).unwrap();
        let masked_h = tape.value(out.last_hidden()).clone();

        // Truncated run of example 0 alone for its 2 valid steps.
        let solo = SequenceBatch::from_examples(&exs[..1], 3).unwrap();
        let mut tape2 = Tape::new();
        let binds2: Vec<LstmBinding> = layers.iter().map(|l| l.bind(&mut tape2)).collect();
        let out2 = lstm_forward_sequence(&mut tape2, &layers, &binds2, &solo).unwrap();
        let solo_h = tape2.value(out2.last_hidden()).clone();

        for j in 0..4 {
            assert!((masked_h.get2(0, j) - solo_h.get2(0, j)).abs() < 1e-15);
        }
    }

    #[test]
    fn bptt_gradient_through_three_steps_two_layers() {
        let mut r = rng(8);
        let layers = [
            LstmLayer::new("l0", 2, 3, &mut r),
            LstmLayer::new("l1", 3, 3, &mut r),
        ];
        let steps: Vec<Tensor> = (0..3).map(|_| rand_matrix(&mut r, 2, 2)).collect();
        let params: Vec<Parameter> = layers
            .iter()
            .flat_map(|l| l.parameters().into_iter().cloned())
            .collect();
        let report = grad_check(&params, 1e-5, move |t, ids| {
            let stack = [
                LstmLayer::new("p0", 2, 3, &mut rng(0)),
                LstmLayer::new("p1", 3, 3, &mut rng(0)),
            ];
            let mut binds = Vec::new();
            for li in 0..stack.len() {
                let base = li * 12;
                binds.push(LstmBinding {
                    w: [ids[base], ids[base + 1], ids[base + 2], ids[base + 3]],
                    u: [ids[base + 4], ids[base + 5], ids[base + 6], ids[base + 7]],
                    b: [ids[base + 8], ids[base + 9], ids[base + 10], ids[base + 11]],
                });
            }
            let seq = SequenceBatch::full(steps.clone()).unwrap();
            let out = lstm_forward_sequence(t, &stack, &binds, &seq)?;
            Ok(t.sum(out.last_hidden()))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err {}", report.max_rel_err);
    }

    #[test]
    fn stepwise_equals_sequence_bit_exact() {
        let mut r = rng(9);
        let layer = LstmLayer::new("l", 3, 5, &mut r);
        let steps: Vec<Tensor> = (0..4).map(|_| rand_matrix(&mut r, 2, 3)).collect();

        let mut tape = Tape::new();
        let bind = layer.bind(&mut tape);
        let seq = SequenceBatch::full(steps.clone()).unwrap();
        let out =
            lstm_forward_sequence(&mut tape, std::slice::from_ref(&layer), &[bind], &seq).unwrap();
        let seq_h = tape.value(out.last_hidden()).clone();

        let mut h = Tensor::zeros(&[2, 5]);
        let mut c = Tensor::zeros(&[2, 5]);
        for x in &steps {
            let (h2, c2) = layer.infer_step(x, &h, &c).unwrap();
            h = h2;
            c = c2;
        }
        assert_eq!(seq_h, h);
    }

    #[test]
    fn zero_weight_stack_outputs_zero() {
        let mut r = rng(10);
        let mut layers = vec![
            LstmLayer::new("l0", 3, 3, &mut r),
            LstmLayer::new("l1", 3, 3, &mut r),
            LstmLayer::new("l2", 3, 3, &mut r),
        ];
        for l in &mut layers {
            for p in l.parameters_mut() {
                p.value.fill(0.0);
            }
        }
        let steps: Vec<Tensor> = (0..5).map(|_| rand_matrix(&mut r, 2, 3)).collect();
        let mut tape = Tape::new();
        let binds: Vec<LstmBinding> = layers.iter().map(|l| l.bind(&mut tape)).collect();
        let seq = SequenceBatch::full(steps).unwrap();
        let out = lstm_forward_sequence(&mut tape, &layers, &binds, &seq).unwrap();
        assert!(tape.value(out.last_hidden()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let mut r = rng(11);
        let x = rand_matrix(&mut r, 4, 4);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());

        let d0 = DropoutSpec::new(0.0).unwrap().train();
        let y0 = d0.apply(&mut tape, xi, &mut r).unwrap();
        assert_eq!(y0, xi);

        let d_eval = DropoutSpec::new(0.2).unwrap().eval();
        let y1 = d_eval.apply(&mut tape, xi, &mut r).unwrap();
        assert_eq!(y1, xi);
    }

    #[test]
    fn dropout_empirical_rate_matches() {
        let mut r = rng(12);
        let x = Tensor::full(&[1000, 1000], 1.0);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let spec = DropoutSpec::new(0.2).unwrap().train();
        let y = spec.apply(&mut tape, xi, &mut r).unwrap();
        let dropped = tape.value(y).data().iter().filter(|&&v| v == 0.0).count();
        let frac = dropped as f64 / 1e6;
        assert!((frac - 0.2).abs() < 0.005, "dropped fraction {frac}");
        // Survivors are scaled by 1/(1-rate).
        let kept = tape.value(y).data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.25).abs() < 1e-12);
    }

    #[test]
    fn onehot_examples() {
        assert_eq!(
            embed_onehot(4, 2).unwrap().data(),
            &[0.0, 0.0, 1.0, 0.0]
        );
        assert_eq!(embed_onehot(1, 0).unwrap().data(), &[1.0]);
        assert!(matches!(
            embed_onehot(3, 3).unwrap_err(),
            NdError::IndexOutOfRange { .. }
        ));
    }

    #[test]
    fn onehot_times_matrix_is_row_lookup() {
        let mut r = rng(13);
        let table = rand_matrix(&mut r, 6, 4);
        for idx in 0..6 {
            let oh = embed_onehot(6, idx).unwrap().reshape(&[1, 6]).unwrap();
            let via_matmul = oh.matmul(&table).unwrap();
            let mut tape = Tape::new();
            let ti = tape.leaf(table.clone());
            let looked = tape.select_rows(ti, &[idx]).unwrap();
            assert_eq!(tape.value(looked), &via_matmul);
        }
    }

    fn rand_row(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        use rand::Rng;
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn hidden_state_stays_in_open_unit_interval(seed in 0u64..1000, steps in 1usize..6) {
                let mut r = rng(seed);
                let layer = LstmLayer::new("l", 3, 4, &mut r);
                let mut h = Tensor::zeros(&[1, 4]);
                let mut c = Tensor::zeros(&[1, 4]);
                for _ in 0..steps {
                    let x = rand_matrix(&mut r, 1, 3);
                    let (h2, c2) = layer.infer_step(&x, &h, &c).unwrap();
                    h = h2;
                    c = c2;
                }
                prop_assert!(h.data().iter().all(|&v| v > -1.0 && v < 1.0));
                prop_assert!(c.is_finite());
            }

            #[test]
            fn softmax_is_shift_invariant(shift in -50.0f64..50.0, seed in 0u64..1000) {
                let mut r = rng(seed);
                let x = rand_matrix(&mut r, 1, 5);
                let shifted = x.map(|v| v + shift);
                let mut tape = Tape::new();
                let a = tape.leaf(x);
                let b = tape.leaf(shifted);
                let sa = tape.softmax(a);
                let sb = tape.softmax(b);
                for (u, v) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
                    prop_assert!((u - v).abs() < 1e-9);
                }
            }

            #[test]
            fn softmax_rows_sum_to_one(seed in 0u64..1000) {
                let mut r = rng(seed);
                let x = rand_matrix(&mut r, 3, 6);
                let mut tape = Tape::new();
                let a = tape.leaf(x);
                let s = tape.softmax(a);
                let v = tape.value(s);
                for i in 0..3 {
                    let sum: f64 = (0..6).map(|j| v.get2(i, j)).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                    prop_assert!((0..6).all(|j| v.get2(i, j) > 0.0));
                }
            }
        }
    }
}
