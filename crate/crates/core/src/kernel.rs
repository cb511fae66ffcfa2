//! Dense kernels for bias-free MLP stacks with exact reverse-mode gradients.
//!
//! Every stack works on row-major batches: one sample per row. The single
//! vector entry points are thin wrappers around a batch of one, so the
//! training path and the scoring path share the same arithmetic.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MdrError, Result};

/// Name of the hidden activation, recorded in checkpoint metadata.
pub const ACTIVATION: &str = "relu";

/// Scale applied to the output layer at initialization.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// A bias-free linear map, `y = W x`, with `W` of shape `(fan_out, fan_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    weight: Array2<f64>,
}

impl LinearLayer {
    pub fn new(weight: Array2<f64>) -> Result<Self> {
        if weight.iter().any(|w| !w.is_finite()) {
            return Err(MdrError::NonFinite {
                context: "linear layer weight".into(),
            });
        }
        Ok(Self { weight })
    }

    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weight
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.fan_in() {
            return Err(MdrError::shape("linear_forward", self.fan_in(), x.len()));
        }
        Ok(self.weight.dot(&ArrayView1::from(x)).to_vec())
    }

    fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t())
    }
}

/// Per-layer record of one forward pass, consumed by [`MlpStack::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    shapes: Vec<(usize, usize)>,
    /// Input to every layer, `(batch, fan_in)`.
    inputs: Vec<Array2<f64>>,
    /// For each hidden layer: rectifier derivative times the dropout scale.
    gates: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }

    /// Pre-activation values of every hidden layer are not kept, but the
    /// gate pattern is: two tapes with equal gates took the same branch of
    /// every rectifier and dropout draw.
    pub fn gates(&self) -> &[Array2<f64>] {
        &self.gates
    }
}

/// Chained linear layers with a rectifier and inverted dropout after every
/// hidden layer. The output layer is purely linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpStack {
    layers: Vec<LinearLayer>,
    dropout_rate: f64,
}

impl MlpStack {
    pub fn new(layers: Vec<LinearLayer>, dropout_rate: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(MdrError::InvalidConfig("stack needs at least one layer".into()));
        }
        check_dropout(dropout_rate)?;
        for pair in layers.windows(2) {
            if pair[1].fan_in() != pair[0].fan_out() {
                return Err(MdrError::shape(
                    "stack layer chaining",
                    pair[0].fan_out(),
                    pair[1].fan_in(),
                ));
            }
        }
        Ok(Self {
            layers,
            dropout_rate,
        })
    }

    /// He-style Gaussian initialization: hidden weights ~ N(0, 2/fan_in),
    /// output weights additionally scaled by [`OUTPUT_INIT_SCALE`].
    pub fn init(fan_in: usize, widths: &[usize], dropout_rate: f64, seed: u64) -> Result<Self> {
        if widths.is_empty() {
            return Err(MdrError::InvalidConfig("empty width list".into()));
        }
        if fan_in == 0 || widths.contains(&0) {
            return Err(MdrError::InvalidConfig("widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = fan_in;
        for (i, &width) in widths.iter().enumerate() {
            let mut std = (2.0 / prev as f64).sqrt();
            if i + 1 == widths.len() {
                std *= OUTPUT_INIT_SCALE;
            }
            let weight = Array2::from_shape_simple_fn((width, prev), || {
                let n: f64 = rng.sample(StandardNormal);
                n * std
            });
            layers.push(LinearLayer { weight });
            prev = width;
        }
        Self::new(layers, dropout_rate)
    }

    pub fn zeros(fan_in: usize, widths: &[usize], dropout_rate: f64) -> Result<Self> {
        let mut prev = fan_in;
        let layers = widths
            .iter()
            .map(|&w| {
                let layer = LinearLayer::zeros(w, prev);
                prev = w;
                layer
            })
            .collect();
        Self::new(layers, dropout_rate)
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LinearLayer::param_count).sum()
    }

    /// Layer shapes as `(fan_out, fan_in)`.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.fan_out(), l.fan_in())).collect()
    }

    /// Single-sample forward pass. `seed` drives the dropout draws and is
    /// ignored in eval mode.
    pub fn forward(&self, x: &[f64], mode: Mode, seed: u64) -> Result<(Vec<f64>, Tape)> {
        let batch = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|_| MdrError::shape("mlp_forward", self.input_dim(), x.len()))?;
        let (out, tape) = self.forward_batch(batch, mode, seed)?;
        Ok((out.row(0).to_vec(), tape))
    }

    /// Batched forward pass over rows of `x`.
    pub fn forward_batch(
        &self,
        x: ArrayView2<'_, f64>,
        mode: Mode,
        seed: u64,
    ) -> Result<(Array2<f64>, Tape)> {
        self.run(x, mode, seed, true)
    }

    /// Eval-mode forward pass without recording a tape.
    pub fn infer_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.run(x, Mode::Eval, 0, false)?.0)
    }

    pub fn infer(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|_| MdrError::shape("mlp_forward", self.input_dim(), x.len()))?;
        Ok(self.infer_batch(batch)?.row(0).to_vec())
    }

    fn run(
        &self,
        x: ArrayView2<'_, f64>,
        mode: Mode,
        seed: u64,
        record: bool,
    ) -> Result<(Array2<f64>, Tape)> {
        if x.ncols() != self.input_dim() {
            return Err(MdrError::shape("mlp_forward", self.input_dim(), x.ncols()));
        }
        check_dropout(self.dropout_rate)?;
        let dropout = mode == Mode::Train && self.dropout_rate > 0.0;
        let keep_scale = 1.0 / (1.0 - self.dropout_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut tape = Tape {
            shapes: self.shapes(),
            inputs: Vec::new(),
            gates: Vec::new(),
        };
        let last = self.layers.len() - 1;
        let mut current = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward_batch(current.view());
            if i < last {
                let mut gate = Array2::zeros(out.raw_dim());
                for (o, g) in out.iter_mut().zip(gate.iter_mut()) {
                    let kept = !dropout || rng.random::<f64>() >= self.dropout_rate;
                    if *o > 0.0 && kept {
                        *g = if dropout { keep_scale } else { 1.0 };
                        *o *= *g;
                    } else {
                        *o = 0.0;
                    }
                }
                if record {
                    tape.gates.push(gate);
                }
            }
            if record {
                tape.inputs.push(current);
            }
            current = out;
        }
        Ok((current, tape))
    }

    /// Reverse pass for the loss `<grad_out, output>`.
    ///
    /// Returns the weight gradient of every layer and the gradient with
    /// respect to the input batch.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_out: ArrayView2<'_, f64>,
    ) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
        if tape.shapes != self.shapes() || tape.inputs.len() != self.layers.len() {
            return Err(MdrError::TapeMismatch);
        }
        if grad_out.nrows() != tape.batch_size() {
            return Err(MdrError::shape("mlp_backward batch", tape.batch_size(), grad_out.nrows()));
        }
        if grad_out.ncols() != self.output_dim() {
            return Err(MdrError::shape("mlp_backward", self.output_dim(), grad_out.ncols()));
        }
        let mut grads = vec![Array2::zeros((0, 0)); self.layers.len()];
        let mut upstream = grad_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            grads[i] = upstream.t().dot(&tape.inputs[i]);
            let mut down = upstream.dot(&self.layers[i].weight);
            if i > 0 {
                down *= &tape.gates[i - 1];
            }
            upstream = down;
        }
        Ok((grads, upstream))
    }

    /// Single-sample convenience over [`MlpStack::backward`].
    pub fn backward_vec(&self, tape: &Tape, grad_out: &[f64]) -> Result<(Vec<Array2<f64>>, Vec<f64>)> {
        let g = Array1::from(grad_out.to_vec()).insert_axis(Axis(0));
        let (grads, gin) = self.backward(tape, g.view())?;
        Ok((grads, gin.row(0).to_vec()))
    }
}

fn check_dropout(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(MdrError::InvalidConfig(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    Ok(())
}
