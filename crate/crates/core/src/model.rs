//! Two-layer tanh perceptron with hand-written backpropagation.
//!
//! Batches are row-major: inputs are `batch × in`, targets `batch × out`.
//! `Y = tanh(X·W1ᵀ + b1)·W2ᵀ + b2`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, ShiraError};
use crate::linalg::{seeded_gaussian, DenseMatrix};
use crate::rng::derive_seed;

/// Weight tensors addressable by adapters and masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorId {
    W1,
    W2,
}

impl TensorId {
    pub const ALL: [TensorId; 2] = [TensorId::W1, TensorId::W2];

    pub fn name(self) -> &'static str {
        match self {
            TensorId::W1 => "w1",
            TensorId::W2 => "w2",
        }
    }
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TensorId {
    type Err = ShiraError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w1" => Ok(TensorId::W1),
            "w2" => Ok(TensorId::W2),
            other => Err(ShiraError::param(format!("unknown weight tensor `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Mean over batch and outputs of the squared error.
    #[default]
    Mse,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: DenseMatrix,
    pub targets: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    /// hidden × in
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    /// out × hidden
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

/// Gradients of the loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

impl ModelGrads {
    pub fn weight(&self, id: TensorId) -> &DenseMatrix {
        match id {
            TensorId::W1 => &self.w1,
            TensorId::W2 => &self.w2,
        }
    }

    pub fn weight_mut(&mut self, id: TensorId) -> &mut DenseMatrix {
        match id {
            TensorId::W1 => &mut self.w1,
            TensorId::W2 => &mut self.w2,
        }
    }

    /// Euclidean norm over all parameters.
    pub fn norm(&self) -> f64 {
        let sq = |s: &[f64]| s.iter().map(|x| x * x).sum::<f64>();
        (sq(self.w1.as_slice()) + sq(&self.b1) + sq(self.w2.as_slice()) + sq(&self.b2)).sqrt()
    }
}

struct Activations {
    hidden: DenseMatrix,
    output: DenseMatrix,
}

impl ToyModel {
    pub fn new(w1: DenseMatrix, b1: Vec<f64>, w2: DenseMatrix, b2: Vec<f64>) -> Result<Self> {
        if w2.cols() != w1.rows() || b1.len() != w1.rows() || b2.len() != w2.rows() {
            return Err(ShiraError::shape(format!(
                "inconsistent layers: w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                w1.shape(),
                b1.len(),
                w2.shape(),
                b2.len()
            )));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// Gaussian init scaled by 1/sqrt(fan_in); biases N(0, 0.1²).
    pub fn random(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        let w1 = seeded_gaussian(hidden, input, derive_seed(seed, 1)).scaled(1.0 / (input as f64).sqrt());
        let w2 = seeded_gaussian(output, hidden, derive_seed(seed, 2)).scaled(1.0 / (hidden as f64).sqrt());
        let b1 = seeded_gaussian(1, hidden, derive_seed(seed, 3)).scaled(0.1).into_vec();
        let b2 = seeded_gaussian(1, output, derive_seed(seed, 4)).scaled(0.1).into_vec();
        Self { w1, b1, w2, b2 }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: DenseMatrix::zeros(hidden, input),
            b1: vec![0.0; hidden],
            w2: DenseMatrix::zeros(output, hidden),
            b2: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn weight(&self, id: TensorId) -> &DenseMatrix {
        match id {
            TensorId::W1 => &self.w1,
            TensorId::W2 => &self.w2,
        }
    }

    pub fn weight_mut(&mut self, id: TensorId) -> &mut DenseMatrix {
        match id {
            TensorId::W1 => &mut self.w1,
            TensorId::W2 => &mut self.w2,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn run(&self, x: &DenseMatrix) -> Result<Activations> {
        if x.cols() != self.input_dim() {
            return Err(ShiraError::shape(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut hidden = x.matmul(&self.w1.transpose())?;
        for r in 0..hidden.rows() {
            for (h, b) in hidden.row_mut(r).iter_mut().zip(&self.b1) {
                *h = (*h + b).tanh();
            }
        }
        let mut output = hidden.matmul(&self.w2.transpose())?;
        for r in 0..output.rows() {
            for (y, b) in output.row_mut(r).iter_mut().zip(&self.b2) {
                *y += b;
            }
        }
        Ok(Activations { hidden, output })
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.run(x)?.output)
    }

    pub fn loss(&self, x: &DenseMatrix, target: &DenseMatrix, kind: LossKind) -> Result<f64> {
        let y = self.forward(x)?;
        loss_value(&y, target, kind)
    }

    /// Loss value and full gradient in one pass.
    pub fn loss_and_grad(
        &self,
        x: &DenseMatrix,
        target: &DenseMatrix,
        kind: LossKind,
    ) -> Result<(f64, ModelGrads)> {
        let act = self.run(x)?;
        let loss = loss_value(&act.output, target, kind)?;
        let LossKind::Mse = kind;
        let scale = 2.0 / act.output.len() as f64;
        let mut d_out = act.output.sub(target)?;
        d_out.as_mut_slice().iter_mut().for_each(|v| *v *= scale);

        let g_w2 = d_out.t_matmul(&act.hidden)?;
        let g_b2 = column_sums(&d_out);
        let mut d_pre = d_out.matmul(&self.w2)?;
        for (d, h) in d_pre.as_mut_slice().iter_mut().zip(act.hidden.as_slice()) {
            *d *= 1.0 - h * h;
        }
        let g_w1 = d_pre.t_matmul(x)?;
        let g_b1 = column_sums(&d_pre);
        Ok((
            loss,
            ModelGrads {
                w1: g_w1,
                b1: g_b1,
                w2: g_w2,
                b2: g_b2,
            },
        ))
    }

    pub fn backward(&self, x: &DenseMatrix, target: &DenseMatrix, kind: LossKind) -> Result<ModelGrads> {
        Ok(self.loss_and_grad(x, target, kind)?.1)
    }
}

pub fn loss_value(y: &DenseMatrix, target: &DenseMatrix, kind: LossKind) -> Result<f64> {
    if y.shape() != target.shape() {
        return Err(ShiraError::shape(format!(
            "prediction {:?} vs target {:?}",
            y.shape(),
            target.shape()
        )));
    }
    let LossKind::Mse = kind;
    let sse: f64 = y
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / y.len() as f64)
}

fn column_sums(m: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        out.iter_mut().zip(m.row(r)).for_each(|(o, v)| *o += v);
    }
    out
}
