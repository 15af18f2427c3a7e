//! Dense layers with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

/// Affine map `y = x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Dense {
            weight: Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-bound..=bound)),
            bias: Array1::from_shape_fn(outputs, |_| rng.random_range(-bound..=bound)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    /// Same as [`Dense::backward`] without computing the input gradient.
    pub fn backward_params(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Dense) {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn zeros_like(&self) -> Self {
        Dense::zeros(self.inputs(), self.outputs())
    }
}

/// Stack of dense layers with ReLU between them and optionally after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub relu_last: bool,
}

/// Per-layer inputs kept for the backward pass; the last entry is the output.
pub struct MlpTrace {
    acts: Vec<Array2<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("trace holds at least the input")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.acts.pop().expect("trace holds at least the input")
    }
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(widths: &[usize], relu_last: bool, rng: &mut R) -> Self {
        Mlp {
            layers: widths.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect(),
            relu_last,
        }
    }

    pub fn zeros(widths: &[usize], relu_last: bool) -> Self {
        Mlp {
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            relu_last,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            relu_last: self.relu_last,
        }
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.relu_last
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_trace(x).into_output()
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> MlpTrace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(acts[l].view());
            if self.activated(l) {
                relu_inplace(&mut y);
            }
            acts.push(y);
        }
        MlpTrace { acts }
    }

    pub fn backward(&self, trace: &MlpTrace, dy: ArrayView2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dy.to_owned();
        for l in (0..self.layers.len()).rev() {
            if self.activated(l) {
                relu_backward_inplace(&mut d, trace.acts[l + 1].view());
            }
            d = self.layers[l].backward(trace.acts[l].view(), d.view(), &mut grad.layers[l]);
        }
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `d` wherever the post-activation output is not positive.
pub fn relu_backward_inplace(d: &mut Array2<f64>, out: ArrayView2<f64>) {
    ndarray::Zip::from(d).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}
