//! Feed-forward ReLU networks and their L1 training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Layer widths `(n_0, …, n_{L+1})` of a network with `L ≥ 1` hidden layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    widths: Vec<usize>,
}

impl Architecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::ShapeMismatch(format!(
                "need at least one hidden layer, got widths {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero width in {widths:?}")));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of hidden layers `L`.
    pub fn hidden_layers(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of first-layer parameters `n_1·(n_0+1)`.
    pub fn first_layer_dim(&self) -> usize {
        self.widths[1] * (self.widths[0] + 1)
    }

    /// Total hidden units `n_1 + … + n_L`.
    pub fn hidden_units(&self) -> usize {
        self.widths[1..self.widths.len() - 1].iter().sum()
    }
}

/// Weight `W_l` (`n_l × n_{l−1}`) and bias `b_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::ShapeMismatch(format!(
                "weight has {} rows but bias has {} entries",
                weight.rows(),
                bias.len()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("bias"));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Self { weight: DenseMatrix::zeros(out, inp), bias: vec![0.0; out] }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim())
            .map(|k| crate::linalg::dot(self.weight.row(k), x) + self.bias[k])
            .collect()
    }
}

/// All layers `(θ_1, …, θ_{L+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
}

impl NetworkParams {
    pub fn new(layers: Vec<LayerParams>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::ShapeMismatch("need at least two affine layers".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    l + 1,
                    pair[0].out_dim(),
                    l + 2,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(arch: &Architecture) -> Self {
        let w = arch.widths();
        Self { layers: w.windows(2).map(|p| LayerParams::zeros(p[1], p[0])).collect() }
    }

    pub fn architecture(&self) -> Architecture {
        let mut widths = vec![self.layers[0].in_dim()];
        widths.extend(self.layers.iter().map(LayerParams::out_dim));
        Architecture { widths }
    }
}

/// N input/target pairs, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl TrainingSet {
    pub fn new(input_dim: usize, output_dim: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::ShapeMismatch("zero sample dimension".into()));
        }
        let n = inputs.len() / input_dim;
        if n == 0 || inputs.len() != n * input_dim || targets.len() != n * output_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs and {} targets do not form samples of dims {input_dim}/{output_dim}",
                inputs.len(),
                targets.len()
            )));
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training set"));
        }
        Ok(Self { input_dim, output_dim, inputs, targets })
    }

    pub fn from_pairs(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let (x0, y0) = pairs.first().ok_or_else(|| Error::ShapeMismatch("no samples".into()))?;
        let inputs = pairs.iter().flat_map(|(x, _)| x.iter().copied()).collect();
        let targets = pairs.iter().flat_map(|(_, y)| y.iter().copied()).collect();
        Self::new(x0.len(), y0.len(), inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.output_dim..(i + 1) * self.output_dim]
    }

    pub fn max_abs_target(&self) -> f64 {
        self.targets.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Same targets with every input replaced by `map(input)`.
    pub fn map_inputs(&self, new_dim: usize, mut map: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let inputs = (0..self.len()).flat_map(|i| map(self.input(i))).collect();
        Self::new(new_dim, self.output_dim, inputs, self.targets.clone())
    }
}

/// Pre-activations of every hidden layer plus the network output.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub pre_activations: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl ForwardTrace {
    /// `h^{(l)}` for `l = 1..L` (1-based).
    pub fn post_activation(&self, layer: usize) -> Vec<f64> {
        relu(&self.pre_activations[layer - 1])
    }
}

pub fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| v.max(0.0)).collect()
}

pub fn forward(params: &NetworkParams, x: &[f64]) -> Result<ForwardTrace> {
    let first = &params.layers[0];
    if x.len() != first.in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} entries, network expects {}",
            x.len(),
            first.in_dim()
        )));
    }
    let (hidden, last) = params.layers.split_at(params.layers.len() - 1);
    let mut pre_activations = Vec::with_capacity(hidden.len());
    let mut h = x.to_vec();
    for layer in hidden {
        let z = layer.apply(&h);
        h = relu(&z);
        pre_activations.push(z);
    }
    let output = last[0].apply(&h);
    Ok(ForwardTrace { pre_activations, output })
}

fn check_data(params: &NetworkParams, data: &TrainingSet) -> Result<()> {
    let arch = params.architecture();
    if arch.input_dim() != data.input_dim() || arch.output_dim() != data.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "network maps {} -> {}, data is {} -> {}",
            arch.input_dim(),
            arch.output_dim(),
            data.input_dim(),
            data.output_dim()
        )));
    }
    Ok(())
}

/// Contribution `Σ_j |(y_i)_j − f(x_i)_j|` of sample `i`.
pub fn sample_loss(params: &NetworkParams, data: &TrainingSet, i: usize) -> Result<f64> {
    check_data(params, data)?;
    let out = forward(params, data.input(i))?.output;
    Ok(data.target(i).iter().zip(&out).map(|(y, f)| (y - f).abs()).sum())
}

/// `Σ_i Σ_j |(y_i)_j − f_θ(x_i)_j|`.
pub fn l1_loss(params: &NetworkParams, data: &TrainingSet) -> Result<f64> {
    check_data(params, data)?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let out = forward(params, data.input(i))?.output;
        total += data.target(i).iter().zip(&out).map(|(y, f)| (y - f).abs()).sum::<f64>();
    }
    Ok(total)
}
