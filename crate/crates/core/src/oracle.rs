//! The layer-wise L1 loss as a piecewise-affine function of the first-layer
//! parameters.
//!
//! With every layer above the first held fixed, the loss
//! `p ↦ Σ_i Σ_j |(y_i)_j − f(p, x_i)_j|` is affine on each region where all
//! hidden pre-activations and all residuals keep their sign. The region
//! boundaries are the zero sets of those quantities, one per (sample,
//! hidden unit) and one per (sample, output). This module evaluates the loss,
//! classifies points into regions, and hands out region-local affine data.
//! The loss is never materialized as a network of its own; the oracle works
//! from the fixed layers and the training set directly.
//!
//! # Parameter layout
//!
//! A first-layer point `p` has `D = n_1·(n_0+1)` entries. Block `k` (of
//! length `n_0+1`) holds row `k` of `W_1` followed by bias entry `(b_1)_k`,
//! so the gradient of `(z_1)_k` for sample `x` is `(x, 1)` in block `k`.
//!
//! # Constraint order
//!
//! Every tag has a dense index. Neuron tags come first, ordered by sample,
//! then layer, then unit; residual tags follow, ordered by sample, then
//! output. Index order agrees with the derived `Ord` on [`ConstraintTag`],
//! which is what ratio tests use to break ties.

use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};
use crate::network::{Architecture, LayerParams, NetworkParams, TrainingSet};

/// Identity of one kink surface.
///
/// `layer` is 1-based (`1..=L`); sample, unit and output indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConstraintTag {
    Neuron { sample: usize, layer: usize, unit: usize },
    Residual { sample: usize, output: usize },
}

impl ConstraintTag {
    pub fn sample(&self) -> usize {
        match *self {
            ConstraintTag::Neuron { sample, .. } | ConstraintTag::Residual { sample, .. } => sample,
        }
    }
}

impl std::fmt::Display for ConstraintTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConstraintTag::Neuron { sample, layer, unit } => write!(f, "z[{sample}][{layer}][{unit}]"),
            ConstraintTag::Residual { sample, output } => write!(f, "r[{sample}][{output}]"),
        }
    }
}

/// Tri-state sign of one constraint value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum State {
    Neg,
    Zero,
    Pos,
}

impl State {
    pub fn from_value(v: f64, tol: f64) -> State {
        if v > tol {
            State::Pos
        } else if v < -tol {
            State::Neg
        } else {
            State::Zero
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            State::Neg => -1.0,
            State::Zero => 0.0,
            State::Pos => 1.0,
        }
    }

    /// ReLU gate for a neuron in this state. Zero counts as closed.
    pub fn gate(self) -> bool {
        self == State::Pos
    }

    pub fn as_char(self) -> char {
        match self {
            State::Neg => '-',
            State::Zero => '0',
            State::Pos => '+',
        }
    }
}

/// States of every constraint, indexed like the constraint list.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RegionSignature {
    states: Vec<State>,
}

impl RegionSignature {
    pub fn new(states: Vec<State>) -> Self {
        Self { states }
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn get(&self, index: usize) -> State {
        self.states[index]
    }

    pub fn set(&mut self, index: usize, state: State) {
        self.states[index] = state;
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Indices whose state is `Zero`.
    pub fn zeros(&self) -> Vec<usize> {
        self.states.iter().enumerate().filter(|(_, s)| **s == State::Zero).map(|(i, _)| i).collect()
    }

    pub fn is_full_dimensional(&self) -> bool {
        !self.states.contains(&State::Zero)
    }

    /// Indices where the two signatures differ.
    pub fn diff(&self, other: &RegionSignature) -> Vec<usize> {
        self.states
            .iter()
            .zip(&other.states)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }
}

impl std::fmt::Display for RegionSignature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s: String = self.states.iter().map(|s| s.as_char()).collect();
        f.write_str(&s)
    }
}

/// The loss restricted to one region: `value(p) = gradient·p + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePiece {
    pub gradient: Vec<f64>,
    pub intercept: f64,
    pub signature: RegionSignature,
}

impl AffinePiece {
    pub fn evaluate(&self, p: &[f64]) -> f64 {
        dot(&self.gradient, p) + self.intercept
    }
}

/// Relative tolerances. The absolute activity threshold is
/// `activity·(1 + max|y|)` and the probe step at `p` is `probe·(1 + ‖p‖)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub activity: f64,
    pub probe: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { activity: 1e-8, probe: 1e-7 }
    }
}

/// First crossing found by a ratio test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub step: f64,
    pub index: usize,
    pub tag: ConstraintTag,
}

/// Layer-wise loss oracle over first-layer parameters.
#[derive(Debug, Clone)]
pub struct LossOracle {
    arch: Architecture,
    // θ*_2 … θ*_{L+1}
    fixed: Vec<LayerParams>,
    data: TrainingSet,
    tolerances: Tolerances,
    activity_abs: f64,
    // offset of hidden layer l (0-based) within one sample's neuron block
    layer_offsets: Vec<usize>,
    hidden_units: usize,
}

pub fn make_oracle(
    arch: Architecture,
    fixed: Vec<LayerParams>,
    data: TrainingSet,
    tolerances: Tolerances,
) -> Result<LossOracle> {
    LossOracle::new(arch, fixed, data, tolerances)
}

impl LossOracle {
    pub fn new(
        arch: Architecture,
        fixed: Vec<LayerParams>,
        data: TrainingSet,
        tolerances: Tolerances,
    ) -> Result<Self> {
        let w = arch.widths();
        let l = arch.hidden_layers();
        if fixed.len() != l {
            return Err(Error::ShapeMismatch(format!(
                "{l} hidden layers need {l} fixed layers above the first, got {}",
                fixed.len()
            )));
        }
        for (m, layer) in fixed.iter().enumerate() {
            // fixed[m] is θ*_{m+2}: n_{m+2} × n_{m+1}
            if layer.in_dim() != w[m + 1] || layer.out_dim() != w[m + 2] {
                return Err(Error::ShapeMismatch(format!(
                    "fixed layer {} is {}x{}, expected {}x{}",
                    m + 2,
                    layer.out_dim(),
                    layer.in_dim(),
                    w[m + 2],
                    w[m + 1]
                )));
            }
        }
        if data.input_dim() != arch.input_dim() || data.output_dim() != arch.output_dim() {
            return Err(Error::ShapeMismatch("training set does not match architecture".into()));
        }
        if !(tolerances.activity > 0.0 && tolerances.probe > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        let mut layer_offsets = Vec::with_capacity(l);
        let mut acc = 0;
        for &n in &w[1..=l] {
            layer_offsets.push(acc);
            acc += n;
        }
        let activity_abs = tolerances.activity * (1.0 + data.max_abs_target());
        Ok(Self { arch, fixed, data, tolerances, activity_abs, layer_offsets, hidden_units: acc })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn fixed_layers(&self) -> &[LayerParams] {
        &self.fixed
    }

    pub fn data(&self) -> &TrainingSet {
        &self.data
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tolerances
    }

    /// Absolute activity threshold `τ_act`.
    pub fn activity_threshold(&self) -> f64 {
        self.activity_abs
    }

    /// Probe step `ε` at `p`.
    pub fn probe_step(&self, p: &[f64]) -> f64 {
        self.tolerances.probe * (1.0 + crate::linalg::norm(p))
    }

    /// Number of free parameters `D`.
    pub fn dim(&self) -> usize {
        self.arch.first_layer_dim()
    }

    pub fn num_samples(&self) -> usize {
        self.data.len()
    }

    pub fn num_neuron_constraints(&self) -> usize {
        self.data.len() * self.hidden_units
    }

    pub fn num_constraints(&self) -> usize {
        self.data.len() * (self.hidden_units + self.arch.output_dim())
    }

    fn widths(&self) -> &[usize] {
        self.arch.widths()
    }

    fn block(&self) -> usize {
        self.widths()[0] + 1
    }

    pub fn neuron_index(&self, sample: usize, layer: usize, unit: usize) -> usize {
        sample * self.hidden_units + self.layer_offsets[layer - 1] + unit
    }

    pub fn residual_index(&self, sample: usize, output: usize) -> usize {
        self.num_neuron_constraints() + sample * self.arch.output_dim() + output
    }

    pub fn index_of(&self, tag: ConstraintTag) -> Result<usize> {
        let w = self.widths();
        let l = self.arch.hidden_layers();
        match tag {
            ConstraintTag::Neuron { sample, layer, unit }
                if sample < self.data.len() && (1..=l).contains(&layer) && unit < w[layer] =>
            {
                Ok(self.neuron_index(sample, layer, unit))
            }
            ConstraintTag::Residual { sample, output }
                if sample < self.data.len() && output < self.arch.output_dim() =>
            {
                Ok(self.residual_index(sample, output))
            }
            other => Err(Error::InvalidTag(other.to_string())),
        }
    }

    pub fn tag(&self, index: usize) -> ConstraintTag {
        let nn = self.num_neuron_constraints();
        if index < nn {
            let sample = index / self.hidden_units;
            let within = index % self.hidden_units;
            let layer = self.layer_offsets.iter().rposition(|&o| o <= within).unwrap() + 1;
            ConstraintTag::Neuron { sample, layer, unit: within - self.layer_offsets[layer - 1] }
        } else {
            let r = index - nn;
            let nout = self.arch.output_dim();
            ConstraintTag::Residual { sample: r / nout, output: r % nout }
        }
    }

    /// All kink surfaces in ascending tag order.
    pub fn enumerate_constraints(&self) -> Vec<ConstraintTag> {
        (0..self.num_constraints()).map(|i| self.tag(i)).collect()
    }

    fn check_point(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "first-layer point has {} entries, expected {}",
                p.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// First-layer parameters `(W_1, b_1)` encoded by `p`.
    pub fn decode(&self, p: &[f64]) -> Result<LayerParams> {
        self.check_point(p)?;
        let (n0, n1, b) = (self.widths()[0], self.widths()[1], self.block());
        let mut w = Vec::with_capacity(n1 * n0);
        let mut bias = Vec::with_capacity(n1);
        for k in 0..n1 {
            w.extend_from_slice(&p[k * b..k * b + n0]);
            bias.push(p[k * b + n0]);
        }
        LayerParams::new(DenseMatrix::new(n1, n0, w)?, bias)
    }

    /// Inverse of [`decode`](Self::decode).
    pub fn encode(&self, first: &LayerParams) -> Result<Vec<f64>> {
        let (n0, n1) = (self.widths()[0], self.widths()[1]);
        if first.in_dim() != n0 || first.out_dim() != n1 {
            return Err(Error::ShapeMismatch("first layer shape".into()));
        }
        let mut p = Vec::with_capacity(self.dim());
        for k in 0..n1 {
            p.extend_from_slice(first.weight.row(k));
            p.push(first.bias[k]);
        }
        Ok(p)
    }

    /// The full network `(θ_1(p), θ*_2, …, θ*_{L+1})`.
    pub fn network(&self, p: &[f64]) -> Result<NetworkParams> {
        let mut layers = vec![self.decode(p)?];
        layers.extend(self.fixed.iter().cloned());
        NetworkParams::new(layers)
    }

    // --- per-sample kernels ------------------------------------------------

    /// Writes the neuron pre-activations of sample `i` into `neurons` and its
    /// residuals `y − f` into `residuals`.
    fn sample_values(&self, p: &[f64], i: usize, neurons: &mut [f64], residuals: &mut [f64]) {
        let w = self.widths();
        let (n0, n1, b) = (w[0], w[1], self.block());
        let x = self.data.input(i);
        for k in 0..n1 {
            let row = &p[k * b..(k + 1) * b];
            neurons[k] = dot(&row[..n0], x) + row[n0];
        }
        let l = self.arch.hidden_layers();
        let mut h: Vec<f64> = neurons[..n1].iter().map(|v| v.max(0.0)).collect();
        for (m, layer) in self.fixed.iter().enumerate() {
            let z: Vec<f64> =
                (0..layer.out_dim()).map(|k| dot(layer.weight.row(k), &h) + layer.bias[k]).collect();
            if m + 1 < l {
                let off = self.layer_offsets[m + 1];
                neurons[off..off + z.len()].copy_from_slice(&z);
                h = z.iter().map(|v| v.max(0.0)).collect();
            } else {
                let y = self.data.target(i);
                for (j, fz) in z.iter().enumerate() {
                    residuals[j] = y[j] - fz;
                }
            }
        }
    }

    /// Directional derivative of every constraint of sample `i` along `d`,
    /// with ReLU gates taken from `gate(index)`.
    fn sample_directional(
        &self,
        d: &[f64],
        i: usize,
        gate: impl Fn(usize) -> bool,
        neurons: &mut [f64],
        residuals: &mut [f64],
    ) {
        let w = self.widths();
        let (n0, n1, b) = (w[0], w[1], self.block());
        let x = self.data.input(i);
        let base = i * self.hidden_units;
        for k in 0..n1 {
            let row = &d[k * b..(k + 1) * b];
            neurons[k] = dot(&row[..n0], x) + row[n0];
        }
        let l = self.arch.hidden_layers();
        let mut dh: Vec<f64> = (0..n1).map(|k| if gate(base + k) { neurons[k] } else { 0.0 }).collect();
        for (m, layer) in self.fixed.iter().enumerate() {
            let dz: Vec<f64> = (0..layer.out_dim()).map(|k| dot(layer.weight.row(k), &dh)).collect();
            if m + 1 < l {
                let off = self.layer_offsets[m + 1];
                neurons[off..off + dz.len()].copy_from_slice(&dz);
                dh = (0..dz.len()).map(|k| if gate(base + off + k) { dz[k] } else { 0.0 }).collect();
            } else {
                for (j, v) in dz.iter().enumerate() {
                    residuals[j] = -v;
                }
            }
        }
    }

    /// Gradient, with respect to `z_1` of sample `i`, of `Σ_j c_j·(f_i)_j` where
    /// `seed` is `c` placed at the output layer, or of a single neuron when
    /// `start_layer < L+1`. Gates come from `states`.
    fn backprop_to_first(
        &self,
        i: usize,
        states: &RegionSignature,
        start_layer: usize,
        seed: Vec<f64>,
    ) -> Vec<f64> {
        // `u` is the gradient with respect to z_{m} for m = start_layer.
        let base = i * self.hidden_units;
        let mut u = seed;
        for m in (2..=start_layer).rev() {
            let layer = &self.fixed[m - 2];
            let below = m - 1;
            let off = self.layer_offsets[below - 1];
            let mut next = vec![0.0; layer.in_dim()];
            for (k, &uk) in u.iter().enumerate() {
                if uk != 0.0 {
                    crate::linalg::axpy(uk, layer.weight.row(k), &mut next);
                }
            }
            for (k, v) in next.iter_mut().enumerate() {
                if !states.get(base + off + k).gate() {
                    *v = 0.0;
                }
            }
            u = next;
        }
        u
    }

    fn scatter_first(&self, i: usize, u: &[f64], scale: f64, out: &mut [f64]) {
        let (n0, b) = (self.widths()[0], self.block());
        let x = self.data.input(i);
        for (k, &uk) in u.iter().enumerate() {
            if uk == 0.0 {
                continue;
            }
            let c = scale * uk;
            let row = &mut out[k * b..(k + 1) * b];
            crate::linalg::axpy(c, x, &mut row[..n0]);
            row[n0] += c;
        }
    }

    // --- point evaluation ---------------------------------------------------

    /// Every constraint value at `p`, in index order.
    pub fn constraint_values(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_point(p)?;
        let h = self.hidden_units;
        let nout = self.arch.output_dim();
        let nn = self.num_neuron_constraints();
        let mut values = vec![0.0; self.num_constraints()];
        let (neurons, residuals) = values.split_at_mut(nn);
        for i in 0..self.data.len() {
            self.sample_values(
                p,
                i,
                &mut neurons[i * h..(i + 1) * h],
                &mut residuals[i * nout..(i + 1) * nout],
            );
        }
        Ok(values)
    }

    /// Loss from a precomputed value vector.
    pub fn loss_from_values(&self, values: &[f64]) -> f64 {
        values[self.num_neuron_constraints()..].iter().map(|r| r.abs()).sum()
    }

    /// `L_{1,θ*}(p)`.
    pub fn value(&self, p: &[f64]) -> Result<f64> {
        Ok(self.loss_from_values(&self.constraint_values(p)?))
    }

    pub fn signature_from_values(&self, values: &[f64]) -> RegionSignature {
        let tol = self.activity_abs;
        RegionSignature::new(values.iter().map(|&v| State::from_value(v, tol)).collect())
    }

    pub fn region_signature(&self, p: &[f64]) -> Result<RegionSignature> {
        Ok(self.signature_from_values(&self.constraint_values(p)?))
    }

    /// Loss gradient and intercept on the region with the given signature.
    pub fn affine_piece(&self, signature: &RegionSignature) -> Result<AffinePiece> {
        self.check_signature(signature)?;
        if let Some(index) = signature.states().iter().position(|s| *s == State::Zero) {
            return Err(Error::AmbiguousSignature { index });
        }
        let (gradient, intercept) = self.piece_unchecked(signature, 0..self.data.len());
        Ok(AffinePiece { gradient, intercept, signature: signature.clone() })
    }

    /// Gradient and intercept of the loss contribution of `samples`, with
    /// zero states treated as closed gates and zero residual signs.
    pub(crate) fn piece_unchecked(
        &self,
        signature: &RegionSignature,
        samples: impl IntoIterator<Item = usize>,
    ) -> (Vec<f64>, f64) {
        let l = self.arch.hidden_layers();
        let mut gradient = vec![0.0; self.dim()];
        let mut intercept = 0.0;
        let nout = self.arch.output_dim();
        for i in samples {
            let sigma: Vec<f64> =
                (0..nout).map(|j| signature.get(self.residual_index(i, j)).sign()).collect();
            if sigma.iter().all(|s| *s == 0.0) {
                continue;
            }
            // d|r|/dp = −σ·df/dp
            let seed: Vec<f64> = sigma.iter().map(|s| -s).collect();
            let last = self.fixed.last().unwrap();
            let base = i * self.hidden_units;
            let off = self.layer_offsets[l - 1];
            let mut u = vec![0.0; last.in_dim()];
            for (j, &c) in seed.iter().enumerate() {
                if c != 0.0 {
                    crate::linalg::axpy(c, last.weight.row(j), &mut u);
                }
            }
            for (k, v) in u.iter_mut().enumerate() {
                if !signature.get(base + off + k).gate() {
                    *v = 0.0;
                }
            }
            let u = self.backprop_to_first(i, signature, l, u);
            self.scatter_first(i, &u, 1.0, &mut gradient);
            // intercept: Σ_j σ_j (y_j − f_j(0)) with gates frozen
            let f0 = self.masked_output_at_origin(i, signature);
            let y = self.data.target(i);
            intercept += (0..nout).map(|j| sigma[j] * (y[j] - f0[j])).sum::<f64>();
        }
        (gradient, intercept)
    }

    fn masked_output_at_origin(&self, i: usize, signature: &RegionSignature) -> Vec<f64> {
        let base = i * self.hidden_units;
        let n1 = self.widths()[1];
        let mut h = vec![0.0; n1];
        let l = self.arch.hidden_layers();
        for (m, layer) in self.fixed.iter().enumerate() {
            let z: Vec<f64> =
                (0..layer.out_dim()).map(|k| dot(layer.weight.row(k), &h) + layer.bias[k]).collect();
            if m + 1 == l {
                return z;
            }
            let off = self.layer_offsets[m + 1];
            h = z
                .iter()
                .enumerate()
                .map(|(k, &v)| if signature.get(base + off + k).gate() { v } else { 0.0 })
                .collect();
        }
        unreachable!("fixed layers end with the output layer")
    }

    fn check_signature(&self, signature: &RegionSignature) -> Result<()> {
        if signature.len() != self.num_constraints() {
            return Err(Error::ShapeMismatch(format!(
                "signature has {} states, oracle has {} constraints",
                signature.len(),
                self.num_constraints()
            )));
        }
        Ok(())
    }

    /// Region-local gradient of constraint `index` (gates from `signature`).
    pub fn constraint_gradient(&self, signature: &RegionSignature, index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        match self.tag(index) {
            ConstraintTag::Neuron { sample, layer, unit } => {
                let mut seed = vec![0.0; self.widths()[layer]];
                seed[unit] = 1.0;
                let u = self.backprop_to_first(sample, signature, layer, seed);
                self.scatter_first(sample, &u, 1.0, &mut out);
            }
            ConstraintTag::Residual { sample, output } => {
                let l = self.arch.hidden_layers();
                let last = self.fixed.last().unwrap();
                let base = sample * self.hidden_units;
                let off = self.layer_offsets[l - 1];
                let u: Vec<f64> = last
                    .weight
                    .row(output)
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| if signature.get(base + off + k).gate() { w } else { 0.0 })
                    .collect();
                let u = self.backprop_to_first(sample, signature, l, u);
                // r = y − f
                self.scatter_first(sample, &u, -1.0, &mut out);
            }
        }
        out
    }

    /// Value at `p` and region-local gradient of one constraint.
    pub fn constraint_eval(
        &self,
        p: &[f64],
        signature: &RegionSignature,
        tag: ConstraintTag,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_point(p)?;
        self.check_signature(signature)?;
        let index = self.index_of(tag)?;
        let i = tag.sample();
        let mut neurons = vec![0.0; self.hidden_units];
        let mut residuals = vec![0.0; self.arch.output_dim()];
        self.sample_values(p, i, &mut neurons, &mut residuals);
        let value = match tag {
            ConstraintTag::Neuron { layer, unit, .. } => neurons[self.layer_offsets[layer - 1] + unit],
            ConstraintTag::Residual { output, .. } => residuals[output],
        };
        Ok((value, self.constraint_gradient(signature, index)))
    }

    /// Directional derivatives of every constraint along `d`, gates from
    /// `signature`.
    pub fn directional_derivatives(&self, signature: &RegionSignature, d: &[f64]) -> Result<Vec<f64>> {
        self.check_point(d)?;
        self.check_signature(signature)?;
        let h = self.hidden_units;
        let nout = self.arch.output_dim();
        let nn = self.num_neuron_constraints();
        let mut out = vec![0.0; self.num_constraints()];
        let (neurons, residuals) = out.split_at_mut(nn);
        for i in 0..self.data.len() {
            self.sample_directional(
                d,
                i,
                |idx| signature.get(idx).gate(),
                &mut neurons[i * h..(i + 1) * h],
                &mut residuals[i * nout..(i + 1) * nout],
            );
        }
        Ok(out)
    }

    /// Signature of the region entered from a point with constraint values
    /// `values` when moving along `d`.
    ///
    /// A constraint with `|value| > τ_act` keeps its sign. Otherwise its state
    /// is the sign of its derivative along `d`, computed layer by layer with
    /// the states already resolved below it; it stays `Zero` when that
    /// derivative is below `deriv_tol`. Returns the signature and the
    /// directional derivatives under it.
    pub fn entered_signature(
        &self,
        values: &[f64],
        d: &[f64],
        deriv_tol: f64,
    ) -> Result<(RegionSignature, Vec<f64>)> {
        self.check_point(d)?;
        let mut states = vec![State::Zero; self.num_constraints()];
        let mut derivs = vec![0.0; self.num_constraints()];
        for i in 0..self.data.len() {
            self.sample_entered(values, d, i, deriv_tol, &mut states, &mut derivs);
        }
        Ok((RegionSignature::new(states), derivs))
    }

    /// Same as [`entered_signature`](Self::entered_signature) restricted to the
    /// given samples; other entries of `states`/`derivs` are left untouched.
    pub(crate) fn entered_for_samples(
        &self,
        values: &[f64],
        d: &[f64],
        deriv_tol: f64,
        samples: &[usize],
        states: &mut [State],
        derivs: &mut [f64],
    ) {
        for &i in samples {
            self.sample_entered(values, d, i, deriv_tol, states, derivs);
        }
    }

    fn sample_entered(
        &self,
        values: &[f64],
        d: &[f64],
        i: usize,
        deriv_tol: f64,
        states: &mut [State],
        derivs: &mut [f64],
    ) {
        let tol = self.activity_abs;
        let resolve = |v: f64, dv: f64| {
            if v > tol {
                State::Pos
            } else if v < -tol {
                State::Neg
            } else {
                State::from_value(dv, deriv_tol)
            }
        };
        let w = self.widths();
        let (n0, n1, b) = (w[0], w[1], self.block());
        let x = self.data.input(i);
        let base = i * self.hidden_units;
        let l = self.arch.hidden_layers();
        let mut dh = vec![0.0; n1];
        for k in 0..n1 {
            let row = &d[k * b..(k + 1) * b];
            let dz = dot(&row[..n0], x) + row[n0];
            let s = resolve(values[base + k], dz);
            states[base + k] = s;
            derivs[base + k] = dz;
            dh[k] = if s.gate() { dz } else { 0.0 };
        }
        for (m, layer) in self.fixed.iter().enumerate() {
            let dz: Vec<f64> = (0..layer.out_dim()).map(|k| dot(layer.weight.row(k), &dh)).collect();
            if m + 1 < l {
                let off = base + self.layer_offsets[m + 1];
                dh = vec![0.0; dz.len()];
                for k in 0..dz.len() {
                    let s = resolve(values[off + k], dz[k]);
                    states[off + k] = s;
                    derivs[off + k] = dz[k];
                    if s.gate() {
                        dh[k] = dz[k];
                    }
                }
            } else {
                for (j, v) in dz.iter().enumerate() {
                    let idx = self.residual_index(i, j);
                    let dr = -v;
                    states[idx] = resolve(values[idx], dr);
                    derivs[idx] = dr;
                }
            }
        }
    }

    /// Ratio test from precomputed values and directional derivatives.
    ///
    /// Only constraints outside `active` whose value exceeds `τ_act` and moves
    /// toward zero are candidates; the smallest step wins, ties go to the
    /// smaller index. Derivatives below `1e-12` of the largest one are
    /// round-off and never produce a crossing.
    pub fn ratio_test_with(&self, values: &[f64], derivs: &[f64], active: &[usize]) -> Result<Crossing> {
        let tol = self.activity_abs;
        let floor = 1e-12 * derivs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let mut best: Option<(f64, usize)> = None;
        for (idx, (&v, &dv)) in values.iter().zip(derivs).enumerate() {
            if v.abs() <= tol || v * dv >= 0.0 || dv.abs() <= floor {
                continue;
            }
            let t = -v / dv;
            if !(t > 0.0) || active.contains(&idx) {
                continue;
            }
            match best {
                Some((bt, _)) if t >= bt => {}
                _ => best = Some((t, idx)),
            }
        }
        let (step, index) = best.ok_or(Error::NoCrossing)?;
        Ok(Crossing { step, index, tag: self.tag(index) })
    }

    /// First parameter `t > 0` at which an inactive constraint reaches zero
    /// on the ray `p + t·d`, with gates from `signature`.
    pub fn ratio_test(
        &self,
        p: &[f64],
        d: &[f64],
        signature: &RegionSignature,
        active: &[ConstraintTag],
    ) -> Result<Crossing> {
        if crate::linalg::norm(d) == 0.0 {
            return Err(Error::ShapeMismatch("zero direction".into()));
        }
        let values = self.constraint_values(p)?;
        let derivs = self.directional_derivatives(signature, d)?;
        let active: Vec<usize> = active.iter().map(|t| self.index_of(*t)).collect::<Result<_>>()?;
        self.ratio_test_with(&values, &derivs, &active)
    }

    /// Samples touched by the given constraint indices, sorted, deduplicated.
    pub(crate) fn samples_of(&self, indices: &[usize]) -> Vec<usize> {
        let mut s: Vec<usize> = indices.iter().map(|&i| self.tag(i).sample()).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub(crate) fn hidden_units_per_sample(&self) -> usize {
        self.hidden_units
    }
}
