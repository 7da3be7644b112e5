//! Vertex walking on the layer-wise loss.
//!
//! The walk has two phases. Phase 1 starts inside a full-dimensional region
//! and never leaves its closure: it follows the projected negative gradient
//! of that region's affine piece, and each ratio-test hit joins the active
//! set, until `D` independent surfaces are active and the point is a vertex.
//! Phase 2 moves between adjacent vertices. At a vertex every active surface
//! can be released to either side, which gives up to `2D` edges. The walk
//! takes the edge with the most negative unit-length directional derivative,
//! goes to the next crossing along it, and swaps the released surface for
//! the one it hit. Edges that leave through a bent surface (a neuron above
//! the first layer, or a residual) see normals that depend on the side
//! being entered, so each edge is re-solved until the entered region agrees
//! with the states used to build it.
//!
//! Every pivot refactorizes the `D×D` normal matrix from scratch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, distance, dot, factorize, norm, nullspace_basis, project_nullspace, DenseMatrix, Factorization};
use crate::oracle::{ConstraintTag, LossOracle, RegionSignature, State};
use crate::rng::SplitMix64;

/// Maximum number of re-solves when the entered region changes the normals.
pub const MAX_STABILIZATION_ROUNDS: usize = 5;

/// Relative tolerance on a monotone step: `loss_{t+1} ≤ loss_t + MONOTONE_SLACK·(1+loss_t)`.
pub const MONOTONE_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverLimits {
    pub max_iterations: usize,
    /// Edges with derivative above `−descent_tolerance·(1+loss)` count as ascending.
    pub descent_tolerance: f64,
}

impl Default for SolverLimits {
    fn default() -> Self {
        Self { max_iterations: 20_000, descent_tolerance: 1e-9 }
    }
}

impl SolverLimits {
    fn check(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.descent_tolerance > 0.0) {
            return Err(Error::InvalidConfig("solver limits must be positive".into()));
        }
        Ok(())
    }

    fn descent_threshold(&self, loss: f64) -> f64 {
        self.descent_tolerance * (1.0 + loss.abs())
    }
}

/// A point with its active set. At a vertex `active.len() == D`.
#[derive(Debug, Clone)]
pub struct VertexState {
    pub point: Vec<f64>,
    /// Active constraint indices, ascending.
    pub active: Vec<usize>,
    /// Normals of `active` (row `r` belongs to `active[r]`).
    pub normals: DenseMatrix,
    /// Signature at `point`; active constraints are `Zero`.
    pub signature: RegionSignature,
    pub values: Vec<f64>,
    pub loss: f64,
    pub factorization: Option<Factorization>,
}

impl VertexState {
    pub fn active_tags(&self, o: &LossOracle) -> Vec<ConstraintTag> {
        self.active.iter().map(|&i| o.tag(i)).collect()
    }

    pub fn is_vertex(&self) -> bool {
        self.factorization.is_some()
    }
}

/// Which side the released surface is left to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Orientation {
    Pos,
    Neg,
}

impl Orientation {
    pub fn sign(self) -> f64 {
        match self {
            Orientation::Pos => 1.0,
            Orientation::Neg => -1.0,
        }
    }

    fn state(self) -> State {
        match self {
            Orientation::Pos => State::Pos,
            Orientation::Neg => State::Neg,
        }
    }
}

/// One edge leaving a vertex.
#[derive(Debug, Clone)]
pub struct EdgeCandidate {
    pub leaving: usize,
    pub leaving_tag: ConstraintTag,
    pub orientation: Orientation,
    /// Unit direction of the edge.
    pub direction: Vec<f64>,
    pub entered: RegionSignature,
    /// Directional derivative of the loss along `direction`.
    pub derivative: f64,
    /// Normals used for the final solve (row order follows the active set).
    pub normals: DenseMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Descent,
    Pivot,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Descent => 1,
            Phase::Pivot => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub point: Vec<f64>,
    pub loss: f64,
    pub active_count: usize,
    /// `‖p_t − p_{t−1}‖`, zero for the start point.
    pub step_length: f64,
    /// 1-norm condition number of the active normals at a vertex; NaN
    /// before the first vertex.
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
    Degenerate(String),
    NumericalFault(String),
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::Converged => "Converged",
            Termination::MaxIterations => "MaxIterations",
            Termination::Degenerate(_) => "Degenerate",
            Termination::NumericalFault(_) => "NumericalFault",
        }
    }
}

/// Iterates of one solver run. Iterate 0 is the start point; iterate
/// `phase1_len` is the first vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub iterates: Vec<Iterate>,
    pub phase1_len: usize,
    pub termination: Termination,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.iterates.iter().map(|it| it.loss).collect()
    }

    pub fn final_point(&self) -> &[f64] {
        &self.iterates.last().expect("trajectory has a start point").point
    }

    pub fn final_loss(&self) -> f64 {
        self.iterates.last().map_or(f64::NAN, |it| it.loss)
    }

    pub fn phase(&self, t: usize) -> Phase {
        if t < self.phase1_len {
            Phase::Descent
        } else {
            Phase::Pivot
        }
    }

    /// Number of vertex-to-vertex steps taken.
    pub fn pivot_steps(&self) -> usize {
        self.iterates.len().saturating_sub(self.phase1_len + 1)
    }

    pub fn is_monotone(&self) -> bool {
        self.iterates
            .windows(2)
            .all(|w| w[1].loss <= w[0].loss + MONOTONE_SLACK * (1.0 + w[0].loss))
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub minimizer: Vec<f64>,
    pub trajectory: Trajectory,
}

fn record(iterates: &mut Vec<Iterate>, point: &[f64], loss: f64, active_count: usize) {
    let step_length = iterates.last().map_or(0.0, |prev| distance(&prev.point, point));
    iterates.push(Iterate { point: point.to_vec(), loss, active_count, step_length, condition: f64::NAN });
}

fn normal_matrix(o: &LossOracle, sig: &RegionSignature, active: &[usize]) -> Result<DenseMatrix> {
    let rows: Vec<Vec<f64>> = active.iter().map(|&i| o.constraint_gradient(sig, i)).collect();
    DenseMatrix::from_rows(&rows)
}

/// Minimum-norm correction `δ` with `N·δ = −v` for the active rows `N`, so
/// that the active values return to zero after round-off drift.
fn correct_onto_surfaces(normals: &[Vec<f64>], residual: &[f64], p: &mut [f64]) -> Result<()> {
    let k = normals.len();
    if k == 0 {
        return Ok(());
    }
    let mut gram = DenseMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            gram[(a, b)] = dot(&normals[a], &normals[b]);
        }
    }
    let rhs: Vec<f64> = residual.iter().map(|v| -v).collect();
    let y = factorize(&gram)?.solve(&rhs)?;
    for (row, c) in normals.iter().zip(&y) {
        axpy(*c, row, p);
    }
    Ok(())
}

const START_PERTURBATION: f64 = 1e-6;
const START_ATTEMPTS: u64 = 16;

/// Picks a full-dimensional region whose closure contains `p0`. Constraints
/// that vanish at `p0` are returned as already-reached surfaces.
fn starting_region(o: &LossOracle, p0: &[f64]) -> Result<(RegionSignature, Vec<usize>)> {
    let values = o.constraint_values(p0)?;
    let sig = o.signature_from_values(&values);
    if sig.is_full_dimensional() {
        return Ok((sig, Vec::new()));
    }
    let on = sig.zeros();
    let mag = START_PERTURBATION * (1.0 + norm(p0));
    for attempt in 0..START_ATTEMPTS {
        let mut rng = SplitMix64::new(0x5EED_0000 + attempt);
        let mut q = p0.to_vec();
        for v in q.iter_mut() {
            *v += rng.uniform(-mag, mag);
        }
        let probe = o.region_signature(&q)?;
        // only the surfaces through p0 may change
        let consistent = (0..sig.len()).all(|i| sig.get(i) == State::Zero || probe.get(i) == sig.get(i));
        if probe.is_full_dimensional() && consistent {
            return Ok((probe, on));
        }
    }
    Err(Error::DegenerateStart)
}

/// Phase 1 with an iteration budget; returns `Ok(None)` for the vertex when
/// the budget runs out first.
fn descend(
    o: &LossOracle,
    p0: &[f64],
    limits: &SolverLimits,
    iterates: &mut Vec<Iterate>,
) -> Result<Option<VertexState>> {
    let dim = o.dim();
    let (region, initially_on) = starting_region(o, p0)?;
    let piece = o.affine_piece(&region)?;
    let g = piece.gradient;
    let mut p = p0.to_vec();
    let mut values = o.constraint_values(&p)?;
    let mut loss = o.loss_from_values(&values);
    record(iterates, &p, loss, 0);

    let mut active: Vec<usize> = Vec::with_capacity(dim);
    let mut normals: Vec<Vec<f64>> = Vec::with_capacity(dim);
    let mut pending = initially_on.into_iter();

    while active.len() < dim {
        if iterates.len() > limits.max_iterations {
            return Ok(None);
        }
        if let Some(idx) = pending.next() {
            // already on this surface: zero-length addition
            let n = o.constraint_gradient(&region, idx);
            if !crate::linalg::rank_extends(&normals, &n, 1e-10) {
                return Err(Error::DegenerateStart);
            }
            active.push(idx);
            normals.push(n);
            record(iterates, &p, loss, active.len());
            continue;
        }
        let threshold = limits.descent_threshold(loss);
        let mut dir: Vec<f64> = project_nullspace(&normals, &g)?.iter().map(|v| -v).collect();
        let crossing = if norm(&dir) > threshold {
            let derivs = o.directional_derivatives(&region, &dir)?;
            match o.ratio_test_with(&values, &derivs, &active) {
                Ok(c) => c,
                Err(Error::NoCrossing) => {
                    return Err(Error::UnboundedEdge { derivative: -dot(&dir, &dir) })
                }
                Err(e) => return Err(e),
            }
        } else {
            // flat within the null space: any non-ascending direction that hits a surface
            let mut found = None;
            'basis: for u in nullspace_basis(&normals, dim)? {
                let slope = dot(&g, &u);
                let signs: &[f64] = if slope.abs() <= threshold { &[1.0, -1.0] } else { &[-slope.signum()] };
                for &s in signs {
                    let cand: Vec<f64> = u.iter().map(|v| s * v).collect();
                    let derivs = o.directional_derivatives(&region, &cand)?;
                    if let Ok(c) = o.ratio_test_with(&values, &derivs, &active) {
                        dir = cand;
                        found = Some(c);
                        break 'basis;
                    }
                }
            }
            found.ok_or(Error::NumericalStall { active: active.len() })?
        };
        axpy(crossing.step, &dir, &mut p);
        let n = o.constraint_gradient(&region, crossing.index);
        active.push(crossing.index);
        normals.push(n);
        values = o.constraint_values(&p)?;
        let drift: Vec<f64> = active.iter().map(|&i| values[i]).collect();
        correct_onto_surfaces(&normals, &drift, &mut p)?;
        values = o.constraint_values(&p)?;
        loss = o.loss_from_values(&values);
        record(iterates, &p, loss, active.len());
    }

    let coincident = DEGENERACY_FACTOR * o.activity_threshold();
    let near_zero = values.iter().filter(|v| v.abs() <= coincident).count();
    if near_zero > dim {
        return Err(Error::Degenerate(format!("{near_zero} surfaces meet at the first vertex")));
    }

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by_key(|&r| active[r]);
    let active: Vec<usize> = order.iter().map(|&r| active[r]).collect();
    let rows: Vec<Vec<f64>> = order.iter().map(|&r| normals[r].clone()).collect();
    let normals = DenseMatrix::from_rows(&rows)?;
    let factorization = factorize(&normals)?;
    let signature = o.signature_from_values(&values);
    Ok(Some(VertexState {
        point: p,
        active,
        normals,
        signature,
        values,
        loss,
        factorization: Some(factorization),
    }))
}

/// Phase 1 on its own: walks from `p0` to a vertex, returning the vertex and
/// the iterates visited (start point included).
pub fn descend_to_vertex(o: &LossOracle, p0: &[f64], limits: &SolverLimits) -> Result<(VertexState, Vec<Iterate>)> {
    limits.check()?;
    let mut iterates = Vec::new();
    match descend(o, p0, limits, &mut iterates)? {
        Some(v) => Ok((v, iterates)),
        None => Err(Error::MaxIterations(limits.max_iterations)),
    }
}

/// Derivative tolerance used when resolving entered states along a unit
/// direction.
const ENTER_DERIV_TOL: f64 = 1e-9;

/// Fraction of the activity threshold below which an extra vanishing
/// constraint makes a vertex degenerate.
pub const DEGENERACY_FACTOR: f64 = 1e-4;

struct EdgeContext {
    /// Samples that own at least one zero state at the vertex.
    involved: Vec<usize>,
    /// Loss gradient over all other samples, whose states are fixed.
    fixed_gradient: Vec<f64>,
}

fn edge_context(o: &LossOracle, v: &VertexState) -> EdgeContext {
    let zeros = v.signature.zeros();
    let involved = o.samples_of(&zeros);
    let others = (0..o.num_samples()).filter(|i| involved.binary_search(i).is_err());
    let (fixed_gradient, _) = o.piece_unchecked(&v.signature, others);
    EdgeContext { involved, fixed_gradient }
}

fn sample_range(o: &LossOracle, i: usize) -> impl Iterator<Item = usize> {
    let h = o.hidden_units_per_sample();
    let nout = o.architecture().output_dim();
    let r0 = o.residual_index(i, 0);
    (i * h..(i + 1) * h).chain(r0..r0 + nout)
}

fn solve_edge(
    o: &LossOracle,
    v: &VertexState,
    ctx: &EdgeContext,
    position: usize,
    orientation: Orientation,
) -> Result<EdgeCandidate> {
    let dim = o.dim();
    let leaving = v.active[position];
    let mut provisional = v.signature.clone();
    provisional.set(leaving, orientation.state());
    let mut states = provisional.states().to_vec();
    let mut derivs = vec![0.0; o.num_constraints()];
    for _round in 0..MAX_STABILIZATION_ROUNDS {
        let normals = normal_matrix(o, &provisional, &v.active)?;
        let f = factorize(&normals)?;
        let mut rhs = vec![0.0; dim];
        rhs[position] = orientation.sign();
        let mut d = f.solve(&rhs)?;
        let dn = norm(&d);
        d.iter_mut().for_each(|x| *x /= dn);

        o.entered_for_samples(&v.values, &d, ENTER_DERIV_TOL, &ctx.involved, &mut states, &mut derivs);
        let stable = ctx
            .involved
            .iter()
            .all(|&i| sample_range(o, i).all(|idx| states[idx] == provisional.get(idx)));
        if stable {
            let mut derivative = dot(&ctx.fixed_gradient, &d);
            for &i in &ctx.involved {
                let nout = o.architecture().output_dim();
                for j in 0..nout {
                    let idx = o.residual_index(i, j);
                    derivative += states[idx].sign() * derivs[idx];
                }
            }
            return Ok(EdgeCandidate {
                leaving,
                leaving_tag: o.tag(leaving),
                orientation,
                direction: d,
                entered: provisional,
                derivative,
                normals,
            });
        }
        for &i in &ctx.involved {
            for idx in sample_range(o, i) {
                provisional.set(idx, states[idx]);
            }
        }
    }
    Err(Error::Degenerate(format!(
        "entered region along edge {} ({orientation:?}) did not stabilize",
        o.tag(leaving)
    )))
}

/// All `2D` edges at a vertex.
pub fn edge_directions(o: &LossOracle, v: &VertexState) -> Result<Vec<EdgeCandidate>> {
    if v.active.len() != o.dim() {
        return Err(Error::ShapeMismatch(format!(
            "edge enumeration needs {} active constraints, got {}",
            o.dim(),
            v.active.len()
        )));
    }
    let ctx = edge_context(o, v);
    let mut out = Vec::with_capacity(2 * o.dim());
    for position in 0..v.active.len() {
        for orientation in [Orientation::Pos, Orientation::Neg] {
            out.push(solve_edge(o, v, &ctx, position, orientation)?);
        }
    }
    Ok(out)
}

/// What a pivot did.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub leaving: ConstraintTag,
    pub entering: ConstraintTag,
    pub orientation: Orientation,
    pub derivative: f64,
    pub step: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone)]
pub enum StepOutcome {
    Next(Box<VertexState>, StepRecord),
    Converged,
}

/// Steepest descending edge: most negative derivative, then smaller leaving
/// tag, then `Pos` before `Neg`.
pub fn steepest(candidates: &[EdgeCandidate]) -> Option<&EdgeCandidate> {
    candidates.iter().min_by(|a, b| {
        a.derivative
            .total_cmp(&b.derivative)
            .then(a.leaving.cmp(&b.leaving))
            .then(a.orientation.cmp(&b.orientation))
    })
}

/// One pivot from vertex `v`, or `Converged` if no edge descends.
pub fn vertex_step(o: &LossOracle, v: &VertexState, limits: &SolverLimits) -> Result<StepOutcome> {
    let candidates = edge_directions(o, v)?;
    let best = match steepest(&candidates) {
        Some(c) if c.derivative < -limits.descent_threshold(v.loss) => c,
        _ => return Ok(StepOutcome::Converged),
    };
    let derivs = o.directional_derivatives(&best.entered, &best.direction)?;
    let crossing = match o.ratio_test_with(&v.values, &derivs, &v.active) {
        Ok(c) => c,
        Err(Error::NoCrossing) => return Err(Error::UnboundedEdge { derivative: best.derivative }),
        Err(e) => return Err(e),
    };
    let mut p = v.point.clone();
    axpy(crossing.step, &best.direction, &mut p);

    let mut active: Vec<usize> = v.active.iter().copied().filter(|&i| i != best.leaving).collect();
    let pos = active.partition_point(|&i| i < crossing.index);
    active.insert(pos, crossing.index);

    let mut values = o.constraint_values(&p)?;
    let normals = normal_matrix(o, &best.entered, &active)?;
    let f = factorize(&normals)?;
    let drift: Vec<f64> = active.iter().map(|&i| -values[i]).collect();
    let delta = f.solve(&drift)?;
    axpy(1.0, &delta, &mut p);
    values = o.constraint_values(&p)?;

    let tau = o.activity_threshold();
    if let Some(&bad) = active.iter().find(|&&i| values[i].abs() > tau) {
        return Err(Error::Degenerate(format!(
            "active constraint {} drifted to {:e}",
            o.tag(bad),
            values[bad]
        )));
    }
    // Constraints inside τ but not at round-off level are near-ties; the
    // entered-signature rule resolves them like any other zero state.
    let coincident = DEGENERACY_FACTOR * tau;
    let near_zero = values.iter().filter(|v| v.abs() <= coincident).count();
    if near_zero > o.dim() {
        return Err(Error::Degenerate(format!(
            "{near_zero} surfaces meet at the vertex reached through {}",
            crossing.tag
        )));
    }
    let loss = o.loss_from_values(&values);
    if loss > v.loss + MONOTONE_SLACK * (1.0 + v.loss) {
        return Err(Error::Degenerate(format!("loss increased from {} to {loss}", v.loss)));
    }
    let signature = o.signature_from_values(&values);
    let record = StepRecord {
        leaving: best.leaving_tag,
        entering: crossing.tag,
        orientation: best.orientation,
        derivative: best.derivative,
        step: crossing.step,
        loss_before: v.loss,
        loss_after: loss,
    };
    let next = VertexState { point: p, active, normals, signature, values, loss, factorization: Some(f) };
    Ok(StepOutcome::Next(Box::new(next), record))
}

/// Runs both phases from `p0`. Errors before the first vertex are returned as
/// `Err`, except a degenerate first vertex; that and faults during pivoting
/// end the trajectory with the matching [`Termination`].
pub fn minimize(o: &LossOracle, p0: &[f64], limits: &SolverLimits) -> Result<SolveOutcome> {
    limits.check()?;
    let mut iterates = Vec::new();
    let vertex = match descend(o, p0, limits, &mut iterates) {
        Err(Error::Degenerate(msg)) if !iterates.is_empty() => {
            let phase1_len = iterates.len() - 1;
            let minimizer = iterates.last().unwrap().point.clone();
            let termination = Termination::Degenerate(msg);
            return Ok(SolveOutcome { minimizer, trajectory: Trajectory { iterates, phase1_len, termination } });
        }
        other => other?,
    };
    let phase1_len = iterates.len() - 1;
    let finish = |iterates: Vec<Iterate>, termination| {
        let minimizer = iterates.last().unwrap().point.clone();
        SolveOutcome { minimizer, trajectory: Trajectory { iterates, phase1_len, termination } }
    };
    let Some(mut v) = vertex else {
        return Ok(finish(iterates, Termination::MaxIterations));
    };
    let condition = |v: &VertexState| v.factorization.as_ref().map_or(f64::NAN, |f| f.condition());
    iterates.last_mut().expect("start recorded").condition = condition(&v);
    loop {
        if iterates.len() > limits.max_iterations {
            return Ok(finish(iterates, Termination::MaxIterations));
        }
        match vertex_step(o, &v, limits) {
            Ok(StepOutcome::Converged) => return Ok(finish(iterates, Termination::Converged)),
            Ok(StepOutcome::Next(next, _)) => {
                record(&mut iterates, &next.point, next.loss, next.active.len());
                iterates.last_mut().expect("just recorded").condition = condition(&next);
                v = *next;
            }
            Err(Error::Degenerate(msg)) => return Ok(finish(iterates, Termination::Degenerate(msg))),
            Err(e @ (Error::SingularMatrix { .. } | Error::DependentNormals { .. })) => {
                return Ok(finish(iterates, Termination::Degenerate(e.to_string())))
            }
            Err(e) => return Ok(finish(iterates, Termination::NumericalFault(e.to_string()))),
        }
    }
}

/// Rebuilds the vertex state at a point where `active` surfaces meet.
pub fn vertex_at(o: &LossOracle, point: &[f64], active: &[usize]) -> Result<VertexState> {
    let values = o.constraint_values(point)?;
    let signature = o.signature_from_values(&values);
    let mut active = active.to_vec();
    active.sort_unstable();
    let normals = normal_matrix(o, &signature, &active)?;
    let factorization = if active.len() == o.dim() { Some(factorize(&normals)?) } else { None };
    let loss = o.loss_from_values(&values);
    Ok(VertexState { point: point.to_vec(), active, normals, signature, values, loss, factorization })
}
