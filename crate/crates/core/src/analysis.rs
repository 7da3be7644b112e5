//! Trajectory measurements: step distances and their running means,
//! distance to the final point, loss-floor extrapolation and the split into
//! an exponential decay phase and a fine-tuning phase.
//!
//! Everything here is a pure function of a finished [`Trajectory`] or of a
//! plain series, so the same code re-analyzes trajectories loaded from CSV.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::distance;
use crate::solver::Trajectory;

/// A series indexed by iteration with an optional running mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub values: Vec<f64>,
    pub mean_window: Option<usize>,
    pub running_mean: Option<Vec<f64>>,
}

impl SeriesStats {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, mean_window: None, running_mean: None }
    }

    pub fn with_running_mean(mut self, window: usize) -> Self {
        self.running_mean = Some(running_mean(&self.values, window));
        self.mean_window = Some(window);
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Euclidean distances between consecutive points.
pub fn point_step_distances(points: &[&[f64]]) -> Result<SeriesStats> {
    if points.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: points.len() });
    }
    Ok(SeriesStats::new(points.windows(2).map(|w| distance(w[1], w[0])).collect()))
}

/// Entry `t` is `‖p_{t+1} − p_t‖`.
pub fn step_distances(traj: &Trajectory) -> Result<SeriesStats> {
    point_step_distances(&points_of(traj))
}

fn points_of(traj: &Trajectory) -> Vec<&[f64]> {
    traj.iterates.iter().map(|it| it.point.as_slice()).collect()
}

/// Entry `t` averages the last `min(t + 1, window)` inputs, so early entries
/// use fewer observations. A window of zero is treated as one.
pub fn running_mean(series: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..series.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(w);
            let s: f64 = series[lo..=t].iter().sum();
            s / (t + 1 - lo) as f64
        })
        .collect()
}

pub fn point_distance_to_final(points: &[&[f64]]) -> SeriesStats {
    match points.last() {
        Some(last) => SeriesStats::new(points.iter().map(|p| distance(p, last)).collect()),
        None => SeriesStats::new(Vec::new()),
    }
}

/// Entry `t` is `‖p_t − p_final‖`; the last entry is zero.
pub fn distance_to_final(traj: &Trajectory) -> SeriesStats {
    point_distance_to_final(&points_of(traj))
}

/// Result of an exponential fit `x_t ≈ floor + c·ρ^t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorEstimate {
    pub floor: f64,
    pub decay_ratio: f64,
    /// Half-open index range of the series that was used.
    pub window: (usize, usize),
    pub r2: f64,
    pub accepted_triples: usize,
}

/// Ordinary least squares of `y` on `x`; returns `(slope, intercept, r2)`.
/// A perfectly flat `y` has R² = 1.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).min(1.0) };
    Some((slope, my - slope * mx, r2))
}

/// Log-linear trend of the positive entries of a series: `(slope, r2)`.
/// Negative slope means geometric decrease.
pub fn log_trend(series: &[f64]) -> Option<(f64, f64)> {
    let (x, y): (Vec<f64>, Vec<f64>) = series
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(t, v)| (t as f64, v.ln()))
        .unzip();
    linear_fit(&x, &y).map(|(s, _, r2)| (s, r2))
}

/// Extrapolates the limit of a decaying series from its last `window`
/// entries.
///
/// Each triple gives the Aitken Δ² value `x_t − (x_t − x_{t−1})² / (x_t − 2x_{t−1} + x_{t−2})`,
/// accepted when the denominator exceeds `1e-12·max|x|`. The floor is the
/// median of accepted values, capped at the last entry. The decay ratio and
/// R² come from regressing `ln(x_t − floor)` on `t`. A window in which every
/// difference vanishes is its own floor.
pub fn estimate_loss_floor(losses: &[f64], window: usize) -> Result<FloorEstimate> {
    estimate_loss_floor_lagged(losses, window, 1)
}

/// [`estimate_loss_floor`] on triples `(x_{t−2k}, x_{t−k}, x_t)` with lag
/// `k`. Still exact on geometric-plus-constant series, since `ρ^k` is
/// geometric, while long lags average over the step-wise noise of a vertex
/// walk.
pub fn estimate_loss_floor_lagged(losses: &[f64], window: usize, lag: usize) -> Result<FloorEstimate> {
    let lag = lag.max(1);
    if window < 2 * lag + 1 {
        return Err(Error::TooShort { needed: 2 * lag + 1, got: window });
    }
    if losses.len() < 2 * lag + 1 {
        return Err(Error::TooShort { needed: 2 * lag + 1, got: losses.len() });
    }
    let end = losses.len();
    let start = end - window.min(end);
    let x = &losses[start..end];
    let last = x[x.len() - 1];
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;

    if x.windows(2).all(|w| (w[1] - w[0]).abs() <= tol) {
        return Ok(FloorEstimate { floor: last, decay_ratio: 0.0, window: (start, end), r2: 1.0, accepted_triples: 0 });
    }

    let triples = x.len() - 2 * lag;
    let mut est: Vec<f64> = (2 * lag..x.len())
        .filter_map(|t| {
            let (a, b, c) = (x[t - 2 * lag], x[t - lag], x[t]);
            let den = c - 2.0 * b + a;
            (den.abs() > tol).then(|| {
                let d = c - b;
                c - d * d / den
            })
        })
        .filter(|v| v.is_finite())
        .collect();
    let needed = triples.div_ceil(2).max(1);
    if est.len() < needed {
        return Err(Error::IllConditioned { accepted: est.len() });
    }
    est.sort_by(f64::total_cmp);
    let m = est.len();
    let median = if m % 2 == 1 { est[m / 2] } else { 0.5 * (est[m / 2 - 1] + est[m / 2]) };
    let floor = median.min(last);

    let (tx, ty): (Vec<f64>, Vec<f64>) = x
        .iter()
        .enumerate()
        .filter(|(_, v)| **v - floor > tol)
        .map(|(t, v)| (t as f64, (v - floor).ln()))
        .unzip();
    let (slope, _, r2) = linear_fit(&tx, &ty).ok_or(Error::IllConditioned { accepted: m })?;
    let decay_ratio = slope.exp();
    if !(decay_ratio > 0.0 && decay_ratio < 1.0) {
        return Err(Error::IllConditioned { accepted: m });
    }
    Ok(FloorEstimate { floor, decay_ratio, window: (start, end), r2, accepted_triples: m })
}

/// Log-linear fit of one sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowFit {
    /// Trajectory index of the first entry.
    pub start: usize,
    pub slope: f64,
    pub r2: f64,
    pub qualifies: bool,
}

/// Exponential decay phase followed by the fine-tuning phase. Ranges are
/// inclusive trajectory indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSegmentation {
    pub floor: f64,
    pub exponential: (usize, usize),
    pub fine_tuning: Option<(usize, usize)>,
    /// Fit over the whole exponential phase.
    pub slope: f64,
    pub r2: f64,
    pub windows: Vec<WindowFit>,
}

impl PhaseSegmentation {
    pub fn exponential_len(&self) -> usize {
        self.exponential.1 - self.exponential.0 + 1
    }

    pub fn midpoint(&self) -> usize {
        (self.exponential.0 + self.exponential.1) / 2
    }
}

fn fit_excess(series: &[f64], floor: f64, offset: usize) -> Option<(f64, f64)> {
    let mut x = Vec::with_capacity(series.len());
    let mut y = Vec::with_capacity(series.len());
    for (t, v) in series.iter().enumerate() {
        let e = v - floor;
        if !(e > 0.0) {
            return None;
        }
        x.push((t + offset) as f64);
        y.push(e.ln());
    }
    linear_fit(&x, &y).map(|(s, _, r2)| (s, r2))
}

/// Floor used to segment a loss series: the Aitken estimate over the whole
/// series when it is well conditioned, otherwise the last value less a tiny
/// margin so the trailing window has a defined logarithm.
pub fn segmentation_floor(losses: &[f64]) -> f64 {
    let last = *losses.last().unwrap_or(&0.0);
    match estimate_loss_floor(losses, losses.len()) {
        Ok(f) => f.floor,
        Err(_) => last - 1e-12 * (1.0 + last.abs()),
    }
}

/// Segments `losses`, whose first entry sits at trajectory index `offset`,
/// by sliding log-linear fits of `loss − floor` over windows of `window`.
/// The exponential phase is the longest run of consecutive windows with
/// R² ≥ `r2_threshold` and negative slope (earliest on ties).
pub fn segment_series(losses: &[f64], offset: usize, floor: f64, window: usize, r2_threshold: f64) -> Result<PhaseSegmentation> {
    if window < 3 || losses.len() < window {
        return Err(Error::TooShort { needed: window.max(3), got: losses.len() });
    }
    let windows: Vec<WindowFit> = (0..=losses.len() - window)
        .map(|s| {
            let (slope, r2) = fit_excess(&losses[s..s + window], floor, s + offset).unwrap_or((f64::NAN, 0.0));
            WindowFit { start: s + offset, slope, r2, qualifies: r2 >= r2_threshold && slope < 0.0 }
        })
        .collect();

    let mut best: Option<(usize, usize)> = None;
    let mut run_start = None;
    for (i, w) in windows.iter().enumerate() {
        match (w.qualifies, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                if best.is_none_or(|(a, b)| i - s > b - a + 1) {
                    best = Some((s, i - 1));
                }
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        let i = windows.len();
        if best.is_none_or(|(a, b)| i - s > b - a + 1) {
            best = Some((s, i - 1));
        }
    }
    let (first, last) = best.ok_or(Error::NoExponentialPhase)?;
    let lo = first;
    let hi = last + window - 1;
    let (slope, r2) = fit_excess(&losses[lo..=hi], floor, lo + offset).ok_or(Error::NoExponentialPhase)?;
    let n = losses.len();
    let fine_tuning = (hi + 1 < n).then_some((hi + 1 + offset, n - 1 + offset));
    Ok(PhaseSegmentation { floor, exponential: (lo + offset, hi + offset), fine_tuning, slope, r2, windows })
}

/// Segments the vertex-walking part of a trajectory.
pub fn segment_phases(traj: &Trajectory, window: usize, r2_threshold: f64) -> Result<PhaseSegmentation> {
    let losses = traj.losses();
    let offset = traj.phase1_len.min(losses.len());
    let tail = &losses[offset..];
    if tail.len() < window {
        return Err(Error::TooShort { needed: window, got: tail.len() });
    }
    segment_series(tail, offset, segmentation_floor(tail), window, r2_threshold)
}

/// Reciprocal running mean of step distances over the vertex-walking part
/// of a trajectory. Means below `1e-15` map to `+∞`.
pub fn vertex_density_proxy(traj: &Trajectory, window: usize) -> Result<SeriesStats> {
    let pts = points_of(traj);
    let tail = &pts[traj.phase1_len.min(pts.len())..];
    if tail.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: tail.len() });
    }
    Ok(density_from_steps(&point_step_distances(tail)?.values, window))
}

pub fn density_from_steps(steps: &[f64], window: usize) -> SeriesStats {
    let values = running_mean(steps, window)
        .into_iter()
        .map(|m| if m < 1e-15 { f64::INFINITY } else { 1.0 / m })
        .collect();
    SeriesStats { values, mean_window: Some(window), running_mean: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::solver::{Iterate, Termination};

    fn traj_from(points: Vec<Vec<f64>>, phase1_len: usize) -> Trajectory {
        let n = points.len();
        let iterates = points
            .into_iter()
            .enumerate()
            .map(|(t, point)| Iterate { point, loss: (n - t) as f64, active_count: 0, step_length: 0.0, condition: f64::NAN })
            .collect();
        Trajectory { iterates, phase1_len, termination: Termination::Converged }
    }

    #[test]
    fn step_distances_basics() {
        let t = traj_from(vec![vec![1.0, 1.0]; 4], 0);
        assert_eq!(step_distances(&t).unwrap().values, vec![0.0; 3]);
        let t = traj_from(vec![vec![0.0, 0.0], vec![3.0, 0.0]], 0);
        assert_eq!(step_distances(&t).unwrap().values, vec![3.0]);
        let t = traj_from(vec![vec![0.0]], 0);
        assert!(matches!(step_distances(&t), Err(Error::TooShort { .. })));
    }

    #[test]
    fn running_mean_partial_windows() {
        let s = [4.0, 2.0, 6.0, 8.0];
        assert_eq!(running_mean(&s, 2), vec![4.0, 3.0, 4.0, 7.0]);
        assert_eq!(running_mean(&s, 40)[0], 4.0);
        assert_eq!(running_mean(&[7.5; 100], 40), vec![7.5; 100]);
    }

    #[test]
    fn distance_to_final_ends_at_zero() {
        let t = traj_from(vec![vec![0.0, 4.0], vec![3.0, 0.0], vec![3.0, 4.0]], 0);
        assert_eq!(distance_to_final(&t).values, vec![3.0, 4.0, 0.0]);
        assert_eq!(distance_to_final(&traj_from(vec![vec![1.0]], 0)).values, vec![0.0]);
    }

    #[test]
    fn floor_exact_on_geometric() {
        let x: Vec<f64> = (0..60).map(|t| 5.0 + 3.0 * 0.8f64.powi(t)).collect();
        let f = estimate_loss_floor(&x, 40).unwrap();
        assert!((f.floor - 5.0).abs() <= 1e-10 * 5.0, "{}", f.floor);
        assert!((f.decay_ratio - 0.8).abs() < 1e-6);
        assert!(f.r2 > 0.999_999);
    }

    #[test]
    fn floor_of_constant() {
        let f = estimate_loss_floor(&[3.25; 20], 10).unwrap();
        assert_eq!(f.floor, 3.25);
        assert_eq!(f.window, (10, 20));
    }

    #[test]
    fn floor_with_noise() {
        let mut rng = SplitMix64::new(77);
        let x: Vec<f64> = (0..120).map(|t| (2.0 + 0.9f64.powi(t)) * (1.0 + rng.uniform(-1e-4, 1e-4))).collect();
        let f = estimate_loss_floor(&x, 120).unwrap();
        assert!((f.floor - 2.0).abs() <= 0.01, "{}", f.floor);
    }

    #[test]
    fn floor_rejects_short_windows() {
        assert!(matches!(estimate_loss_floor(&[1.0, 0.5, 0.25], 2), Err(Error::TooShort { .. })));
    }

    #[test]
    fn floor_ill_conditioned_on_linear_decrease() {
        let x: Vec<f64> = (0..30).map(|t| 100.0 - t as f64).collect();
        assert!(matches!(estimate_loss_floor(&x, 30), Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn segmentation_of_decay_then_plateau() {
        let x: Vec<f64> = (0..600).map(|t| if t < 300 { 1000.0 * 0.95f64.powi(t) + 1.0 } else { 1.0 }).collect();
        let seg = segment_series(&x, 0, segmentation_floor(&x), 50, 0.9).unwrap();
        assert!(seg.exponential.0 <= 50);
        assert!((seg.exponential.1 as i64 - 300).abs() <= 50, "{:?}", seg.exponential);
        assert!(seg.fine_tuning.unwrap().1 == 599);
    }

    #[test]
    fn segmentation_of_pure_geometric() {
        let x: Vec<f64> = (0..200).map(|t| 4.0 + 10.0 * 0.9f64.powi(t)).collect();
        let seg = segment_series(&x, 25, 4.0, 50, 0.9).unwrap();
        assert_eq!(seg.exponential, (25, 224));
        assert!(seg.fine_tuning.is_none());
        assert!((seg.slope - 0.9f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn segmentation_too_short_or_flat() {
        assert!(matches!(segment_series(&[1.0; 10], 0, 0.0, 50, 0.9), Err(Error::TooShort { .. })));
        let up: Vec<f64> = (0..80).map(|t| 1.0 + t as f64).collect();
        assert!(matches!(segment_series(&up, 0, 0.0, 50, 0.9), Err(Error::NoExponentialPhase)));
    }

    #[test]
    fn density_proxy_is_reciprocal_mean() {
        let pts: Vec<Vec<f64>> = (0..10).map(|t| vec![0.5 * t as f64]).collect();
        let d = vertex_density_proxy(&traj_from(pts, 2), 4).unwrap();
        assert_eq!(d.values.len(), 7);
        assert!(d.values.iter().all(|v| (v - 2.0).abs() < 1e-12));

        let pts: Vec<Vec<f64>> = (0..8).map(|t| vec![1.0 - 0.5f64.powi(t)]).collect();
        let d = vertex_density_proxy(&traj_from(pts, 0), 1).unwrap();
        for w in d.values.windows(2) {
            assert!((w[1] / w[0] - 2.0).abs() < 1e-9);
        }
        let d = vertex_density_proxy(&traj_from(vec![vec![0.0]; 3], 0), 2).unwrap();
        assert!(d.values.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn log_trend_signs() {
        let down: Vec<f64> = (0..20).map(|t| 0.7f64.powi(t)).collect();
        let (s, r2) = log_trend(&down).unwrap();
        assert!(s < 0.0 && r2 > 0.999);
    }
}
