//! Brute-force checks that only evaluate the loss and the raw constraint
//! values. None of these use signatures, affine pieces or the solver, so
//! they can be trusted to cross-check them.

use crate::error::{Error, Result};
use crate::linalg::{axpy, norm};
use crate::oracle::LossOracle;
use crate::rng::{unit_direction, SplitMix64};

/// Kinks of a one-dimensional piecewise affine function on `[0, t_max]` and
/// the slope of each interval between them (`kinks.len() + 1` entries).
#[derive(Debug, Clone, PartialEq)]
pub struct LineScanResult {
    pub t_max: f64,
    pub kinks: Vec<f64>,
    pub slopes: Vec<f64>,
}

impl LineScanResult {
    pub fn first_kink(&self) -> Option<f64> {
        self.kinks.first().copied()
    }
}

const MIN_RESOLUTION: usize = 1000;
const REFINE: usize = 64;
const MAX_DEPTH: usize = 4;
const NOISE_MULTIPLE: f64 = 16.0;
const VALUE_FLOOR: f64 = 1e-14;

struct Scanner<F> {
    f: F,
    xtol: f64,
    vtol: f64,
    kinks: Vec<f64>,
}

impl<F: Fn(f64) -> f64> Scanner<F> {
    fn affine(&self, a: f64, b: f64, fa: f64, fb: f64) -> bool {
        [0.25, 0.5, 0.75].iter().all(|&q| {
            let t = a + q * (b - a);
            ((self.f)(t) - (fa + q * (fb - fa))).abs() <= self.vtol
        })
    }

    /// Bisects `[lo, hi]` for the point where `f` leaves the line through
    /// `(t0, f0)` with slope `s`. With `from_right` the roles of the ends are
    /// swapped.
    fn bisect(&self, mut lo: f64, mut hi: f64, t0: f64, f0: f64, s: f64, from_right: bool) -> f64 {
        let on_line = |t: f64| ((self.f)(t) - (f0 + s * (t - t0))).abs() <= self.vtol;
        while hi - lo > self.xtol {
            let m = 0.5 * (lo + hi);
            if on_line(m) != from_right {
                lo = m;
            } else {
                hi = m;
            }
        }
        0.5 * (lo + hi)
    }

    fn on_line(&self, t: f64, line: (f64, f64, f64)) -> bool {
        ((self.f)(t) - (line.1 + line.2 * (t - line.0))).abs() <= self.vtol
    }

    /// Kink in cell `i` between affine neighbours, if the cell holds
    /// exactly one: bisection against the left line, polished by
    /// intersecting the left and right lines.
    fn single_kink(&self, t: &[f64], v: &[f64], i: usize, h: f64) -> Option<f64> {
        let left = (t[i], v[i], (v[i] - v[i - 1]) / h);
        let right = (t[i + 1], v[i + 1], (v[i + 2] - v[i + 1]) / h);
        let mut kappa = self.bisect(t[i], t[i + 1], left.0, left.1, left.2, false);
        let ds = left.2 - right.2;
        if ds != 0.0 {
            let x = ((right.1 - right.2 * right.0) - (left.1 - left.2 * left.0)) / ds;
            if x >= t[i] && x <= t[i + 1] {
                kappa = x;
            }
        }
        let consistent = self.on_line(0.5 * (t[i] + kappa), left) && self.on_line(0.5 * (kappa + t[i + 1]), right);
        consistent.then_some(kappa)
    }

    fn scan(&mut self, a: f64, b: f64, cells: usize, depth: usize) {
        let h = (b - a) / cells as f64;
        let t: Vec<f64> = (0..=cells).map(|k| a + k as f64 * h).collect();
        let v: Vec<f64> = t.iter().map(|&x| (self.f)(x)).collect();
        let ok: Vec<bool> = (0..cells).map(|k| self.affine(t[k], t[k + 1], v[k], v[k + 1])).collect();
        let slope = |k: usize| (v[k + 1] - v[k]) / h;

        let mut k = 0;
        while k < cells {
            if ok[k] {
                if k + 1 < cells && ok[k + 1] && (slope(k + 1) - slope(k)).abs() * h > 4.0 * self.vtol {
                    self.kinks.push(t[k + 1]);
                }
                k += 1;
                continue;
            }
            let i = k;
            while k < cells && !ok[k] {
                k += 1;
            }
            let j = k - 1;
            let left = i > 0;
            let right = j + 1 < cells;
            let single = if i == j && left && right { self.single_kink(&t, &v, i, h) } else { None };
            if let Some(kappa) = single {
                self.kinks.push(kappa);
            } else if depth < MAX_DEPTH && (h > self.xtol * REFINE as f64) {
                let lo = if left { i - 1 } else { i };
                let hi = if right { j + 2 } else { j + 1 };
                self.scan(t[lo], t[hi], REFINE * (hi - lo), depth + 1);
            } else if left {
                self.kinks.push(self.bisect(t[i], t[j + 1], t[i], v[i], slope(i - 1), false));
            } else if right {
                self.kinks.push(self.bisect(t[i], t[j + 1], t[j + 1], v[j + 1], slope(j + 1), true));
            } else {
                self.kinks.push(0.5 * (t[i] + t[j + 1]));
            }
        }
    }
}

/// Scans `f` on a uniform grid of `resolution ≥ 1000` cells over
/// `[0, t_max]`. Cells that are not affine are localized by bisection to
/// `1e-9·t_max`; clusters of adjacent non-affine cells are rescanned on a
/// finer grid first. The affinity test allows 16 times the median second
/// difference of the grid, the round-off level when most cells are affine.
pub fn line_scan(f: impl Fn(f64) -> f64, t_max: f64, resolution: usize) -> LineScanResult {
    let cells = resolution.max(MIN_RESOLUTION);
    let h = t_max / cells as f64;
    let grid: Vec<f64> = (0..=cells).map(|k| f(k as f64 * h)).collect();
    let scale = grid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut curvature: Vec<f64> = grid.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).abs()).collect();
    curvature.sort_by(f64::total_cmp);
    // most cells are affine, so the median second difference is round-off
    let noise = curvature[curvature.len() / 2];
    let vtol = (NOISE_MULTIPLE * noise).max(VALUE_FLOOR * (1.0 + scale));
    let mut sc = Scanner { f, xtol: 1e-9 * t_max, vtol, kinks: Vec::new() };
    sc.scan(0.0, t_max, cells, 0);
    let mut kinks = std::mem::take(&mut sc.kinks);
    kinks.sort_by(f64::total_cmp);
    kinks.dedup_by(|b, a| (*b - *a).abs() <= 2.0 * sc.xtol.max(h * 1e-6));

    let mut bounds = vec![0.0];
    bounds.extend(&kinks);
    bounds.push(t_max);
    let slopes = bounds
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0] + 0.25 * (w[1] - w[0]), w[1] - 0.25 * (w[1] - w[0]));
            if b > a {
                ((sc.f)(b) - (sc.f)(a)) / (b - a)
            } else {
                f64::NAN
            }
        })
        .collect();
    LineScanResult { t_max, kinks, slopes }
}

/// [`line_scan`] of `t ↦ value(p + t·d)`.
pub fn line_scan_loss(o: &LossOracle, p: &[f64], d: &[f64], t_max: f64, resolution: usize) -> LineScanResult {
    line_scan(|t| o.value(&offset(p, d, t)).unwrap_or(f64::NAN), t_max, resolution)
}

/// [`line_scan`] of `t ↦ Σ_i |c_i(p + t·d)|` over all constraint values.
/// Every surface crossing is a kink of this function, including crossings
/// that leave the loss itself unchanged.
pub fn line_scan_surfaces(o: &LossOracle, p: &[f64], d: &[f64], t_max: f64, resolution: usize) -> LineScanResult {
    line_scan(
        |t| {
            o.constraint_values(&offset(p, d, t))
                .map_or(f64::NAN, |v| v.iter().map(|x| x.abs()).sum())
        },
        t_max,
        resolution,
    )
}

/// First sign change of any constraint along `t ↦ p + t·d` on `(0, t_max]`,
/// as `(t, index)`. Samples the constraints on a uniform grid and bisects
/// every constraint that switches inside the first switching cell, so a
/// constraint crossing zero twice within one cell goes unseen.
pub fn first_crossing_scan(
    o: &LossOracle,
    p: &[f64],
    d: &[f64],
    t_max: f64,
    resolution: usize,
) -> Result<Option<(f64, usize)>> {
    let n = resolution.max(MIN_RESOLUTION);
    let base = o.constraint_values(p)?;
    let mut prev_t = 0.0;
    let mut prev = base.clone();
    for k in 1..=n {
        let t = t_max * k as f64 / n as f64;
        let cur = o.constraint_values(&offset(p, d, t))?;
        let switching: Vec<usize> =
            (0..cur.len()).filter(|&i| (prev[i] > 0.0) != (cur[i] > 0.0)).collect();
        if switching.is_empty() {
            prev_t = t;
            prev = cur;
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for i in switching {
            let (mut lo, mut hi) = (prev_t, t);
            let side = prev[i] > 0.0;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if (o.constraint_values(&offset(p, d, mid))?[i] > 0.0) == side {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let root = 0.5 * (lo + hi);
            if best.is_none_or(|(b, _)| root < b) {
                best = Some((root, i));
            }
        }
        return Ok(best);
    }
    Ok(None)
}

fn offset(p: &[f64], d: &[f64], t: f64) -> Vec<f64> {
    let mut q = p.to_vec();
    axpy(t, d, &mut q);
    q
}

fn first_sign_change(a: &[f64], b: &[f64]) -> Option<usize> {
    a.iter().zip(b).position(|(x, y)| (*x > 0.0) != (*y > 0.0))
}

/// Central finite differences of the loss. Fails when some constraint is
/// within `10·τ_act` of zero at `p` or changes sign at one of the probe
/// points.
pub fn fd_gradient(o: &LossOracle, p: &[f64], h: f64) -> Result<Vec<f64>> {
    let base = o.constraint_values(p)?;
    let near = 10.0 * o.activity_threshold();
    if let Some(index) = base.iter().position(|v| v.abs() <= near) {
        return Err(Error::RegionBoundaryTooClose { index });
    }
    let mut g = vec![0.0; p.len()];
    let mut q = p.to_vec();
    for j in 0..p.len() {
        q[j] = p[j] + h;
        let vp = o.constraint_values(&q)?;
        q[j] = p[j] - h;
        let vm = o.constraint_values(&q)?;
        q[j] = p[j];
        if let Some(index) = first_sign_change(&base, &vp).or_else(|| first_sign_change(&base, &vm)) {
            return Err(Error::RegionBoundaryTooClose { index });
        }
        g[j] = (o.loss_from_values(&vp) - o.loss_from_values(&vm)) / (2.0 * h);
    }
    Ok(g)
}

/// Outcome of sampling a sphere around a point.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMinReport {
    pub is_local_min: bool,
    /// Smallest `value(p + r·u) − value(p)` over the sampled directions.
    pub worst: f64,
    pub worst_direction: Vec<f64>,
    pub directions: usize,
}

pub const LOCAL_MIN_SLACK: f64 = 1e-8;

/// Samples `directions ≥ 100` uniform unit vectors `u` and checks
/// `value(p + radius·u) ≥ value(p) − 1e-8` for each.
pub fn local_min_check(o: &LossOracle, p: &[f64], radius: f64, directions: usize, seed: u64) -> Result<LocalMinReport> {
    let m = directions.max(100);
    let f0 = o.value(p)?;
    let mut rng = SplitMix64::new(seed);
    let mut worst = f64::INFINITY;
    let mut worst_direction = Vec::new();
    for _ in 0..m {
        let u = unit_direction(&mut rng, p.len());
        let diff = o.value(&offset(p, &u, radius))? - f0;
        if diff < worst {
            worst = diff;
            worst_direction = u;
        }
    }
    Ok(LocalMinReport { is_local_min: worst >= -LOCAL_MIN_SLACK, worst, worst_direction, directions: m })
}

/// A point of the two-dimensional arrangement where at least two
/// constraint surfaces meet.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrangementVertex {
    pub point: [f64; 2],
    /// Constraints vanishing at the point, ascending.
    pub surfaces: Vec<usize>,
    pub loss: f64,
    pub is_local_min: bool,
}

impl ArrangementVertex {
    pub fn is_degenerate(&self) -> bool {
        self.surfaces.len() > 2
    }
}

/// Brute-force arrangement of a two-parameter instance and a greedy
/// vertex walk through it.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrangementWalk {
    /// Every vertex found in the search box.
    pub vertices: Vec<ArrangementVertex>,
    /// Indices into `vertices` in the order the walk visited them.
    pub path: Vec<usize>,
    /// Index of the vertex where the walk stopped.
    pub minimum: Option<usize>,
    /// Half-width of the square that was searched.
    pub half_width: f64,
}

impl ArrangementWalk {
    pub fn local_minima(&self) -> impl Iterator<Item = &ArrangementVertex> {
        self.vertices.iter().filter(|v| v.is_local_min)
    }

    /// Distance from `p` to the nearest vertex.
    pub fn distance_to_vertex(&self, p: &[f64]) -> f64 {
        self.vertices.iter().map(|v| dist2(&v.point, p)).fold(f64::INFINITY, f64::min)
    }

    pub fn distance_to_local_min(&self, p: &[f64]) -> f64 {
        self.local_minima().map(|v| dist2(&v.point, p)).fold(f64::INFINITY, f64::min)
    }
}

fn dist2(a: &[f64; 2], b: &[f64]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

struct Plane<'a> {
    o: &'a LossOracle,
    m: usize,
}

impl Plane<'_> {
    fn values(&self, x: f64, y: f64) -> Vec<f64> {
        self.o.constraint_values(&[x, y]).unwrap_or_else(|_| vec![f64::NAN; self.m])
    }

    fn loss(&self, p: [f64; 2]) -> f64 {
        self.o.value(&p).unwrap_or(f64::NAN)
    }

    fn value_of(&self, c: usize, p: [f64; 2]) -> f64 {
        self.values(p[0], p[1])[c]
    }

    /// Quadtree search for cells crossed by at least two surfaces, down to
    /// cells of width `min_width`. Returns candidate `(point, a, b)`.
    fn candidates(&self, half: f64, min_width: f64) -> Vec<([f64; 2], usize, usize)> {
        const GRID: usize = 64;
        let w0 = 2.0 * half / GRID as f64;
        let mut stack: Vec<(f64, f64, f64)> = Vec::new();
        for i in 0..GRID {
            for j in 0..GRID {
                stack.push((-half + i as f64 * w0, -half + j as f64 * w0, w0));
            }
        }
        let mut out = Vec::new();
        while let Some((x, y, w)) = stack.pop() {
            let corners = [self.values(x, y), self.values(x + w, y), self.values(x, y + w), self.values(x + w, y + w)];
            let crossing: Vec<usize> = (0..self.m)
                .filter(|&c| {
                    let pos = corners.iter().filter(|v| v[c] > 0.0).count();
                    pos != 0 && pos != 4
                })
                .collect();
            if crossing.len() < 2 {
                continue;
            }
            if w > min_width {
                let h = 0.5 * w;
                stack.extend([(x, y, h), (x + h, y, h), (x, y + h, h), (x + h, y + h, h)]);
                continue;
            }
            for (k, &a) in crossing.iter().enumerate() {
                for &b in &crossing[k + 1..] {
                    out.push(([x + 0.5 * w, y + 0.5 * w], a, b));
                }
            }
        }
        out
    }

    /// Newton steps on `(c_a, c_b) = 0` with a finite-difference Jacobian,
    /// kept only while they reduce the residual.
    fn polish(&self, mut p: [f64; 2], a: usize, b: usize) -> [f64; 2] {
        let res = |p: [f64; 2]| {
            let v = self.values(p[0], p[1]);
            [v[a], v[b]]
        };
        for _ in 0..4 {
            let r = res(p);
            let err = r[0].abs().max(r[1].abs());
            if err == 0.0 {
                break;
            }
            let h = 1e-6 * (1.0 + p[0].abs().max(p[1].abs()));
            let col = |k: usize| {
                let mut q1 = p;
                let mut q2 = p;
                q1[k] += h;
                q2[k] -= h;
                let (r1, r2) = (res(q1), res(q2));
                [(r1[0] - r2[0]) / (2.0 * h), (r1[1] - r2[1]) / (2.0 * h)]
            };
            let (c0, c1) = (col(0), col(1));
            let det = c0[0] * c1[1] - c1[0] * c0[1];
            if det.abs() < 1e-300 {
                break;
            }
            let dx = (r[0] * c1[1] - c1[0] * r[1]) / det;
            let dy = (c0[0] * r[1] - r[0] * c0[1]) / det;
            let q = [p[0] - dx, p[1] - dy];
            let rq = res(q);
            if rq[0].abs().max(rq[1].abs()) < err {
                p = q;
            } else {
                break;
            }
        }
        p
    }

    fn surface_tol(&self, p: [f64; 2]) -> f64 {
        1e-9 * (1.0 + self.o.data().max_abs_target() + p[0].abs() + p[1].abs())
    }

    /// Directions in which the zero set of `c` leaves `p`, found as sign
    /// changes of `c` on a small circle.
    fn surface_directions(&self, c: usize, p: [f64; 2], radius: f64) -> Vec<[f64; 2]> {
        const SAMPLES: usize = 96;
        let at = |th: f64| self.value_of(c, [p[0] + radius * th.cos(), p[1] + radius * th.sin()]);
        let step = std::f64::consts::TAU / SAMPLES as f64;
        let mut dirs = Vec::new();
        let mut prev = at(0.0);
        for k in 1..=SAMPLES {
            let th = k as f64 * step;
            let cur = at(th);
            if (prev > 0.0) != (cur > 0.0) {
                let (mut lo, mut hi) = (th - step, th);
                let flo = prev > 0.0;
                for _ in 0..60 {
                    let m = 0.5 * (lo + hi);
                    if (at(m) > 0.0) == flo {
                        lo = m;
                    } else {
                        hi = m;
                    }
                }
                let m = 0.5 * (lo + hi);
                dirs.push([m.cos(), m.sin()]);
            }
            prev = cur;
        }
        dirs
    }

    fn probe_radius(p: [f64; 2]) -> f64 {
        1e-6 * (1.0 + p[0].abs().max(p[1].abs()))
    }

    /// Edge directions at a vertex with their loss slopes.
    fn edges(&self, v: &ArrangementVertex) -> Vec<(usize, [f64; 2], f64)> {
        let r = Self::probe_radius(v.point);
        let mut out = Vec::new();
        for &c in &v.surfaces {
            for u in self.surface_directions(c, v.point, r) {
                let q = [v.point[0] + r * u[0], v.point[1] + r * u[1]];
                out.push((c, u, (self.loss(q) - v.loss) / r));
            }
        }
        out
    }
}

fn vertices_in_box(plane: &Plane, half: f64) -> Vec<ArrangementVertex> {
    let min_width = 1e-9 * half;
    let mut found: Vec<ArrangementVertex> = Vec::new();
    for (p, a, b) in plane.candidates(half, min_width) {
        let q = plane.polish(p, a, b);
        let merge = 1e-7 * (1.0 + q[0].abs().max(q[1].abs()));
        if found.iter().any(|v| dist2(&v.point, &q) <= merge) {
            continue;
        }
        let vals = plane.values(q[0], q[1]);
        let tol = plane.surface_tol(q);
        if vals[a].abs() > tol || vals[b].abs() > tol {
            continue;
        }
        let surfaces: Vec<usize> = (0..plane.m).filter(|&c| vals[c].abs() <= tol).collect();
        found.push(ArrangementVertex { point: q, surfaces, loss: plane.o.loss_from_values(&vals), is_local_min: false });
    }
    found.sort_by(|a, b| a.point[0].total_cmp(&b.point[0]).then(a.point[1].total_cmp(&b.point[1])));
    for k in 0..found.len() {
        let slack = 1e-9 * (1.0 + found[k].loss);
        let min = plane.edges(&found[k]).iter().all(|e| e.2 >= -slack);
        found[k].is_local_min = min;
    }
    found
}

/// Nearest vertex on surface `c` in direction `u` from `from`.
fn next_on_ray(vertices: &[ArrangementVertex], from: [f64; 2], c: usize, u: [f64; 2], skip: Option<usize>) -> Option<usize> {
    let mut best = None;
    let mut best_t = f64::INFINITY;
    for (k, v) in vertices.iter().enumerate() {
        if Some(k) == skip || !v.surfaces.contains(&c) {
            continue;
        }
        let d = [v.point[0] - from[0], v.point[1] - from[1]];
        let t = d[0] * u[0] + d[1] * u[1];
        let off = (d[0] * u[1] - d[1] * u[0]).abs();
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if t > 1e-9 * (1.0 + len) && off <= 1e-5 * len.max(1e-9) && t < best_t {
            best_t = t;
            best = Some(k);
        }
    }
    best
}

const WALK_LIMIT: usize = 100_000;

/// Enumerates the arrangement of a two-parameter instance and walks it.
///
/// From `start` the walk moves against the loss gradient to the first
/// surface, then along that surface downhill to the first vertex (as the
/// vertex-reaching phase of the solver does), and from there follows the
/// steepest descending edge from vertex to vertex until no edge descends.
/// The search square grows until the walk stays inside it. Touching a
/// vertex where three or more surfaces meet is an error.
pub fn arrangement_walk_2d(o: &LossOracle, start: &[f64]) -> Result<ArrangementWalk> {
    if o.dim() != 2 || start.len() != 2 {
        return Err(Error::ShapeMismatch(format!("arrangement walk needs D = 2, got {}", o.dim())));
    }
    let plane = Plane { o, m: o.num_constraints() };
    let mut half = 4.0 * (1.0 + start[0].abs().max(start[1].abs())).max(25.0);
    const GROWTHS: usize = 4;
    for k in 0..=GROWTHS {
        if let Some(w) = walk_in_box(&plane, [start[0], start[1]], half, k == GROWTHS)? {
            return Ok(w);
        }
        half *= 8.0;
    }
    unreachable!("the last box always returns")
}

/// Vertex where the walk from `start` first arrives. `Ok(None)` asks for a
/// larger box; `Ok(Some(None))` means no vertex is reachable.
fn first_vertex(plane: &Plane, vertices: &[ArrangementVertex], start: [f64; 2], half: f64, last: bool) -> Result<Option<Option<usize>>> {
    let grow = if last { Some(None) } else { None };
    let merge = 1e-7 * (1.0 + start[0].abs().max(start[1].abs()));
    if let Some(k) = vertices.iter().position(|v| dist2(&v.point, &start) <= merge) {
        return Ok(Some(Some(k)));
    }
    // gradient of the starting region from plain evaluations
    let h = 1e-7 * (1.0 + start[0].abs().max(start[1].abs()));
    let g: Vec<f64> = (0..2)
        .map(|j| {
            let mut a = start;
            let mut b = start;
            a[j] += h;
            b[j] -= h;
            (plane.loss(a) - plane.loss(b)) / (2.0 * h)
        })
        .collect();
    let gn = norm(&g);
    // a flat start tries the axis directions in turn
    let rays: Vec<[f64; 2]> = if gn > 0.0 {
        vec![[-g[0] / gn, -g[1] / gn]]
    } else {
        vec![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
    };
    let mut hit = None;
    for d in rays {
        if let Some(t1) = line_scan_surfaces(plane.o, &start, &d, 4.0 * half, 4000).first_kink() {
            hit = Some((d, t1));
            break;
        }
    }
    let Some((d, t1)) = hit else { return Ok(grow) };
    let at = |t: f64| [start[0] + t * d[0], start[1] + t * d[1]];
    let vals = plane.values(at(t1)[0], at(t1)[1]);
    let c = (0..plane.m).min_by(|&a, &b| vals[a].abs().total_cmp(&vals[b].abs())).expect("constraints exist");
    // pin the crossing of c down to round-off
    let sign0 = plane.value_of(c, start) > 0.0;
    let (mut lo, mut hi) = (0.0, t1 + 1e-6 * t1.max(1.0));
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if m <= lo || m >= hi {
            break;
        }
        if (plane.value_of(c, at(m)) > 0.0) == sign0 {
            lo = m;
        } else {
            hi = m;
        }
    }
    let p = at(hi);
    // along the surface, most downhill for the starting gradient first
    let mut dirs = plane.surface_directions(c, p, Plane::probe_radius(p));
    let along = |u: &[f64; 2]| -(u[0] * g[0] + u[1] * g[1]);
    dirs.sort_by(|a, b| along(b).total_cmp(&along(a)));
    // a projected gradient at round-off level leaves both ways open
    let flat = dirs.first().is_some_and(|u| along(u) <= 1e-9 * gn);
    let tries = if flat { dirs.len() } else { dirs.len().min(1) };
    Ok(match dirs[..tries].iter().find_map(|&u| next_on_ray(vertices, p, c, u, None)) {
        Some(k) => Some(Some(k)),
        None => grow,
    })
}

fn walk_in_box(plane: &Plane, start: [f64; 2], half: f64, last: bool) -> Result<Option<ArrangementWalk>> {
    let vertices = vertices_in_box(plane, half);
    let Some(first) = first_vertex(plane, &vertices, start, half, last)? else { return Ok(None) };
    let Some(mut at) = first else {
        return Ok(Some(ArrangementWalk { vertices, path: Vec::new(), minimum: None, half_width: half }));
    };
    let mut path = vec![at];
    for _ in 0..WALK_LIMIT {
        let v = &vertices[at];
        if v.is_degenerate() {
            return Err(Error::Degenerate2D { x: v.point[0], y: v.point[1] });
        }
        let edges = plane.edges(v);
        let best = edges.iter().min_by(|a, b| a.2.total_cmp(&b.2));
        let slack = 1e-9 * (1.0 + v.loss);
        match best {
            Some(&(c, u, slope)) if slope < -slack => match next_on_ray(&vertices, v.point, c, u, Some(at)) {
                Some(k) => {
                    at = k;
                    path.push(k);
                }
                None if last => {
                    return Err(Error::Degenerate(format!("descending edge from ({}, {}) meets no vertex", v.point[0], v.point[1])))
                }
                None => return Ok(None),
            },
            _ => return Ok(Some(ArrangementWalk { vertices, path, minimum: Some(at), half_width: half })),
        }
    }
    Err(Error::MaxIterations(WALK_LIMIT))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, DenseMatrix};
    use crate::network::{Architecture, LayerParams, TrainingSet};
    use crate::oracle::tests::random_oracle;
    use crate::oracle::Tolerances;
    use crate::solver::{minimize, SolverLimits};

    /// Widths (1,1,1) with output layer `v·h + c`.
    fn toy(samples: &[(f64, f64)], v: f64, c: f64) -> LossOracle {
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = samples.iter().map(|&(x, y)| (vec![x], vec![y])).collect();
        let out = LayerParams::new(DenseMatrix::from_rows(&[vec![v]]).unwrap(), vec![c]).unwrap();
        LossOracle::new(
            Architecture::new(vec![1, 1, 1]).unwrap(),
            vec![out],
            TrainingSet::from_pairs(&pairs).unwrap(),
            Tolerances::default(),
        )
        .unwrap()
    }

    fn interior_point(o: &LossOracle, rng: &mut SplitMix64) -> Vec<f64> {
        loop {
            let mut p = vec![0.0; o.dim()];
            rng.fill_uniform(&mut p, -5.0, 5.0);
            let v = o.constraint_values(&p).unwrap();
            if v.iter().all(|x| x.abs() > 1e-3) {
                return p;
            }
        }
    }

    #[test]
    fn scan_of_absolute_value() {
        let r = line_scan(|t| (t - 1.0).abs(), 2.0, 1000);
        assert_eq!(r.kinks.len(), 1);
        assert!((r.kinks[0] - 1.0).abs() < 1e-9);
        assert!((r.slopes[0] + 1.0).abs() < 1e-9 && (r.slopes[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn scan_of_one_sample_toy() {
        // loss |2 − relu(w + b)| along w from (1, 0) is |1 − t|
        let o = toy(&[(1.0, 2.0)], 1.0, 0.0);
        let r = line_scan_loss(&o, &[1.0, 0.0], &[1.0, 0.0], 2.0, 1000);
        assert_eq!(r.kinks.len(), 1);
        assert!((r.kinks[0] - 1.0).abs() < 1e-9);
        assert!((r.slopes[0] + 1.0).abs() < 1e-9 && (r.slopes[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn scan_finds_clustered_kinks() {
        let f = |t: f64| (t - 0.3).abs() + 2.0 * (t - 0.3004).abs() + (t - 0.7).max(0.0);
        let r = line_scan(f, 1.0, 1000);
        assert_eq!(r.kinks.len(), 3, "{:?}", r.kinks);
        for (k, e) in r.kinks.iter().zip([0.3, 0.3004, 0.7]) {
            assert!((k - e).abs() < 1e-9);
        }
    }

    #[test]
    fn scan_slopes_match_affine_pieces() {
        let o = random_oracle(5, &[3, 4, 2, 1], 30);
        let mut rng = SplitMix64::new(1);
        for _ in 0..5 {
            let p = interior_point(&o, &mut rng);
            let d = unit_direction(&mut rng, o.dim());
            let r = line_scan_loss(&o, &p, &d, 2.0, 2000);
            let mut bounds = vec![0.0];
            bounds.extend(&r.kinks);
            bounds.push(2.0);
            for (w, s) in bounds.windows(2).zip(&r.slopes) {
                if w[1] - w[0] < 1e-6 {
                    continue;
                }
                let q = offset(&p, &d, 0.5 * (w[0] + w[1]));
                let piece = o.affine_piece(&o.region_signature(&q).unwrap()).unwrap();
                let expect = dot(&piece.gradient, &d);
                assert!((s - expect).abs() <= 1e-6 * (1.0 + expect.abs()), "{s} vs {expect}");
                // constant within the interval
                for _ in 0..3 {
                    let a = w[0] + (w[1] - w[0]) * rng.uniform(0.05, 0.45);
                    let b = w[0] + (w[1] - w[0]) * rng.uniform(0.55, 0.95);
                    let sec = (o.value(&offset(&p, &d, b)).unwrap() - o.value(&offset(&p, &d, a)).unwrap()) / (b - a);
                    assert!((sec - s).abs() <= 1e-9 * (1.0 + s.abs()) + 1e-11 * o.value(&p).unwrap() / (b - a));
                }
            }
        }
    }

    #[test]
    fn first_surface_kink_matches_ratio_test() {
        let o = random_oracle(8, &[4, 5, 4, 3, 2, 1], 100);
        let mut rng = SplitMix64::new(2);
        for _ in 0..5 {
            let p = interior_point(&o, &mut rng);
            let d = unit_direction(&mut rng, o.dim());
            let sig = o.region_signature(&p).unwrap();
            let c = o.ratio_test(&p, &d, &sig, &[]).unwrap();
            let r = line_scan_surfaces(&o, &p, &d, 2.0 * c.step, 1000);
            let k = r.first_kink().unwrap();
            assert!((k - c.step).abs() <= 1e-6 * (1.0 + c.step), "{k} vs {}", c.step);
        }
    }

    #[test]
    fn first_crossing_scan_matches_ratio_test() {
        let o = random_oracle(9, &[4, 5, 4, 3, 2, 1], 300);
        let mut rng = SplitMix64::new(3);
        for _ in 0..10 {
            let p = interior_point(&o, &mut rng);
            let d = unit_direction(&mut rng, o.dim());
            let sig = o.region_signature(&p).unwrap();
            let c = o.ratio_test(&p, &d, &sig, &[]).unwrap();
            let (t, index) = first_crossing_scan(&o, &p, &d, 2.0 * c.step, 1000).unwrap().unwrap();
            assert!((t - c.step).abs() <= 1e-9 * (1.0 + c.step), "{t} vs {}", c.step);
            assert_eq!(index, c.index);
        }
    }

    #[test]
    fn fd_gradient_exact_on_affine_toy() {
        // inside the region z > 0, r > 0 the loss is 3 − (w + b)... with x = 1
        let o = toy(&[(1.0, 3.0)], 1.0, 0.0);
        let g = fd_gradient(&o, &[0.5, 0.25], 1e-3).unwrap();
        assert!((g[0] + 1.0).abs() < 1e-10 && (g[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn fd_gradient_matches_pieces() {
        let o = random_oracle(3, &[4, 5, 4, 3, 2, 1], 60);
        let mut rng = SplitMix64::new(4);
        let mut checked = 0;
        while checked < 10 {
            let p = interior_point(&o, &mut rng);
            let Ok(g) = fd_gradient(&o, &p, 1e-6) else { continue };
            let piece = o.affine_piece(&o.region_signature(&p).unwrap()).unwrap();
            let scale = 1.0 + norm(&piece.gradient);
            for (a, b) in g.iter().zip(&piece.gradient) {
                assert!((a - b).abs() <= 1e-6 * scale, "{a} vs {b}");
            }
            checked += 1;
        }
    }

    #[test]
    fn fd_gradient_refuses_boundary_points() {
        let o = toy(&[(1.0, 3.0)], 1.0, 0.0);
        // z = w + b = 0
        assert!(matches!(fd_gradient(&o, &[0.5, -0.5], 1e-3), Err(Error::RegionBoundaryTooClose { index: 0 })));
        // probe steps across z = 0
        assert!(matches!(fd_gradient(&o, &[0.5, -0.4999], 1e-3), Err(Error::RegionBoundaryTooClose { .. })));
    }

    #[test]
    fn local_min_of_cone_and_descending_edge() {
        // |1 − relu(w + b)| + |1 − relu(−w + b)| has its minimum 0 at (0, 1)
        let o = toy(&[(1.0, 1.0), (-1.0, 1.0)], 1.0, 0.0);
        assert!(local_min_check(&o, &[0.0, 1.0], 1e-3, 200, 1).unwrap().is_local_min);
        // midpoint between (0, 1) and (1, 2) on r_1 = 0, the loss drops toward (0, 1)
        let r = local_min_check(&o, &[0.5, 0.5], 1e-3, 200, 1).unwrap();
        assert!(!r.is_local_min && r.worst < 0.0);
        assert_eq!(r.directions, 200);
    }

    #[test]
    fn arrangement_of_two_samples() {
        // surfaces: w + b = 0, w + b = 1, −w + b = 0, −w + b = 2
        let o = toy(&[(1.0, 1.0), (-1.0, 2.0)], 1.0, 0.0);
        let walk = arrangement_walk_2d(&o, &[3.0, 7.0]).unwrap();
        let mut pts: Vec<[f64; 2]> = walk.vertices.iter().map(|v| v.point).collect();
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let expected = [[-1.0, 1.0], [-0.5, 1.5], [0.0, 0.0], [0.5, 0.5]];
        assert_eq!(pts.len(), 4, "{pts:?}");
        for (p, e) in pts.iter().zip(expected) {
            assert!((p[0] - e[0]).abs() < 1e-9 && (p[1] - e[1]).abs() < 1e-9, "{p:?} vs {e:?}");
        }
        // zero loss where both residuals vanish
        let m = &walk.vertices[walk.minimum.unwrap()];
        assert!((m.point[0] + 0.5).abs() < 1e-9 && (m.point[1] - 1.5).abs() < 1e-9);
        assert!(m.loss.abs() < 1e-9 && m.is_local_min);
    }

    #[test]
    fn single_sample_has_no_vertices() {
        let o = toy(&[(0.7, 1.5)], 1.0, 0.0);
        let walk = arrangement_walk_2d(&o, &[2.0, 3.0]).unwrap();
        assert!(walk.vertices.is_empty() && walk.path.is_empty() && walk.minimum.is_none());
    }

    #[test]
    fn walk_agrees_with_solver_on_toy() {
        let o = toy(&[(1.3, 2.0), (-0.4, 1.0), (2.2, -0.5), (0.6, 0.3), (-1.7, 1.9)], 0.8, 0.1);
        let start = [6.0, 9.0];
        let walk = arrangement_walk_2d(&o, &start).unwrap();
        let out = minimize(&o, &start, &SolverLimits::default()).unwrap();
        let tr = &out.trajectory;
        for it in &tr.iterates[tr.phase1_len..] {
            assert!(walk.distance_to_vertex(&it.point) < 1e-6);
        }
        assert!(walk.distance_to_local_min(&out.minimizer) < 1e-6);
        let path: Vec<[f64; 2]> = walk.path.iter().map(|&k| walk.vertices[k].point).collect();
        assert_eq!(path.len(), tr.len() - tr.phase1_len);
    }
}
