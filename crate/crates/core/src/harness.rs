//! Seeded experiments: instance generation, solver runs, analysis and the
//! files they leave behind.
//!
//! An instance is a pure function of the configuration. All random entries
//! come from one [`SplitMix64`] stream seeded with `config.seed`, consumed in
//! this order:
//!
//! 1. every layer other than the optimized one, in layer order; per layer the
//!    weight matrix row-major and then the bias vector, uniform on `theta_range`;
//! 2. the samples in order; per sample the input entries and then the target
//!    entries, uniform on `data_range`;
//! 3. the initial first-layer point in parameter layout order, uniform on
//!    `init_range`.

use std::fs;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, PhaseSegmentation};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::network::{forward, Architecture, LayerParams, NetworkParams, TrainingSet};
use crate::oracle::{LossOracle, Tolerances};
use crate::rng::SplitMix64;
use crate::solver::{minimize, Iterate, SolverLimits, Termination, Trajectory};
use crate::verify::arrangement_walk_2d;

/// Everything needed to reproduce a run. Defaults follow the reference
/// protocol: widths (4,5,4,3,2,1), 500 samples, fixed layers on [−1,1],
/// data on [−3,3], start point on [−20,20].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub widths: Vec<usize>,
    pub hidden_layers: usize,
    pub samples: usize,
    pub theta_range: [f64; 2],
    pub data_range: [f64; 2],
    pub init_range: [f64; 2],
    pub max_iterations: usize,
    pub descent_tolerance: f64,
    pub activity_tolerance: f64,
    pub probe_tolerance: f64,
    pub mean_window: usize,
    pub fit_window: usize,
    pub r2_threshold: f64,
    /// Layer whose parameters are optimized (1-based). Layers below it are
    /// folded into the inputs.
    pub layer: usize,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            widths: vec![4, 5, 4, 3, 2, 1],
            hidden_layers: 4,
            samples: 500,
            theta_range: [-1.0, 1.0],
            data_range: [-3.0, 3.0],
            init_range: [-20.0, 20.0],
            max_iterations: 20_000,
            descent_tolerance: 1e-9,
            activity_tolerance: 1e-8,
            probe_tolerance: 1e-7,
            mean_window: 40,
            fit_window: 50,
            r2_threshold: 0.9,
            layer: 1,
            out: None,
        }
    }
}

impl ExperimentConfig {
    /// Toy configuration with two free parameters.
    pub fn toy(seed: u64, samples: usize) -> Self {
        Self { seed, widths: vec![1, 1, 1], hidden_layers: 1, samples, ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: Self = serde_json::from_str(text)?;
        // a config that only lists widths implies its depth
        if !text.contains("\"hidden_layers\"") {
            c.hidden_layers = c.widths.len().saturating_sub(2);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.widths.len() != self.hidden_layers + 2 {
            return bad(format!(
                "{} widths do not match {} hidden layers",
                self.widths.len(),
                self.hidden_layers
            ));
        }
        if self.hidden_layers == 0 || self.widths.contains(&0) {
            return bad("need at least one hidden layer and positive widths".into());
        }
        for (name, r) in [("theta_range", self.theta_range), ("data_range", self.data_range), ("init_range", self.init_range)] {
            if !(r[0] < r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return bad(format!("{name} must satisfy a < b"));
            }
        }
        if self.samples == 0 {
            return bad("samples must be positive".into());
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive".into());
        }
        for (name, v) in [
            ("descent_tolerance", self.descent_tolerance),
            ("activity_tolerance", self.activity_tolerance),
            ("probe_tolerance", self.probe_tolerance),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.mean_window == 0 || self.fit_window < 3 {
            return bad("mean_window ≥ 1 and fit_window ≥ 3 required".into());
        }
        if !(self.r2_threshold > 0.0 && self.r2_threshold <= 1.0) {
            return bad("r2_threshold must be in (0, 1]".into());
        }
        if self.layer == 0 || self.layer > self.hidden_layers {
            return bad(format!("layer must be in 1..={}", self.hidden_layers));
        }
        Ok(())
    }

    pub fn limits(&self) -> SolverLimits {
        SolverLimits { max_iterations: self.max_iterations, descent_tolerance: self.descent_tolerance }
    }

    /// Hex SHA-256 of the canonical JSON of the instance-defining fields
    /// (the output directory is excluded).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// A generated problem: the oracle and the start point.
#[derive(Debug, Clone)]
pub struct Instance {
    pub oracle: LossOracle,
    pub start: Vec<f64>,
}

fn sample_layer(rng: &mut SplitMix64, out: usize, inp: usize, range: [f64; 2]) -> Result<LayerParams> {
    let mut w = DenseMatrix::zeros(out, inp);
    for r in 0..out {
        rng.fill_uniform(w.row_mut(r), range[0], range[1]);
    }
    let mut b = vec![0.0; out];
    rng.fill_uniform(&mut b, range[0], range[1]);
    LayerParams::new(w, b)
}

pub fn generate_instance(config: &ExperimentConfig) -> Result<Instance> {
    config.validate()?;
    let w = &config.widths;
    let k = config.layer;
    let mut rng = SplitMix64::new(config.seed);
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for l in 1..w.len() {
        if l == k {
            continue;
        }
        let layer = sample_layer(&mut rng, w[l], w[l - 1], config.theta_range)?;
        if l < k {
            lower.push(layer);
        } else {
            upper.push(layer);
        }
    }
    let (n0, nout) = (w[0], w[w.len() - 1]);
    let mut inputs = vec![0.0; config.samples * n0];
    let mut targets = vec![0.0; config.samples * nout];
    for i in 0..config.samples {
        rng.fill_uniform(&mut inputs[i * n0..(i + 1) * n0], config.data_range[0], config.data_range[1]);
        rng.fill_uniform(&mut targets[i * nout..(i + 1) * nout], config.data_range[0], config.data_range[1]);
    }
    let mut data = TrainingSet::new(n0, nout, inputs, targets)?;
    if !lower.is_empty() {
        // push predictors through the fixed lower layers and keep h^{(k−1)}
        let mut layers = lower.clone();
        layers.push(LayerParams::zeros(1, w[k - 1]));
        let net = NetworkParams::new(layers)?;
        let mut failed = None;
        data = data.map_inputs(w[k - 1], |x| match forward(&net, x) {
            Ok(tr) => tr.post_activation(k - 1),
            Err(e) => {
                failed = Some(e);
                vec![0.0; w[k - 1]]
            }
        })?;
        if let Some(e) = failed {
            return Err(e);
        }
    }
    let arch = Architecture::new(w[k - 1..].to_vec())?;
    let tolerances = Tolerances { activity: config.activity_tolerance, probe: config.probe_tolerance };
    let oracle = LossOracle::new(arch, upper, data, tolerances)?;
    let mut start = vec![0.0; oracle.dim()];
    rng.fill_uniform(&mut start, config.init_range[0], config.init_range[1]);
    Ok(Instance { oracle, start })
}

/// Measurements derived from one trajectory. Absent values are `null` in
/// JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub config_hash: String,
    pub status: String,
    pub detail: Option<String>,
    /// True when the solver failed before a trajectory could be completed.
    pub partial: bool,
    pub final_loss: f64,
    pub iterations: usize,
    pub phase1_len: usize,
    pub pivot_steps: usize,
    pub monotone: bool,
    pub exp_phase_start: Option<usize>,
    pub exp_phase_end: Option<usize>,
    pub exp_phase_r2: Option<f64>,
    /// Floor extrapolated from the losses up to the midpoint of the
    /// exponential phase.
    pub floor_estimate: Option<f64>,
    /// `|floor_estimate − final_loss| / final_loss`.
    pub floor_estimate_error: Option<f64>,
    pub decay_ratio: Option<f64>,
    pub r2: Option<f64>,
}

/// Files written by [`run`] and the summary they contain.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub seed: u64,
    pub config_hash: String,
    pub dir: Option<PathBuf>,
    pub trajectory_path: Option<PathBuf>,
    pub summary: RunSummary,
    pub trajectory: Option<Trajectory>,
}

impl RunArtifacts {
    pub fn status(&self) -> &str {
        &self.summary.status
    }
}

/// Floor extrapolated at the midpoint of the exponential phase from the
/// phase's losses so far, using lag-`n/3` Aitken triples.
pub fn midpoint_floor(losses: &[f64], seg: &PhaseSegmentation) -> Option<analysis::FloorEstimate> {
    let (lo, mid) = (seg.exponential.0, seg.midpoint());
    let part = losses.get(lo..=mid)?;
    analysis::estimate_loss_floor_lagged(part, part.len(), (part.len() / 3).max(1)).ok()
}

/// Runs the analysis on a trajectory and fills a summary.
pub fn summarize(traj: &Trajectory, config: &ExperimentConfig) -> RunSummary {
    let losses = traj.losses();
    let final_loss = traj.final_loss();
    let seg = analysis::segment_phases(traj, config.fit_window, config.r2_threshold).ok();
    let floor = seg.as_ref().and_then(|s| midpoint_floor(&losses, s));
    let detail = match &traj.termination {
        Termination::Degenerate(m) | Termination::NumericalFault(m) => Some(m.clone()),
        _ => None,
    };
    RunSummary {
        seed: config.seed,
        config_hash: config.fingerprint(),
        status: traj.termination.label().to_string(),
        detail,
        partial: false,
        final_loss,
        iterations: traj.len().saturating_sub(1),
        phase1_len: traj.phase1_len,
        pivot_steps: traj.pivot_steps(),
        monotone: traj.is_monotone(),
        exp_phase_start: seg.as_ref().map(|s| s.exponential.0),
        exp_phase_end: seg.as_ref().map(|s| s.exponential.1),
        exp_phase_r2: seg.as_ref().map(|s| s.r2),
        floor_estimate: floor.as_ref().map(|f| f.floor),
        floor_estimate_error: floor.as_ref().map(|f| (f.floor - final_loss).abs() / final_loss.abs().max(f64::MIN_POSITIVE)),
        decay_ratio: floor.as_ref().map(|f| f.decay_ratio),
        r2: floor.as_ref().map(|f| f.r2),
    }
}

fn failed_summary(config: &ExperimentConfig, e: &Error) -> RunSummary {
    RunSummary {
        seed: config.seed,
        config_hash: config.fingerprint(),
        status: "Error".into(),
        detail: Some(e.to_string()),
        partial: true,
        final_loss: f64::NAN,
        iterations: 0,
        phase1_len: 0,
        pivot_steps: 0,
        monotone: false,
        exp_phase_start: None,
        exp_phase_end: None,
        exp_phase_r2: None,
        floor_estimate: None,
        floor_estimate_error: None,
        decay_ratio: None,
        r2: None,
    }
}

/// Generates the instance, minimizes, analyzes and, when `config.out` is
/// set, writes the CSV series and `summary.json` there. Solver failures are
/// reported in the summary status; only invalid configurations and I/O
/// failures are errors.
pub fn run(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let inst = generate_instance(config)?;
    let (summary, trajectory) = match minimize(&inst.oracle, &inst.start, &config.limits()) {
        Ok(out) => (summarize(&out.trajectory, config), Some(out.trajectory)),
        Err(e) => (failed_summary(config, &e), None),
    };
    let mut artifacts = RunArtifacts {
        seed: config.seed,
        config_hash: summary.config_hash.clone(),
        dir: config.out.clone(),
        trajectory_path: None,
        summary,
        trajectory,
    };
    if let Some(dir) = &config.out {
        artifacts.trajectory_path = Some(write_outputs(dir, config, artifacts.trajectory.as_ref(), &artifacts.summary)?);
    }
    Ok(artifacts)
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content.as_bytes())?;
    Ok(())
}

fn series_csv<I: IntoIterator<Item = (usize, f64)>>(header: &str, rows: I) -> String {
    let mut s = format!("iteration,{header}\n");
    for (t, v) in rows {
        let _ = writeln!(s, "{t},{v}");
    }
    s
}

/// Name of the running-mean column and file stem for a window.
pub fn mean_column(window: usize) -> String {
    format!("step_length_mean{window}")
}

/// Writes all series files for a trajectory plus the summary; returns the
/// trajectory file path.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, traj: Option<&Trajectory>, summary: &RunSummary) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let empty = Trajectory { iterates: Vec::new(), phase1_len: 0, termination: Termination::Converged };
    let traj = traj.unwrap_or(&empty);
    let dim = traj.iterates.first().map_or(0, |it| it.point.len());

    let mut csv = String::from("iteration,loss,step_length,active_count,phase");
    for j in 0..dim {
        let _ = write!(csv, ",p{j}");
    }
    csv.push('\n');
    for (t, it) in traj.iterates.iter().enumerate() {
        let _ = write!(csv, "{t},{},{},{},{}", it.loss, it.step_length, it.active_count, traj.phase(t).number());
        for v in &it.point {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let trajectory_path = dir.join("trajectory.csv");
    write_file(&trajectory_path, &csv)?;
    write_series(dir, config.mean_window, traj)?;
    write_file(&dir.join("summary.json"), &(serde_json::to_string_pretty(summary)? + "\n"))?;
    Ok(trajectory_path)
}

fn write_series(dir: &Path, mean_window: usize, traj: &Trajectory) -> Result<()> {
    let losses = traj.losses();
    write_file(&dir.join("loss.csv"), &series_csv("loss", losses.iter().copied().enumerate()))?;
    // entry t is ‖p_t − p_{t−1}‖, matching the trajectory file
    let steps: Vec<f64> = traj.iterates.iter().skip(1).map(|it| it.step_length).collect();
    write_file(&dir.join("step_length.csv"), &series_csv("step_length", steps.iter().copied().enumerate().map(|(i, v)| (i + 1, v))))?;
    let col = mean_column(mean_window);
    let mean = analysis::running_mean(&steps, mean_window);
    write_file(&dir.join(format!("{col}.csv")), &series_csv(&col, mean.into_iter().enumerate().map(|(i, v)| (i + 1, v))))?;
    let dtf = analysis::distance_to_final(traj).values;
    write_file(&dir.join("dist_to_final.csv"), &series_csv("dist_to_final", dtf.into_iter().enumerate()))?;
    Ok(())
}

/// Reads a trajectory file written by [`run`].
pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Parse("empty trajectory file".into()))?.split(',').collect();
    let expected = ["iteration", "loss", "step_length", "active_count", "phase"];
    if header.len() < expected.len() || header[..expected.len()] != expected {
        return Err(Error::Parse(format!("unexpected trajectory header {:?}", header)));
    }
    let dim = header.len() - expected.len();
    let bad = |line: usize, what: &str| Error::Parse(format!("line {}: bad {what}", line + 2));
    let mut iterates = Vec::new();
    let mut phase1_len = 0;
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(bad(n, "field count"));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(n, header[k]));
        let phase: u8 = f[4].parse().map_err(|_| bad(n, "phase"))?;
        if phase == 1 {
            phase1_len += 1;
        }
        iterates.push(Iterate {
            loss: num(1)?,
            step_length: num(2)?,
            active_count: f[3].parse().map_err(|_| bad(n, "active_count"))?,
            point: (0..dim).map(|j| num(5 + j)).collect::<Result<_>>()?,
            condition: f64::NAN,
        });
    }
    Ok(Trajectory { iterates, phase1_len, termination: Termination::Converged })
}

/// Re-analyzes a trajectory file. Writes the series files and
/// `analysis.json` into `out` when given.
pub fn analyze(trajectory_csv: &Path, config: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    let traj = read_trajectory(trajectory_csv)?;
    let mut summary = summarize(&traj, config);
    summary.status = "Analyzed".into();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_series(dir, config.mean_window, &traj)?;
        write_file(&dir.join("analysis.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    }
    Ok(summary)
}

/// Quantiles of the floor-estimate errors across a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Quantiles {
    /// Linear-interpolation quantiles; `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self { min: v[0], q25: q(0.25), median: q(0.5), q75: q(0.75), max: v[v.len() - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: usize,
    pub failures: usize,
    pub converged_rate: f64,
    pub monotone_rate: f64,
    pub exp_phase_rate: f64,
    pub floor_error: Option<Quantiles>,
    pub results: Vec<RunSummary>,
}

/// Runs every seed independently (in parallel), each into `out/seed_<s>`
/// when an output directory is configured, and aggregates the summaries.
pub fn sweep(config: &ExperimentConfig, seeds: &[u64]) -> Result<SweepSummary> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("seed list is empty".into()));
    }
    config.validate()?;
    let results: Vec<RunSummary> = seeds
        .par_iter()
        .map(|&seed| {
            let mut c = config.clone();
            c.seed = seed;
            c.out = config.out.as_ref().map(|d| d.join(format!("seed_{seed}")));
            match run(&c) {
                Ok(a) => a.summary,
                Err(e) => failed_summary(&c, &e),
            }
        })
        .collect();
    let n = results.len() as f64;
    let rate = |f: &dyn Fn(&RunSummary) -> bool| results.iter().filter(|r| f(r)).count() as f64 / n;
    let errors: Vec<f64> = results.iter().filter_map(|r| r.floor_estimate_error).collect();
    let summary = SweepSummary {
        runs: results.len(),
        failures: results.iter().filter(|r| r.partial).count(),
        converged_rate: rate(&|r| r.status == "Converged"),
        monotone_rate: rate(&|r| r.monotone),
        exp_phase_rate: rate(&|r| r.exp_phase_start.is_some()),
        floor_error: Quantiles::of(&errors),
        results,
    };
    if let Some(dir) = &config.out {
        fs::create_dir_all(dir)?;
        write_file(&dir.join("sweep.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
        let mut csv = String::from("seed,status,final_loss,iterations,phase1_len,exp_phase_start,exp_phase_end,floor_estimate_error\n");
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &summary.results {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                r.seed,
                r.status,
                r.final_loss,
                r.iterations,
                r.phase1_len,
                opt(r.exp_phase_start.map(|v| v.to_string())),
                opt(r.exp_phase_end.map(|v| v.to_string())),
                opt(r.floor_estimate_error.map(|v| v.to_string())),
            );
        }
        write_file(&dir.join("sweep.csv"), &csv)?;
    }
    Ok(summary)
}

/// Cross-check of one two-parameter instance against the arrangement walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCheck {
    pub seed: u64,
    pub samples: usize,
    /// `Match`, `Mismatch`, or `Skipped` when surfaces meet at the walk's path.
    pub status: String,
    pub termination: Option<String>,
    /// Largest distance from a solver vertex to the nearest enumerated vertex.
    pub vertex_distance: Option<f64>,
    /// Distance from the solver's minimizer to the nearest local minimum.
    pub minimizer_distance: Option<f64>,
    pub solver_vertices: usize,
    pub walk_vertices: usize,
}

/// Solves each seed of a two-parameter configuration and compares the
/// trajectory with [`arrangement_walk_2d`] within `tolerance`.
pub fn verify_toys(config: &ExperimentConfig, seeds: &[u64], tolerance: f64) -> Result<Vec<ToyCheck>> {
    config.validate()?;
    let mut checks = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let c = ExperimentConfig { seed, ..config.clone() };
        let inst = generate_instance(&c)?;
        if inst.oracle.dim() != 2 {
            return Err(Error::InvalidConfig(format!("verify needs 2 parameters, got {}", inst.oracle.dim())));
        }
        let mut check = ToyCheck {
            seed,
            samples: c.samples,
            status: "Skipped".into(),
            termination: None,
            vertex_distance: None,
            minimizer_distance: None,
            solver_vertices: 0,
            walk_vertices: 0,
        };
        let walk = match arrangement_walk_2d(&inst.oracle, &inst.start) {
            Ok(w) => w,
            Err(Error::Degenerate2D { .. }) => {
                checks.push(check);
                continue;
            }
            Err(e) => return Err(e),
        };
        let out = minimize(&inst.oracle, &inst.start, &c.limits())?;
        let tr = &out.trajectory;
        let dv = tr.iterates[tr.phase1_len.min(tr.len())..]
            .iter()
            .map(|it| walk.distance_to_vertex(&it.point))
            .fold(0.0, f64::max);
        let dm = walk.distance_to_local_min(&out.minimizer);
        let ok = tr.termination == Termination::Converged && dv <= tolerance && dm <= tolerance;
        check.status = if ok { "Match" } else { "Mismatch" }.into();
        check.termination = Some(tr.termination.label().into());
        check.vertex_distance = Some(dv);
        check.minimizer_distance = Some(dm);
        check.solver_vertices = tr.len() - tr.phase1_len;
        check.walk_vertices = walk.path.len();
        checks.push(check);
    }
    Ok(checks)
}
