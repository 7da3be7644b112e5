use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use relu_vertex::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "relu-vertex", version, about = "Vertex-walk minimization of layer-wise ReLU network losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one seeded instance and write its series.
    Run {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        seed: Option<u64>,
        /// Optimize layer k with the layers below folded into the inputs.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Solve a list of seeds, each into its own subdirectory.
    Sweep {
        #[command(flatten)]
        opts: Overrides,
        /// Comma-separated seeds or ranges, e.g. `0-9,20`.
        #[arg(long, default_value = "0-9")]
        seeds: String,
    },
    /// Re-analyze an existing trajectory.csv.
    Analyze {
        #[command(flatten)]
        opts: Overrides,
        trajectory: PathBuf,
    },
    /// Compare the solver with brute-force enumeration on two-parameter instances.
    Verify {
        #[command(flatten)]
        opts: Overrides,
        /// First seed to check.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: u64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct Overrides {
    /// JSON file with configuration fields; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Layer widths including input and output, e.g. `4,5,4,3,2,1`.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    mean_window: Option<usize>,
    #[arg(long)]
    fit_window: Option<usize>,
}

impl Overrides {
    fn apply(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => base,
        };
        if let Some(w) = &self.widths {
            c.widths = w.clone();
            c.hidden_layers = w.len().saturating_sub(2);
        }
        if let Some(v) = self.samples {
            c.samples = v;
        }
        if let Some(v) = self.max_iter {
            c.max_iterations = v;
        }
        if let Some(v) = self.mean_window {
            c.mean_window = v;
        }
        if let Some(v) = self.fit_window {
            c.fit_window = v;
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse()?, b.parse()?);
                if a > b {
                    bail!("empty seed range {part}");
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse()?),
        }
    }
    Ok(seeds)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { opts, seed, layer } => {
            let mut c = opts.apply(ExperimentConfig::default())?;
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(k) = layer {
                c.layer = k;
            }
            c.validate()?;
            let a = harness::run(&c)?;
            print_json(&a.summary)?;
            Ok(if a.summary.partial { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Sweep { opts, seeds } => {
            let c = opts.apply(ExperimentConfig::default())?;
            let s = harness::sweep(&c, &parse_seeds(&seeds)?)?;
            let mut brief = s.clone();
            brief.results.clear();
            print_json(&brief)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { opts, trajectory } => {
            let c = opts.apply(ExperimentConfig::default())?;
            let summary = harness::analyze(&trajectory, &c, c.out.as_deref())?;
            print_json(&summary)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { opts, seed, count, tolerance } => {
            let c = opts.apply(ExperimentConfig::toy(0, 3))?;
            let seeds: Vec<u64> = (seed..seed + count).collect();
            let checks = harness::verify_toys(&c, &seeds, tolerance)?;
            let mismatches = checks.iter().filter(|k| k.status == "Mismatch").count();
            let skipped = checks.iter().filter(|k| k.status == "Skipped").count();
            if let Some(dir) = &c.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&checks)? + "\n")?;
            }
            for k in &checks {
                println!(
                    "seed {:>4}  {:<8}  vertices {:>3}/{:<3}  vertex distance {}  minimizer distance {}",
                    k.seed,
                    k.status,
                    k.solver_vertices,
                    k.walk_vertices,
                    k.vertex_distance.map_or("-".into(), |v| format!("{v:.1e}")),
                    k.minimizer_distance.map_or("-".into(), |v| format!("{v:.1e}")),
                );
            }
            println!("{} checked, {mismatches} mismatched, {skipped} skipped", checks.len());
            Ok(if mismatches == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
