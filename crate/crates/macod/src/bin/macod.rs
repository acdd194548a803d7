//! Experiment driver CLI. All logic lives in the library; this binary only
//! parses arguments, dispatches, and formats output.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use macod::config::RunConfig;
use macod::env;
use macod::experiment::{self, CompareMetric};
use macod::spectral::{build_graph, cover_time, fiedler, GraphBuildOptions};
use macod::trainer::Mode;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "macod", version, about = "Multi-agent deep covering option discovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    NoOptions,
    SingleAgentOptions,
    MultiAgentOptions,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::NoOptions => Mode::NoOptions,
            ModeArg::SingleAgentOptions => Mode::SingleAgentOptions,
            ModeArg::MultiAgentOptions => Mode::MultiAgentOptions,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    MeanReturn,
    TargetRate,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the run config, writing metrics, checkpoints, discovery
    /// reports, and plots into the output directory.
    Run {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override: train this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured mode.
        #[arg(long)]
        mode: Option<ModeArg>,
        /// Output directory; defaults to runs/<mode>-<timestamp>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume a single-seed run from this checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run seeds on parallel threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Align and summarize completed runs: final-window table plus a
    /// mean +/- stderr band figure when two or more runs are given.
    Compare {
        /// Run directories (each containing seed_* subdirectories).
        dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = MetricArg::MeanReturn)]
        metric: MetricArg,
        /// Smoothing / final-summary window in episodes.
        #[arg(long, default_value_t = 50)]
        window: usize,
        /// Where to write the comparison figure.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the discovery reports of a run directory.
    DiscoverReport {
        dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render the environment's ASCII map for a config.
    RenderEnv {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sub-setting shortcut when no config is given.
        #[arg(long, default_value_t = 1)]
        sub_setting: u8,
    },
    /// Finite-difference checks of every hand-rolled gradient.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Spectral checks on the enumerated joint state graph: algebraic
    /// connectivity, Fiedler vector, optional cover-time estimate and
    /// plain-text exports.
    Oracle {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        sub_setting: u8,
        /// Agents forming the group, comma separated.
        #[arg(long, default_value = "0", value_delimiter = ',')]
        group: Vec<usize>,
        /// Freeze the switch off (gate closed) instead of on.
        #[arg(long)]
        gate_closed: bool,
        /// Monte-Carlo cover-time trials (0 disables).
        #[arg(long, default_value_t = 0)]
        cover_trials: usize,
        #[arg(long, default_value_t = 1_000_000)]
        cover_horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the edge list to this path.
        #[arg(long)]
        export_edges: Option<PathBuf>,
        /// Write the Fiedler vector to this path.
        #[arg(long)]
        export_fiedler: Option<PathBuf>,
    },
}

fn load_env_config(config: &Option<PathBuf>, sub_setting: u8) -> Result<env::EnvConfig> {
    match config {
        Some(path) => {
            let run = RunConfig::load(path.to_str().context("config path not UTF-8")?)?;
            Ok(run.env.build()?)
        }
        None => Ok(env::EnvConfig::sub_setting(sub_setting)?),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            mode,
            out,
            resume,
            parallel,
        } => {
            let run_cfg = RunConfig::load(config.to_str().context("config path not UTF-8")?)?;
            let resolved = run_cfg.resolve(mode.map(Into::into), seed);
            let out_dir = out.unwrap_or_else(|| {
                let stamp = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                PathBuf::from("runs").join(format!("{}-{stamp}", resolved.config.mode))
            });
            let summary = experiment::run(&resolved, &out_dir, resume.as_deref(), parallel)?;
            println!("run complete: {}", summary.out_dir.display());
            println!(
                "{:<8} {:>10} {:>16} {:>14} {:>12}",
                "seed", "episodes", "final return", "target rate", "generations"
            );
            for s in &summary.seeds {
                println!(
                    "{:<8} {:>10} {:>16.4} {:>14.3} {:>12}",
                    s.seed,
                    s.episodes,
                    s.final_window_mean_return,
                    s.final_window_target_rate,
                    s.generations
                );
            }
        }
        Command::Compare {
            dirs,
            metric,
            window,
            out,
        } => {
            if dirs.is_empty() {
                bail!("compare needs at least one run directory");
            }
            let metric = match metric {
                MetricArg::MeanReturn => CompareMetric::MeanReturn,
                MetricArg::TargetRate => CompareMetric::TargetRate,
            };
            let cmp = experiment::compare(&dirs, metric, window, out.as_deref())?;
            println!(
                "{:<28} {:>6} {:>10} {:>18} {:>12}",
                "run", "seeds", "episodes", "final-window mean", "stderr"
            );
            for row in &cmp.rows {
                println!(
                    "{:<28} {:>6} {:>10} {:>18.4} {:>12.4}",
                    row.run, row.seeds, row.episodes, row.final_window_mean, row.final_window_stderr
                );
            }
            if let Some(plot) = &cmp.plot {
                println!("figure written to {}", plot.display());
            }
        }
        Command::DiscoverReport { dir, seed } => {
            let mut seed_dirs: Vec<PathBuf> = std::fs::read_dir(&dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .map(|n| n.starts_with("seed_"))
                        .unwrap_or(false)
                })
                .collect();
            seed_dirs.sort();
            if let Some(s) = seed {
                seed_dirs.retain(|p| p.ends_with(format!("seed_{s}")));
            }
            if seed_dirs.is_empty() {
                bail!("no matching seed directories under {}", dir.display());
            }
            for seed_dir in seed_dirs {
                let path = seed_dir.join("discovery.jsonl");
                if !path.exists() {
                    println!("{}: no discovery generations", seed_dir.display());
                    continue;
                }
                let records: Vec<serde_json::Value> = macod::metrics::read_jsonl(&path)?;
                println!("{}:", seed_dir.display());
                for rec in records {
                    println!("{}", serde_json::to_string_pretty(&rec)?);
                }
            }
        }
        Command::RenderEnv {
            config,
            sub_setting,
        } => {
            let cfg = load_env_config(&config, sub_setting)?;
            let state = env::reset(&cfg, 0)?;
            println!(
                "sub-setting {} | grid {}x{} | {} agents | switch S gate / box B target T",
                cfg.sub_setting,
                cfg.grid_width,
                cfg.grid_height,
                cfg.n_agents()
            );
            print!("{}", env::render_ascii(&cfg, &state));
        }
        Command::GradCheck { seed } => {
            let checks: [(&str, fn(u64) -> macod::spectral::GradCheckReport); 4] = [
                ("connectivity loss", macod::checks::grad_check_connectivity),
                ("flat critic loss", macod::checks::grad_check_flat_critic),
                ("flat policy surrogate", macod::checks::grad_check_flat_policy),
                ("hier policy surrogate", macod::checks::grad_check_hier_policy),
            ];
            let mut worst = 0.0f64;
            for (name, check) in checks {
                let report = check(seed);
                worst = worst.max(report.max_rel_error);
                println!(
                    "{name:<24} max rel error {:>12.3e} over {} coords  {}",
                    report.max_rel_error,
                    report.n_checked,
                    if report.max_rel_error < 1e-4 { "ok" } else { "FAIL" }
                );
            }
            if worst >= 1e-4 {
                bail!("gradient check failed: worst relative error {worst:.3e}");
            }
        }
        Command::Oracle {
            config,
            sub_setting,
            group,
            gate_closed,
            cover_trials,
            cover_horizon,
            seed,
            export_edges,
            export_fiedler,
        } => {
            let cfg = load_env_config(&config, sub_setting)?;
            let opts = GraphBuildOptions {
                switch_on: !gate_closed,
                ..Default::default()
            };
            let graph = build_graph(&cfg, &group, &opts)?;
            println!(
                "group {:?}: {} joint states, {} joint actions, connected: {}",
                group,
                graph.n_vertices(),
                graph.n_joint_actions,
                graph.is_connected()
            );
            let spec = fiedler(&graph)?;
            println!("algebraic connectivity (lambda_2): {:.6e}", spec.lambda2);
            println!(
                "smallest eigenvalues: {:?}",
                &spec.eigenvalues[..spec.eigenvalues.len().min(5)]
                    .iter()
                    .map(|v| format!("{v:.4e}"))
                    .collect::<Vec<_>>()
            );
            if let Some(path) = export_edges {
                std::fs::write(&path, graph.edge_list_text())?;
                println!("edge list written to {}", path.display());
            }
            if let Some(path) = export_fiedler {
                let text: String = spec
                    .fiedler
                    .iter()
                    .map(|v| format!("{v}\n"))
                    .collect();
                std::fs::write(&path, text)?;
                println!("fiedler vector written to {}", path.display());
            }
            if cover_trials > 0 {
                let est = cover_time(&graph, 0, None, cover_trials, cover_horizon, seed)?;
                println!(
                    "cover time (no options): {:.1} +/- {:.1} over {} trials ({} censored)",
                    est.mean, est.stderr, est.trials, est.censored
                );
            }
        }
    }
    Ok(())
}
