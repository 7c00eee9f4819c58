use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cars_core::harness::{
    compute_metrics, evaluate, generate_dataset, load_episodes, render_value_slice, robustness_sweep, save_episodes, write_ndjson, write_report,
    DatagenConfig, Policy,
};
use cars_core::par::{init_threads, ExecMode};
use cars_core::reach::{fit_value_functions, sign_agreement, solve_grid, Backup, FitConfig, FitDomain, GridSpec, ReducedDynamics, SolveOptions, TransitionDataset, ValueApproximator, ValueGrid};
use cars_core::rl::{config_hash, Checkpoint, Method, TrainConfig, Trainer};
use cars_core::scenario::ScenarioConfig;
use cars_core::service::{spawn, Catalog, ScenarioEntry, ServerConfig};
use cars_core::value::{load_value_source, value_slice, ConstraintProxy, ValueSource};

/// Bad arguments or missing inputs named on the command line; exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "cars", version, about = "Reachability-aware shared steering control")]
struct Cli {
    /// Scenario file.
    #[arg(long, global = true, default_value = "config/scenarios/ellipse.toml")]
    config: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Run every batch step on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalPolicy {
    DriverOnly,
    Agent,
    OracleCheck,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the reduced-model value function on a grid.
    SolveGrid {
        #[arg(long, default_value_t = 0.999)]
        gamma: f64,
        /// Use the undiscounted backup instead.
        #[arg(long)]
        undiscounted: bool,
        /// Low-resolution grid.
        #[arg(long)]
        coarse: bool,
        #[arg(long, default_value_t = 5000)]
        max_sweeps: usize,
    },
    /// Generate the transition dataset for fitting.
    GenData {
        #[arg(long, default_value_t = 4000)]
        episodes: usize,
    },
    /// Fit the value approximators to a dataset.
    FitReach {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, value_delimiter = ',', default_value = "64,64")]
        hidden: Vec<usize>,
    },
    /// Train an agent.
    Train {
        #[arg(long, default_value = "proposed")]
        method: String,
        /// Value source (grid or fitted); defaults to `<out>/fit.bin`.
        #[arg(long)]
        value: Option<PathBuf>,
        #[arg(long, default_value_t = 1500)]
        episodes: usize,
        /// Resume from this checkpoint; its configuration must match.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        checkpoint_every: usize,
    },
    /// Evaluate a policy and write episode logs and metrics.
    Eval {
        #[arg(long, value_enum, default_value = "driver-only")]
        policy: EvalPolicy,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        value: Option<PathBuf>,
        /// Oracle grid for the agreement check.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Record per-step compute time.
        #[arg(long)]
        timing: bool,
    },
    /// Sweep driver envelope gain and cognitive delay.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        value: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
        k_lambda: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.75")]
        t_m: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Serve interactive sessions over TCP.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        /// Extra scenario files offered for reset.
        #[arg(long, value_delimiter = ',')]
        scenario: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        value: Option<PathBuf>,
    },
    /// Render metrics and plots from episode logs.
    Report {
        /// Episode log files; each becomes one labelled group.
        #[arg(long, value_delimiter = ',', required = true)]
        logs: Vec<PathBuf>,
        /// Also render a value slice from this source.
        #[arg(long)]
        value: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        phi: f64,
        #[arg(long, default_value_t = 12.5)]
        speed: f64,
    },
}

struct Ctx {
    cfg: ScenarioConfig,
    out: PathBuf,
}

impl Ctx {
    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }

    /// Value source from `path`, or `<out>/fit.bin` when present.
    fn value(&self, path: Option<&Path>) -> Result<Arc<dyn ValueSource>> {
        let default = self.out.join("fit.bin");
        let p = match path {
            Some(p) => p,
            None if default.exists() => &default,
            None => bail!(usage(format!("no value source given and {} does not exist", default.display()))),
        };
        require(p)?;
        load_value_source(p, self.cfg.vehicle).with_context(|| format!("loading value source {}", p.display()))
    }
}

fn require(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(usage(format!("{} does not exist", p.display())))
    }
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    require(p)?;
    Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads);
    require(&cli.config)?;
    let mut cfg = ScenarioConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let mode = if cli.sequential { ExecMode::Sequential } else { ExecMode::Parallel };
    let ctx = Ctx { cfg, out: cli.out };
    let seed = ctx.cfg.seed;
    match cli.cmd {
        Cmd::SolveGrid { gamma, undiscounted, coarse, max_sweeps } => {
            let backup = if undiscounted { Backup::Undiscounted } else { Backup::Discounted(gamma) };
            let spec = if coarse { GridSpec::coarse() } else { GridSpec::default() };
            let opts = SolveOptions { backup, max_sweeps, mode, ..Default::default() };
            let t = Instant::now();
            let grid = solve_grid(&ReducedDynamics::default(), &ctx.cfg.field(), &spec, &opts).map_err(|e| usage(e.to_string()))?;
            let path = ctx.out_file("grid.bin")?;
            grid.save(&path)?;
            println!("{}", serde_json::json!({"path": path, "sweeps": grid.sweeps, "residual": grid.residual, "seconds": t.elapsed().as_secs_f64()}));
        }
        Cmd::GenData { episodes } => {
            let dc = DatagenConfig { episodes, seed, ..Default::default() };
            let (data, report) = generate_dataset(&dc, &ctx.cfg, mode);
            let path = ctx.out_file("data.bin")?;
            data.save(&path)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Cmd::FitReach { data, epochs, hidden } => {
            let p = data.unwrap_or_else(|| ctx.out.join("data.bin"));
            require(&p)?;
            let data = TransitionDataset::load(&p).with_context(|| format!("loading {}", p.display()))?;
            let domain = FitDomain { x: ctx.cfg.domain.x, y: ctx.cfg.domain.y, v_max: 16.0 };
            let fc = FitConfig { hidden, epochs, patience: 0, seed, ..Default::default() };
            fc.validate().map_err(|e| usage(e.to_string()))?;
            let fit = fit_value_functions(&data, domain, &fc)?;
            let path = ctx.out_file("fit.bin")?;
            fit.save(&path)?;
            write_json(&ctx.out_file("fit-report.json")?, &fit.report)?;
            println!("{}", serde_json::json!({"path": path, "converged": fit.report.converged, "val_residual": fit.report.val_residual.last()}));
        }
        Cmd::Train { method, value, episodes, resume, checkpoint_every } => {
            let method = Method::parse(&method).ok_or_else(|| usage(format!("unknown method {method:?}")))?;
            let value = ctx.value(value.as_deref())?;
            let tc = TrainConfig { episodes, ..TrainConfig::desk(method, seed) };
            let mut tr = match resume {
                Some(p) => {
                    require(&p)?;
                    let ck = Checkpoint::load_matching(&p, &config_hash(&ctx.cfg, method, &tc.sac)).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                    Trainer::resume(&ctx.cfg, value.as_ref(), tc, ck)?
                }
                None => Trainer::new(&ctx.cfg, value.as_ref(), tc)?,
            };
            let stem = format!("{}-seed{seed}", method.name());
            let ckpt = ctx.out_file(&format!("{stem}.ckpt"))?;
            let log_path = ctx.out_file(&format!("{stem}.train.ndjson"))?;
            let mut log = BufWriter::new(std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?);
            while (tr.episodes_done as usize) < episodes {
                let Some(s) = tr.run_episode()? else { break };
                write_ndjson(&mut log, std::slice::from_ref(&s))?;
                if s.episode % 100 == 99 {
                    log::info!("episode {} return {:.2} success {}", s.episode + 1, s.episode_return, s.success);
                }
                if checkpoint_every > 0 && (tr.episodes_done as usize) % checkpoint_every == 0 {
                    log.flush()?;
                    tr.checkpoint().save(&ckpt)?;
                }
            }
            log.flush()?;
            tr.checkpoint().save(&ckpt)?;
            let tail = cars_core::rl::curve_tail(&tr.history, 100);
            println!("{}", serde_json::json!({"checkpoint": ckpt, "episodes": tr.episodes_done, "tail": tail}));
        }
        Cmd::Eval { policy, checkpoint, value, grid, episodes, timing } => match policy {
            EvalPolicy::OracleCheck => {
                let gp = grid.unwrap_or_else(|| ctx.out.join("grid.bin"));
                require(&gp)?;
                let g = ValueGrid::load(&gp)?;
                let fp = value.unwrap_or_else(|| ctx.out.join("fit.bin"));
                require(&fp)?;
                let fit = ValueApproximator::load(&fp)?;
                let report = sign_agreement(&g, &fit, 10_000, 0.5, seed);
                write_json(&ctx.out_file("oracle-check.json")?, &report)?;
                println!("{}", serde_json::to_string(&report)?);
            }
            EvalPolicy::DriverOnly | EvalPolicy::Agent => {
                let ck = match (policy, checkpoint) {
                    (EvalPolicy::Agent, Some(p)) => Some(load_checkpoint(&p)?),
                    (EvalPolicy::Agent, None) => bail!(usage("--policy agent needs --checkpoint")),
                    _ => None,
                };
                let value = ctx.value(value.as_deref())?;
                let pol = match &ck {
                    Some(c) => Policy::Agent { method: c.method, agent: &c.agent },
                    None => Policy::DriverOnly,
                };
                let logs = evaluate(&ctx.cfg, value.as_ref(), &pol, seed, episodes, mode, timing)?;
                let label = pol.label();
                save_episodes(&ctx.out_file(&format!("{label}.episodes.ndjson"))?, &logs)?;
                let m = compute_metrics(&logs);
                write_json(&ctx.out_file(&format!("{label}.metrics.json"))?, &m)?;
                println!("{}", serde_json::to_string(&m)?);
            }
        },
        Cmd::Sweep { checkpoint, value, k_lambda, t_m, episodes } => {
            let ck = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let value = ctx.value(value.as_deref())?;
            let pol = match &ck {
                Some(c) => Policy::Agent { method: c.method, agent: &c.agent },
                None => Policy::DriverOnly,
            };
            let report = robustness_sweep(&ctx.cfg, value.as_ref(), &pol, &k_lambda, &t_m, episodes, seed, mode)?;
            write_json(&ctx.out_file("sweep.json")?, &report)?;
            for c in &report.cells {
                println!("k_lambda {:<5} t_m {:<5} success {:.2} family {:?} braking {}", c.k_lambda, c.t_m, c.success_rate, c.family, c.braking);
            }
        }
        Cmd::Serve { host, port, scenario, checkpoint, value } => {
            let value: Arc<dyn ValueSource> = match value {
                Some(p) => ctx.value(Some(&p))?,
                None if ctx.out.join("fit.bin").exists() => ctx.value(None)?,
                None => {
                    log::warn!("no value source; using the constraint proxy");
                    Arc::new(ConstraintProxy::new(&ctx.cfg))
                }
            };
            let agent = checkpoint.as_deref().map(load_checkpoint).transpose()?.map(|c| Arc::new(c.agent));
            let mut catalog = Catalog::new();
            let default_scenario = ctx.cfg.name.clone();
            catalog.insert(default_scenario.clone(), ScenarioEntry { cfg: ctx.cfg.clone(), value: value.clone(), agent: agent.clone() });
            for p in &scenario {
                require(p)?;
                let c = ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display()))?;
                catalog.insert(c.name.clone(), ScenarioEntry { cfg: c, value: value.clone(), agent: agent.clone() });
            }
            let sc = ServerConfig { bind: format!("{host}:{port}"), default_scenario, ..Default::default() };
            let handle = spawn(sc, catalog).map_err(anyhow::Error::msg)?;
            log::info!("listening on {}", handle.addr);
            handle.wait();
        }
        Cmd::Report { logs, value, phi, speed } => {
            let mut groups = Vec::new();
            for p in &logs {
                require(p)?;
                let label = p.file_name().and_then(|n| n.to_str()).unwrap_or("logs");
                let label = label.split('.').next().unwrap_or(label).to_string();
                groups.push((label, load_episodes(p).with_context(|| format!("reading {}", p.display()))?));
            }
            let mut files = write_report(&ctx.out, &ctx.cfg.field(), ctx.cfg.domain, &groups)?;
            if let Some(vp) = value {
                let src = ctx.value(Some(&vp))?;
                let d = ctx.cfg.domain;
                let nx = ((d.x[1] - d.x[0]) * 4.0) as usize;
                let ny = ((d.y[1] - d.y[0]) * 4.0) as usize;
                let s = value_slice(src.as_ref(), phi, speed, d.x, d.y, nx, ny);
                let path = ctx.out.join("value_slice.png");
                render_value_slice(&path, &s)?;
                files.push(path);
            }
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}
