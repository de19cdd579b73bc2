//! `dissobs`: generate data, train, simulate, certify and compose learned observers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dissobs::archive;
use dissobs::certify::estimate_constants;
use dissobs::config::RunConfig;
use dissobs::distributed::{simulate_distributed, small_gain_for};
use dissobs::pipeline;
use dissobs::plants::{rmse, Dynamics, PlantSpec, Side, TrajectoryRecord};

#[derive(Parser)]
#[command(name = "dissobs", version, about = "Learned observers with δISS Lyapunov certificates")]
struct Cli {
    /// Default directory for outputs whose path is not given.
    #[arg(long, global = true, env = "DISSOBS_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample the dynamics and consistency datasets.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the observer model(s) and write the archive and training report.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; generated in memory when omitted and not set in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Run plant and observer together and write the trajectory CSV.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Ignore the configured noise.
        #[arg(long)]
        noise_free: bool,
    },
    /// Sampled certificate constants and decrease audit for one model.
    Certify {
        #[arg(long)]
        model: PathBuf,
        /// Plant and domain; defaults to the benchmark named in the archive.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Which local observer of a pair the model is.
        #[arg(long)]
        side: Option<SideArg>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Small-gain test for two local observers, optionally followed by a coupled run.
    Compose {
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Check)]
        mode: Mode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Root-mean-square estimation error of a trajectory over a time window.
    Rmse {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long = "from", default_value_t = 0.0)]
        from: f64,
        #[arg(long = "to", default_value_t = f64::INFINITY)]
        to: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Check,
    Simulate,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    A,
    B,
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::A => Side::A,
            SideArg::B => Side::B,
        }
    }
}

/// Failure of the small-gain admission test; exits with status 2.
#[derive(Debug)]
struct CertificationFailure(String);

impl std::fmt::Display for CertificationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CertificationFailure {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<CertificationFailure>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

/// Explicit path, else `<out-dir>/<name>` with the out-dir from the flag/env, the config, or `.`.
fn output_path(explicit: Option<PathBuf>, out_dir: &Option<PathBuf>, cfg: Option<&RunConfig>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        out_dir
            .clone()
            .or_else(|| cfg.and_then(|c| c.paths.out_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("."))
            .join(name)
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_traj(path: &Path, rec: &TrajectoryRecord) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    rec.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn provenance_json(cfg: &RunConfig) -> serde_json::Value {
    pipeline::provenance(cfg).into_iter().map(|(k, v)| (k, serde_json::Value::String(v))).collect::<serde_json::Map<_, _>>().into()
}

fn run(cli: Cli) -> Result<()> {
    let out_dir = cli.out_dir;
    match cli.cmd {
        Cmd::GenData { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let dir = output_path(out.or(cfg.paths.data.clone()), &out_dir, Some(&cfg), "data");
            let sets = pipeline::generate_data(&cfg)?;
            pipeline::write_data(&dir, &sets)?;
            write_json(&dir.join("manifest.json"), &provenance_json(&cfg))?;
            eprintln!("wrote datasets to {}", dir.display());
        }
        Cmd::Train { config, data, out, seed, quiet } => {
            let cfg = load_config(&config, seed)?;
            let sets = match data.or(cfg.paths.data.clone()) {
                Some(dir) => pipeline::read_data(&cfg, &dir).with_context(|| format!("reading datasets from {}", dir.display()))?,
                None => pipeline::generate_data(&cfg)?,
            };
            let dir = output_path(out.or(cfg.paths.model.clone()), &out_dir, Some(&cfg), "model");
            let units = pipeline::train_all(&cfg, &sets, |side, epoch, l| {
                if !quiet {
                    let tag = side.map(|s| format!("[{}] ", s.tag())).unwrap_or_default();
                    eprintln!("{tag}epoch {epoch}: total {:.6e} dynamics {:.6e} consistency {:.6e} gradv {:.6e}", l.total, l.dynamics, l.consistency, l.gradv);
                }
            })?;
            pipeline::save_units(&cfg, &dir, &units)?;
            for u in &units {
                println!("{}", u.report.checksum);
            }
            eprintln!("wrote model to {}", dir.display());
        }
        Cmd::Simulate { model, config, out, seed, noise_free } => {
            let mut cfg = load_config(&config, seed)?;
            if noise_free {
                cfg.sim.noise_std_u.clear();
                cfg.sim.noise_std_y.clear();
            }
            let models: Vec<_> = pipeline::load_units(&cfg, &model)?.into_iter().map(|(_, m)| m).collect();
            let outcome = pipeline::simulate(&cfg, &models)?;
            if let Some(sg) = outcome.small_gain.as_ref().filter(|sg| !sg.pass) {
                eprintln!("warning: small-gain condition fails (product root {})", sg.product_root);
            }
            let path = output_path(out, &out_dir, Some(&cfg), "traj.csv");
            write_traj(&path, &outcome.record)?;
            eprintln!("wrote trajectory to {}", path.display());
        }
        Cmd::Certify { model, config, side, samples, seed, out } => {
            let (m, meta) = archive::load_model(&model).with_context(|| format!("loading model {}", model.display()))?;
            let side = side.map(Side::from);
            let cfg = config.as_deref().map(|c| load_config(c, None)).transpose()?;
            let plant = match &cfg {
                Some(c) => {
                    c.check_model(&m, side)?;
                    c.plant_spec()?
                }
                None => {
                    let kind = meta.iter().find(|(k, _)| k == "plant").map(|(_, v)| v.as_str()).context("archive names no plant; pass --config")?;
                    PlantSpec::default_for(kind)?
                }
            };
            let report = match side {
                Some(s) => {
                    let local = plant.local(s)?;
                    estimate_constants(&m, &local.domain, Some(&local), samples, seed)?
                }
                None => {
                    if plant.dims() != m.dims {
                        bail!("model dims {:?} do not fit the {} plant; pass --side for a local observer", m.dims, plant.kind());
                    }
                    estimate_constants(&m, &plant.domain, Some(&plant), samples, seed)?
                }
            };
            let census = &report.census;
            eprintln!("guaranteed-region violations: {}; clamped pairs: {}", census.guaranteed_violations, census.clamped);
            let value = serde_json::json!({
                "model_meta": meta.into_iter().collect::<std::collections::BTreeMap<_, _>>(),
                "version": env!("CARGO_PKG_VERSION"),
                "report": report,
            });
            write_json(&output_path(out, &out_dir, cfg.as_ref(), "certificate.json"), &value)?;
        }
        Cmd::Compose { model_a, model_b, mode, config, out, seed } => {
            let (a, _) = archive::load_model(&model_a).with_context(|| format!("loading model {}", model_a.display()))?;
            let (b, _) = archive::load_model(&model_b).with_context(|| format!("loading model {}", model_b.display()))?;
            let sg = small_gain_for(&a, &b)?;
            println!("{}", serde_json::to_string_pretty(&sg)?);
            match mode {
                Mode::Check => {
                    if !sg.pass {
                        return Err(CertificationFailure(format!("small-gain condition fails: product root {} >= 1", sg.product_root)).into());
                    }
                }
                Mode::Simulate => {
                    let cfg = load_config(config.as_deref().context("compose --mode simulate needs --config")?, seed)?;
                    cfg.check_model(&a, Some(Side::A))?;
                    cfg.check_model(&b, Some(Side::B))?;
                    if !sg.pass {
                        eprintln!("warning: small-gain condition fails (product root {}); simulating anyway", sg.product_root);
                    }
                    let plant = cfg.plant_spec()?;
                    let (x0, z0) = cfg.initial_states(&plant)?;
                    let mut run = simulate_distributed(&plant, &a, &b, &cfg.noise(), &x0, &z0, &cfg.sim_settings(), Some(sg))?;
                    let mut meta = pipeline::provenance(&cfg);
                    meta.append(&mut run.record.meta);
                    run.record.meta = meta;
                    let (ra, rb) = run.rmse(0.0, cfg.sim.t_final)?;
                    eprintln!("rmse a {ra} b {rb}");
                    write_traj(&output_path(out, &out_dir, Some(&cfg), "traj.csv"), &run.record)?;
                }
            }
        }
        Cmd::Rmse { traj, from, to } => {
            let rec = TrajectoryRecord::read_csv(BufReader::new(File::open(&traj).with_context(|| format!("opening {}", traj.display()))?))?;
            println!("{}", rmse(&rec, from, to)?);
        }
    }
    Ok(())
}
