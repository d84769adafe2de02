use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use tobo_core::eval::{best_point, sweep, write_probe_row, write_sweep_csv, PropagationGrid};
use tobo_core::harness::{
    ablate_mask_ratio, build_model, grad_check_objective, held_out_episode, pretrain, probe_encoder, Checkpoint,
    PretrainOptions, ProbeSettings, RunConfig, DEFAULT_RATIOS,
};
use tobo_core::objective::{Model, Objective};
use tobo_core::scene::{dump_episode, Episode};
use tobo_core::tensor::{ParamStore, Precision, Scalar};

#[derive(Parser)]
#[command(
    name = "tobo",
    version,
    about = "Token-bottleneck pretraining and evaluation on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; unspecified fields take desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed_weights: Option<u64>,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_masks: Option<u64>,
    /// Deterministic execution (the only mode this build supports).
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory.
    #[arg(long, env = "TOBO_OUT")]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, base: RunConfig) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => base,
        };
        if let Some(s) = self.seed_weights {
            cfg.seeds.weights = s;
        }
        if let Some(s) = self.seed_data {
            cfg.seeds.data = s;
        }
        if let Some(s) = self.seed_masks {
            cfg.seeds.masks = s;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        if let Some(o) = self.objective {
            cfg.objective = o;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.deterministic = true;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct EncoderSource {
    /// Checkpoint manifest (`.json`) to evaluate.
    #[arg(long, required_unless_present = "random_init")]
    checkpoint: Option<PathBuf>,
    /// Score an untrained encoder built from the weight seed instead.
    #[arg(long)]
    random_init: bool,
    /// Load the checkpoint even if its config hash differs from `--config`.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint manifest.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train one model per mask ratio and seed; write ablation.csv.
    AblateMaskRatio {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RATIOS)]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Label propagation sweep on held-out episodes; write propagation.csv.
    EvalProp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: EncoderSource,
        #[arg(long, default_value_t = 20)]
        episodes: u64,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        ms: Option<Vec<usize>>,
        /// Radii in grid cells; `inf` for unbounded.
        #[arg(long, value_delimiter = ',')]
        radii: Option<Vec<String>>,
    },
    /// State probe on held-out episodes; write probe.csv.
    EvalProbe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: EncoderSource,
        #[arg(long, default_value_t = 200)]
        episodes: u64,
        #[arg(long, default_value_t = 4)]
        delta: usize,
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
    },
    /// Finite-difference gradient check of every objective at tiny scale.
    GradCheck {
        /// Test hook: offset the analytic gradient of this parameter.
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Write episodes as PNG frames, label maps and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        episodes: u64,
        /// First episode index.
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
}

fn load_encoder<T: Scalar>(
    cfg: RunConfig,
    source: &EncoderSource,
    explicit_config: bool,
) -> anyhow::Result<(RunConfig, Model, ParamStore<T>, String)> {
    if source.random_init {
        let (m, s) = build_model::<T>(&cfg)?;
        return Ok((cfg, m, s, "random-init".into()));
    }
    let path = source.checkpoint.as_ref().expect("clap requires a checkpoint");
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = if explicit_config {
        ckpt.check_config(&cfg, source.force)?;
        cfg
    } else {
        RunConfig {
            output_dir: cfg.output_dir,
            ..ckpt.manifest.config.clone()
        }
    };
    let (m, mut s) = build_model::<T>(&cfg)?;
    ckpt.load_params(&mut s)?;
    Ok((cfg, m, s, path.display().to_string()))
}

fn parse_radius(s: &str) -> anyhow::Result<Option<usize>> {
    match s {
        "inf" => Ok(None),
        n => Ok(Some(n.parse().with_context(|| format!("radius `{n}`"))?)),
    }
}

fn out_file(cfg: &RunConfig, name: &str) -> anyhow::Result<(PathBuf, File)> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok((path, f))
}

fn run<T: Scalar>(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Pretrain { common, resume, force } => {
            let cfg = common.resolve(RunConfig::default())?;
            let s = pretrain::<T>(
                &cfg,
                &PretrainOptions {
                    resume,
                    force,
                    stop_after: None,
                },
            )?;
            println!("metrics: {}", s.metrics.display());
            println!("checkpoint: {}", s.final_checkpoint.display());
        }
        Command::AblateMaskRatio { common, ratios, seeds } => {
            let cfg = common.resolve(RunConfig::default())?;
            let (path, f) = out_file(&cfg, "ablation.csv")?;
            ablate_mask_ratio::<T, _>(&cfg, &ratios, &seeds, &ProbeSettings::default(), f)?;
            println!("ablation: {}", path.display());
        }
        Command::EvalProp {
            common,
            source,
            episodes,
            taus,
            ks,
            ms,
            radii,
        } => {
            let cfg = common.resolve(RunConfig::default())?;
            let (cfg, model, store, _) = load_encoder::<T>(cfg, &source, common.config.is_some())?;
            let mut grid = PropagationGrid::default();
            grid.taus = taus.unwrap_or(grid.taus);
            grid.ks = ks.unwrap_or(grid.ks);
            grid.ms = ms.unwrap_or(grid.ms);
            if let Some(r) = radii {
                grid.radii = r.iter().map(|s| parse_radius(s)).collect::<anyhow::Result<_>>()?;
            }
            let eps = (0..episodes)
                .map(|i| held_out_episode(&cfg, i))
                .collect::<tobo_core::Result<Vec<_>>>()?;
            let rows = sweep(model.encoder(), &store, &eps, &grid)?;
            let (path, f) = out_file(&cfg, "propagation.csv")?;
            write_sweep_csv(&rows, f)?;
            if let Some((p, m)) = best_point(&rows) {
                println!(
                    "best mIoU {m:.4} at tau={} k={} m={} radius={:?}",
                    p.tau, p.k, p.m, p.radius
                );
            }
            println!("propagation: {}", path.display());
        }
        Command::EvalProbe {
            common,
            source,
            episodes,
            delta,
            probe_seed,
        } => {
            let cfg = common.resolve(RunConfig::default())?;
            let (cfg, model, store, name) = load_encoder::<T>(cfg, &source, common.config.is_some())?;
            let mut settings = ProbeSettings {
                episodes,
                delta,
                ..ProbeSettings::default()
            };
            settings.probe.seed = probe_seed;
            let metrics = probe_encoder(&cfg, model.encoder(), &store, &settings)?;
            let (path, f) = out_file(&cfg, "probe.csv")?;
            write_probe_row(f, true, &name, probe_seed, &metrics)?;
            println!("mean R2 {:?}, mse {:.5}", metrics.mean_r2, metrics.mse);
            println!("probe: {}", path.display());
        }
        Command::GenData {
            common,
            episodes,
            start,
        } => {
            let cfg = common.resolve(RunConfig::default())?;
            for i in start..start + episodes {
                let ep = Episode::generate(&cfg.scene, cfg.seeds.data, i)?;
                dump_episode(&ep, &cfg.output_dir.join(format!("episode_{i:06}")))?;
            }
            println!("{episodes} episodes in {}", cfg.output_dir.display());
        }
        Command::GradCheck { .. } => unreachable!("handled before precision dispatch"),
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check_all(corrupt: Option<String>) -> anyhow::Result<ExitCode> {
    let mut ok = true;
    for objective in Objective::ALL {
        let report = grad_check_objective(objective, corrupt.clone().map(|n| (n, 1.0)))?;
        let passed = report.passed();
        ok &= passed;
        println!(
            "{objective}: {} (max relative error {:.3e}, {} tensors)",
            if passed { "pass" } else { "FAIL" },
            report.max_rel_error(),
            report.params.len()
        );
        for f in report.failures() {
            println!("  {} max {:.3e}", f.name, f.max_rel_error);
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn precision_of(cmd: &Command) -> anyhow::Result<Precision> {
    let common = match cmd {
        Command::Pretrain { common, .. }
        | Command::AblateMaskRatio { common, .. }
        | Command::EvalProp { common, .. }
        | Command::EvalProbe { common, .. }
        | Command::GenData { common, .. } => common,
        Command::GradCheck { .. } => return Ok(Precision::F64),
    };
    if let Some(p) = common.precision {
        return Ok(p);
    }
    if let Some(path) = &common.config {
        return Ok(RunConfig::load(path)?.precision);
    }
    if let Command::EvalProp { source, .. } | Command::EvalProbe { source, .. } = cmd {
        if let Some(ckpt) = &source.checkpoint {
            return manifest_precision(ckpt);
        }
    }
    Ok(Precision::F32)
}

fn manifest_precision(path: &Path) -> anyhow::Result<Precision> {
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
    match m["dtype"].as_str() {
        Some("f64") => Ok(Precision::F64),
        Some("f32") => Ok(Precision::F32),
        _ => bail!("{} has no dtype", path.display()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GradCheck { corrupt } => grad_check_all(corrupt),
        cmd => match precision_of(&cmd) {
            Ok(Precision::F32) => run::<f32>(cmd),
            Ok(Precision::F64) => run::<f64>(cmd),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
