use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deepvlf::codec::{init_params, load_checkpoint, save_checkpoint, OracleCodec};
use deepvlf::eval::{emit_csv, estimate, plot_data, sweep, with_workers};
use deepvlf::protocol::{random_sessions, read_jsonl, replay_verify, write_jsonl};
use deepvlf::training::{grad_check, train, GradCheckConfig, Phase};
use deepvlf::{
    ChannelParams, Codec, CodecParams, Error, EvalResult, FeedbackMode, ProtocolConfig, Result,
    RunConfig,
};

#[derive(Parser)]
#[command(name = "deepvlf", version, about = "Deep variable-length feedback codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; the full-scale defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `training.batch_size=256`. Repeatable, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, env = "DEEPVLF_SEED")]
    seed: Option<u64>,
    /// Worker threads for Monte-Carlo evaluation. Use 1 for bit-exact runs.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Trained parameters; defaults to `paths.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the oracle stub instead of a trained model (harness self-test).
    #[arg(long, conflicts_with = "checkpoint")]
    oracle_stub: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Pretrain,
    Finetune,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec and write a checkpoint and a metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        phase: PhaseArg,
        /// Start from these parameters instead of a fresh initialisation.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Estimate BLER, rate and power at the configured operating point.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write every session as JSON lines.
        #[arg(long)]
        transcripts: Option<PathBuf>,
    },
    /// Evaluate every (gamma, SNR) point of the configured grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Checkpoint for one threshold, as `GAMMA=PATH`. Repeatable.
        #[arg(long = "point-checkpoint", value_name = "GAMMA=PATH")]
        point_checkpoints: Vec<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Rows sorted by code rate, for plotting.
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
    /// Compare analytical gradients with central differences on a tiny codec.
    Gradcheck {
        #[arg(long, env = "DEEPVLF_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tol_p95: Option<f64>,
        #[arg(long)]
        tol_max: Option<f64>,
    },
    /// Re-run recorded sessions and check them bit for bit.
    Replay {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        transcripts: PathBuf,
    },
    /// Print the effective configuration after overrides.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::Shape(_)
        | Error::Checkpoint(_)
        | Error::NotSimplex(_)
        | Error::RoundOutOfRange { .. } => 2,
        Error::Divergence { .. } => 3,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => 4,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(w) = common.workers {
        overrides.push(format!("eval.workers={w}"));
    }
    match &common.config {
        Some(path) => RunConfig::load(path, &overrides),
        None => RunConfig::from_toml_str(&RunConfig::default().to_toml_string()?, &overrides),
    }
}

enum Model {
    Neural(CodecParams),
    Oracle(OracleCodec),
}

impl Model {
    fn load(cfg: &RunConfig, args: &ModelArgs) -> Result<Self> {
        if args.oracle_stub {
            return Ok(Model::Oracle(OracleCodec {
                q: cfg.core.q,
                m: cfg.core.m,
                t_max: cfg.protocol.t_max,
            }));
        }
        let path = args.checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint.clone());
        Ok(Model::Neural(load_checkpoint(path, &cfg.codec_config())?))
    }

    fn codec(&self) -> &dyn Codec {
        match self {
            Model::Neural(p) => p,
            Model::Oracle(o) => o,
        }
    }
}

fn summary_line(r: &EvalResult) -> String {
    format!(
        "gamma={} snr_fwd_db={} snr_fb_db={} sessions={} bler={:.4e} ci=[{:.4e}, {:.4e}] \
         group_error_rate={:.4e} rate={:.6} power={:.6} forced={:.4e}",
        r.gamma,
        r.snr_fwd_db,
        r.snr_fb_db,
        r.n_sessions,
        r.bler,
        r.bler_ci_low,
        r.bler_ci_high,
        r.group_error_rate,
        r.avg_code_rate,
        r.avg_power,
        r.forced_fraction
    )
}

fn cmd_train(
    common: &Common,
    phase: PhaseArg,
    init: Option<&Path>,
    checkpoint: Option<PathBuf>,
    metrics: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let codec_cfg = cfg.codec_config();
    let mut params = match init {
        Some(p) => load_checkpoint(p, &codec_cfg)?,
        None => init_params(&codec_cfg, cfg.seed)?,
    };
    let phases: &[Phase] = match phase {
        PhaseArg::Pretrain => &[Phase::Pretrain],
        PhaseArg::Finetune => &[Phase::Finetune],
        PhaseArg::Both => &[Phase::Pretrain, Phase::Finetune],
    };
    let checkpoint = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let metrics = metrics.unwrap_or_else(|| cfg.paths.metrics.clone());
    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&metrics)?);
    let channel = cfg.channel_params()?;

    let outcome = with_workers(cfg.eval.workers, || {
        train(&cfg.train_config(), &mut params, &channel, phases, &mut |m| {
            serde_json::to_writer(&mut log, m)?;
            log.write_all(b"\n")?;
            if let (Some(bler), Some(rate)) = (m.bler_estimate, m.avg_rate) {
                log::info!("step {} loss {:.4e} bler {bler:.3e} rate {rate:.4}", m.step, m.loss);
            }
            Ok(())
        })
    })?;
    log.flush()?;
    // on divergence `params` still holds the last finite values
    save_checkpoint(&params, &checkpoint)?;
    let report = outcome?;
    if let Some(best) = &report.best {
        let mut path = checkpoint.clone().into_os_string();
        path.push(".best");
        save_checkpoint(&best.params, PathBuf::from(path))?;
        log::info!("best validation at step {}: {}", best.step, summary_line(&best.result));
    }
    println!(
        "trained {} steps, final loss {:.6e}, checkpoint {}",
        report.steps,
        report.losses.last().copied().unwrap_or(f64::NAN),
        checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(
    common: &Common,
    model: &ModelArgs,
    sessions: Option<usize>,
    csv: Option<PathBuf>,
    transcripts: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let n = sessions.unwrap_or(cfg.eval.sessions);
    if n == 0 {
        return Err(Error::config("eval.sessions", "must be at least 1"));
    }
    let model = Model::load(&cfg, model)?;
    let protocol = cfg.protocol_config()?;
    let result = with_workers(cfg.eval.workers, || estimate(model.codec(), &protocol, n, cfg.seed))??;
    emit_csv(std::slice::from_ref(&result), csv.unwrap_or_else(|| cfg.paths.csv.clone()))?;
    if let Some(path) = transcripts {
        let ids: Vec<u64> = (0..n as u64).collect();
        let ts = random_sessions(model.codec(), &ids, cfg.seed, &protocol)?;
        write_jsonl(&ts, BufWriter::new(File::create(path)?))?;
    }
    println!("{}", summary_line(&result));
    Ok(())
}

fn parse_point(raw: &str) -> Result<(f64, PathBuf)> {
    let (g, p) = raw
        .split_once('=')
        .ok_or_else(|| Error::config("point-checkpoint", format!("`{raw}` is not GAMMA=PATH")))?;
    let gamma: f64 = g
        .trim()
        .parse()
        .map_err(|_| Error::config("point-checkpoint", format!("`{g}` is not a number")))?;
    Ok((gamma, PathBuf::from(p.trim())))
}

fn cmd_sweep(
    common: &Common,
    model: &ModelArgs,
    points: &[String],
    csv: Option<PathBuf>,
    plot: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let spec = cfg.sweep_spec()?;
    let codec_cfg = cfg.codec_config();

    // gamma bits -> model, or the reason it could not be loaded
    let mut per_gamma: BTreeMap<u64, std::result::Result<Model, String>> = BTreeMap::new();
    for raw in points {
        let (gamma, path) = parse_point(raw)?;
        let loaded = load_checkpoint(&path, &codec_cfg)
            .map(Model::Neural)
            .map_err(|e| format!("{}: {e}", path.display()));
        per_gamma.insert(gamma.to_bits(), loaded);
    }
    let shared = if model.oracle_stub || model.checkpoint.is_some() || points.is_empty() {
        Some(Model::load(&cfg, model)?)
    } else {
        None
    };
    let lookup = |gamma: f64| -> std::result::Result<&dyn Codec, String> {
        match per_gamma.get(&gamma.to_bits()) {
            Some(Ok(m)) => Ok(m.codec()),
            Some(Err(reason)) => Err(reason.clone()),
            None => shared
                .as_ref()
                .map(Model::codec)
                .ok_or_else(|| "no checkpoint for this threshold".to_string()),
        }
    };
    let outcome = with_workers(cfg.eval.workers, || sweep(&spec, &lookup))??;
    for s in &outcome.skipped {
        eprintln!("skipped gamma={} snr_fwd_db={}: {}", s.gamma, s.snr_fwd_db, s.reason);
    }
    emit_csv(&outcome.results, csv.unwrap_or_else(|| cfg.paths.csv.clone()))?;
    if let Some(path) = plot {
        emit_csv(&plot_data(&outcome.results), path)?;
    }
    for r in &outcome.results {
        println!("{}", summary_line(r));
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, tol_p95: Option<f64>, tol_max: Option<f64>) -> Result<bool> {
    let mut cfg = GradCheckConfig::default();
    if let Some(t) = tol_p95 {
        cfg.tol_p95 = t;
    }
    if let Some(t) = tol_max {
        cfg.tol_max = t;
    }
    let report = grad_check(&cfg, seed)?;
    println!("{}", serde_json::to_string(&report)?);
    println!("gradcheck {}", if report.passed { "PASS" } else { "FAIL" });
    Ok(report.passed)
}

fn recorded_protocol(s: &deepvlf::protocol::SessionSummary) -> Result<ProtocolConfig> {
    let feedback = if s.feedback_snr_db == f64::INFINITY {
        FeedbackMode::Noiseless
    } else {
        FeedbackMode::Awgn {
            snr_db: s.feedback_snr_db,
        }
    };
    let channel = ChannelParams::new(s.forward_snr_db, feedback)?;
    ProtocolConfig::new(s.gamma, s.tau_plus, s.t_max, channel)
}

fn cmd_replay(common: &Common, model: &ModelArgs, transcripts: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let model = Model::load(&cfg, model)?;
    let ts = read_jsonl(BufReader::new(File::open(transcripts)?))?;
    for t in &ts {
        let protocol = recorded_protocol(&t.summary)?;
        replay_verify(t, &protocol, model.codec()).map_err(|e| match e {
            Error::Replay { round, detail } => Error::Replay {
                round,
                detail: format!("session {}: {detail}", t.summary.session),
            },
            other => other,
        })?;
    }
    println!("replayed {} sessions, all identical", ts.len());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            common,
            phase,
            init,
            checkpoint,
            metrics,
        } => cmd_train(&common, phase, init.as_deref(), checkpoint, metrics)?,
        Command::Eval {
            common,
            model,
            sessions,
            csv,
            transcripts,
        } => cmd_eval(&common, &model, sessions, csv, transcripts)?,
        Command::Sweep {
            common,
            model,
            point_checkpoints,
            csv,
            plot_data,
        } => cmd_sweep(&common, &model, &point_checkpoints, csv, plot_data)?,
        Command::Gradcheck {
            seed,
            tol_p95,
            tol_max,
        } => {
            if !cmd_gradcheck(seed, tol_p95, tol_max)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Replay {
            common,
            model,
            transcripts,
        } => cmd_replay(&common, &model, &transcripts)?,
        Command::Config { common } => print!("{}", load_config(&common)?.to_toml_string()?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
