//! `fprior`: command-line driver for foundation-prior workflows.

mod commands;
mod config;
mod data;
mod error;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use serde_json::{Map, Value};

use commands::{Context, Meta, Outcome};
use config::{digest_bytes, LoadedConfig};
use error::CliError;
use output::{to_canonical_json, write_atomic, RunRecord, Timestamps};

#[derive(Parser)]
#[command(name = "fprior", version, about = "Foundation priors from generator-produced synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw an anticipated sample from the prior predictive.
    Anticipate(Common),
    /// Refine a prompt until synthetic data matches the anticipated sample.
    Engineer(Common),
    /// Tilt the prior with synthetic data at trust λ.
    Tilt(Common),
    /// Combine the tilted prior with real data.
    Posterior(Common),
    /// Choose λ by maximizing the marginal likelihood of real data.
    Calibrate(Common),
    /// Basis-function random-coefficient logit.
    Bfr(Common),
    /// Partially linear model with a generated covariate.
    Plm(Common),
    /// Gaussian-process regression refined by synthetic points.
    Gp(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Omit wall-clock timestamps so reruns are byte-identical.
    #[arg(long)]
    canonical: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Anticipate(_) => "anticipate",
            Command::Engineer(_) => "engineer",
            Command::Tilt(_) => "tilt",
            Command::Posterior(_) => "posterior",
            Command::Calibrate(_) => "calibrate",
            Command::Bfr(_) => "bfr",
            Command::Plm(_) => "plm",
            Command::Gp(_) => "gp",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Anticipate(c)
            | Command::Engineer(c)
            | Command::Tilt(c)
            | Command::Posterior(c)
            | Command::Calibrate(c)
            | Command::Bfr(c)
            | Command::Plm(c)
            | Command::Gp(c) => c,
        }
    }

    fn run(&self, ctx: &Context, meta: &mut Meta) -> Result<Outcome, CliError> {
        match self {
            Command::Anticipate(_) => commands::anticipate(ctx, meta),
            Command::Engineer(_) => commands::engineer(ctx, meta),
            Command::Tilt(_) => commands::tilt(ctx, meta),
            Command::Posterior(_) => commands::posterior(ctx, meta),
            Command::Calibrate(_) => commands::calibrate(ctx, meta),
            Command::Bfr(_) => commands::bfr(ctx, meta),
            Command::Plm(_) => commands::plm(ctx, meta),
            Command::Gp(_) => commands::gp(ctx, meta),
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn out_dir(common: &Common, cfg: Option<&LoadedConfig>) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    cfg.and_then(|c| c.config.output.dir.as_ref().map(|d| c.resolve(d)))
        .unwrap_or_else(|| PathBuf::from("fprior-out"))
}

/// Writes every artifact; returns the digests recorded in the run record.
fn write_outputs(dir: &Path, files: &[(String, String)]) -> Result<Value, CliError> {
    let mut digests = Map::new();
    for (name, contents) in files {
        write_atomic(&dir.join(name), contents.as_bytes())?;
        digests.insert(name.clone(), Value::String(digest_bytes(contents.as_bytes())));
    }
    Ok(Value::Object(digests))
}

fn execute(cmd: &Command) -> i32 {
    let common = cmd.common();
    let started = now();
    let loaded = config::load(&common.config);
    let dir = out_dir(common, loaded.as_ref().ok());
    let mut meta = Meta::default();

    let outcome = match &loaded {
        Ok(cfg) => {
            let seed = common.seed.or(cfg.config.seed).unwrap_or(0);
            cmd.run(&Context { cfg, seed }, &mut meta)
        }
        Err(CliError::Config(m)) => Err(CliError::Config(m.clone())),
        Err(e) => Err(CliError::Io(e.to_string())),
    };

    let mut files: Vec<(String, String)> = Vec::new();
    let (status, code, message) = match outcome {
        Ok(o) => match to_canonical_json(&o.result) {
            Ok(json) => {
                files.push(("result.json".into(), json));
                files.extend(o.files);
                ("ok".to_string(), 0, None)
            }
            Err(e) => ("error".into(), e.exit_code(), Some(e.to_string())),
        },
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(d) = e.diagnostics() {
                eprintln!("generator stderr:\n{d}");
            }
            if let Some(p) = meta.partial.take() {
                if let Ok(json) = to_canonical_json(&p) {
                    files.push(("partial_result.json".into(), json));
                }
            }
            ("error".into(), e.exit_code(), Some(e.to_string()))
        }
    };
    if let Ok(cfg) = &loaded {
        files.push(("config.json".into(), String::from_utf8_lossy(&cfg.raw).into_owned()));
    }

    let digests = match write_outputs(&dir, &files) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let record = RunRecord {
        command: cmd.name().into(),
        config_digest: loaded.as_ref().map(|c| c.digest.clone()).unwrap_or_default(),
        config_file: common.config.display().to_string(),
        seeds: meta.seeds,
        prompts: meta.prompts,
        lambda: meta.lambda,
        lambda_provenance: meta.lambda_provenance,
        generator: meta.generator,
        outputs: digests,
        status,
        exit_code: code,
        error: message,
        timestamps: (!common.canonical).then(|| Timestamps {
            started,
            finished: now(),
        }),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    let written = to_canonical_json(&record).and_then(|s| write_atomic(&dir.join("run_record.json"), s.as_bytes()));
    if let Err(e) = written {
        error!("could not write run record: {e}");
        return if code == 0 { e.exit_code() } else { code };
    }
    if code == 0 {
        println!("{}", dir.join("result.json").display());
    }
    code
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    ExitCode::from(execute(&cli.command) as u8)
}
