//! `mirage`: runs the experiments through the HTTP service.
//!
//! Without `--server` an in-process service is started on a loopback port, so the
//! local and remote paths share one code path. Reports are printed as JSON on
//! stdout; failures print an error JSON object and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mirage_client::Client;
use mirage_core::forward::FarFieldData;
use mirage_core::harness::{ErrorBody, ExperimentConfig};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "mirage", version, about = "Dipole localization near a plasmonic nanoparticle")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given.
    #[arg(long, global = true, value_parser = ["diamond", "ellipse", "flower", "disk"])]
    preset: Option<String>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the numerical kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Use a running service instead of an in-process one.
    #[arg(long, global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Spectrum, resonances and exterior mode fields.
    Modes,
    /// Forward solve and both fits for the configured source.
    Mirage,
    /// Errors as the source moves away from the particle.
    SweepDistance,
    /// Error statistics under measurement noise.
    SweepNoise,
    /// Corrected fit with the first N modes for each configured N.
    ModeTable,
    /// Far-field data of the configured source.
    Forward,
    /// Back-propagated image of far-field data.
    Image {
        /// Data file stem (`<stem>.csv` plus `<stem>.json`).
        #[arg(long)]
        data: PathBuf,
    },
    /// Uncorrected and corrected fits on far-field data.
    Localize {
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

fn fail(kind: &str, message: impl ToString) -> ErrorBody {
    ErrorBody::new(kind, message.to_string())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, ErrorBody> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(p), _) => ExperimentConfig::load(p).map_err(|e| ErrorBody::from(&e))?,
        (None, Some(name)) => ExperimentConfig::preset(name).map_err(|e| ErrorBody::from(&e))?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = Some(std::path::absolute(out).map_err(|e| fail("io", e))?);
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_data(stem: &Path) -> Result<FarFieldData, ErrorBody> {
    let stem = stem.with_extension("");
    let dir = stem.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = stem
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| fail("invalid_input", "data path has no file name"))?;
    FarFieldData::load(dir, name).map_err(|e| ErrorBody::from(&e))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

async fn execute(cli: &Cli, client: &Client) -> Result<Value, ErrorBody> {
    let cfg = load_config(cli)?;
    let e = |e: mirage_client::ClientError| e.body();
    Ok(match &cli.command {
        Command::Modes => to_value(&client.modes(&cfg).await.map_err(e)?),
        Command::Mirage => to_value(&client.mirage(&cfg).await.map_err(e)?),
        Command::SweepDistance => to_value(&client.sweep_distance(&cfg).await.map_err(e)?),
        Command::SweepNoise => to_value(&client.sweep_noise(&cfg).await.map_err(e)?),
        Command::ModeTable => to_value(&client.mode_table(&cfg).await.map_err(e)?),
        Command::Forward => {
            let d = client.forward(&cfg).await.map_err(e)?;
            let norm = d.samples.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            json!({ "omega": d.meta.omega, "radius": d.meta.radius, "n_sensors": d.meta.n_sensors,
                    "l2_norm": norm, "written": cfg.out.as_ref().map(|o| o.join("data.csv")) })
        }
        Command::Image { data } => {
            let d = load_data(data)?;
            let img = client.image(&cfg, &d).await.map_err(e)?;
            let peak = img.argmax().map(|p| [p[0] * 1e9, p[1] * 1e9]);
            json!({ "argmax_nm": peak, "points_per_side": img.spec.points_per_side,
                    "written": cfg.out.as_ref().map(|o| o.join("image.csv")) })
        }
        Command::Localize { data } => {
            let d = load_data(data)?;
            to_value(&client.localize(&cfg, &d).await.map_err(e)?)
        }
        Command::Serve { .. } => unreachable!("handled before dispatch"),
    })
}

async fn run(cli: Cli) -> Result<Option<Value>, ErrorBody> {
    if let Command::Serve { addr } = &cli.command {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| fail("io", e))?;
        mirage_service::serve(listener).await.map_err(|e| fail("io", e))?;
        return Ok(None);
    }
    let client = match &cli.server {
        Some(url) => Client::new(url.clone()),
        None => {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| fail("io", e))?;
            let addr = listener.local_addr().map_err(|e| fail("io", e))?;
            tokio::spawn(mirage_service::serve(listener));
            Client::new(format!("http://{addr}"))
        }
    };
    execute(&cli, &client).await.map(Some)
}

fn print_error(body: &ErrorBody) {
    println!("{}", serde_json::to_string(body).unwrap_or_else(|_| "{\"error\":{}}".into()));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            print_error(&fail("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            print_error(&fail("config", e));
            return ExitCode::FAILURE;
        }
    }
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            print_error(&fail("io", e));
            return ExitCode::FAILURE;
        }
    };
    match rt.block_on(run(cli)) {
        Ok(Some(v)) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(body) => {
            print_error(&body);
            ExitCode::FAILURE
        }
    }
}
