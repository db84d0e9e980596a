//! `privsplit` command line: experiment pipeline, curve plotting, and the
//! split client/server service.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use privsplit_core::container::{load_client_bundle, load_server_bundle};
use privsplit_core::experiments::{plot_curves, run_pipeline, ExperimentConfig};
use privsplit_core::service::{client_infer_with_timeout, serve};
use std::path::{Path, PathBuf};
use std::time::Duration;

#[derive(Parser)]
#[command(name = "privsplit", version, about = "Split-inference pipeline with feature obfuscation and privacy measurement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment pipeline from a JSON config and emit artifacts.
    Run {
        /// JSON config file; omitted keys use defaults.
        #[arg(long)]
        config: PathBuf,
    },
    /// Render an accuracy-privacy curve CSV as an SVG.
    Plot {
        /// A curve.csv produced by `run`.
        curve: PathBuf,
        /// Output SVG path (defaults to the input with an .svg extension).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Host the server bundle (back layers + PCA reconstruction).
    Serve {
        /// Server bundle file emitted by `run`.
        #[arg(long)]
        bundle: PathBuf,
        /// Listen address, e.g. 127.0.0.1:7878 (port 0 picks a free port).
        #[arg(long)]
        listen: String,
    },
    /// Extract features locally and ask a running server for the class.
    Infer {
        /// Client bundle file emitted by `run`.
        #[arg(long)]
        bundle: PathBuf,
        /// Server address, e.g. 127.0.0.1:7878.
        #[arg(long)]
        server: String,
        /// Inline comma-separated feature row, or a path to a file holding
        /// one (a dataset CSV header + first data row also works).
        #[arg(long, allow_hyphen_values = true)]
        input: String,
        /// Noise seed for this request.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Connection and response timeout in seconds.
        #[arg(long, default_value_t = 5)]
        timeout_secs: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config } => cmd_run(&config),
        Command::Plot { curve, out } => cmd_plot(&curve, out),
        Command::Serve { bundle, listen } => cmd_serve(&bundle, &listen),
        Command::Infer {
            bundle,
            server,
            input,
            seed,
            timeout_secs,
        } => cmd_infer(&bundle, &server, &input, seed, timeout_secs),
    }
}

fn cmd_run(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_json_file(config)
        .with_context(|| format!("loading config {}", config.display()))?;
    let artifacts = run_pipeline(&cfg).context("pipeline failed")?;
    println!("artifacts written to {}", artifacts.output_dir.display());
    for note in &artifacts.notes {
        println!("note: {note}");
    }
    for v in &artifacts.verdicts {
        println!(
            "verdict {} (split {}): {} ({})",
            v.claim,
            v.split,
            if v.pass { "pass" } else { "FAIL" },
            v.detail
        );
    }
    Ok(())
}

fn cmd_plot(curve: &Path, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| curve.with_extension("svg"));
    plot_curves(curve, &out).context("plotting failed")?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_serve(bundle: &Path, listen: &str) -> Result<()> {
    let bundle = load_server_bundle(bundle)
        .with_context(|| format!("loading server bundle {}", bundle.display()))?;
    let expected = bundle.expected_dim();
    let handle = serve(bundle, listen).context("starting server")?;
    println!("listening on {} (feature dim {expected})", handle.local_addr());
    // Serve until interrupted.
    loop {
        std::thread::park();
    }
}

fn cmd_infer(bundle: &Path, server: &str, input: &str, seed: u64, timeout_secs: u64) -> Result<()> {
    let bundle = load_client_bundle(bundle)
        .with_context(|| format!("loading client bundle {}", bundle.display()))?;
    let x = parse_input(input, bundle.front.input_dim())?;
    let result = client_infer_with_timeout(
        &bundle,
        &x,
        server,
        seed,
        Duration::from_secs(timeout_secs),
    )?;
    println!("class: {}", result.predicted_class);
    let probs: Vec<String> = result.probs.iter().map(|p| format!("{p:.6}")).collect();
    println!("probs: [{}]", probs.join(", "));
    Ok(())
}

/// Accepts an inline comma-separated row or a file containing one. A file
/// with a dataset-CSV header (`f0,...,ct1,ct2`) contributes its first data
/// row with the label columns dropped.
fn parse_input(input: &str, want_dim: usize) -> Result<Vec<f64>> {
    let parse_row = |row: &str| -> Option<Vec<f64>> {
        row.split(',')
            .map(|f| f.trim().parse::<f64>().ok())
            .collect()
    };
    let path = Path::new(input);
    let (row, source): (Vec<f64>, String) = if path.exists() {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().context("input file is empty")?;
        match parse_row(first) {
            Some(row) => (row, path.display().to_string()),
            None if first.starts_with("f0,") => {
                let data = lines.next().context("no data row after header")?;
                let mut row = parse_row(data)
                    .with_context(|| format!("non-numeric data row in {}", path.display()))?;
                // Drop the ct1/ct2 label columns.
                if row.len() >= 2 {
                    row.truncate(row.len() - 2);
                }
                (row, path.display().to_string())
            }
            None => bail!("{} does not start with a numeric row", path.display()),
        }
    } else {
        let row = parse_row(input).context("input is neither a file nor a numeric row")?;
        (row, "inline row".to_string())
    };
    if row.len() != want_dim {
        bail!(
            "{source} has {} features, client bundle expects {want_dim}",
            row.len()
        );
    }
    Ok(row)
}
