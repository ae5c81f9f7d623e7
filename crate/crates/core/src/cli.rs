//! The `fedsrd` command line.
//!
//! ```text
//! fedsrd run --config sim.toml [--output metrics.csv]
//! fedsrd account --params N [--sparsity s] [--half] [--bitmap | --dense]
//! fedsrd inspect payload.bin
//! ```
//!
//! Exit codes: 0 on success, 2 for bad arguments or a bad config, 1 for any
//! other failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::{run_simulation, MetricsWriter, SimConfig};
use crate::wire::{account, decode, FLAG_DENSE, FLAG_RLE};

#[derive(Debug, Parser)]
#[command(name = "fedsrd", about = "Sparse federated LoRA simulator and payload tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a simulation and write per-round metrics as CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_path` from the config. Without either, the CSV
        /// goes to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the one-way byte cost of transmitting N float32 parameters.
    Account {
        #[arg(long)]
        params: u64,
        /// Fraction of entries dropped.
        #[arg(long, default_value_t = 0.0)]
        sparsity: f64,
        /// Send only half of the parameters (one of the two factors).
        #[arg(long)]
        half: bool,
        /// Add a position bitmap to the sparse payload.
        #[arg(long, conflicts_with = "dense")]
        bitmap: bool,
        /// Send every value with no bitmap; ignores --sparsity.
        #[arg(long)]
        dense: bool,
    },
    /// Decode a payload file and summarize it.
    Inspect { payload: PathBuf },
}

fn cost_table(params: u64, sparsity: f64, half: bool, bitmap: bool, dense: bool) -> Result<String> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity {sparsity} outside [0, 1]")));
    }
    let n = if half { params / 2 } else { params };
    let n = usize::try_from(n).map_err(|_| Error::Overflow(usize::MAX))?;
    let kept = if dense { n } else { ((1.0 - sparsity) * n as f64).round() as usize };
    let cost = account(1, n, kept, dense, bitmap);
    let mut out = String::new();
    out.push_str(&format!("params   {n}\n"));
    out.push_str(&format!("kept     {kept}\n"));
    out.push_str(&format!("values   {:.1} MB\n", cost.value_mb()));
    out.push_str(&format!("bitmap   {:.1} MB\n", cost.bitmap_mb()));
    out.push_str(&format!("total    {:.1} MB\n", cost.total_mb()));
    Ok(out)
}

fn inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let delta = decode(&bytes)?;
    let layout = match bytes.get(5) {
        Some(f) if f & FLAG_DENSE != 0 => "dense",
        Some(f) if f & FLAG_RLE != 0 => "rle bitmap",
        _ => "raw bitmap",
    };
    Ok(format!(
        "bytes    {}\nlayout   {layout}\nshape    {}x{}\nnnz      {}\ndensity  {:.4}\nnorm     {:.6e}\n",
        bytes.len(),
        delta.rows(),
        delta.cols(),
        delta.nnz(),
        delta.density(),
        delta.to_dense().frobenius_norm()
    ))
}

fn run(config: &Path, output: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let mut config = SimConfig::load(config)?;
    if output.is_some() {
        config.output_path = output;
    }
    let rows = if config.output_path.is_some() {
        run_simulation(&config)?
    } else {
        let rows = run_simulation(&config)?;
        let mut w = MetricsWriter::new(&mut *out)?;
        for row in &rows {
            w.write(row)?;
        }
        rows
    };
    if let Some(last) = rows.last() {
        eprintln!(
            "{}: {} rounds, final eval loss {:.6e}, {} bytes",
            config.strategy.name(),
            last.round,
            last.eval_loss,
            last.cumulative_bytes
        );
    }
    Ok(())
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Run { config, output } => run(&config, output, out),
        Command::Account {
            params,
            sparsity,
            half,
            bitmap,
            dense,
        } => {
            out.write_all(cost_table(params, sparsity, half, bitmap, dense)?.as_bytes())?;
            Ok(())
        }
        Command::Inspect { payload } => {
            out.write_all(inspect(&payload)?.as_bytes())?;
            Ok(())
        }
    }
}

/// Runs the CLI with `argv` (program name first), writing normal output to
/// `out`, and returns the process exit code.
pub fn cli_main_with<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    cli_main_with(argv, &mut std::io::stdout().lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total_line(table: &str) -> &str {
        table.lines().find(|l| l.starts_with("total")).unwrap()
    }

    #[test]
    fn dense_cost_of_the_reference_model() {
        let t = cost_table(97_255_424, 0.0, false, false, true).unwrap();
        assert_eq!(total_line(&t), "total    371.0 MB");
    }

    #[test]
    fn sparsity_out_of_range_is_a_config_error() {
        assert!(matches!(cost_table(10, 1.5, false, true, false), Err(Error::Config(_))));
    }
}
