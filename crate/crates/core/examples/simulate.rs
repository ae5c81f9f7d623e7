//! Runs every strategy on the default four-client task and compares final
//! loss against total bytes on the wire.
//!
//! ```text
//! cargo run --release --example simulate [rounds]
//! ```

use fedsrd::{run_simulation, RoundMetrics, SimConfig, Strategy};

pub struct StrategyResult {
    pub strategy: Strategy,
    pub rows: Vec<RoundMetrics>,
}

impl StrategyResult {
    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.eval_loss)
    }

    pub fn total_bytes(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.cumulative_bytes)
    }
}

pub fn run_example(rounds: usize) -> fedsrd::Result<Vec<StrategyResult>> {
    let mut results = Vec::new();
    for strategy in Strategy::ALL {
        let config = SimConfig {
            num_rounds: rounds,
            strategy,
            ..SimConfig::default()
        };
        let rows = run_simulation(&config)?;
        results.push(StrategyResult { strategy, rows });
    }

    let dense = results
        .iter()
        .find(|r| r.strategy == Strategy::FedAvg)
        .map_or(1, |r| r.total_bytes()) as f64;
    let start = SimConfig::default();
    println!(
        "{} clients, {} rounds, {} layers of {}x{}, rank {}",
        start.num_clients,
        rounds,
        start.layers.len(),
        start.layers[0][0],
        start.layers[0][1],
        start.rank
    );
    println!("{:<18} {:>12} {:>12} {:>12} {:>9}", "strategy", "first loss", "final loss", "bytes", "vs fedavg");
    for r in &results {
        println!(
            "{:<18} {:>12.3} {:>12.3} {:>12} {:>8.1}%",
            r.strategy.name(),
            r.rows[0].eval_loss,
            r.final_loss(),
            r.total_bytes(),
            100.0 * r.total_bytes() as f64 / dense
        );
    }
    Ok(results)
}

fn main() -> fedsrd::Result<()> {
    let rounds = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("rounds must be an integer"))
        .unwrap_or(SimConfig::default().num_rounds);
    run_example(rounds)?;
    Ok(())
}
