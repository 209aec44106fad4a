//! Trains the seven default ensemble members and majority-votes their dev
//! predictions.
//!
//! cargo run --release --example ensemble_vote [epochs] [seed]

use imbser::ensemble::VoteMode;
use imbser::experiment::{run_experiment, ExperimentConfig, ExperimentData};

fn main() -> imbser::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let mut cfg = ExperimentConfig::default_ensemble().with_seed(seed);
    for m in &mut cfg.models {
        m.train.max_epochs = epochs;
    }
    let data = ExperimentData::load(&cfg)?;
    let out = std::env::temp_dir().join("imbser-ensemble");
    let outcome = run_experiment(&cfg, &data, Some(&out), VoteMode::Hard)?;
    print!("{}", outcome.ensemble);
    println!("artifacts in {}", out.display());
    Ok(())
}
