//! Trains one ensemble member end to end, saves it, reloads the checkpoint and
//! confirms the reloaded model reproduces the dev metrics.
//!
//! cargo run --release --example train_single_model [epochs]

use imbser::experiment::{train_member, ExperimentConfig, ExperimentData, PREDICTIONS_FILE};
use imbser::model::Model;
use imbser::training::{evaluate, CHECKPOINT_FILE};

fn main() -> imbser::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let cfg = ExperimentConfig::default_ensemble();
    let mut member = cfg.models[0].clone();
    member.train.max_epochs = epochs;
    let data = ExperimentData::load(&cfg)?;

    let out = std::env::temp_dir().join("imbser-single");
    let run = train_member(&member, &data, Some(&out))?;
    println!("{} ({}) best epoch {}: {}", run.tag, member.train.loss, run.report.best_epoch, run.report.best_dev);
    for e in &run.report.epochs {
        println!("  epoch {:>2} loss {:>8.4} dev Macro-F1 {:>6.2} lr {:.1e}", e.epoch, e.train_loss, 100.0 * e.dev_macro_f1, e.lr);
    }

    let dir = out.join(&run.tag);
    let reloaded = Model::<f32>::load(&dir.join(CHECKPOINT_FILE))?;
    let (_, metrics) = evaluate(&reloaded, &data.dev[&member.audio_source], 256, &run.tag)?;
    assert_eq!(metrics.as_ref(), Some(&run.report.best_dev));
    println!("checkpoint reload reproduces dev metrics; predictions in {}", dir.join(PREDICTIONS_FILE).display());
    Ok(())
}
