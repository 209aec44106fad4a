//! Trains one small model per fusion strategy on the same synthetic corpus and
//! compares parameter counts and dev metrics.
//!
//! cargo run --release --example fusion_strategies

use imbser::data::SyntheticSpec;
use imbser::losses::{LossSpec, WeightScheme};
use imbser::model::{FusionKind, Model, ModelConfig};
use imbser::training::{train, TrainConfig};

fn main() -> imbser::Result<()> {
    let spec = SyntheticSpec { n_train: 1500, n_dev: 500, separability: 0.2, ..SyntheticSpec::default() };
    let corpus = spec.generate()?;
    let (tr, dv) = (&corpus.train.by_source["whisper"], &corpus.dev.by_source["whisper"]);
    let cfg = TrainConfig {
        batch_size: 32,
        initial_lr: 3e-3,
        max_epochs: 8,
        loss: LossSpec::focal(2.0, WeightScheme::Prior),
        ..TrainConfig::default()
    };
    println!("{:<16} {:>8}  dev", "fusion", "params");
    for fusion in [FusionKind::Early, FusionKind::Late, FusionKind::EarlyPlusLate, FusionKind::Tensor, FusionKind::LowRankTensor] {
        let mut model = Model::<f32>::new(ModelConfig { hidden: 16, n_transformer_layers: 1, fusion, ..ModelConfig::new(32, spec.text_dim) })?;
        let report = train(&mut model, tr, dv, &cfg, None)?;
        println!("{:<16} {:>8}  {}", fusion.to_string(), model.param_count(), report.best_dev);
    }
    Ok(())
}
