//! How the focusing parameter and prior class weights reshape the per-sample
//! loss.
//!
//! cargo run --example focal_losses

use imbser::data::{default_class_names, TRAIN_CLASS_COUNTS};
use imbser::losses::{ClassWeights, LossSpec, WeightScheme};

fn main() -> imbser::Result<()> {
    let gammas = [0.0, 1.0, 2.0, 2.5, 3.0];
    print!("{:>6}", "p");
    for g in gammas {
        print!("  {:>9}", format!("γ={g}"));
    }
    println!();
    for p in [0.05f64, 0.2, 0.5, 0.8, 0.95] {
        print!("{p:>6.2}");
        for g in gammas {
            let loss = LossSpec::focal(g, WeightScheme::Uniform).resolve(&[1, 1])?;
            print!("  {:>9.5}", loss.evaluate(&[p], &[0])?);
        }
        println!();
    }

    println!("\nprior weights N / N_j for the training distribution:");
    let w = ClassWeights::prior(&TRAIN_CLASS_COUNTS)?;
    for ((name, n), w) in default_class_names().iter().zip(TRAIN_CLASS_COUNTS).zip(w.weights()) {
        println!("{name:<10} {n:>6} {w:>8.3}");
    }

    // A confident majority sample and an uncertain minority sample.
    let labels = [0, 7];
    let p_true = [0.9f64, 0.3];
    for spec in [
        LossSpec::ce(WeightScheme::Uniform),
        LossSpec::ce(WeightScheme::Prior),
        LossSpec::focal(2.0, WeightScheme::Uniform),
        LossSpec::focal(2.0, WeightScheme::Prior),
    ] {
        let loss = spec.resolve(&TRAIN_CLASS_COUNTS)?;
        println!("{:<22} batch loss {:>9.4}", spec.to_string(), loss.evaluate(&p_true, &labels)?);
    }
    Ok(())
}
