//! Trains one ablation on the planted-interaction benchmark and compares it
//! with the least-squares baseline.
//!
//! cargo run --release --example synthetic_benchmark -- [ABLATION] [MAX_EPOCHS]

use intermulti::data::{generate_synthetic, SyntheticSpec};
use intermulti::harness::{linear_baseline, run_experiment, Splits};
use intermulti::model::ModelConfig;

fn main() -> intermulti::Result<()> {
    let mut args = std::env::args().skip(1);
    let ablation = args.next().unwrap_or_else(|| "A0".into()).parse()?;
    let max_epochs = args.next().map(|s| s.parse().expect("epoch count")).unwrap_or(100);

    let data = generate_synthetic(&SyntheticSpec::default())?;
    let base = linear_baseline(&data.train, &data.val)?;
    println!("least-squares baseline: val MSE {:.4}", base.val_mse);

    let cfg = ModelConfig {
        ablation,
        max_epochs,
        ..ModelConfig::default()
    };
    let splits = Splits {
        train: &data.train,
        val: &data.val,
        test: Some(&data.test),
    };
    let start = std::time::Instant::now();
    let (_, record) = run_experiment(&cfg, splits, |e| {
        println!(
            "epoch {:3}  train {:.4}  val {:.4}{}  ({:.0}s)",
            e.epoch,
            e.train_loss,
            e.val_loss,
            if e.improved { " *" } else { "" },
            start.elapsed().as_secs_f64()
        )
    })?;
    println!(
        "{ablation}: best epoch {}, val MSE {:.4} ({:+.1}% vs baseline), {:.0}s",
        record.best_epoch,
        record.val_loss,
        100.0 * (record.val_loss / base.val_mse - 1.0),
        record.wall_clock_seconds
    );
    println!("dependency {:?}", record.dependency);
    println!("control    {:?}", record.dependency_control);
    Ok(())
}
