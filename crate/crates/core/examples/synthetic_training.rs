//! Train on planted-coupling synthetic data and compare with persistence.
//!
//! `cargo run --release --example synthetic_training -- [epochs] [hidden]`

use mossl::data::{synth_generate, Dataset, SplitSpec, SynthSpec};
use mossl::model::{
    evaluate, persistence_metrics, train, LossWeights, Model, ModelConfig, TrainConfig,
};

fn main() -> mossl::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let hidden = args.next().and_then(|a| a.parse().ok()).unwrap_or(8);

    let (nodes, mods) = (6, 3);
    let series = synth_generate(&SynthSpec::planted(nodes, mods, 2000, 0.1), 7)?;
    let cfg = ModelConfig {
        hidden,
        ..Default::default()
    };
    let tc = TrainConfig {
        epochs,
        stride: 2,
        early_stopping_patience: None,
        loss_weights: LossWeights {
            forecast: 1.0,
            global: 1.0 / (nodes * mods * hidden) as f64,
            modality: 1.0,
        },
        ..Default::default()
    };
    let ds = Dataset::build(
        series,
        SplitSpec::default(),
        cfg.input_steps,
        cfg.output_steps,
        tc.stride,
    )?;
    println!(
        "{} train / {} val / {} test windows",
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    let model = Model::new(cfg, nodes, mods)?;

    let out = train(&model, &ds, &tc, 7, &mut |e| {
        println!(
            "epoch {:>3}  forecast {:>8.4}  global {:>10.3}  modality {:>8.4}  val rmse {:.4}",
            e.epoch,
            e.train.forecast,
            e.train.global.unwrap_or(f64::NAN),
            e.train.modality.unwrap_or(f64::NAN),
            e.val_rmse.unwrap_or(f64::NAN)
        )
    })?;

    let names = ds.series.modality_names();
    let test = evaluate(&out.params, &model, &ds.test, names, &ds.stats)?;
    let base = persistence_metrics(&ds.test, names, &ds.stats)?;
    println!("\n{:<8} {:>10} {:>12}", "modality", "MoSSL", "persistence");
    for (a, b) in test.per_modality.iter().zip(&base.per_modality) {
        println!("{:<8} {:>10.4} {:>12.4}", a.modality, a.rmse, b.rmse);
    }
    Ok(())
}
