//! The full model against its four single-switch ablations, each trained
//! from the same seed with its own optimizer.

use mossl::data::{synth_generate, Dataset, SplitSpec, SynthSpec};
use mossl::model::{evaluate, train, Ablation, LossWeights, Model, ModelConfig, TrainConfig};

fn main() -> mossl::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(3);
    let series = synth_generate(&SynthSpec::planted(4, 3, 600, 0.1), 3)?;
    let cfg = ModelConfig {
        hidden: 8,
        ..Default::default()
    };
    let ds = Dataset::build(
        series,
        SplitSpec::default(),
        cfg.input_steps,
        cfg.output_steps,
        2,
    )?;
    let model = Model::new(cfg, 4, 3)?;

    println!(
        "{:<10} {:>10} {:>10} {:>10} {:>10}",
        "variant", "forecast", "global", "modality", "test rmse"
    );
    for (label, flags) in Ablation::variants() {
        let tc = TrainConfig {
            epochs,
            ablation: flags,
            stride: 2,
            early_stopping_patience: None,
            loss_weights: LossWeights {
                global: 1.0 / 96.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = train(&model, &ds, &tc, 11, &mut |_| {})?;
        let last = out.history.epochs.last().expect("trained").train;
        let test = evaluate(
            &out.params,
            &model,
            &ds.test,
            ds.series.modality_names(),
            &ds.stats,
        )?;
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{label:<10} {:>10.4} {:>10} {:>10} {:>10.4}",
            last.forecast,
            cell(last.global),
            cell(last.modality),
            test.overall_rmse
        );
    }
    Ok(())
}
