//! Reverse-mode gradients of the full objective against central differences
//! on the smallest complete model.

use mossl::cli::gradcheck_point;
use mossl::data::{synth_generate, Dataset, SplitSpec, SynthSpec};
use mossl::model::{batch_objective, draw_masks, Model, ModelConfig, ModelVars, TrainConfig};
use mossl::numerics::{grad_check, Bindings, Tape};
use mossl::seed::derive_seed;

fn main() -> mossl::Result<()> {
    let series = synth_generate(&SynthSpec::planted(3, 2, 60, 0.1), 1)?;
    let cfg = ModelConfig {
        input_steps: 4,
        output_steps: 1,
        hidden: 4,
        components: 2,
        layers: 2,
        ..Default::default()
    };
    let ds = Dataset::build(series, SplitSpec::default(), 4, 1, 1)?;
    let model = Model::new(cfg, 3, 2)?;
    let train = TrainConfig::default();
    let params = gradcheck_point(&model.init_params(3), 3);
    let windows = ds.train[..2].to_vec();
    let seeds: Vec<u64> = (0..2)
        .map(|i| derive_seed(3, "gradcheck-mask", &[i]))
        .collect();
    let masks = draw_masks(&params, &model, &train, &windows, &seeds)?;
    let objective = |tape: &mut Tape, b: &Bindings| {
        let vars = ModelVars::bind(b, &model)?;
        batch_objective(tape, &vars, &model, &train, &windows, &masks)
    };

    for eps in [1e-4, 1e-5, 1e-6] {
        let report = grad_check(&params, eps, objective)?;
        let max_abs = report
            .entries
            .iter()
            .map(|m| (m.analytic - m.numeric).abs())
            .fold(0.0, f64::max);
        println!(
            "eps {eps:.0e}: {} coordinates, max relative error {:.2e}, max absolute error {max_abs:.2e}, {} above 1e-4",
            report.coordinates,
            report.max_relative_error,
            report.failures(1e-4).count()
        );
    }

    let report = grad_check(&params, 1e-6, objective)?;
    let mut per = report.per_param.clone();
    per.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("\nworst parameters at eps 1e-6:");
    for (name, err) in per.iter().take(8) {
        println!("  {name:<24} {err:.2e}");
    }
    if let Some(w) = &report.worst {
        println!(
            "worst coordinate {}[{}]: analytic {:.3e}, numeric {:.3e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    Ok(())
}
