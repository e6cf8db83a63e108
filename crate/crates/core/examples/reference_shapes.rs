//! One forward pass at the reference scale: 98 nodes, 4 modalities,
//! 16 input steps, 3 forecast steps, d = 48, K = 4.

use std::time::Instant;

use mossl::data::WindowSample;
use mossl::model::{forward_train, MaskSource, Model, ModelConfig, ModelVars, TrainConfig};
use mossl::numerics::{Tape, Tensor};

fn main() -> mossl::Result<()> {
    let (nodes, mods) = (98, 4);
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), nodes, mods)?;
    let params = model.init_params(0);
    println!(
        "{} parameter tensors, {} scalars",
        params.len(),
        params.num_scalars()
    );

    let window = WindowSample {
        x: Tensor::from_fn(&[cfg.input_steps, nodes, mods], |i| {
            ((i[0] + i[1] * 3 + i[2]) as f64 * 0.37).sin()
        }),
        y: Tensor::zeros(&[cfg.output_steps, nodes, mods]),
        anchor: 0,
    };
    let start = Instant::now();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let vars = ModelVars::bind(&bound, &model)?;
    let f = forward_train(
        &mut tape,
        &vars,
        &model,
        &TrainConfig::default(),
        &window,
        MaskSource::Sampled(1),
    )?;
    let elapsed = start.elapsed();

    let mix = f.mixture.expect("full model").state(&tape);
    println!("H        {:?}", tape.shape(f.h));
    println!("X~       {:?}", tape.shape(f.x_aug.expect("full model")));
    println!("H~       {:?}", tape.shape(f.h_aug.expect("full model")));
    println!(
        "gamma    {:?} sum {:.15}",
        mix.gamma.data(),
        mix.gamma.sum()
    );
    println!("mu       {:?}", mix.mu.shape());
    println!("sigma2   {:?}", mix.sigma2.shape());
    println!("Y^       {:?}", tape.shape(f.prediction));
    println!(
        "masked   {:.3} of input cells",
        f.mask.map_or(0.0, |m| m.masked_fraction())
    );
    println!("losses   {:?}", f.parts);
    println!("forward  {elapsed:.2?}");
    Ok(())
}
