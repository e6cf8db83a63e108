//! Train briefly, then dump representations and mixture states of a few
//! test windows into a directory of `.most` tensor files.

use mossl::data::{synth_generate, Dataset, SplitSpec, SynthSpec};
use mossl::model::{forward_train, train, MaskSource, Model, ModelConfig, ModelVars, TrainConfig};
use mossl::numerics::container::save_tensors;
use mossl::numerics::Tape;

fn main() -> mossl::Result<()> {
    let out_dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "repr-example".into());
    let series = synth_generate(&SynthSpec::planted(4, 3, 400, 0.1), 5)?;
    let cfg = ModelConfig {
        hidden: 8,
        components: 3,
        ..Default::default()
    };
    let ds = Dataset::build(
        series,
        SplitSpec::default(),
        cfg.input_steps,
        cfg.output_steps,
        1,
    )?;
    let model = Model::new(cfg, 4, 3)?;
    let tc = TrainConfig {
        epochs: 2,
        early_stopping_patience: None,
        ..Default::default()
    };
    let params = train(&model, &ds, &tc, 5, &mut |_| {})?.params;

    let (mut hs, mut gammas, mut mus, mut sigmas) = (vec![], vec![], vec![], vec![]);
    for (i, w) in ds.test.iter().take(8).enumerate() {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let vars = ModelVars::bind(&bound, &model)?;
        let f = forward_train(
            &mut tape,
            &vars,
            &model,
            &tc,
            w,
            MaskSource::Sampled(i as u64),
        )?;
        let mix = f.mixture.expect("full model").state(&tape);
        let g: Vec<String> = mix.gamma.data().iter().map(|v| format!("{v:.3}")).collect();
        println!(
            "window {i} (target step {}): gamma [{}]",
            w.anchor,
            g.join(", ")
        );
        hs.push(tape.value(f.h).clone());
        gammas.push(mix.gamma);
        mus.push(mix.mu);
        sigmas.push(mix.sigma2);
    }
    let dir = std::path::Path::new(&out_dir);
    std::fs::create_dir_all(dir).map_err(|e| mossl::Error::Io {
        path: dir.into(),
        source: e,
    })?;
    for (name, ts) in [
        ("h", &hs),
        ("gamma", &gammas),
        ("mu", &mus),
        ("sigma2", &sigmas),
    ] {
        save_tensors(
            &dir.join(format!("{name}.most")),
            &ts.iter().collect::<Vec<_>>(),
        )?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}
