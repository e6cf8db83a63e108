mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use common::*;
use mossl::cli::gradcheck_point;
use mossl::data::NormStats;
use mossl::model::{
    batch_objective, draw_masks, evaluate, forward_train, load_checkpoint, save_checkpoint, train,
    Ablation, MaskSource, Model, ModelConfig, ModelVars, TrainConfig,
};
use mossl::numerics::container::load_tensors;
use mossl::numerics::{grad_check, Tape, Tensor};
use mossl::seed::derive_seed;
use mossl::Error;

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        early_stopping_patience: None,
        ..Default::default()
    }
}

#[test]
fn first_step_losses_agree_across_ablations() {
    let (ds, model) = tiny_dataset();
    let mut first = Vec::new();
    for (label, flags) in Ablation::variants() {
        let cfg = TrainConfig {
            ablation: flags,
            ..quick(1)
        };
        let out = train(&model, &ds, &cfg, 5, &mut |_| {}).unwrap();
        first.push((label, out.history.first_step));
    }
    let get = |l: &str| first.iter().find(|(x, _)| *x == l).unwrap().1;
    let full = get("full");
    for (label, parts) in &first {
        assert_eq!(parts.forecast.to_bits(), full.forecast.to_bits(), "{label}");
    }
    assert_eq!(get("w/o MSSL").global, full.global);
    assert_eq!(get("w/o GSSL").modality, full.modality);
    assert_eq!(get("w/o GSSL").global, None);
    assert_eq!(get("w/o MSSL").modality, None);
}

#[test]
fn training_is_deterministic_per_seed() {
    let (ds, model) = tiny_dataset();
    let a = train(&model, &ds, &quick(2), 9, &mut |_| {}).unwrap();
    let b = train(&model, &ds, &quick(2), 9, &mut |_| {}).unwrap();
    let c = train(&model, &ds, &quick(2), 10, &mut |_| {}).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
    assert_ne!(a.params, c.params);
}

#[test]
fn every_parameter_on_the_loss_path_receives_gradient() {
    let (ds, model) = tiny_dataset();
    let params = gradcheck_point(&model.init_params(4), 4);
    for straight_through in [false, true] {
        let cfg = TrainConfig {
            straight_through,
            ..TrainConfig::default()
        };
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let vars = ModelVars::bind(&bound, &model).unwrap();
        let f = forward_train(
            &mut tape,
            &vars,
            &model,
            &cfg,
            &ds.train[0],
            MaskSource::Sampled(1),
        )
        .unwrap();
        let g = bound.gradients(&tape.backward(f.loss).unwrap(), &tape);
        let nonzero = |name: &str| g.get(name).unwrap().data().iter().any(|v| *v != 0.0);
        // Attention biases can sit behind a dead ReLU at this size, so only
        // one tensor per module is required to move.
        for name in [
            "enc.in_orig.w",
            "enc.in_aug.w",
            "enc.l0.ma.f3.w",
            "enc.l1.tc.filter.w",
            "enc.l1.tc.mix.w",
            "aug.e_t",
            "aug.e_n",
            "aug.e_m",
            "gssl.w_gamma",
            "gssl.w_mu",
            "gssl.b_sigma",
            "mssl.w1",
            "mssl.w2",
            "mssl.w3",
            "pred.w_o1",
            "pred.b_o2",
        ] {
            assert!(nonzero(name), "{name} has no gradient");
        }
        assert_eq!(nonzero("aug.w0"), straight_through);
    }
}

#[test]
fn disabled_terms_leave_their_parameters_untouched() {
    let (ds, model) = tiny_dataset();
    let params = model.init_params(4);
    let cfg = TrainConfig {
        ablation: Ablation {
            no_gssl: true,
            no_mssl: true,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let vars = ModelVars::bind(&bound, &model).unwrap();
    let f = forward_train(
        &mut tape,
        &vars,
        &model,
        &cfg,
        &ds.train[0],
        MaskSource::Sampled(1),
    )
    .unwrap();
    assert!(f.h_aug.is_none() && f.mixture.is_none());
    let g = bound.gradients(&tape.backward(f.loss).unwrap(), &tape);
    for (name, grad) in g.iter() {
        if name.starts_with("gssl.")
            || name.starts_with("mssl.")
            || name.starts_with("aug.")
            || name.contains("in_aug")
        {
            assert!(grad.data().iter().all(|v| *v == 0.0), "{name}");
        }
    }
}

#[test]
fn ablated_objectives_pass_the_finite_difference_error_model() {
    let (ds, model) = tiny_dataset();
    let params = gradcheck_point(&model.init_params(6), 6);
    let windows = ds.train[..1].to_vec();
    let eps = 1e-6;
    for (label, flags) in Ablation::variants() {
        let cfg = TrainConfig {
            ablation: flags,
            ..TrainConfig::default()
        };
        let masks =
            draw_masks(&params, &model, &cfg, &windows, &[derive_seed(6, "m", &[])]).unwrap();
        let f = |tape: &mut Tape, b: &mossl::numerics::Bindings| {
            let vars = ModelVars::bind(b, &model)?;
            batch_objective(tape, &vars, &model, &cfg, &windows, &masks)
        };
        let loss = {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let l = f(&mut tape, &b).unwrap();
            tape.value(l).data()[0]
        };
        let floor = 8.0 * f64::EPSILON * loss.abs() / eps;
        let report = grad_check(&params, eps, f).unwrap();
        for m in &report.entries {
            let bound = 1e-4 * m.analytic.abs().max(m.numeric.abs()) + floor;
            assert!(
                (m.analytic - m.numeric).abs() <= bound,
                "{label} {}[{}]",
                m.param,
                m.index
            );
        }
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let (_, model) = tiny_dataset();
    let params = model.init_params(12);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model, &params).unwrap();
    let (loaded_model, loaded) = load_checkpoint(dir.path(), Some(&model)).unwrap();
    assert_eq!(loaded_model.model, model);
    assert_eq!(loaded, params);
    let other = Model::new(
        ModelConfig {
            hidden: 5,
            ..tiny_model_config()
        },
        3,
        2,
    )
    .unwrap();
    assert!(matches!(
        load_checkpoint(dir.path(), Some(&other)),
        Err(Error::Config(_))
    ));
}

#[test]
fn constant_predictor_scores_its_bias() {
    let (ds, model) = tiny_dataset();
    let mut params = model.init_params(2);
    let w = params.get_mut("pred.w_o2").unwrap();
    *w = Tensor::zeros(w.shape());
    let b = params.get_mut("pred.b_o2").unwrap();
    *b = Tensor::full(b.shape(), 0.25);
    let stats = NormStats {
        mean: vec![0.0; 2],
        std: vec![2.0, 0.5],
    };
    let m = evaluate(&params, &model, &ds.val, ds.series.modality_names(), &stats).unwrap();
    for (j, summary) in m.per_modality.iter().enumerate() {
        let s = stats.std[j];
        let errs: Vec<f64> = ds
            .val
            .iter()
            .flat_map(|w| (0..3).map(move |n| (w.y.get(&[0, n, j]) - 0.25).abs() * s))
            .collect();
        let mae = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!((summary.mae - mae).abs() < 1e-12);
    }
}

fn mossl_bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mossl"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: serde_json::Value) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(&path, body.to_string()).unwrap();
    path
}

fn tiny_json(data: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "seed": 3,
        "data": data,
        "model": {"input_steps": 4, "output_steps": 1, "hidden": 4, "components": 2, "layers": 2},
        "train": {"epochs": 1, "batch_size": 8}
    })
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_key = write_config(
        tmp.path(),
        serde_json::json!({"data": {"kind": "prepared", "path": "x"}, "seeds": 1}),
    );
    assert_eq!(
        mossl_bin(&["train", "--config", bad_key.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(mossl_bin(&["train"]).status.code(), Some(1));
    let missing = write_config(
        tmp.path(),
        tiny_json(serde_json::json!({"kind": "csv", "path": "nope.csv"})),
    );
    let out = tmp.path().join("runs");
    let code = mossl_bin(&[
        "train",
        "--config",
        missing.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .status
    .code();
    assert_eq!(code, Some(2));
    assert_eq!(mossl_bin(&["--version"]).status.code(), Some(0));
}

#[test]
fn cli_synth_prepare_train_export() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = mossl::data::SynthSpec::planted(3, 2, 80, 0.1);
    let cfg = write_config(
        tmp.path(),
        tiny_json(serde_json::json!({"kind": "synthetic", "spec": spec})),
    );
    let data = tmp.path().join("data");
    let run = |args: &[&str]| {
        let out = mossl_bin(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    };
    run(&[
        "synth",
        "--quiet",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(data.join("series.csv").exists() && data.join("descriptor.json").exists());

    let csv_cfg = tmp.path().join("csv.json");
    let body = tiny_json(
        serde_json::json!({"kind": "csv", "path": "data/series.csv", "descriptor": "data/descriptor.json"}),
    );
    std::fs::write(&csv_cfg, body.to_string()).unwrap();
    let prepared = tmp.path().join("prepared");
    run(&[
        "prepare",
        "--quiet",
        "--config",
        csv_cfg.to_str().unwrap(),
        "--out",
        prepared.to_str().unwrap(),
    ]);

    let prep_cfg = tmp.path().join("prep.json");
    std::fs::write(
        &prep_cfg,
        tiny_json(serde_json::json!({"kind": "prepared", "path": "prepared"})).to_string(),
    )
    .unwrap();
    let runs = tmp.path().join("runs");
    run(&[
        "train",
        "--quiet",
        "--config",
        prep_cfg.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
        "--seed",
        "8",
    ]);
    let dir = std::fs::read_dir(&runs)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    for f in [
        "config.json",
        "run.json",
        "history.json",
        "history.csv",
        "metrics.csv",
        "metrics.json",
        "checkpoint/params.most",
    ] {
        assert!(dir.join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read_to_string(dir.join("config.json")).unwrap(),
        std::fs::read_to_string(&prep_cfg).unwrap()
    );
    let info: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(info["seed"], 8);

    run(&[
        "export-repr",
        "--quiet",
        "--run",
        dir.to_str().unwrap(),
        "--split",
        "test",
    ]);
    let repr = dir.join("repr-test");
    let h = load_tensors(&repr.join("h.most")).unwrap();
    let gamma = load_tensors(&repr.join("gamma.most")).unwrap();
    assert!(!h.is_empty() && h.len() == gamma.len());
    assert_eq!(h[0].shape(), [1, 3, 2, 4]);
    assert_eq!(gamma[0].shape(), [2]);
    assert_eq!(
        load_tensors(&repr.join("sigma2.most")).unwrap()[0].shape(),
        [2, 4]
    );
}

#[test]
fn cli_gradcheck_reports_and_sets_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = mossl::data::SynthSpec::planted(3, 2, 60, 0.1);
    let cfg = write_config(
        tmp.path(),
        tiny_json(serde_json::json!({"kind": "synthetic", "spec": spec})),
    );
    let loose = mossl_bin(&[
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--tolerance",
        "1",
    ]);
    assert_eq!(loose.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&loose.stdout).contains("max relative error"));
    let strict = mossl_bin(&[
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--tolerance",
        "1e-12",
    ]);
    assert_eq!(strict.status.code(), Some(3));
}
