mod common;

use common::*;
use mossl::augmentation::{
    align_to_input, apply_mask, build_augmented_input, embedding, modality_relevance, sample_mask,
    EmbeddingVars,
};
use mossl::encoder::{
    encode, modality_attention, spatial_attention, temporal_conv_layer, AttentionVars, ConvVars,
    EncoderConfig, EncoderVars, Projection,
};
use mossl::gssl::{self, MixtureHeads};
use mossl::mssl;
use mossl::numerics::{ParamStore, Tape, Tensor};

fn attention_vars(tape: &mut Tape, d: usize, seed: u64) -> (AttentionVars, [Dense; 3]) {
    let mut r = rng(seed);
    let dense: [Dense; 3] = std::array::from_fn(|_| Dense {
        w: random(&mut r, &[d, d], 1.0),
        b: random(&mut r, &[d], 0.2),
    });
    let mut p = |x: &Dense| Projection {
        w: tape.param(x.w.clone()),
        b: tape.param(x.b.clone()),
    };
    let vars = AttentionVars {
        query: p(&dense[0]),
        key: p(&dense[1]),
        value: p(&dense[2]),
    };
    (vars, dense)
}

#[test]
fn spatial_attention_is_node_permutation_equivariant() {
    let (t, n, m, d) = (2, 5, 3, 4);
    let h = random(&mut rng(1), &[t, n, m, d], 1.0);
    let perm = [3, 0, 4, 1, 2];
    let permuted = Tensor::from_fn(h.shape(), |i| h.get(&[i[0], perm[i[1]], i[2], i[3]]));
    let mut tape = Tape::new();
    let (att, _) = attention_vars(&mut tape, d, 2);
    let a = tape.constant(h);
    let b = tape.constant(permuted);
    let out_a = spatial_attention(&mut tape, a, &att).unwrap().output;
    let out_b = spatial_attention(&mut tape, b, &att).unwrap().output;
    let (va, vb) = (tape.value(out_a), tape.value(out_b));
    let expected = Tensor::from_fn(va.shape(), |i| va.get(&[i[0], perm[i[1]], i[2], i[3]]));
    assert!(max_abs_diff(vb, &expected) < 1e-12);
}

#[test]
fn modality_attention_matches_oracle_and_weights_are_stochastic() {
    let (t, n, m, d) = (3, 2, 4, 3);
    let h = random(&mut rng(3), &[t, n, m, d], 1.0);
    let mut tape = Tape::new();
    let (att, dense) = attention_vars(&mut tape, d, 4);
    let hv = tape.constant(h.clone());
    let out = modality_attention(&mut tape, hv, &att).unwrap();
    assert!(
        max_abs_diff(
            tape.value(out.output),
            &attention(&h, 2, &dense[0], &dense[1], &dense[2])
        ) < 1e-12
    );
    let w = tape.value(out.weights);
    assert_eq!(w.shape(), [t, n, m, m]);
    for row in w.data().chunks(m) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gated_layer_matches_explicit_formula() {
    let (t, n, m, d) = (5, 2, 2, 3);
    let c_in = 3 * d;
    let mut r = rng(5);
    let x = random(&mut r, &[t, n, m, c_in], 1.0);
    let (fw, gw) = (
        random(&mut r, &[2, c_in, d], 0.5),
        random(&mut r, &[2, c_in, d], 0.5),
    );
    let (fb, gb) = (random(&mut r, &[d], 0.2), random(&mut r, &[d], 0.2));
    let mix = random(&mut r, &[d, d], 1.0);
    let dilation = 2;
    let filter = causal_conv(&x, &fw, dilation);
    let gate = causal_conv(&x, &gw, dilation);
    let gated = Tensor::from_fn(filter.shape(), |i| {
        (filter.get(i) + fb.data()[i[3]]).tanh() / (1.0 + (-(gate.get(i) + gb.data()[i[3]])).exp())
    });
    let expected = Tensor::from_fn(gated.shape(), |i| {
        (0..d)
            .map(|c| gated.get(&[i[0], i[1], i[2], c]) * mix.get(&[c, i[3]]))
            .sum()
    });
    let mut tape = Tape::new();
    let conv = ConvVars {
        filter_w: tape.param(fw),
        filter_b: tape.param(fb),
        gate_w: tape.param(gw),
        gate_b: tape.param(gb),
        mix_w: tape.param(mix),
    };
    let xv = tape.constant(x);
    let out = temporal_conv_layer(&mut tape, xv, &conv, dilation).unwrap();
    assert_eq!(tape.shape(out), [t - dilation, n, m, d]);
    assert!(max_abs_diff(tape.value(out), &expected) < 1e-12);
}

fn encoder_setup(d: usize, dilations: &[usize], seed: u64) -> (EncoderConfig, ParamStore) {
    let cfg = EncoderConfig {
        hidden: d,
        kernel_size: 2,
        dilations: dilations.to_vec(),
        residual: false,
    };
    let mut store = ParamStore::new();
    mossl::encoder::init_params(&cfg, seed, &mut store);
    for (name, t) in store.clone().iter() {
        if name.ends_with(".b") {
            let jitter = random(&mut rng(seed + name.len() as u64), t.shape(), 0.1);
            store.insert(name.clone(), jitter);
        }
    }
    (cfg, store)
}

fn run_encoder(cfg: &EncoderConfig, store: &ParamStore, h_in: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let vars = EncoderVars::bind(&b, cfg).unwrap();
    let x = tape.constant(h_in.clone());
    let h = encode(&mut tape, x, &vars, cfg).unwrap();
    tape.value(h).clone()
}

#[test]
fn sixteen_steps_collapse_to_one_and_every_step_matters() {
    let d = 4;
    let (cfg, store) = encoder_setup(d, &[1, 2, 4, 8], 6);
    assert_eq!(cfg.output_steps(16).unwrap(), 1);
    assert!(cfg.output_steps(15).is_err());
    let h_in = random(&mut rng(7), &[16, 3, 2, d], 1.0).map(f64::abs);
    let base = run_encoder(&cfg, &store, &h_in);
    assert_eq!(base.shape(), [1, 3, 2, d]);
    for step in [0, 7, 15] {
        let mut moved = h_in.clone();
        for v in &mut moved.data_mut()[step * 3 * 2 * d..(step + 1) * 3 * 2 * d] {
            *v += 0.5;
        }
        let out = run_encoder(&cfg, &store, &moved);
        assert!(
            max_abs_diff(&out, &base) > 1e-9,
            "input step {step} had no effect"
        );
    }
}

#[test]
fn embedding_is_the_sum_of_its_three_tables() {
    let (t, n, m, d) = (3, 4, 2, 5);
    let mut r = rng(8);
    let (et, en, em) = (
        random(&mut r, &[t, d], 1.0),
        random(&mut r, &[n, d], 1.0),
        random(&mut r, &[m, d], 1.0),
    );
    let mut tape = Tape::new();
    let vars = EmbeddingVars {
        e_t: tape.param(et.clone()),
        e_n: tape.param(en.clone()),
        e_m: tape.param(em.clone()),
    };
    let e = embedding(&mut tape, &vars).unwrap();
    let expected = Tensor::from_fn(&[t, n, m, d], |i| {
        et.get(&[i[0], i[3]]) + en.get(&[i[1], i[3]]) + em.get(&[i[2], i[3]])
    });
    assert!(max_abs_diff(tape.value(e), &expected) < 1e-14);

    let x = random(&mut r, &[t, n, m], 1.0);
    let xv = tape.constant(x.clone());
    let aug = build_augmented_input(&mut tape, xv, e).unwrap();
    let a = tape.value(aug);
    assert_eq!(a.shape(), [t, n, m, d + 1]);
    let first = Tensor::from_fn(&[t, n, m], |i| a.get(&[i[0], i[1], i[2], 0]));
    assert_eq!(first, x);
}

#[test]
fn masking_zeroes_exactly_the_drawn_cells() {
    let mut r = rng(9);
    let h = random(&mut r, &[1, 3, 3, 4], 1.0);
    let w0 = random(&mut r, &[4], 2.0);
    let phi = modality_relevance(&h, &w0).unwrap();
    for row in phi.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let phi = align_to_input(&phi, 5).unwrap();
    let draw = sample_mask(&phi, 1.0, 31);
    assert!(draw.masked_fraction() > 0.0);
    let x = random(&mut r, &[5, 3, 3], 1.0).map(|v| v + 3.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let masked = apply_mask(&mut tape, xv, &draw).unwrap();
    for ((out, orig), m) in tape
        .value(masked)
        .data()
        .iter()
        .zip(x.data())
        .zip(draw.mask.data())
    {
        assert_eq!(*out, if *m == 1.0 { 0.0 } else { *orig });
    }
    assert_eq!(sample_mask(&phi, 0.0, 31).masked_fraction(), 0.0);
    assert_eq!(
        sample_mask(&Tensor::full(&[5, 3, 3], 1.0), 1.0, 31).masked_fraction(),
        0.0
    );
}

#[test]
fn relevance_of_later_input_steps_follows_the_encoder_output() {
    let phi = Tensor::from_fn(&[2, 1, 2], |i| (i[0] * 10 + i[2]) as f64);
    let aligned = align_to_input(&phi, 5).unwrap();
    let steps: Vec<f64> = (0..5).map(|t| aligned.get(&[t, 0, 0])).collect();
    assert_eq!(steps, [0.0, 0.0, 0.0, 0.0, 10.0]);
}

#[test]
fn global_loss_matches_probability_domain_oracle() {
    let (t, n, m, d, k) = (1, 2, 3, 2, 3);
    let grid = t * n * m;
    let mut r = rng(10);
    let h = random(&mut r, &[t, n, m, d], 1.0);
    let h_aug = random(&mut r, &[t, n, m, d], 1.0);
    let mut tape = Tape::new();
    let heads = MixtureHeads {
        w_gamma: tape.param(random(&mut r, &[k, grid * d], 0.5)),
        w_mu: tape.param(random(&mut r, &[k, d, grid], 0.5)),
        b_mu: tape.param(random(&mut r, &[k, d], 0.5)),
        w_sigma: tape.param(random(&mut r, &[k, d, grid], 0.3)),
        b_sigma: tape.param(random(&mut r, &[k, d], 0.3)),
    };
    let hv = tape.constant(h.clone());
    let hav = tape.constant(h_aug);
    let mix = gssl::mixture(&mut tape, hav, &heads).unwrap();
    let loss = gssl::gssl_loss(&mut tape, hv, &mix).unwrap();
    let state = mix.state(&tape);
    assert!((state.gamma.sum() - 1.0).abs() < 1e-12);
    assert!(state.sigma2.data().iter().all(|&v| v >= gssl::SIGMA2_MIN));
    let rows = h.reshape(&[grid, d]).unwrap();
    let oracle = mixture_nll_prob(&rows, state.gamma.data(), &state.mu, &state.sigma2);
    assert!((tape.value(loss).data()[0] - oracle).abs() < 1e-10);
}

#[test]
fn contrastive_loss_matches_pair_enumeration_for_several_modalities() {
    for m in [1, 2, 3, 5] {
        let mut r = rng(20 + m as u64);
        let rr = random(&mut r, &[2, 2, m, 3], 1.0);
        let w3 = random(&mut r, &[3, 3], 1.0);
        for average in [false, true] {
            let mut tape = Tape::new();
            let rv = tape.constant(rr.clone());
            let c = mssl::modality_context(&mut tape, rv).unwrap();
            let w = tape.constant(w3.clone());
            let l = mssl::mssl_loss(&mut tape, rv, c, w, average).unwrap();
            assert!(
                (tape.value(l).data()[0] - mssl_pairs(&rr, &w3, average)).abs() < 1e-10,
                "M={m}"
            );
        }
    }
}
