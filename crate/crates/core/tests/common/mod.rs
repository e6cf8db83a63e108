//! Brute-force reference implementations and shared fixtures.
#![allow(dead_code)]

use std::io::Write;

use mossl::data::{synth_generate, Dataset, SplitSpec, SynthSpec};
use mossl::model::{Model, ModelConfig};
use mossl::numerics::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    mossl::seed::stream(seed, "tests", &[])
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Write straight to stderr so the line survives test output capture.
pub fn report(id: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id}: {verdict} {detail}");
}

/// `relu(x · w + b)` for a single vector.
pub fn dense_relu(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols)
        .map(|j| {
            let z: f64 = (0..rows).map(|i| x[i] * w.get(&[i, j])).sum::<f64>() + b.data()[j];
            z.max(0.0)
        })
        .collect()
}

pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// Attention over `axis` (1 = nodes, 2 = modalities) of `h: [T, N, M, d]`,
/// written as explicit loops. Returns the output `[T, N, M, d]`.
pub fn attention(h: &Tensor, axis: usize, q: &Dense, k: &Dense, v: &Dense) -> Tensor {
    let s = h.shape().to_vec();
    let d = s[3];
    let len = s[axis];
    let mut out = Tensor::zeros(&s);
    let vec_at = |t: usize, n: usize, m: usize| -> Vec<f64> {
        (0..d).map(|c| h.get(&[t, n, m, c])).collect()
    };
    for t in 0..s[0] {
        let outer = if axis == 1 { s[2] } else { s[1] };
        for o in 0..outer {
            let site = |i: usize| if axis == 1 { (i, o) } else { (o, i) };
            let qs: Vec<Vec<f64>> = (0..len)
                .map(|i| {
                    let (n, m) = site(i);
                    dense_relu(&vec_at(t, n, m), &q.w, &q.b)
                })
                .collect();
            let ks: Vec<Vec<f64>> = (0..len)
                .map(|i| {
                    let (n, m) = site(i);
                    dense_relu(&vec_at(t, n, m), &k.w, &k.b)
                })
                .collect();
            let vs: Vec<Vec<f64>> = (0..len)
                .map(|i| {
                    let (n, m) = site(i);
                    dense_relu(&vec_at(t, n, m), &v.w, &v.b)
                })
                .collect();
            for i in 0..len {
                let scores: Vec<f64> = (0..len)
                    .map(|j| {
                        qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = e.iter().sum();
                let (n, m) = site(i);
                for c in 0..d {
                    let val: f64 = (0..len).map(|j| e[j] / z * vs[j][c]).sum();
                    out.set(&[t, n, m, c], val);
                }
            }
        }
    }
    out
}

/// `out[t, n, m, o] = Σ_j Σ_c x[t + j·dil, n, m, c] · kernel[j, c, o]`.
pub fn causal_conv(x: &Tensor, kernel: &Tensor, dilation: usize) -> Tensor {
    let s = x.shape();
    let (taps, c_in, c_out) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let steps = s[0] - (taps - 1) * dilation;
    Tensor::from_fn(&[steps, s[1], s[2], c_out], |i| {
        let mut acc = 0.0;
        for j in 0..taps {
            for c in 0..c_in {
                acc += x.get(&[i[0] + j * dilation, i[1], i[2], c]) * kernel.get(&[j, c, i[3]]);
            }
        }
        acc
    })
}

/// `−Σ_g ln Σ_k γ_k Π_d N(h_gd | μ_kd, σ²_kd)` evaluated with plain densities.
pub fn mixture_nll_prob(h: &Tensor, gamma: &[f64], mu: &Tensor, sigma2: &Tensor) -> f64 {
    let (g, d) = (h.shape()[0], h.shape()[1]);
    let mut total = 0.0;
    for row in 0..g {
        let mut p = 0.0;
        for (k, gk) in gamma.iter().enumerate() {
            let mut dens = 1.0;
            for c in 0..d {
                let s2 = sigma2.get(&[k, c]);
                let diff = h.get(&[row, c]) - mu.get(&[k, c]);
                dens *=
                    (-diff * diff / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt();
            }
            p += gk * dens;
        }
        total -= p.ln();
    }
    total
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Contrastive loss by enumerating every (anchor, candidate modality) pair.
/// The context is recomputed from `r` here as the sigmoid of its mean over
/// time and nodes.
pub fn mssl_pairs(r: &Tensor, w3: &Tensor, average_negatives: bool) -> f64 {
    let s = r.shape();
    let (t_len, n_len, m_len, d) = (s[0], s[1], s[2], s[3]);
    let cells = (t_len * n_len) as f64;
    let ctx: Vec<Vec<f64>> = (0..m_len)
        .map(|m| {
            (0..d)
                .map(|c| {
                    let mut acc = 0.0;
                    for t in 0..t_len {
                        for n in 0..n_len {
                            acc += r.get(&[t, n, m, c]);
                        }
                    }
                    sigmoid(acc / cells)
                })
                .collect()
        })
        .collect();
    let score = |t: usize, n: usize, m_rep: usize, m_ctx: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                acc += r.get(&[t, n, m_rep, i]) * w3.get(&[i, j]) * ctx[m_ctx][j];
            }
        }
        acc
    };
    let neg_weight = if average_negatives && m_len > 1 {
        1.0 / (m_len - 1) as f64
    } else {
        1.0
    };
    let mut loss = 0.0;
    for t in 0..t_len {
        for n in 0..n_len {
            for m in 0..m_len {
                loss -= sigmoid(score(t, n, m, m)).ln();
                for other in (0..m_len).filter(|&o| o != m) {
                    loss -= neg_weight * (1.0 - sigmoid(score(t, n, other, m))).ln();
                }
            }
        }
    }
    loss
}

/// The smallest complete model: T = 4, two layers with dilations 1 and 2,
/// N = 3, M = 2, d = 4, K = 2, O = 1.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_steps: 4,
        output_steps: 1,
        hidden: 4,
        components: 2,
        layers: 2,
        ..Default::default()
    }
}

pub fn tiny_dataset() -> (Dataset, Model) {
    let series = synth_generate(&SynthSpec::planted(3, 2, 60, 0.1), 1).unwrap();
    let cfg = tiny_model_config();
    let ds = Dataset::build(
        series,
        SplitSpec::default(),
        cfg.input_steps,
        cfg.output_steps,
        1,
    )
    .unwrap();
    let model = Model::new(cfg, 3, 2).unwrap();
    (ds, model)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}
