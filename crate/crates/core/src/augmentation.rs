//! Modality-aware masking and the MoST embedding for the augmented view.

use rand::Rng;

use crate::encoder::{init_uniform, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Bindings, ParamStore, Tape, Tensor, Var};
use crate::seed::stream;

/// A sampled mask plus the relevance it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskDraw {
    /// `[T, N, M]`, 1.0 where the input cell is masked.
    pub mask: Tensor,
    pub phi: Tensor,
    pub seed: u64,
}

impl MaskDraw {
    /// A draw that masks nothing.
    pub fn none(shape: &[usize]) -> Self {
        Self {
            mask: Tensor::zeros(shape),
            phi: Tensor::full(shape, 1.0),
            seed: 0,
        }
    }

    pub fn masked_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }

    /// 1 − mask.
    pub fn keep(&self) -> Tensor {
        self.mask.map(|m| 1.0 - m)
    }
}

pub fn init_params(
    cfg: &EncoderConfig,
    steps: usize,
    nodes: usize,
    modalities: usize,
    seed: u64,
    store: &mut ParamStore,
) {
    let d = cfg.hidden;
    init_uniform(store, seed, "aug.w0", &[d], d);
    init_uniform(store, seed, "aug.e_t", &[steps, d], d);
    init_uniform(store, seed, "aug.e_n", &[nodes, d], d);
    init_uniform(store, seed, "aug.e_m", &[modalities, d], d);
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    pub e_t: Var,
    pub e_n: Var,
    pub e_m: Var,
}

impl EmbeddingVars {
    pub fn bind(vars: &Bindings) -> Result<Self> {
        Ok(Self {
            e_t: vars.var("aug.e_t")?,
            e_n: vars.var("aug.e_n")?,
            e_m: vars.var("aug.e_m")?,
        })
    }
}

/// `φ = softmax_m(h · w0)` for `h: [T', N, M, d]`; the result is `[T', N, M]`.
pub fn modality_relevance(h: &Tensor, w0: &Tensor) -> Result<Tensor> {
    let shape = h.shape();
    if shape.len() != 4 || w0.shape() != [shape[3]] {
        return Err(Error::dim("modality_relevance", shape, w0.shape()));
    }
    let (cells, m, d) = (shape[0] * shape[1], shape[2], shape[3]);
    let w = w0.data();
    let mut out = Vec::with_capacity(cells * m);
    for (c, block) in h.data().chunks(m * d).enumerate() {
        debug_assert!(c < cells);
        let v: Vec<f64> = block
            .chunks(d)
            .map(|r| r.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|x| x / z));
    }
    Tensor::new(vec![shape[0], shape[1], m], out)
}

/// Input step `t` of `steps` takes the relevance of the encoder output step
/// whose receptive window ends closest to it without lying in its future:
/// `max(0, t − (steps − T'))`. With a single output step every input step
/// shares it.
pub fn relevance_source_step(t: usize, steps: usize, out_steps: usize) -> usize {
    (t + out_steps).saturating_sub(steps)
}

/// Spread `[T', N, M]` relevance over `steps` input steps.
pub fn align_to_input(phi: &Tensor, steps: usize) -> Result<Tensor> {
    let shape = phi.shape();
    if shape.len() != 3 || shape[0] > steps {
        return Err(Error::Shape(format!(
            "cannot align relevance {shape:?} to {steps} steps"
        )));
    }
    let t_out = shape[0];
    Ok(Tensor::from_fn(&[steps, shape[1], shape[2]], |i| {
        phi.get(&[relevance_source_step(i[0], steps, t_out), i[1], i[2]])
    }))
}

/// Independent Bernoulli draws with `P(mask) = clamp(scale · (1 − φ), 0, 1)`.
pub fn sample_mask(phi: &Tensor, scale: f64, seed: u64) -> MaskDraw {
    let mut rng = stream(seed, "mask", &[]);
    let data = phi
        .data()
        .iter()
        .map(|p| {
            let prob = (scale * (1.0 - p)).clamp(0.0, 1.0);
            if rng.gen::<f64>() < prob {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    MaskDraw {
        mask: Tensor::new(phi.shape().to_vec(), data).expect("same shape as phi"),
        phi: phi.clone(),
        seed,
    }
}

/// `E[t, n, m] = e_t[t] + e_n[n] + e_m[m]`, shape `[T, N, M, d]`.
pub fn embedding(tape: &mut Tape, vars: &EmbeddingVars) -> Result<Var> {
    let (t, d) = (tape.shape(vars.e_t)[0], tape.shape(vars.e_t)[1]);
    let n = tape.shape(vars.e_n)[0];
    let m = tape.shape(vars.e_m)[0];
    let et = tape.reshape(vars.e_t, &[t, 1, 1, d])?;
    let et = tape.expand(et, &[t, n, m, d])?;
    let en = tape.reshape(vars.e_n, &[n, 1, d])?;
    let with_nodes = tape.add(et, en)?;
    tape.add(with_nodes, vars.e_m)
}

/// Concatenate masked `x: [T, N, M]` with `e: [T, N, M, d]` into `[T, N, M, 1 + d]`.
/// `masked_x` must already have zeros at masked cells.
pub fn build_augmented_input(tape: &mut Tape, masked_x: Var, e: Var) -> Result<Var> {
    let xs = tape.shape(masked_x).to_vec();
    let es = tape.shape(e).to_vec();
    if xs.len() != 3 || es.len() != 4 || es[..3] != xs[..] {
        return Err(Error::dim("build_augmented_input", &xs, &es));
    }
    let x4 = tape.reshape(masked_x, &[xs[0], xs[1], xs[2], 1])?;
    tape.concat(&[x4, e], 3)
}

/// Zero the masked cells of `x`.
pub fn apply_mask(tape: &mut Tape, x: Var, draw: &MaskDraw) -> Result<Var> {
    if tape.shape(x) != draw.mask.shape() {
        return Err(Error::dim("apply_mask", tape.shape(x), draw.mask.shape()));
    }
    let keep = tape.constant(draw.keep());
    tape.mul(x, keep)
}
