//! Modality self-supervision: fused representations are scored against
//! per-modality contexts, own modality as the positive and every other
//! modality as a negative.

use crate::encoder::init_uniform;
use crate::error::{Error, Result};
use crate::numerics::{Bindings, ParamStore, Tape, Tensor, Var};

pub fn init_params(hidden: usize, seed: u64, store: &mut ParamStore) {
    let d = hidden;
    init_uniform(store, seed, "mssl.w1", &[d], d);
    init_uniform(store, seed, "mssl.w2", &[d], d);
    init_uniform(store, seed, "mssl.w3", &[d, d], d);
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
}

impl FusionVars {
    pub fn bind(vars: &Bindings) -> Result<Self> {
        Ok(Self {
            w1: vars.var("mssl.w1")?,
            w2: vars.var("mssl.w2")?,
            w3: vars.var("mssl.w3")?,
        })
    }
}

/// `R = H ⊙ w1 + H̃ ⊙ w2`.
pub fn fuse(tape: &mut Tape, h: Var, h_aug: Var, w1: Var, w2: Var) -> Result<Var> {
    if tape.shape(h) != tape.shape(h_aug) {
        return Err(Error::dim("fuse", tape.shape(h), tape.shape(h_aug)));
    }
    let a = tape.mul(h, w1)?;
    let b = tape.mul(h_aug, w2)?;
    tape.add(a, b)
}

/// `c_m = σ(mean_{t,n} r_{t,n,m})`, shape `[M, d]`.
pub fn modality_context(tape: &mut Tape, r: Var) -> Result<Var> {
    if tape.shape(r).len() != 4 {
        return Err(Error::Shape(format!(
            "modality_context expects [T, N, M, d], got {:?}",
            tape.shape(r)
        )));
    }
    let mean = tape.mean_axes(r, &[0, 1])?;
    Ok(tape.sigmoid(mean))
}

/// Contrastive loss over every anchor `(t, n, m)`:
/// `−[log σ(r_m·w3·c_m) + Σ_{m'≠m} log(1 − σ(r_{m'}·w3·c_m))]`, summed.
/// With `average_negatives` the negative terms of each anchor are divided by `M − 1`.
pub fn mssl_loss(tape: &mut Tape, r: Var, c: Var, w3: Var, average_negatives: bool) -> Result<Var> {
    let rs = tape.shape(r).to_vec();
    if rs.len() != 4 || tape.shape(c) != [rs[2], rs[3]] || tape.shape(w3) != [rs[3], rs[3]] {
        return Err(Error::dim("mssl_loss", &rs, tape.shape(c)));
    }
    let m = rs[2];
    if m == 1 {
        log::warn!("single modality: the contrastive loss has no negative pairs");
    }
    let w3t = tape.permute(w3, &[1, 0])?;
    let projected = tape.matmul(c, w3t)?;
    let projected_t = tape.permute(projected, &[1, 0])?;
    // scores[t, n, m', m] = r_{t,n,m'} · w3 · c_m
    let scores = tape.matmul(r, projected_t)?;
    let neg_weight = if average_negatives && m > 1 {
        1.0 / (m - 1) as f64
    } else {
        1.0
    };
    let sign = Tensor::from_fn(&[m, m], |i| if i[0] == i[1] { 1.0 } else { -1.0 });
    let weight = Tensor::from_fn(&[m, m], |i| if i[0] == i[1] { 1.0 } else { neg_weight });
    let sign = tape.constant(sign);
    let weight = tape.constant(weight);
    let signed = tape.mul(scores, sign)?;
    let logs = tape.log_sigmoid(signed);
    let weighted = tape.mul(logs, weight)?;
    let total = tape.sum_all(weighted);
    Ok(tape.scale(total, -1.0))
}
