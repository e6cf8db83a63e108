//! Global self-supervision: a diagonal Gaussian mixture produced from the
//! augmented representation scores the original one.

use crate::encoder::{init_uniform, init_zeros};
use crate::error::{Error, Result};
use crate::numerics::{Bindings, ParamStore, Tape, Tensor, Var};

pub const SIGMA2_MIN: f64 = 1e-6;
pub const SIGMA2_MAX: f64 = 1e6;

/// `grid` is the number of encoder output cells `T' · N · M`.
pub fn init_params(
    hidden: usize,
    components: usize,
    grid: usize,
    seed: u64,
    store: &mut ParamStore,
) {
    let d = hidden;
    init_uniform(
        store,
        seed,
        "gssl.w_gamma",
        &[components, grid * d],
        grid * d,
    );
    init_uniform(store, seed, "gssl.w_mu", &[components, d, grid], grid);
    init_zeros(store, "gssl.b_mu", &[components, d]);
    init_uniform(store, seed, "gssl.w_sigma", &[components, d, grid], grid);
    init_zeros(store, "gssl.b_sigma", &[components, d]);
}

#[derive(Clone, Copy, Debug)]
pub struct MixtureHeads {
    pub w_gamma: Var,
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_sigma: Var,
    pub b_sigma: Var,
}

impl MixtureHeads {
    pub fn bind(vars: &Bindings) -> Result<Self> {
        Ok(Self {
            w_gamma: vars.var("gssl.w_gamma")?,
            w_mu: vars.var("gssl.w_mu")?,
            b_mu: vars.var("gssl.b_mu")?,
            w_sigma: vars.var("gssl.w_sigma")?,
            b_sigma: vars.var("gssl.b_sigma")?,
        })
    }
}

/// Mixture quantities for one window, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub gamma: Var,
    pub log_gamma: Var,
    pub mu: Var,
    pub sigma2: Var,
}

/// Plain values of a window's mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureState {
    pub gamma: Tensor,
    pub mu: Tensor,
    pub sigma2: Tensor,
}

impl MixtureVars {
    pub fn state(&self, tape: &Tape) -> MixtureState {
        MixtureState {
            gamma: tape.value(self.gamma).clone(),
            mu: tape.value(self.mu).clone(),
            sigma2: tape.value(self.sigma2).clone(),
        }
    }
}

fn flatten_check(tape: &Tape, h_aug: Var, w: Var, op: &'static str) -> Result<(usize, usize)> {
    let hs = tape.shape(h_aug);
    if hs.len() != 4 {
        return Err(Error::Shape(format!(
            "{op} expects [T, N, M, d], got {hs:?}"
        )));
    }
    let d = hs[3];
    let grid = hs[0] * hs[1] * hs[2];
    let ws = tape.shape(w);
    let ok = match op {
        "memberships" => ws.len() == 2 && ws[1] == grid * d,
        _ => ws.len() == 3 && ws[1] == d && ws[2] == grid,
    };
    if !ok {
        return Err(Error::dim(op, hs, ws));
    }
    Ok((grid, d))
}

/// `γ = softmax_k(W_γ · vec(H̃))`; returns `(γ, log γ)`, both `[K]`.
pub fn memberships(tape: &mut Tape, h_aug: Var, w_gamma: Var) -> Result<(Var, Var)> {
    let (grid, d) = flatten_check(tape, h_aug, w_gamma, "memberships")?;
    let k = tape.shape(w_gamma)[0];
    let flat = tape.reshape(h_aug, &[grid * d, 1])?;
    let logits = tape.matmul(w_gamma, flat)?;
    let logits = tape.reshape(logits, &[k])?;
    Ok((tape.softmax(logits, 0)?, tape.log_softmax(logits, 0)?))
}

/// `Σ_g W[k, d, g] · H̃[g, d] + b[k, d]`.
fn channel_map(tape: &mut Tape, h_aug: Var, w: Var, b: Var) -> Result<Var> {
    let (grid, d) = flatten_check(tape, h_aug, w, "component_params")?;
    let rows = tape.reshape(h_aug, &[grid, d])?;
    let cols = tape.permute(rows, &[1, 0])?;
    let prod = tape.mul(w, cols)?;
    let summed = tape.sum_axes(prod, &[2])?;
    tape.add(summed, b)
}

/// Component means and clamped variances, both `[K, d]`.
pub fn component_params(tape: &mut Tape, h_aug: Var, heads: &MixtureHeads) -> Result<(Var, Var)> {
    let mu = channel_map(tape, h_aug, heads.w_mu, heads.b_mu)?;
    let log_var = channel_map(tape, h_aug, heads.w_sigma, heads.b_sigma)?;
    let var = tape.exp(log_var);
    Ok((mu, tape.clamp(var, SIGMA2_MIN, SIGMA2_MAX)))
}

pub fn mixture(tape: &mut Tape, h_aug: Var, heads: &MixtureHeads) -> Result<MixtureVars> {
    let (gamma, log_gamma) = memberships(tape, h_aug, heads.w_gamma)?;
    let (mu, sigma2) = component_params(tape, h_aug, heads)?;
    Ok(MixtureVars {
        gamma,
        log_gamma,
        mu,
        sigma2,
    })
}

/// `−Σ_{t,n,m} log Σ_k γ_k N(h_{t,n,m} | μ_k, diag σ²_k)` for `h: [T', N, M, d]`.
pub fn gssl_loss(tape: &mut Tape, h: Var, mixture: &MixtureVars) -> Result<Var> {
    let hs = tape.shape(h).to_vec();
    if hs.len() != 4 {
        return Err(Error::Shape(format!(
            "gssl_loss expects [T, N, M, d], got {hs:?}"
        )));
    }
    let rows = tape.reshape(h, &[hs[0] * hs[1] * hs[2], hs[3]])?;
    tape.mixture_nll(rows, mixture.log_gamma, mixture.mu, mixture.sigma2)
}
