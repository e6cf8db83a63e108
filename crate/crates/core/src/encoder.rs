//! The shared spatio-temporal encoder.
//!
//! Each layer attends across modalities (per time step and node) and across
//! nodes (per time step and modality), concatenates both with its input on
//! the channel axis, and runs a gated dilated causal convolution over time.
//! Convolutions are unpadded, so every layer shortens the time axis by
//! `(k - 1) · dilation`; the default schedule collapses 16 steps to one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bindings, ParamStore, Tape, Tensor, Var};
use crate::seed::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub kernel_size: usize,
    /// One dilation per layer.
    pub dilations: Vec<usize>,
    #[serde(default)]
    pub residual: bool,
}

impl EncoderConfig {
    pub fn layers(&self) -> usize {
        self.dilations.len()
    }

    /// Time steps shaved off by all layers together.
    pub fn receptive_shrink(&self) -> usize {
        self.dilations
            .iter()
            .map(|d| (self.kernel_size - 1) * d)
            .sum()
    }

    /// Output length for `input_steps` input steps.
    pub fn output_steps(&self, input_steps: usize) -> Result<usize> {
        self.validate()?;
        let shrink = self.receptive_shrink();
        if input_steps <= shrink {
            return Err(Error::Config(format!(
                "dilation schedule {:?} with kernel {} consumes {shrink} steps; {input_steps} input steps leave nothing",
                self.dilations, self.kernel_size
            )));
        }
        Ok(input_steps - shrink)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0
            || self.kernel_size == 0
            || self.dilations.is_empty()
            || self.dilations.contains(&0)
        {
            return Err(Error::Config(format!(
                "encoder needs positive hidden width, kernel size and dilations, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Uniform in ±√(1/fan_in).
pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Add a uniformly initialized tensor under `name`, seeded from the name.
pub(crate) fn init_uniform(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    shape: &[usize],
    fan_in: usize,
) {
    let mut rng = stream(seed, &format!("init/{name}"), &[]);
    store.insert(name, uniform(&mut rng, shape, fan_in));
}

pub(crate) fn init_zeros(store: &mut ParamStore, name: &str, shape: &[usize]) {
    store.insert(name, Tensor::zeros(shape));
}

/// Input projection for view `view` ("orig" or "aug").
pub fn projection_name(view: &str) -> String {
    format!("enc.in_{view}")
}

fn init_projection(store: &mut ParamStore, seed: u64, prefix: &str, c_in: usize, c_out: usize) {
    init_uniform(store, seed, &format!("{prefix}.w"), &[c_in, c_out], c_in);
    init_zeros(store, &format!("{prefix}.b"), &[c_out]);
}

/// Register all encoder parameters, including both input projections.
pub fn init_params(cfg: &EncoderConfig, seed: u64, store: &mut ParamStore) {
    let d = cfg.hidden;
    init_projection(store, seed, &projection_name("orig"), 1, d);
    init_projection(store, seed, &projection_name("aug"), 1 + d, d);
    for l in 0..cfg.layers() {
        for block in ["ma", "sa"] {
            for f in ["f1", "f2", "f3"] {
                init_projection(store, seed, &format!("enc.l{l}.{block}.{f}"), d, d);
            }
        }
        let fan = cfg.kernel_size * 3 * d;
        for gate in ["filter", "gate"] {
            init_uniform(
                store,
                seed,
                &format!("enc.l{l}.tc.{gate}.w"),
                &[cfg.kernel_size, 3 * d, d],
                fan,
            );
            init_zeros(store, &format!("enc.l{l}.tc.{gate}.b"), &[d]);
        }
        init_uniform(store, seed, &format!("enc.l{l}.tc.mix.w"), &[d, d], d);
    }
}

/// `relu(x · w + b)` on the trailing axis.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub w: Var,
    pub b: Var,
}

impl Projection {
    pub fn bind(vars: &Bindings, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: vars.var(&format!("{prefix}.w"))?,
            b: vars.var(&format!("{prefix}.b"))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.w)?;
        let z = tape.add(xw, self.b)?;
        Ok(tape.relu(z))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: Projection,
    pub key: Projection,
    pub value: Projection,
}

impl AttentionVars {
    pub fn bind(vars: &Bindings, prefix: &str) -> Result<Self> {
        Ok(Self {
            query: Projection::bind(vars, &format!("{prefix}.f1"))?,
            key: Projection::bind(vars, &format!("{prefix}.f2"))?,
            value: Projection::bind(vars, &format!("{prefix}.f3"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub filter_w: Var,
    pub filter_b: Var,
    pub gate_w: Var,
    pub gate_b: Var,
    pub mix_w: Var,
}

impl ConvVars {
    pub fn bind(vars: &Bindings, prefix: &str) -> Result<Self> {
        let v = |s: &str| vars.var(&format!("{prefix}.{s}"));
        Ok(Self {
            filter_w: v("filter.w")?,
            filter_b: v("filter.b")?,
            gate_w: v("gate.w")?,
            gate_b: v("gate.b")?,
            mix_w: v("mix.w")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub modality: AttentionVars,
    pub spatial: AttentionVars,
    pub conv: ConvVars,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub input_orig: Projection,
    pub input_aug: Projection,
    pub layers: Vec<LayerVars>,
}

impl EncoderVars {
    pub fn bind(vars: &Bindings, cfg: &EncoderConfig) -> Result<Self> {
        let layers = (0..cfg.layers())
            .map(|l| {
                Ok(LayerVars {
                    modality: AttentionVars::bind(vars, &format!("enc.l{l}.ma"))?,
                    spatial: AttentionVars::bind(vars, &format!("enc.l{l}.sa"))?,
                    conv: ConvVars::bind(vars, &format!("enc.l{l}.tc"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input_orig: Projection::bind(vars, &projection_name("orig"))?,
            input_aug: Projection::bind(vars, &projection_name("aug"))?,
            layers,
        })
    }
}

/// `H_in = relu(x · w + b)` for `x: [T, N, M, c_in]`.
pub fn input_project(tape: &mut Tape, x: Var, proj: &Projection) -> Result<Var> {
    let c_in = *tape.shape(x).last().unwrap_or(&0);
    let expected = tape.shape(proj.w)[0];
    if c_in != expected {
        return Err(Error::Config(format!(
            "input has {c_in} channels, projection expects {expected}"
        )));
    }
    proj.apply(tape, x)
}

pub struct AttentionOutput {
    pub output: Var,
    /// Row-stochastic weights, `[.., attended, attended]`.
    pub weights: Var,
}

/// Scaled dot-product attention over axis 2 of `h: [A, B, S, d]`.
fn attend_axis2(tape: &mut Tape, h: Var, att: &AttentionVars) -> Result<AttentionOutput> {
    let d = *tape.shape(h).last().unwrap();
    let q = att.query.apply(tape, h)?;
    let k = att.key.apply(tape, h)?;
    let v = att.value.apply(tape, h)?;
    let raw = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax(scores, 3)?;
    let output = tape.batch_matmul(weights, v, false)?;
    Ok(AttentionOutput { output, weights })
}

/// Attention across modalities at each (t, n) of `h: [T, N, M, d]`.
pub fn modality_attention(tape: &mut Tape, h: Var, att: &AttentionVars) -> Result<AttentionOutput> {
    check_rank4(tape, h, "modality_attention")?;
    attend_axis2(tape, h, att)
}

/// Attention across nodes at each (t, m) of `h: [T, N, M, d]`.
/// The weights come back as `[T, M, N, N]`.
pub fn spatial_attention(tape: &mut Tape, h: Var, att: &AttentionVars) -> Result<AttentionOutput> {
    check_rank4(tape, h, "spatial_attention")?;
    let swapped = tape.permute(h, &[0, 2, 1, 3])?;
    let out = attend_axis2(tape, swapped, att)?;
    Ok(AttentionOutput {
        output: tape.permute(out.output, &[0, 2, 1, 3])?,
        weights: out.weights,
    })
}

fn check_rank4(tape: &Tape, h: Var, op: &str) -> Result<()> {
    if tape.shape(h).len() != 4 {
        return Err(Error::Shape(format!(
            "{op} expects [T, N, M, d], got {:?}",
            tape.shape(h)
        )));
    }
    Ok(())
}

/// `mix(tanh(ĥ * W_filter) ⊙ σ(ĥ * W_gate))` along time, independently per (n, m).
pub fn temporal_conv_layer(
    tape: &mut Tape,
    hhat: Var,
    conv: &ConvVars,
    dilation: usize,
) -> Result<Var> {
    let filter = tape.dilated_causal_conv(hhat, conv.filter_w, dilation)?;
    let filter = tape.add(filter, conv.filter_b)?;
    let gate = tape.dilated_causal_conv(hhat, conv.gate_w, dilation)?;
    let gate = tape.add(gate, conv.gate_b)?;
    let filter = tape.tanh(filter);
    let gate = tape.sigmoid(gate);
    let gated = tape.mul(filter, gate)?;
    tape.matmul(gated, conv.mix_w)
}

/// Run every layer on an already projected input `[T, N, M, d]`.
pub fn encode(tape: &mut Tape, h_in: Var, vars: &EncoderVars, cfg: &EncoderConfig) -> Result<Var> {
    let steps = tape.shape(h_in)[0];
    cfg.output_steps(steps)?;
    let mut h = h_in;
    for (layer, &dilation) in vars.layers.iter().zip(&cfg.dilations) {
        let ma = modality_attention(tape, h, &layer.modality)?.output;
        let sa = spatial_attention(tape, h, &layer.spatial)?.output;
        let hhat = tape.concat(&[h, ma, sa], 3)?;
        let mut next = temporal_conv_layer(tape, hhat, &layer.conv, dilation)?;
        if cfg.residual {
            let (t_in, t_out) = (tape.shape(h)[0], tape.shape(next)[0]);
            let tail = tape.narrow(h, 0, t_in - t_out, t_out)?;
            next = tape.add(next, tail)?;
        }
        h = next;
    }
    Ok(h)
}
