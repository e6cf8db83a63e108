//! End-to-end model: parameters, forward passes for both views, the joint
//! objective, optimizer, training loop, metrics and checkpoints.

mod adam;
mod checkpoint;
mod metrics;
mod train;

use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, Manifest, ParamEntry, CHECKPOINT_VERSION,
};
pub use metrics::{persistence_metrics, MetricRow, Metrics, MetricsAccumulator, ModalitySummary};
pub use train::{evaluate, predict_window, train, EpochRecord, History, TrainOutcome};

use crate::augmentation::{self, EmbeddingVars, MaskDraw};
use crate::data::WindowSample;
use crate::encoder::{self, init_uniform, init_zeros, EncoderConfig, EncoderVars};
use crate::error::{Error, Result};
use crate::gssl::{self, MixtureHeads, MixtureVars};
use crate::mssl::{self, FusionVars};
use crate::numerics::{Bindings, ParamStore, Tape, Tensor, Var};

fn default_input_steps() -> usize {
    16
}
fn default_output_steps() -> usize {
    3
}
fn default_hidden() -> usize {
    48
}
fn default_components() -> usize {
    4
}
fn default_layers() -> usize {
    4
}
fn default_kernel() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_input_steps")]
    pub input_steps: usize,
    #[serde(default = "default_output_steps")]
    pub output_steps: usize,
    /// Representation width `d_z`.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Mixture components `K`.
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    /// Per-layer dilations; `1, 2, 4, …` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilations: Option<Vec<usize>>,
    #[serde(default)]
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_steps: default_input_steps(),
            output_steps: default_output_steps(),
            hidden: default_hidden(),
            components: default_components(),
            layers: default_layers(),
            kernel_size: default_kernel(),
            dilations: None,
            residual: false,
        }
    }
}

impl ModelConfig {
    pub fn dilations(&self) -> Vec<usize> {
        self.dilations
            .clone()
            .unwrap_or_else(|| (0..self.layers).map(|l| 1 << l).collect())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            hidden: self.hidden,
            kernel_size: self.kernel_size,
            dilations: self.dilations(),
            residual: self.residual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations().len() != self.layers {
            return Err(Error::Config(format!(
                "{} layers but {} dilations",
                self.layers,
                self.dilations().len()
            )));
        }
        if self.output_steps == 0 || self.components == 0 {
            return Err(Error::Config(
                "output steps and mixture components must be positive".into(),
            ));
        }
        let t_out = self.encoder().output_steps(self.input_steps)?;
        if t_out != 1 {
            return Err(Error::Config(format!(
                "the predictor reads a single encoder output step, but {} input steps with dilations {:?} leave {t_out}",
                self.input_steps,
                self.dilations()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_av: bool,
    pub no_mg: bool,
    pub no_gssl: bool,
    pub no_mssl: bool,
}

impl Ablation {
    /// The full model and the four single-switch variants, with their labels.
    pub fn variants() -> [(&'static str, Ablation); 5] {
        let off = Ablation::default();
        [
            ("full", off),
            ("w/o AV", Ablation { no_av: true, ..off }),
            ("w/o MG", Ablation { no_mg: true, ..off }),
            (
                "w/o GSSL",
                Ablation {
                    no_gssl: true,
                    ..off
                },
            ),
            (
                "w/o MSSL",
                Ablation {
                    no_mssl: true,
                    ..off
                },
            ),
        ]
    }

    fn needs_augmented_view(&self) -> bool {
        !(self.no_gssl && self.no_mssl)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub forecast: f64,
    pub global: f64,
    pub modality: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            forecast: 1.0,
            global: 1.0,
            modality: 1.0,
        }
    }
}

fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-3
}
fn default_patience() -> Option<usize> {
    Some(10)
}
fn default_one() -> f64 {
    1.0
}
fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Epochs without validation improvement before stopping; `null` disables.
    #[serde(default = "default_patience")]
    pub early_stopping_patience: Option<usize>,
    /// Multiplies the masking probability `1 − φ`.
    #[serde(default = "default_one")]
    pub mask_rate_scale: f64,
    /// Let the forecast of the augmented path reach `w0` through a
    /// straight-through estimate of the mask.
    #[serde(default)]
    pub straight_through: bool,
    /// Divide each anchor's negative terms by their count.
    #[serde(default)]
    pub average_negatives: bool,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.stride == 0 {
            return Err(Error::Config(
                "epochs, batch size and stride must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.mask_rate_scale >= 0.0) {
            return Err(Error::Config(
                "learning rate must be positive and mask scale non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Loss values of one forward pass (or a mean over several). Disabled
/// terms are `None` and never serialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub forecast: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<f64>,
}

impl LossParts {
    pub fn accumulate(&mut self, other: &LossParts, weight: f64) {
        self.total += weight * other.total;
        self.forecast += weight * other.forecast;
        if let Some(g) = other.global {
            *self.global.get_or_insert(0.0) += weight * g;
        }
        if let Some(c) = other.modality {
            *self.modality.get_or_insert(0.0) += weight * c;
        }
    }
}

/// A model shape: configuration plus dataset axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub nodes: usize,
    pub modalities: usize,
}

impl Model {
    pub fn new(config: ModelConfig, nodes: usize, modalities: usize) -> Result<Self> {
        config.validate()?;
        if nodes == 0 || modalities == 0 {
            return Err(Error::Config(
                "nodes and modalities must be positive".into(),
            ));
        }
        Ok(Self {
            config,
            nodes,
            modalities,
        })
    }

    /// Encoder output cells `T' · N · M` (with `T' = 1`).
    pub fn grid(&self) -> usize {
        self.nodes * self.modalities
    }

    /// Every learnable tensor, whatever the ablation switches.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let c = &self.config;
        let d = c.hidden;
        let mut store = ParamStore::new();
        encoder::init_params(&c.encoder(), seed, &mut store);
        augmentation::init_params(
            &c.encoder(),
            c.input_steps,
            self.nodes,
            self.modalities,
            seed,
            &mut store,
        );
        gssl::init_params(d, c.components, self.grid(), seed, &mut store);
        mssl::init_params(d, seed, &mut store);
        init_uniform(&mut store, seed, "pred.w_o1", &[d, d], d);
        init_zeros(&mut store, "pred.b_o1", &[d]);
        init_uniform(&mut store, seed, "pred.w_o2", &[d, c.output_steps], d);
        init_zeros(&mut store, "pred.b_o2", &[c.output_steps]);
        store
    }

    /// Check a parameter set has exactly this model's names and shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let expected = self.init_params(0);
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?}, model expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("parameter `{name}` is missing"))),
            }
        }
        if let Some(extra) = params.names().find(|n| expected.get(n).is_none()) {
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PredictorVars {
    pub w_o1: Var,
    pub b_o1: Var,
    pub w_o2: Var,
    pub b_o2: Var,
}

impl PredictorVars {
    pub fn bind(vars: &Bindings) -> Result<Self> {
        Ok(Self {
            w_o1: vars.var("pred.w_o1")?,
            b_o1: vars.var("pred.b_o1")?,
            w_o2: vars.var("pred.w_o2")?,
            b_o2: vars.var("pred.b_o2")?,
        })
    }
}

/// All parameters of a model as tape variables.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub w0: Var,
    pub embedding: EmbeddingVars,
    pub heads: MixtureHeads,
    pub fusion: FusionVars,
    pub predictor: PredictorVars,
}

impl ModelVars {
    pub fn bind(vars: &Bindings, model: &Model) -> Result<Self> {
        Ok(Self {
            encoder: EncoderVars::bind(vars, &model.config.encoder())?,
            w0: vars.var("aug.w0")?,
            embedding: EmbeddingVars::bind(vars)?,
            heads: MixtureHeads::bind(vars)?,
            fusion: FusionVars::bind(vars)?,
            predictor: PredictorVars::bind(vars)?,
        })
    }
}

/// `Ŷ = relu(relu(H) W_o1 + b_o1) W_o2 + b_o2` for `h: [1, N, M, d]`,
/// returned as `[O, N, M]`.
pub fn predict(tape: &mut Tape, h: Var, vars: &PredictorVars) -> Result<Var> {
    let hs = tape.shape(h).to_vec();
    if hs.len() != 4 || hs[0] != 1 {
        return Err(Error::Config(format!(
            "the predictor needs a single encoder output step, got representation shape {hs:?}"
        )));
    }
    let a = tape.relu(h);
    let z = tape.matmul(a, vars.w_o1)?;
    let z = tape.add(z, vars.b_o1)?;
    let z = tape.relu(z);
    let y = tape.matmul(z, vars.w_o2)?;
    let y = tape.add(y, vars.b_o2)?;
    let o = tape.shape(y)[3];
    let y = tape.reshape(y, &[hs[1], hs[2], o])?;
    tape.permute(y, &[2, 0, 1])
}

/// Where the augmented view's mask comes from.
#[derive(Clone, Copy, Debug)]
pub enum MaskSource<'a> {
    /// Draw from the current relevance with this seed.
    Sampled(u64),
    /// Reuse a previous draw.
    Fixed(&'a MaskDraw),
}

/// Everything one training-mode forward pass produced.
#[derive(Clone, Debug)]
pub struct Forward {
    pub loss: Var,
    pub parts: LossParts,
    pub h: Var,
    pub prediction: Var,
    pub x_aug: Option<Var>,
    pub h_aug: Option<Var>,
    pub mixture: Option<MixtureVars>,
    pub mask: Option<MaskDraw>,
}

/// Original view only: representation `[1, N, M, d]` and forecast `[O, N, M]`.
pub fn forward_original(
    tape: &mut Tape,
    vars: &ModelVars,
    model: &Model,
    x: &Tensor,
) -> Result<(Var, Var)> {
    let s = x.shape();
    let x = tape.constant(x.reshape(&[s[0], s[1], s[2], 1])?);
    let h_in = encoder::input_project(tape, x, &vars.encoder.input_orig)?;
    let h = encoder::encode(tape, h_in, &vars.encoder, &model.config.encoder())?;
    let y = predict(tape, h, &vars.predictor)?;
    Ok((h, y))
}

fn finite(tape: &Tape, v: Var, what: &str) -> Result<f64> {
    let value = tape.value(v).data()[0];
    if !value.is_finite() {
        return Err(Error::Numerical(format!("{what} loss is {value}")));
    }
    Ok(value)
}

/// Relevance `φ` on the tape, from a detached representation, aligned to the input steps.
fn relevance_var(tape: &mut Tape, h: Var, w0: Var, steps: usize) -> Result<Var> {
    let hd = tape.detach(h);
    let s = tape.shape(hd).to_vec();
    let w = tape.reshape(w0, &[s[3], 1])?;
    let v = tape.matmul(hd, w)?;
    let v = tape.reshape(v, &[s[0], s[1], s[2]])?;
    let phi = tape.softmax(v, 2)?;
    let parts: Vec<Var> = (0..steps)
        .map(|t| {
            tape.narrow(
                phi,
                0,
                augmentation::relevance_source_step(t, steps, s[0]),
                1,
            )
        })
        .collect::<Result<_>>()?;
    tape.concat(&parts, 0)
}

/// The training objective for one window.
pub fn forward_train(
    tape: &mut Tape,
    vars: &ModelVars,
    model: &Model,
    cfg: &TrainConfig,
    window: &WindowSample,
    mask: MaskSource<'_>,
) -> Result<Forward> {
    let flags = cfg.ablation;
    let weights = cfg.loss_weights;
    let steps = window.x.shape()[0];
    let (h, prediction) = forward_original(tape, vars, model, &window.x)?;
    let y = tape.constant(window.y.clone());
    let diff = tape.sub(prediction, y)?;
    let sq = tape.square(diff);
    let forecast = tape.sum_all(sq);
    let mut parts = LossParts {
        forecast: finite(tape, forecast, "forecast")?,
        ..Default::default()
    };
    let mut loss = tape.scale(forecast, weights.forecast);
    let mut out = Forward {
        loss,
        parts,
        h,
        prediction,
        x_aug: None,
        h_aug: None,
        mixture: None,
        mask: None,
    };

    if flags.needs_augmented_view() {
        let x = tape.constant(window.x.clone());
        let draw = if flags.no_av {
            MaskDraw::none(window.x.shape())
        } else {
            match mask {
                MaskSource::Fixed(d) => d.clone(),
                MaskSource::Sampled(seed) => {
                    let phi = augmentation::modality_relevance(tape.value(h), tape.value(vars.w0))?;
                    let phi = augmentation::align_to_input(&phi, steps)?;
                    augmentation::sample_mask(&phi, cfg.mask_rate_scale, seed)
                }
            }
        };
        let mut masked = augmentation::apply_mask(tape, x, &draw)?;
        if cfg.straight_through && !flags.no_av {
            let phi = relevance_var(tape, h, vars.w0, steps)?;
            let frozen = tape.detach(phi);
            let delta = tape.sub(phi, frozen)?;
            let delta = tape.scale(delta, cfg.mask_rate_scale);
            let through = tape.mul(x, delta)?;
            masked = tape.add(masked, through)?;
        }
        let e = if flags.no_mg {
            let d = model.config.hidden;
            tape.constant(Tensor::zeros(&[steps, model.nodes, model.modalities, d]))
        } else {
            augmentation::embedding(tape, &vars.embedding)?
        };
        let x_aug = augmentation::build_augmented_input(tape, masked, e)?;
        let h_in = encoder::input_project(tape, x_aug, &vars.encoder.input_aug)?;
        let h_aug = encoder::encode(tape, h_in, &vars.encoder, &model.config.encoder())?;
        out.x_aug = Some(x_aug);
        out.h_aug = Some(h_aug);
        out.mask = (!flags.no_av).then_some(draw);

        if !flags.no_gssl {
            let mix = gssl::mixture(tape, h_aug, &vars.heads)?;
            let lg = gssl::gssl_loss(tape, h, &mix)?;
            parts.global = Some(finite(tape, lg, "global")?);
            let weighted = tape.scale(lg, weights.global);
            loss = tape.add(loss, weighted)?;
            out.mixture = Some(mix);
        }
        if !flags.no_mssl {
            let f = &vars.fusion;
            let r = mssl::fuse(tape, h, h_aug, f.w1, f.w2)?;
            let c = mssl::modality_context(tape, r)?;
            let lc = mssl::mssl_loss(tape, r, c, f.w3, cfg.average_negatives)?;
            parts.modality = Some(finite(tape, lc, "modality")?);
            let weighted = tape.scale(lc, weights.modality);
            loss = tape.add(loss, weighted)?;
        }
    }
    parts.total = finite(tape, loss, "total")?;
    out.loss = loss;
    out.parts = parts;
    Ok(out)
}

/// Mean objective over `windows` on a single tape, with masks frozen per
/// window. Useful for gradient checking the full model.
pub fn batch_objective(
    tape: &mut Tape,
    vars: &ModelVars,
    model: &Model,
    cfg: &TrainConfig,
    windows: &[WindowSample],
    masks: &[MaskDraw],
) -> Result<Var> {
    if windows.is_empty() || (!masks.is_empty() && masks.len() != windows.len()) {
        return Err(Error::Config("need one mask per window".into()));
    }
    let none = MaskDraw::none(windows[0].x.shape());
    let mut total: Option<Var> = None;
    for (i, w) in windows.iter().enumerate() {
        let source = MaskSource::Fixed(masks.get(i).unwrap_or(&none));
        let f = forward_train(tape, vars, model, cfg, w, source)?;
        total = Some(match total {
            None => f.loss,
            Some(t) => tape.add(t, f.loss)?,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(tape.scale(total, 1.0 / windows.len() as f64))
}

/// Masks the sampler would draw for `windows` under `params`, one per window.
pub fn draw_masks(
    params: &ParamStore,
    model: &Model,
    cfg: &TrainConfig,
    windows: &[WindowSample],
    seeds: &[u64],
) -> Result<Vec<MaskDraw>> {
    windows
        .iter()
        .zip(seeds)
        .map(|(w, &seed)| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let vars = ModelVars::bind(&bound, model)?;
            let (h, _) = forward_original(&mut tape, &vars, model, &w.x)?;
            let phi = augmentation::modality_relevance(tape.value(h), params.require("aug.w0")?)?;
            let phi = augmentation::align_to_input(&phi, w.x.shape()[0])?;
            Ok(augmentation::sample_mask(&phi, cfg.mask_rate_scale, seed))
        })
        .collect()
}
