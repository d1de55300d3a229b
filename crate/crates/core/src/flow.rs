//! Rectified-flow training, Euler sampling/inversion and guidance.
//!
//! Convention: `t = 0` is data and `t = 1` is noise. Training interpolates
//! `z_t = (1 − t)·x + t·ε` and regresses `v = ε − x`. Generation integrates
//! from `t = 1` down to `0` (`z ← z − τ·v`); inversion integrates upward
//! (`z ← z + τ·v`).

use std::ops::Range;

use lore_tensor::{Rng, Tape, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{Bound, Injection, Record};
use crate::params::ModelParams;
use crate::prompt::PromptSeq;

/// Uniform time grid with `steps` Euler steps of width `1/steps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { steps: 15 }
    }
}

impl Schedule {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(CoreError::Config("schedule needs at least one step".into()));
        }
        Ok(Schedule { steps })
    }

    pub fn tau(&self) -> f32 {
        1.0 / self.steps as f32
    }

    /// Time at the start of denoising step `i` (`1 → 0`).
    pub fn denoise_t(&self, i: usize) -> f32 {
        1.0 - i as f32 / self.steps as f32
    }

    /// Time at the start of inversion step `j` (`0 → 1`).
    pub fn invert_t(&self, j: usize) -> f32 {
        j as f32 / self.steps as f32
    }
}

/// Image-token value rows recorded during inversion, per layer, for the
/// conditional and unconditional guidance branches. Entry `k` holds the
/// values of the evaluation at `t = k / steps`, so there are `steps + 1`
/// entries: one per inversion step plus a final evaluation at `t = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueCache {
    steps: usize,
    /// `[k][layer]`, each `[1, image_tokens, d_model]`.
    cond: Vec<Vec<Tensor>>,
    null: Vec<Vec<Tensor>>,
}

impl ValueCache {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Entry evaluated at the same time as denoising step `i`.
    pub fn denoise_index(&self, i: usize) -> usize {
        self.steps - i
    }

    pub fn cond(&self, k: usize) -> &[Tensor] {
        &self.cond[k]
    }

    pub fn null(&self, k: usize) -> &[Tensor] {
        &self.null[k]
    }
}

/// Values captured by one guided evaluation.
#[derive(Clone, Debug, Default)]
pub struct StepValues {
    pub cond: Vec<Tensor>,
    pub null: Vec<Tensor>,
}

/// Cached rows and token mask used to replace values in both branches.
#[derive(Clone, Copy, Debug)]
pub struct BranchInjection<'a> {
    pub cond: &'a [Tensor],
    pub null: &'a [Tensor],
    pub keep: &'a [bool],
}

/// Anything that yields a guided velocity for a single latent `[N, C]`.
pub trait VelocityField: Sync {
    fn guided(
        &self,
        z: &Tensor,
        prompt: &PromptSeq,
        t: f32,
        g: f32,
        inject: Option<BranchInjection<'_>>,
        record_values: bool,
    ) -> Result<(Tensor, StepValues)>;
}

/// Unguided conditional velocity `v_θ(z, P, t)` for one latent.
pub fn velocity(params: &ModelParams, z: &Tensor, prompt: &PromptSeq, t: f32) -> Result<Tensor> {
    branch(params, z, prompt, t, None, false).map(|(v, _)| v)
}

fn branch(
    params: &ModelParams,
    z: &Tensor,
    prompt: &PromptSeq,
    t: f32,
    inject: Option<Injection<'_>>,
    record_values: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, false)?;
    let (n, c) = (z.shape()[0], z.shape().get(1).copied().unwrap_or(0));
    let zv = tape.constant(z.clone().reshape(vec![1, n, c])?)?;
    let out = bound.forward(
        zv,
        &[prompt],
        &[t],
        Record {
            attention: false,
            values: record_values,
        },
        inject,
    )?;
    Ok((out.velocity.value().reshape(vec![n, c])?, out.values))
}

/// `v_null + g·(v_cond − v_null)`, evaluated as `g·v_cond + (1 − g)·v_null`
/// so that `g = 1` and `g = 0` return a branch exactly (signed zeros too).
pub fn combine_guidance(cond: &Tensor, null: &Tensor, g: f32) -> Result<Tensor> {
    if cond.shape() == null.shape() {
        if g == 1.0 {
            return Ok(cond.clone());
        }
        if g == 0.0 {
            return Ok(null.clone());
        }
    }
    Ok(cond.zip_with(null, |c, n| g * c + (1.0 - g) * n)?)
}

pub fn cfg_velocity(params: &ModelParams, z: &Tensor, prompt: &PromptSeq, t: f32, g: f32) -> Result<Tensor> {
    params.guided(z, prompt, t, g, None, false).map(|(v, _)| v)
}

impl VelocityField for ModelParams {
    fn guided(
        &self,
        z: &Tensor,
        prompt: &PromptSeq,
        t: f32,
        g: f32,
        inject: Option<BranchInjection<'_>>,
        record_values: bool,
    ) -> Result<(Tensor, StepValues)> {
        if !(g >= 0.0) {
            return Err(CoreError::Config(format!("guidance must be >= 0, got {g}")));
        }
        let null_prompt = PromptSeq::null(self.config().max_text_tokens);
        let inj = |rows| {
            inject.map(|i| Injection {
                values: rows,
                keep: i.keep,
            })
        };
        let (vc, cond) = branch(self, z, prompt, t, inj(inject.map_or(&[][..], |i| i.cond)), record_values)?;
        let (vn, null) = branch(self, z, &null_prompt, t, inj(inject.map_or(&[][..], |i| i.null)), record_values)?;
        Ok((combine_guidance(&vc, &vn, g)?, StepValues { cond, null }))
    }
}

fn check_finite(z: &Tensor, stage: &'static str, step: usize) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Numerical {
            stage,
            detail: format!("non-finite latent after step {step}"),
        })
    }
}

/// Value injection applied during denoising.
#[derive(Clone, Debug)]
pub struct DenoiseInjection<'a> {
    pub cache: &'a ValueCache,
    /// Per image token; `true` keeps live values (the edited region).
    pub keep: &'a [bool],
    /// Denoising steps at which rows are replaced.
    pub steps: Range<usize>,
}

/// Euler integration from `t = 1` to `t = 0`.
pub fn sample(field: &dyn VelocityField, z1: &Tensor, prompt: &PromptSeq, sched: Schedule, g: f32) -> Result<Tensor> {
    denoise(field, z1, prompt, sched, g, None)
}

/// Euler integration from `t = 1` to `t = 0`, optionally injecting cached
/// values: denoising step `i` reads inversion step `T − 1 − i`.
pub fn denoise(
    field: &dyn VelocityField,
    z1: &Tensor,
    prompt: &PromptSeq,
    sched: Schedule,
    g: f32,
    inject: Option<DenoiseInjection<'_>>,
) -> Result<Tensor> {
    check_finite(z1, "sample", 0)?;
    if let Some(inj) = &inject {
        if inj.cache.steps != sched.steps {
            return Err(CoreError::ScheduleMismatch {
                cache: inj.cache.steps,
                sampler: sched.steps,
            });
        }
    }
    let tau = sched.tau();
    let mut z = z1.clone();
    for i in 0..sched.steps {
        let branch_inj = inject.as_ref().filter(|inj| inj.steps.contains(&i)).map(|inj| {
            let k = inj.cache.denoise_index(i);
            BranchInjection {
                cond: inj.cache.cond(k),
                null: inj.cache.null(k),
                keep: inj.keep,
            }
        });
        let (v, _) = field.guided(&z, prompt, sched.denoise_t(i), g, branch_inj, false)?;
        z = z.zip_with(&v, |a, b| a - tau * b)?;
        check_finite(&z, "sample", i)?;
    }
    Ok(z)
}

/// Euler integration from `t = 0` to `t = 1`. With `record_values`, the
/// returned cache holds the image-token value rows of every step and layer.
pub fn invert(
    field: &dyn VelocityField,
    x: &Tensor,
    prompt: &PromptSeq,
    sched: Schedule,
    g: f32,
    record_values: bool,
) -> Result<(Tensor, Option<ValueCache>)> {
    check_finite(x, "invert", 0)?;
    let tau = sched.tau();
    let mut z = x.clone();
    let mut cond = Vec::new();
    let mut null = Vec::new();
    for j in 0..sched.steps {
        let (v, vals) = field.guided(&z, prompt, sched.invert_t(j), g, None, record_values)?;
        z = z.zip_with(&v, |a, b| a + tau * b)?;
        check_finite(&z, "invert", j)?;
        cond.push(vals.cond);
        null.push(vals.null);
    }
    if record_values {
        // Denoising starts at t = 1, which no inversion step evaluates.
        let (_, vals) = field.guided(&z, prompt, 1.0, g, None, true)?;
        cond.push(vals.cond);
        null.push(vals.null);
    }
    let cache = record_values.then_some(ValueCache {
        steps: sched.steps,
        cond,
        null,
    });
    Ok((z, cache))
}

/// How training draws `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSampling {
    Uniform,
    /// `t = sigmoid(n)`, `n ~ N(0, 1)`.
    LogitNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Optimizer {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub prompt_dropout: f32,
    pub optimizer: Optimizer,
    pub time_sampling: TimeSampling,
    /// Linear learning-rate warm-up length in steps.
    pub warmup: usize,
    /// The batch is split into this many independent tapes; gradients are
    /// summed in shard order, so results do not depend on thread count.
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            prompt_dropout: 0.1,
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            time_sampling: TimeSampling::Uniform,
            warmup: 0,
            shards: 1,
        }
    }
}

/// Optimiser moments, one buffer per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct OptState {
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl OptState {
    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One training batch of latents `[N, C]` (patchified images) and prompts.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub latents: Vec<Tensor>,
    pub prompts: Vec<PromptSeq>,
}

struct ShardOut {
    loss: f64,
    grads: Vec<Vec<f32>>,
}

fn shard_grads(
    params: &ModelParams,
    zt: &[Tensor],
    targets: &[Tensor],
    prompts: &[&PromptSeq],
    ts: &[f32],
    total: usize,
) -> Result<ShardOut> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, true)?;
    let (n, c) = (zt[0].shape()[0], zt[0].shape()[1]);
    let stack = |xs: &[Tensor]| -> Result<Tensor> {
        let data: Vec<f32> = xs.iter().flat_map(|t| t.data().iter().copied()).collect();
        Ok(Tensor::new(vec![xs.len(), n, c], data)?)
    };
    let z = tape.constant(stack(zt)?)?;
    let target = tape.constant(stack(targets)?)?;
    let out = bound.forward(z, prompts, ts, Record::default(), None)?;
    let loss = out.velocity.sub(target)?.square()?.sum()?.scale(1.0 / total as f32)?;
    let value = loss.item()? as f64;
    tape.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .map(|v| v.grad().map(Tensor::into_data).unwrap_or_else(|| vec![0.0; v.value().numel()]))
        .collect();
    Ok(ShardOut { loss: value, grads })
}

/// One optimiser step on the flow-matching loss
/// `mean ‖v_θ(z_t, P, t) − (ε − x)‖²`. Returns the batch loss.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut OptState,
    batch: &TrainBatch,
    rng: &mut Rng,
    cfg: &TrainConfig,
) -> Result<f32> {
    let b = batch.latents.len();
    if b == 0 || batch.prompts.len() != b {
        return Err(CoreError::Input("batch must be nonempty with one prompt per latent".into()));
    }
    let null = PromptSeq::null(params.config().max_text_tokens);
    let mut zt = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    let mut ts = Vec::with_capacity(b);
    let mut prompts = Vec::with_capacity(b);
    for (x, p) in batch.latents.iter().zip(&batch.prompts) {
        let t = match cfg.time_sampling {
            TimeSampling::Uniform => rng.uniform(),
            TimeSampling::LogitNormal => (1.0 / (1.0 + (-rng.normal_f64()).exp())) as f32,
        };
        let eps: Tensor = rng.normal_tensor(x.shape().to_vec(), 1.0);
        zt.push(x.zip_with(&eps, |a, e| (1.0 - t) * a + t * e)?);
        targets.push(eps.zip_with(x, |e, a| e - a)?);
        ts.push(t);
        prompts.push(if rng.uniform() < cfg.prompt_dropout { &null } else { p });
    }
    let total = b * batch.latents[0].numel();
    let shards = cfg.shards.clamp(1, b);
    let bounds: Vec<Range<usize>> = (0..shards).map(|s| (s * b / shards)..((s + 1) * b / shards)).collect();
    let outs: Vec<Result<ShardOut>> = bounds
        .par_iter()
        .map(|r| shard_grads(params, &zt[r.clone()], &targets[r.clone()], &prompts[r.clone()], &ts[r.clone()], total))
        .collect();
    let mut loss = 0.0f64;
    let mut grads: Option<Vec<Vec<f32>>> = None;
    for out in outs {
        let out = out?;
        loss += out.loss;
        match &mut grads {
            None => grads = Some(out.grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(out.grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
    }
    let grads = grads.expect("at least one shard");
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(CoreError::Numerical {
            stage: "train",
            detail: format!("loss {loss} at optimiser step {}", state.step),
        });
    }
    apply_update(params, state, &grads, cfg);
    Ok(loss as f32)
}

fn apply_update(params: &mut ModelParams, state: &mut OptState, grads: &[Vec<f32>], cfg: &TrainConfig) {
    state.step += 1;
    let warm = if cfg.warmup == 0 {
        1.0
    } else {
        (state.step as f32 / cfg.warmup as f32).min(1.0)
    };
    let lr = cfg.lr * warm;
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
    }
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let (g, m, v) = (&grads[i], &mut state.m[i], &mut state.v[i]);
        let w = t.data_mut();
        match cfg.optimizer {
            Optimizer::Sgd { momentum } => {
                for k in 0..w.len() {
                    m[k] = momentum * m[k] + g[k];
                    w[k] -= lr * m[k];
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(state.step as i32);
                let c2 = 1.0 - beta2.powi(state.step as i32);
                for k in 0..w.len() {
                    m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                    v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                    let mh = m[k] / c1;
                    let vh = v[k] / c2;
                    w[k] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}
