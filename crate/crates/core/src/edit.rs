//! Latent optimisation of inverted noise against a tendency loss, and
//! denoising with masked value injection.

use std::ops::Range;
use std::time::Instant;

use lore_tensor::{grad_check_at, Element, Rng, Tape, TensorError, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flow::{denoise, invert, DenoiseInjection, Schedule, ValueCache};
use crate::model::{patchify, unpatchify, Bound, Record};
use crate::params::ModelParams;
use crate::probe::{extract_map_var, smooth_var, tendency, GaussianKernel, ProbeConfig, SpatialAttnMap, TokenMask};
use crate::prompt::PromptSeq;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f32,
    pub iterations: usize,
    pub mask_restricted: bool,
    pub renoise: bool,
    pub source_suppression: bool,
    pub kernel: GaussianKernel,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.01,
            iterations: 10,
            mask_restricted: true,
            renoise: false,
            source_suppression: false,
            kernel: GaussianKernel::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(CoreError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        self.kernel.validate()
    }
}

/// `1 − max_{masked} G(A_target)`, plus `max_{masked} G(A_source)` when a
/// source token is given.
pub fn tendency_loss<'t, T: Element>(
    attention: &[Var<'t, T>],
    prompt_ids: &[usize],
    target_token: usize,
    source: Option<(&[Var<'t, T>], &[usize], usize)>,
    mask: &TokenMask,
    kernel: &GaussianKernel,
    probe: &ProbeConfig,
) -> Result<Var<'t, T>> {
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(CoreError::Input("tendency loss needs a nonempty mask".into()));
    }
    let peak = |att: &[Var<'t, T>], ids: &[usize], tok: usize| -> Result<Var<'t, T>> {
        let map = extract_map_var(att, ids, tok, probe)?;
        Ok(smooth_var(map, kernel, mask.grid)?.gather(&idx)?.max()?)
    };
    let mut loss = peak(attention, prompt_ids, target_token)?.neg()?.add_scalar(T::one())?;
    if let Some((att, ids, tok)) = source {
        loss = loss.add(peak(att, ids, tok)?)?;
    }
    Ok(loss)
}

/// Expands a token mask over the `token_dim` entries of each token.
fn entry_mask(mask: &TokenMask, token_dim: usize) -> Vec<bool> {
    mask.cells.iter().flat_map(|&c| std::iter::repeat(c).take(token_dim)).collect()
}

/// Attention of one conditional forward at `t`, as plain tensors per layer
/// `[H, N, T]`, plus the padded prompt ids.
pub fn attention_at(params: &ModelParams, z: &Tensor, prompt: &PromptSeq, t: f32) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let cfg = params.config();
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, false)?;
    let zv = tape.constant(z.clone().reshape(vec![1, cfg.image_tokens(), cfg.token_dim()])?)?;
    let out = bound.forward(
        zv,
        &[prompt],
        &[t],
        Record {
            attention: true,
            values: false,
        },
        None,
    )?;
    let layers = out
        .attention
        .iter()
        .map(|a| {
            let s = a.shape();
            a.value().reshape(s[1..].to_vec()).map_err(CoreError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((layers, prompt.padded(cfg.max_text_tokens, cfg.vocab_size)?))
}

/// Smoothing-free Tend(token) of the attention at `t = 1`.
/// Attention map of `token` over the image grid for latent `z` at t=1.
pub fn map_at(params: &ModelParams, z: &Tensor, prompt: &PromptSeq, token: usize, probe: &ProbeConfig) -> Result<SpatialAttnMap> {
    let (layers, ids) = attention_at(params, z, prompt, 1.0)?;
    let record = crate::probe::AttentionRecord {
        layers,
        prompt_ids: ids,
        t: 1.0,
    };
    crate::probe::extract_map(&record, token, probe)
}

pub fn tendency_at(
    params: &ModelParams,
    z: &Tensor,
    prompt: &PromptSeq,
    token: usize,
    mask: &TokenMask,
    probe: &ProbeConfig,
) -> Result<f32> {
    tendency(&map_at(params, z, prompt, token, probe)?, mask)
}

fn hint<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> lore_tensor::Result<Var<'t, f64>>,
{
    f
}

/// Finite-difference check of the whole tendency-loss graph with respect to
/// the latent, at the given entries of `z0` (`[N, C]`). Runs in `f64`.
#[allow(clippy::too_many_arguments)]
pub fn tendency_grad_check(
    params: &ModelParams,
    z0: &Tensor,
    prompt: &PromptSeq,
    target_token: usize,
    mask: &TokenMask,
    kernel: &GaussianKernel,
    probe: &ProbeConfig,
    coords: &[usize],
    eps: f32,
) -> Result<f32> {
    let mc = params.config();
    let (n, c) = (mc.image_tokens(), mc.token_dim());
    if z0.shape() != [n, c] {
        return Err(CoreError::Input(format!("latent shape {:?}, expected [{n}, {c}]", z0.shape())));
    }
    let ids = prompt.padded(mc.max_text_tokens, mc.vocab_size)?;
    let wrap = |e: CoreError| match e {
        CoreError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    };
    let f = hint(|tape, z| {
        let bound = Bound::<f64>::new(tape, params, false).map_err(wrap)?;
        let rec = Record {
            attention: true,
            values: false,
        };
        let out = bound.forward(z.reshape(vec![1, n, c])?, &[prompt], &[1.0], rec, None).map_err(wrap)?;
        tendency_loss(&out.attention, &ids, target_token, None, mask, kernel, probe).map_err(wrap)
    });
    Ok(grad_check_at(f, z0, eps, coords)?)
}

/// Gradient steps on the inverted noise `z0` (`[N, C]`) that raise the
/// target token's smoothed attention peak inside the mask at `t = 1`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_latent(
    params: &ModelParams,
    z0: &Tensor,
    tgt_prompt: &PromptSeq,
    target_token: usize,
    source: Option<(&PromptSeq, usize)>,
    mask: &TokenMask,
    cfg: &OptimConfig,
    probe: &ProbeConfig,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<f32>)> {
    cfg.validate()?;
    probe.validate(params.config())?;
    let mc = params.config();
    let (n, c) = (mc.image_tokens(), mc.token_dim());
    if z0.shape() != [n, c] {
        return Err(CoreError::Input(format!("latent shape {:?}, expected [{n}, {c}]", z0.shape())));
    }
    if mask.cells.len() != n || mask.is_empty() {
        return Err(CoreError::Input("mask must be nonempty and match the token grid".into()));
    }
    let inside = entry_mask(mask, c);
    let mut z = z0.clone();
    if cfg.renoise {
        let eps: Tensor = rng.normal_tensor(vec![n, c], 1.0);
        for ((v, e), &m) in z.data_mut().iter_mut().zip(eps.data()).zip(&inside) {
            if m {
                *v = *e;
            }
        }
    }
    let tgt_ids = tgt_prompt.padded(mc.max_text_tokens, mc.vocab_size)?;
    let src_ids = match source {
        Some((p, _)) if cfg.source_suppression => Some(p.padded(mc.max_text_tokens, mc.vocab_size)?),
        _ => None,
    };
    let mut trace = Vec::with_capacity(cfg.iterations);
    let tape = Tape::new();
    for it in 0..cfg.iterations {
        tape.reset();
        let bound = Bound::new(&tape, params, false)?;
        let zv = tape.param(z.clone().reshape(vec![1, n, c])?)?;
        let rec = Record {
            attention: true,
            values: false,
        };
        let out = bound.forward(zv, &[tgt_prompt], &[1.0], rec, None)?;
        let src_out = match (&src_ids, source) {
            (Some(_), Some((p, _))) => Some(bound.forward(zv, &[p], &[1.0], rec, None)?),
            _ => None,
        };
        let src_arg = match (&src_out, &src_ids, source) {
            (Some(o), Some(ids), Some((_, tok))) => Some((o.attention.as_slice(), ids.as_slice(), tok)),
            _ => None,
        };
        let loss = tendency_loss(&out.attention, &tgt_ids, target_token, src_arg, mask, &cfg.kernel, probe)?;
        let lv = loss.item()?;
        tape.backward(loss)?;
        let grad = zv.grad().unwrap_or_else(|| Tensor::zeros(vec![1, n, c]));
        if !lv.is_finite() || !grad.is_finite() {
            return Err(CoreError::Numerical {
                stage: "optimize_latent",
                detail: format!("iteration {it}: loss {lv}, trace so far {trace:?}"),
            });
        }
        trace.push(lv);
        for ((v, g), &m) in z.data_mut().iter_mut().zip(grad.data()).zip(&inside) {
            if m || !cfg.mask_restricted {
                *v -= cfg.lr * g;
            }
        }
    }
    Ok((z, trace))
}

/// Denoises `z` under `prompt`, replacing image-token values outside `mask`
/// with the cached inversion rows of the matching timestep.
#[allow(clippy::too_many_arguments)]
pub fn denoise_with_injection(
    params: &ModelParams,
    z: &Tensor,
    prompt: &PromptSeq,
    cache: &ValueCache,
    mask: &TokenMask,
    sched: Schedule,
    g: f32,
    steps: Option<Range<usize>>,
) -> Result<Tensor> {
    if mask.cells.len() != params.config().image_tokens() {
        return Err(CoreError::Input("mask does not match the token grid".into()));
    }
    let inj = DenoiseInjection {
        cache,
        keep: &mask.cells,
        steps: steps.unwrap_or(0..sched.steps),
    };
    denoise(params, z, prompt, sched, g, Some(inj))
}

/// One editing request on a `[S, S, 3]` image.
#[derive(Clone, Debug)]
pub struct EditRequest {
    pub image: Tensor,
    pub mask: TokenMask,
    pub src_prompt: PromptSeq,
    pub tgt_prompt: PromptSeq,
    pub target_token: usize,
    pub source_token: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub optim: OptimConfig,
    pub schedule: Schedule,
    pub guidance: f32,
    /// Guidance during inversion; `None` uses `guidance`.
    pub invert_guidance: Option<f32>,
    pub injection: bool,
    /// Denoising steps that receive injection; `None` = all.
    pub injection_steps: Option<Range<usize>>,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            optim: OptimConfig::default(),
            schedule: Schedule::default(),
            guidance: 2.0,
            invert_guidance: None,
            injection: true,
            injection_steps: None,
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tendencies {
    pub source_pre: f32,
    pub target_pre: f32,
    pub source_post: f32,
    pub target_post: f32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub invert_s: f64,
    pub optimize_s: f64,
    pub denoise_s: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.invert_s + self.optimize_s + self.denoise_s
    }
}

#[derive(Clone, Debug)]
pub struct EditResult {
    pub image: Tensor,
    pub latent: Tensor,
    pub loss_trace: Vec<f32>,
    pub tendencies: Tendencies,
    pub times: PhaseTimes,
}

/// Inverted latent of a request plus the value cache, reusable across edit
/// configurations that share schedule and inversion guidance.
#[derive(Clone, Debug)]
pub struct Inverted {
    pub latent: Tensor,
    pub cache: ValueCache,
    pub seconds: f64,
}

pub fn invert_request(params: &ModelParams, req: &EditRequest, cfg: &EditConfig) -> Result<Inverted> {
    let x = patchify(params.config(), &req.image)?;
    let g_inv = cfg.invert_guidance.unwrap_or(cfg.guidance);
    let t0 = Instant::now();
    let (latent, cache) = invert(params, &x, &req.src_prompt, cfg.schedule, g_inv, true)?;
    Ok(Inverted {
        latent,
        cache: cache.expect("values were recorded"),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Inversion, latent optimisation and injected denoising.
pub fn edit(params: &ModelParams, req: &EditRequest, cfg: &EditConfig) -> Result<EditResult> {
    let inv = invert_request(params, req, cfg)?;
    edit_inverted(params, req, cfg, &inv)
}

/// The part of [`edit`] after inversion. `inv` must come from
/// [`invert_request`] with the same schedule and inversion guidance.
pub fn edit_inverted(params: &ModelParams, req: &EditRequest, cfg: &EditConfig, inv: &Inverted) -> Result<EditResult> {
    let mc = params.config();
    cfg.optim.validate()?;
    if inv.cache.steps() != cfg.schedule.steps {
        return Err(CoreError::ScheduleMismatch {
            cache: inv.cache.steps(),
            sampler: cfg.schedule.steps,
        });
    }
    let mut rng = Rng::new(cfg.seed);
    let z0 = &inv.latent;

    let t1 = Instant::now();
    let source = Some((&req.src_prompt, req.source_token));
    let (z_opt, loss_trace) = optimize_latent(
        params,
        z0,
        &req.tgt_prompt,
        req.target_token,
        source,
        &req.mask,
        &cfg.optim,
        &cfg.probe,
        &mut rng,
    )?;
    let optimize_s = t1.elapsed().as_secs_f64();

    let tend = |z: &Tensor, p: &PromptSeq, tok: usize| tendency_at(params, z, p, tok, &req.mask, &cfg.probe);
    let tendencies = Tendencies {
        source_pre: tend(z0, &req.src_prompt, req.source_token)?,
        target_pre: tend(z0, &req.tgt_prompt, req.target_token)?,
        source_post: tend(&z_opt, &req.src_prompt, req.source_token)?,
        target_post: tend(&z_opt, &req.tgt_prompt, req.target_token)?,
    };

    let t2 = Instant::now();
    let out = if cfg.injection {
        denoise_with_injection(
            params,
            &z_opt,
            &req.tgt_prompt,
            &inv.cache,
            &req.mask,
            cfg.schedule,
            cfg.guidance,
            cfg.injection_steps.clone(),
        )?
    } else {
        denoise(params, &z_opt, &req.tgt_prompt, cfg.schedule, cfg.guidance, None)?
    };
    let denoise_s = t2.elapsed().as_secs_f64();

    Ok(EditResult {
        image: unpatchify(mc, &out)?,
        latent: z_opt,
        loss_trace,
        tendencies,
        times: PhaseTimes {
            invert_s: inv.seconds,
            optimize_s,
            denoise_s,
        },
    })
}
