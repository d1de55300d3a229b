//! Shapes dataset batches, the training loop and the generation-accuracy
//! gate.

use lore_core::flow::{sample, train_step, OptState, Optimizer, Schedule, TimeSampling, TrainBatch, TrainConfig};
use lore_core::model::{patchify, unpatchify};
use lore_core::{ModelConfig, ModelParams};
use lore_tensor::{Rng, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::oracle::Oracle;
use crate::scene::{gen_scene, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub steps: usize,
    pub batch: usize,
    /// Peak learning rate.
    pub lr: f32,
    pub warmup: usize,
    /// Cosine decay from the peak to zero over `steps`.
    pub cosine: bool,
    /// Exponential moving average of the weights; the average is what
    /// training returns.
    pub ema: Option<f32>,
    pub optimizer: Optimizer,
    pub time_sampling: TimeSampling,
    pub prompt_dropout: f32,
    pub shards: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            steps: 20_000,
            batch: 32,
            lr: 2e-3,
            warmup: 300,
            cosine: true,
            ema: Some(0.999),
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            time_sampling: TimeSampling::LogitNormal,
            prompt_dropout: 0.1,
            shards: 1,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn lr_at(&self, step: usize) -> f32 {
        let warm = if self.warmup == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup as f64).min(1.0)
        };
        let decay = if self.cosine {
            0.5 * (1.0 + (std::f64::consts::PI * step as f64 / self.steps.max(1) as f64).cos())
        } else {
            1.0
        };
        (self.lr as f64 * warm * decay) as f32
    }
}

/// `n` random scenes (1–3 objects) as patchified latents with prompts.
pub fn dataset_batch(cfg: &ModelConfig, rng: &mut Rng, n: usize) -> Result<TrainBatch> {
    let mut latents = Vec::with_capacity(n);
    let mut prompts = Vec::with_capacity(n);
    for _ in 0..n {
        let scene = gen_scene(&SceneSpec::random(rng, 1, 3))?;
        latents.push(patchify(cfg, &scene.image)?);
        prompts.push(scene.prompt);
    }
    Ok(TrainBatch { latents, prompts })
}

/// Resumable training state.
pub struct Trainer {
    pub plan: TrainPlan,
    pub params: ModelParams,
    pub ema: Option<ModelParams>,
    state: OptState,
    data_rng: Rng,
    noise_rng: Rng,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: ModelConfig, plan: TrainPlan) -> Result<Trainer> {
        if plan.batch == 0 || plan.steps == 0 {
            return Err(BenchError::Input("training needs a positive batch and step count".into()));
        }
        let root = Rng::new(plan.seed);
        let params = ModelParams::init(cfg, &mut root.derive(0))?;
        Ok(Trainer {
            ema: plan.ema.map(|_| params.clone()),
            params,
            state: OptState::default(),
            data_rng: root.derive(1),
            noise_rng: root.derive(2),
            step: 0,
            plan,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn done(&self) -> bool {
        self.step >= self.plan.steps
    }

    /// One optimiser step; returns the batch loss.
    pub fn advance(&mut self) -> Result<f32> {
        let batch = dataset_batch(self.params.config(), &mut self.data_rng, self.plan.batch)?;
        let tc = TrainConfig {
            lr: self.plan.lr_at(self.step),
            prompt_dropout: self.plan.prompt_dropout,
            optimizer: self.plan.optimizer,
            time_sampling: self.plan.time_sampling,
            warmup: 0,
            shards: self.plan.shards,
        };
        let loss = train_step(&mut self.params, &mut self.state, &batch, &mut self.noise_rng, &tc)?;
        if let (Some(ema), Some(decay)) = (&mut self.ema, self.plan.ema) {
            for (e, p) in ema.tensors_mut().iter_mut().zip(self.params.tensors()) {
                for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
                    *a = decay * *a + (1.0 - decay) * b;
                }
            }
        }
        self.step += 1;
        Ok(loss)
    }

    /// The weights to ship: the moving average when enabled.
    pub fn finish(self) -> ModelParams {
        self.ema.unwrap_or(self.params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub samples: usize,
    pub objects: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Samples `n` random scenes from noise and asks the oracle to classify
/// every object inside its intended footprint.
pub fn generation_accuracy(
    params: &ModelParams,
    oracle: &Oracle,
    n: usize,
    sched: Schedule,
    guidance: f32,
    seed: u64,
) -> Result<GenerationReport> {
    let cfg = *params.config();
    let root = Rng::new(seed);
    let per: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(usize, usize)> {
            let mut rng = root.derive(i as u64);
            let spec = SceneSpec::random(&mut rng, 1, 3);
            let scene = gen_scene(&spec)?;
            let z1: Tensor = rng.normal_tensor(vec![cfg.image_tokens(), cfg.token_dim()], 1.0);
            let x = sample(params, &z1, &scene.prompt, sched, guidance)?;
            let img = unpatchify(&cfg, &x)?;
            let mut ok = 0;
            for (o, mask) in spec.objects.iter().zip(&scene.masks) {
                ok += (oracle.predict(&img, mask)? == o.class) as usize;
            }
            Ok((spec.objects.len(), ok))
        })
        .collect::<Result<Vec<_>>>()?;
    let objects: usize = per.iter().map(|p| p.0).sum();
    let correct: usize = per.iter().map(|p| p.1).sum();
    Ok(GenerationReport {
        samples: n,
        objects,
        correct,
        accuracy: correct as f64 / objects.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let plan = TrainPlan {
            steps: 100,
            warmup: 10,
            lr: 1.0,
            ..TrainPlan::default()
        };
        assert!((plan.lr_at(0) - 0.1).abs() < 1e-3);
        assert!(plan.lr_at(9) > plan.lr_at(0));
        assert!(plan.lr_at(50) < plan.lr_at(10));
        assert!(plan.lr_at(99) < 1e-3);
    }

    #[test]
    fn trainer_is_deterministic_and_tracks_ema() {
        let cfg = ModelConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            time_embed_dim: 16,
            ..ModelConfig::default()
        };
        let plan = TrainPlan {
            steps: 3,
            batch: 2,
            ..TrainPlan::default()
        };
        let run = || {
            let mut t = Trainer::new(cfg, plan.clone()).unwrap();
            let losses: Vec<f32> = (0..3).map(|_| t.advance().unwrap()).collect();
            assert!(t.done());
            (losses, t.finish())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }
}
