//! Command-line flags. Every flag is optional so that only the ones given
//! override the config being resolved.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand as ClapSub};
use lore_bench::suite::SuiteKind;

use crate::config::{RunConfig, Subcommand, TrainTarget, OUT_ENV};

#[derive(Debug, Parser)]
#[command(name = "lore", version, about = "Toy rectified-flow editing by latent optimisation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, ClapSub)]
pub enum Command {
    /// Train the model (then run the generation gate) or the oracle.
    Train(TrainArgs),
    /// Sample images for a prompt.
    Sample(SampleArgs),
    /// Invert an image to noise and reconstruct it.
    Invert(InvertArgs),
    /// Edit an image inside a mask.
    Edit(EditArgs),
    /// Attention tendencies of the source and target words before and after
    /// latent optimisation.
    Tendency(TendencyArgs),
    /// Run every benchmark suite and sweep.
    Bench(BenchArgs),
    /// Finite-difference check of the autodiff ops.
    Gradcheck(GradcheckArgs),
    /// Write an edit suite as tasks.jsonl plus images and masks.
    DatasetGen(DatasetArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Start from this config file instead of the defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Write the resolved config to FILE ("-" for stdout) and exit.
    #[arg(long, value_name = "FILE")]
    pub dump_config: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Output directory (overrides LORE_OUT).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Euler steps for sampling, inversion and denoising.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    pub guidance: Option<f32>,
}

#[derive(Debug, Args)]
pub struct EditInputs {
    #[arg(long, value_name = "PPM")]
    pub image: Option<PathBuf>,
    /// Edit region; any non-black pixel is inside.
    #[arg(long, value_name = "PPM")]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub src_prompt: Option<String>,
    #[arg(long)]
    pub tgt_prompt: Option<String>,
    /// Word of the target prompt whose attention is optimised.
    #[arg(long)]
    pub target_word: Option<String>,
    /// Word of the source prompt to suppress; defaults to the target slot.
    #[arg(long)]
    pub source_word: Option<String>,
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    /// Latent learning rate.
    #[arg(long)]
    pub lr: Option<f32>,
    /// Optimisation iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Replace the masked part of the inverted noise with fresh noise first.
    #[arg(long)]
    pub renoise: bool,
    /// Let updates touch latent entries outside the mask.
    #[arg(long)]
    pub no_mask_restrict: bool,
    /// Add the source word's attention peak to the loss.
    #[arg(long)]
    pub source_suppression: bool,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub kernel_sigma: Option<f32>,
    /// Layers averaged into attention maps (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub probe_layers: Option<Vec<usize>>,
    /// Heads averaged into attention maps (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub probe_heads: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub target: Option<TrainTarget>,
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Peak training learning rate.
    #[arg(long)]
    pub train_lr: Option<f32>,
    /// Oracle used by the generation gate.
    #[arg(long, value_name = "FILE")]
    pub oracle: Option<PathBuf>,
    /// Samples for the generation gate; 0 skips it.
    #[arg(long)]
    pub gate_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "PPM")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: EditInputs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Denoise without value injection.
    #[arg(long)]
    pub no_injection: bool,
}

#[derive(Debug, Args)]
pub struct TendencyArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: EditInputs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, value_name = "FILE")]
    pub oracle: Option<PathBuf>,
    /// Tasks per suite.
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Skip writing edited images.
    #[arg(long)]
    pub no_images: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of consecutive seeds for the op suite.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Also check the full tendency-loss graph of the model.
    #[arg(long)]
    pub tendency: bool,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_parser = parse_suite)]
    pub suite: Option<SuiteKind>,
    #[arg(long)]
    pub tasks: Option<usize>,
}

fn parse_suite(s: &str) -> Result<SuiteKind, String> {
    SuiteKind::from_name(s).ok_or_else(|| format!("unknown suite {s:?} (pie-like, smart-like, gap-like)"))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl Common {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.model, self.model.clone());
        set(&mut cfg.out, self.out.clone());
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.schedule.steps, self.steps);
        set(&mut cfg.schedule.guidance, self.guidance);
    }
}

impl EditInputs {
    fn apply(&self, cfg: &mut RunConfig) {
        let i = &mut cfg.inputs;
        set(&mut i.image, self.image.clone().map(Some));
        set(&mut i.mask, self.mask.clone().map(Some));
        set(&mut i.src_prompt, self.src_prompt.clone().map(Some));
        set(&mut i.tgt_prompt, self.tgt_prompt.clone().map(Some));
        set(&mut i.target_word, self.target_word.clone().map(Some));
        set(&mut i.source_word, self.source_word.clone().map(Some));
    }
}

impl OptimArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let o = &mut cfg.optim;
        set(&mut o.lr, self.lr);
        set(&mut o.iterations, self.iters);
        o.renoise |= self.renoise;
        o.mask_restricted &= !self.no_mask_restrict;
        o.source_suppression |= self.source_suppression;
        set(&mut o.kernel.size, self.kernel_size);
        set(&mut o.kernel.sigma, self.kernel_sigma);
        set(&mut cfg.probe.layers, self.probe_layers.clone().map(Some));
        set(&mut cfg.probe.heads, self.probe_heads.clone().map(Some));
    }
}

impl Command {
    pub fn subcommand(&self) -> Subcommand {
        match self {
            Command::Train(_) => Subcommand::Train,
            Command::Sample(_) => Subcommand::Sample,
            Command::Invert(_) => Subcommand::Invert,
            Command::Edit(_) => Subcommand::Edit,
            Command::Tendency(_) => Subcommand::Tendency,
            Command::Bench(_) => Subcommand::Bench,
            Command::Gradcheck(_) => Subcommand::Gradcheck,
            Command::DatasetGen(_) => Subcommand::DatasetGen,
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Train(a) => &a.common,
            Command::Sample(a) => &a.common,
            Command::Invert(a) => &a.common,
            Command::Edit(a) => &a.common,
            Command::Tendency(a) => &a.common,
            Command::Bench(a) => &a.common,
            Command::Gradcheck(a) => &a.common,
            Command::DatasetGen(a) => &a.common,
        }
    }

    /// Applies this command's explicit flags on top of `cfg`.
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.common().apply(cfg);
        match self {
            Command::Train(a) => {
                set(&mut cfg.train.target, a.target);
                set(&mut cfg.train.plan.steps, a.train_steps);
                set(&mut cfg.train.plan.batch, a.batch);
                set(&mut cfg.train.plan.lr, a.train_lr);
                set(&mut cfg.oracle, a.oracle.clone());
                set(&mut cfg.train.gate_samples, a.gate_samples);
            }
            Command::Sample(a) => {
                set(&mut cfg.inputs.src_prompt, a.prompt.clone().map(Some));
                set(&mut cfg.inputs.count, a.count);
            }
            Command::Invert(a) => {
                set(&mut cfg.inputs.image, a.image.clone().map(Some));
                set(&mut cfg.inputs.src_prompt, a.prompt.clone().map(Some));
            }
            Command::Edit(a) => {
                a.inputs.apply(cfg);
                a.optim.apply(cfg);
                cfg.injection &= !a.no_injection;
            }
            Command::Tendency(a) => {
                a.inputs.apply(cfg);
                a.optim.apply(cfg);
            }
            Command::Bench(a) => {
                a.optim.apply(cfg);
                set(&mut cfg.oracle, a.oracle.clone());
                set(&mut cfg.bench.tasks_per_suite, a.tasks);
                set(&mut cfg.jobs, a.jobs);
                cfg.bench.save_images &= !a.no_images;
            }
            Command::Gradcheck(a) => {
                set(&mut cfg.gradcheck.seeds, a.seeds);
                cfg.gradcheck.tendency |= a.tendency;
            }
            Command::DatasetGen(a) => {
                set(&mut cfg.dataset.suite, a.suite);
                set(&mut cfg.dataset.tasks, a.tasks);
            }
        }
    }
}

/// Defaults or the `--config` file, then `out_env`, then explicit flags.
pub fn resolve(cmd: &Command, out_env: Option<PathBuf>) -> anyhow::Result<RunConfig> {
    let sub = cmd.subcommand();
    let mut cfg = match &cmd.common().config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            if cfg.subcommand != sub {
                anyhow::bail!(crate::error::Usage(format!(
                    "config is for `{}`, not `{}`",
                    cfg.subcommand.name(),
                    sub.name()
                )));
            }
            cfg
        }
        None => RunConfig::new(sub),
    };
    set(&mut cfg.out, out_env);
    cmd.apply(&mut cfg);
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

/// `LORE_OUT`, when set and nonempty.
pub fn out_from_env() -> Option<PathBuf> {
    std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}
