//! The resolved run configuration: defaults, then a `--config` file, then
//! `LORE_OUT`, then explicit flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lore_bench::bench::BenchConfig;
use lore_bench::oracle::OracleTrainConfig;
use lore_bench::suite::SuiteKind;
use lore_bench::train::TrainPlan;
use lore_core::edit::{EditConfig, OptimConfig};
use lore_core::flow::Schedule;
use lore_core::probe::ProbeConfig;
use serde::{Deserialize, Serialize};

use crate::error::Usage;

/// Environment variable that replaces the default output directory.
pub const OUT_ENV: &str = "LORE_OUT";

/// Largest config file accepted, in bytes.
pub const MAX_CONFIG_BYTES: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    Train,
    Sample,
    Invert,
    Edit,
    Tendency,
    Bench,
    Gradcheck,
    DatasetGen,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Train => "train",
            Subcommand::Sample => "sample",
            Subcommand::Invert => "invert",
            Subcommand::Edit => "edit",
            Subcommand::Tendency => "tendency",
            Subcommand::Bench => "bench",
            Subcommand::Gradcheck => "gradcheck",
            Subcommand::DatasetGen => "dataset-gen",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub guidance: f32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 15,
            guidance: 2.0,
        }
    }
}

/// Files and prompts consumed by `sample`, `invert`, `edit` and `tendency`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    /// Source prompt; also the prompt of `sample` and `invert`.
    pub src_prompt: Option<String>,
    pub tgt_prompt: Option<String>,
    pub target_word: Option<String>,
    /// Word whose attention is suppressed; defaults to the slot of the
    /// target word.
    pub source_word: Option<String>,
    pub count: usize,
}

impl Default for Inputs {
    fn default() -> Self {
        Inputs {
            image: None,
            mask: None,
            src_prompt: None,
            tgt_prompt: None,
            target_word: None,
            source_word: None,
            count: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TrainTarget {
    Model,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub target: TrainTarget,
    pub plan: TrainPlan,
    pub oracle: OracleTrainConfig,
    /// Scenes sampled for the generation-accuracy gate; 0 skips it.
    pub gate_samples: usize,
    pub gate_threshold: f64,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            target: TrainTarget::Model,
            plan: TrainPlan::default(),
            oracle: OracleTrainConfig::default(),
            gate_samples: 200,
            gate_threshold: 0.90,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub suite: SuiteKind,
    pub tasks: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            suite: SuiteKind::PieLike,
            tasks: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    /// Consecutive op-suite seeds starting at the run seed.
    pub seeds: usize,
    pub eps: f32,
    pub threshold: f32,
    /// Also check the full tendency-loss graph of the loaded model.
    pub tendency: bool,
    pub tendency_eps: f32,
    pub tendency_threshold: f32,
    /// Every `stride`-th latent entry is probed.
    pub tendency_stride: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            seeds: 1,
            eps: 1e-4,
            threshold: 1e-4,
            tendency: false,
            tendency_eps: 1e-3,
            tendency_threshold: 1e-3,
            tendency_stride: 97,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub subcommand: Subcommand,
    pub model: PathBuf,
    pub oracle: PathBuf,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub probe: ProbeConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub injection: bool,
    pub inputs: Inputs,
    pub train: TrainSection,
    /// Suite sizes and sweeps; its schedule, rate, iteration and seed
    /// fields mirror the top-level ones.
    pub bench: BenchConfig,
    pub jobs: usize,
    pub dataset: DatasetSection,
    pub gradcheck: GradcheckSection,
}

impl RunConfig {
    pub fn new(subcommand: Subcommand) -> RunConfig {
        let mut cfg = RunConfig {
            subcommand,
            model: PathBuf::from("artifacts/model.lore"),
            oracle: PathBuf::from("artifacts/oracle.loro"),
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
            probe: ProbeConfig::default(),
            seed: 0,
            out: PathBuf::from("out"),
            injection: true,
            inputs: Inputs::default(),
            train: TrainSection::default(),
            bench: BenchConfig::default(),
            jobs: 1,
            dataset: DatasetSection::default(),
            gradcheck: GradcheckSection::default(),
        };
        cfg.sync();
        cfg
    }

    /// Parses and validates a config file's contents.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        if text.len() > MAX_CONFIG_BYTES {
            bail!(Usage(format!("config larger than {MAX_CONFIG_BYTES} bytes")));
        }
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Usage(format!("malformed config: {e}")))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        RunConfig::from_json(&text)
    }

    /// Copies the top-level schedule, rate, iterations and seed into the
    /// sections that carry their own copies.
    pub fn sync(&mut self) {
        self.bench.steps = self.schedule.steps;
        self.bench.guidance = self.schedule.guidance;
        self.bench.lr = self.optim.lr;
        self.bench.iterations = self.optim.iterations;
        self.bench.seed = self.seed;
        self.train.plan.seed = self.seed;
        self.train.oracle.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Usage(msg).into());
        if self.schedule.steps == 0 || self.schedule.steps > 10_000 {
            return bad(format!("steps must be in 1..=10000, got {}", self.schedule.steps));
        }
        if !self.schedule.guidance.is_finite() {
            return bad("guidance must be finite".into());
        }
        if self.jobs == 0 || self.jobs > 1024 {
            return bad(format!("jobs must be in 1..=1024, got {}", self.jobs));
        }
        if self.inputs.count == 0 || self.inputs.count > 10_000 {
            return bad(format!("count must be in 1..=10000, got {}", self.inputs.count));
        }
        if self.gradcheck.seeds == 0 || self.gradcheck.tendency_stride == 0 {
            return bad("gradcheck needs at least one seed and a positive stride".into());
        }
        for (name, v) in [("eps", self.gradcheck.eps), ("tendency_eps", self.gradcheck.tendency_eps)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("gradcheck {name} must be > 0"));
            }
        }
        self.optim.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(())
    }

    /// Sorted-key JSON, the format of `--dump-config` and `config.json`.
    pub fn to_json(&self) -> Result<String> {
        Ok(lore_bench::bench::sorted_json(self)?)
    }

    pub fn edit_config(&self) -> Result<EditConfig> {
        Ok(EditConfig {
            optim: self.optim.clone(),
            schedule: Schedule::new(self.schedule.steps)?,
            guidance: self.schedule.guidance,
            injection: self.injection,
            probe: self.probe.clone(),
            seed: self.seed,
            ..EditConfig::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_editing_setup() {
        let cfg = RunConfig::new(Subcommand::Edit);
        assert_eq!(cfg.optim.lr, 0.01);
        assert_eq!(cfg.optim.iterations, 10);
        assert_eq!(cfg.schedule.steps, 15);
        assert_eq!(cfg.schedule.guidance, 2.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut cfg = RunConfig::new(Subcommand::Bench);
        cfg.seed = 42;
        cfg.optim.lr = 0.1;
        cfg.sync();
        let text = cfg.to_json().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(back.bench.seed, 42);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        let cfg = RunConfig::new(Subcommand::Edit);
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["bogus"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["schedule"]["steps"] = 0.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        assert!(RunConfig::from_json("{").is_err());
    }
}
