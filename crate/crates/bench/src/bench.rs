//! Benchmark harness: builds the suites, runs every edit configuration on a
//! shared inversion per task, and scores the results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use lore_core::edit::{edit_inverted, invert_request, EditConfig, OptimConfig};
use lore_core::flow::{denoise, invert, Schedule};
use lore_core::model::patchify;
use lore_core::ModelParams;
use lore_tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::metrics::{aggregate, outcome, MetricsReport, TaskOutcome};
use crate::oracle::Oracle;
use crate::ppm::write_ppm;
use crate::suite::{build_suite, EditTask, SuiteKind};

/// One edit configuration applied to every task of a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub suite: SuiteKind,
    pub lr: f32,
    pub iterations: usize,
    pub injection: bool,
}

impl RunSpec {
    /// Stable key, e.g. `gap-like/lr=0.01/E=10/inj`.
    pub fn key(&self) -> String {
        format!(
            "{}/lr={}/E={}/{}",
            self.suite,
            self.lr,
            self.iterations,
            if self.injection { "inj" } else { "no-inj" }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub tasks_per_suite: usize,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f32,
    /// Default edit settings; sweeps vary one of them at a time.
    pub lr: f32,
    pub iterations: usize,
    pub lr_sweep: Vec<f32>,
    pub iteration_sweep: Vec<usize>,
    /// Suite used for the learning-rate and iteration sweeps.
    pub sweep_suite: SuiteKind,
    /// Tasks of the first suite used for the inversion round trip.
    pub roundtrip_tasks: usize,
    pub roundtrip_steps: Vec<usize>,
    pub save_images: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            tasks_per_suite: 100,
            seed: 0,
            steps: 15,
            guidance: 2.0,
            lr: 0.01,
            iterations: 10,
            lr_sweep: vec![1e-4, 1e-3, 1e-2, 1e-1],
            iteration_sweep: vec![0, 2, 5, 10, 20],
            sweep_suite: SuiteKind::GapLike,
            roundtrip_tasks: 50,
            roundtrip_steps: vec![5, 15, 30],
            save_images: true,
        }
    }
}

impl BenchConfig {
    /// Every run, without duplicates, in a fixed order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let base = |suite| RunSpec {
            suite,
            lr: self.lr,
            iterations: self.iterations,
            injection: true,
        };
        let mut runs = Vec::new();
        for suite in SuiteKind::ALL {
            runs.push(base(suite));
            runs.push(RunSpec {
                iterations: 0,
                ..base(suite)
            });
        }
        runs.push(RunSpec {
            injection: false,
            ..base(SuiteKind::PieLike)
        });
        for &lr in &self.lr_sweep {
            runs.push(RunSpec {
                lr,
                ..base(self.sweep_suite)
            });
        }
        for &iterations in &self.iteration_sweep {
            runs.push(RunSpec {
                iterations,
                ..base(self.sweep_suite)
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        runs.retain(|r| seen.insert(r.key()));
        runs
    }

    pub fn edit_config(&self, run: &RunSpec) -> Result<EditConfig> {
        Ok(EditConfig {
            optim: OptimConfig {
                lr: run.lr,
                iterations: run.iterations,
                ..OptimConfig::default()
            },
            schedule: Schedule::new(self.steps)?,
            guidance: self.guidance,
            injection: run.injection,
            seed: self.seed,
            ..EditConfig::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub spec: RunSpec,
    pub metrics: MetricsReport,
    /// Fraction of consecutive loss-trace pairs that did not increase.
    pub loss_nonincreasing: Option<f64>,
    pub outcomes: Vec<TaskOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub steps: usize,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub runs: BTreeMap<String, RunReport>,
    pub roundtrip: Vec<RoundTrip>,
}

/// Everything a bench produces. Timings are kept apart because they are the
/// only non-deterministic output.
pub struct BenchOutput {
    pub report: BenchReport,
    /// Mean seconds per edit (shared inversion included) for each run key.
    pub timings: BTreeMap<String, f64>,
    /// Edited image per (run key, task id).
    pub images: BTreeMap<(String, String), Tensor>,
}

struct TaskRun {
    key: String,
    outcome: TaskOutcome,
    trace: Vec<f32>,
    seconds: f64,
    image: Tensor,
}

fn run_task(params: &ModelParams, oracle: &Oracle, cfg: &BenchConfig, task: &EditTask, runs: &[&RunSpec]) -> Result<Vec<TaskRun>> {
    let req = task.request(params.config())?;
    let first = cfg.edit_config(runs[0])?;
    let inv = invert_request(params, &req, &first)?;
    runs.iter()
        .map(|run| {
            let ec = cfg.edit_config(run)?;
            let res = edit_inverted(params, &req, &ec, &inv)?;
            Ok(TaskRun {
                key: run.key(),
                outcome: outcome(oracle, task, &res)?,
                trace: res.loss_trace,
                seconds: res.times.total(),
                image: res.image,
            })
        })
        .collect()
}

/// Mean per-element MSE of invert→denoise under the source prompt.
pub fn roundtrip_mse(params: &ModelParams, tasks: &[EditTask], steps: usize, guidance: f32) -> Result<f64> {
    if tasks.is_empty() {
        return Err(BenchError::Input("round trip needs tasks".into()));
    }
    let sched = Schedule::new(steps)?;
    let cfg = params.config();
    let errs = tasks
        .par_iter()
        .map(|t| -> Result<f64> {
            let x = patchify(cfg, &t.image)?;
            let (z, _) = invert(params, &x, &t.src_prompt, sched, guidance, false)?;
            let back = denoise(params, &z, &t.src_prompt, sched, guidance, None)?;
            let sq: f64 = back.data().iter().zip(x.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            Ok(sq / x.numel() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

fn nonincreasing_fraction(traces: &[Vec<f32>]) -> Option<f64> {
    let (mut ok, mut total) = (0usize, 0usize);
    for t in traces {
        for w in t.windows(2) {
            total += 1;
            ok += (w[1] <= w[0]) as usize;
        }
    }
    (total > 0).then(|| ok as f64 / total as f64)
}

/// Runs the whole benchmark on a pool of `jobs` threads. Results do not
/// depend on `jobs`.
pub fn run_bench(params: &ModelParams, oracle: &Oracle, cfg: &BenchConfig, jobs: usize) -> Result<BenchOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| BenchError::Input(format!("thread pool: {e}")))?;
    pool.install(|| run_bench_inner(params, oracle, cfg))
}

fn run_bench_inner(params: &ModelParams, oracle: &Oracle, cfg: &BenchConfig) -> Result<BenchOutput> {
    let runs = cfg.runs();
    let mut per_run: BTreeMap<String, Vec<TaskRun>> = BTreeMap::new();
    let mut first_suite: Option<Vec<EditTask>> = None;
    for suite in SuiteKind::ALL {
        let mine: Vec<&RunSpec> = runs.iter().filter(|r| r.suite == suite).collect();
        if mine.is_empty() {
            continue;
        }
        let tasks = build_suite(suite, cfg.tasks_per_suite, Some(params), cfg.seed)?;
        let done = tasks
            .par_iter()
            .map(|t| run_task(params, oracle, cfg, t, &mine))
            .collect::<Result<Vec<_>>>()?;
        for task_runs in done {
            for tr in task_runs {
                per_run.entry(tr.key.clone()).or_default().push(tr);
            }
        }
        if first_suite.is_none() {
            first_suite = Some(tasks);
        }
    }

    let mut report_runs = BTreeMap::new();
    let mut timings = BTreeMap::new();
    let mut images = BTreeMap::new();
    for spec in &runs {
        let key = spec.key();
        let trs = per_run.remove(&key).unwrap_or_default();
        let outcomes: Vec<TaskOutcome> = trs.iter().map(|t| t.outcome.clone()).collect();
        let traces: Vec<Vec<f32>> = trs.iter().map(|t| t.trace.clone()).collect();
        timings.insert(key.clone(), trs.iter().map(|t| t.seconds).sum::<f64>() / trs.len().max(1) as f64);
        if cfg.save_images {
            for t in trs {
                images.insert((key.clone(), t.outcome.id.clone()), t.image);
            }
        }
        report_runs.insert(
            key,
            RunReport {
                spec: spec.clone(),
                metrics: aggregate(&outcomes)?,
                loss_nonincreasing: nonincreasing_fraction(&traces),
                outcomes,
            },
        );
    }

    let mut roundtrip = Vec::new();
    if let Some(tasks) = first_suite {
        let rt = &tasks[..cfg.roundtrip_tasks.min(tasks.len())];
        if !rt.is_empty() {
            for &steps in &cfg.roundtrip_steps {
                roundtrip.push(RoundTrip {
                    steps,
                    mse: roundtrip_mse(params, rt, steps, cfg.guidance)?,
                });
            }
        }
    }

    Ok(BenchOutput {
        report: BenchReport {
            config: cfg.clone(),
            runs: report_runs,
            roundtrip,
        },
        timings,
        images,
    })
}

/// `value` as a JSON tree whose `f32` leaves keep their shortest decimal
/// form (`0.01`, not `0.009999999776482582`).
pub fn json_value<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    // Going through text lets serde_json format f32 as f32 before widening.
    Ok(serde_json::from_str(&serde_json::to_string(value)?)?)
}

/// JSON with lexicographically sorted object keys and a trailing newline.
pub fn sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's Map is ordered by key unless `preserve_order` is enabled.
    let v = json_value(value)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// Aligned text summary of every run.
pub fn render_table(report: &BenchReport) -> String {
    let header = [
        "run", "n", "align", "success", "retain", "bg_mse", "src_pre", "src_post", "tgt_pre", "tgt_post", "tgt_up",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for (key, r) in &report.runs {
        let m = &r.metrics;
        rows.push(vec![
            key.clone(),
            m.n.to_string(),
            format!("{:.4}", m.alignment),
            format!("{:.3}", m.success_rate),
            format!("{:.3}", m.source_retention),
            format!("{:.3}", m.background_mse),
            format!("{:.5}", m.tendency.source_pre),
            format!("{:.5}", m.tendency.source_post),
            format!("{:.5}", m.tendency.target_pre),
            format!("{:.5}", m.tendency.target_post),
            format!("{:.3}", m.target_tendency_up),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).expect("writing to a String");
        if i == 0 {
            writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))).expect("String");
        }
    }
    if !report.roundtrip.is_empty() {
        writeln!(out).expect("String");
        for rt in &report.roundtrip {
            writeln!(out, "roundtrip T={:<3} mse={:.6}", rt.steps, rt.mse).expect("String");
        }
    }
    out
}

/// Writes `report.json`, `report.txt`, `timings.json` and, when present,
/// the edited images under `images/<run>/<task>.ppm`.
pub fn write_bench(dir: &Path, out: &BenchOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), sorted_json(&out.report)?)?;
    std::fs::write(dir.join("report.txt"), render_table(&out.report))?;
    std::fs::write(dir.join("timings.json"), sorted_json(&out.timings)?)?;
    for ((run, id), img) in &out.images {
        let sub = dir.join("images").join(run.replace(['/', '='], "_"));
        std::fs::create_dir_all(&sub)?;
        write_ppm(&sub.join(format!("{id}.ppm")), img)?;
    }
    Ok(())
}
