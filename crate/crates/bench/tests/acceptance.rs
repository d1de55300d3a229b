//! Acceptance checks on the shipped checkpoints. Prints one PASS/FAIL line
//! per criterion. Exits nonzero when a criterion fails that is not listed in
//! `KNOWN_RED`, or when a listed one starts passing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lore_bench::bench::{run_bench, write_bench, BenchConfig, BenchOutput, RunReport};
use lore_bench::oracle::Oracle;
use lore_bench::suite::{build_suite, SuiteKind};
use lore_bench::train::generation_accuracy;
use lore_core::edit::{denoise_with_injection, tendency_grad_check, OptimConfig};
use lore_core::flow::{denoise, invert, BranchInjection, Schedule, VelocityField};
use lore_core::model::patchify;
use lore_core::probe::{ProbeConfig, TokenMask};
use lore_core::ModelParams;
use lore_tensor::{op_cases, Rng, Tensor};

const OP_SEEDS: u64 = 100;
const OP_EPS: f32 = 1e-4;
const OP_TOL: f32 = 1e-4;
const TENDENCY_EPS: f32 = 1e-3;
const TENDENCY_TOL: f32 = 1e-3;
const TENDENCY_STRIDE: usize = 97;
const GRADCHECK_SECONDS: f64 = 60.0;

const GATE_SAMPLES: usize = 200;
const GATE_GUIDANCE: f32 = 2.0;
const GATE_STEPS: usize = 15;
const GATE_THRESHOLD: f64 = 0.90;

/// Largest accepted per-element round-trip MSE at `ROUNDTRIP_STEPS` (images
/// in [-1, 1]). The shipped checkpoint measures 0.0058; this leaves 1.7x.
const ROUNDTRIP_TOL: f64 = 0.01;
const ROUNDTRIP_STEPS: usize = 15;

const TENDENCY_UP_FRACTION: f64 = 0.90;
const IDENTITY_TASKS: usize = 20;
const INJECTION_FRACTION: f64 = 0.90;
const SUCCESS_GAIN: f64 = 0.10;
/// Alignment or background-MSE differences smaller than this are ties in the
/// sweep comparisons, so float noise cannot decide an ordering.
const TIE: f64 = 1e-3;

fn above(a: f64, b: f64) -> bool {
    a > b + TIE
}

fn at_least(a: f64, b: f64) -> bool {
    a >= b - TIE
}

/// Criteria the shipped toy model does not meet. They still print FAIL;
/// the README explains each one.
const KNOWN_RED: &[u32] = &[4, 6, 7, 8];

fn artifacts() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../artifacts")
}

struct Ledger {
    lines: Vec<(u32, bool, String)>,
}

impl Ledger {
    fn record(&mut self, n: u32, ok: bool, detail: String) {
        println!("[{}] criterion {n:>2}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.lines.push((n, ok, detail));
    }
}

fn criterion_1(params: &ModelParams) -> (bool, String) {
    let t0 = Instant::now();
    let mut worst: BTreeMap<&str, f32> = BTreeMap::new();
    for seed in 0..OP_SEEDS {
        for case in op_cases(seed) {
            let e = case.check(OP_EPS).expect("op gradient check runs");
            let w = worst.entry(case.name).or_insert(0.0);
            *w = w.max(e);
        }
    }
    let (op_name, op_err) = worst
        .iter()
        .fold(("none", 0.0f32), |acc, (&n, &e)| if e > acc.1 { (n, e) } else { acc });

    let cfg = *params.config();
    let task = &build_suite(SuiteKind::PieLike, 1, None, 0).expect("suite")[0];
    let req = task.request(&cfg).expect("request");
    let z0: Tensor = Rng::new(1).normal_tensor(vec![cfg.image_tokens(), cfg.token_dim()], 1.0);
    let coords: Vec<usize> = (0..z0.numel()).step_by(TENDENCY_STRIDE).collect();
    let tend_err = tendency_grad_check(
        params,
        &z0,
        &req.tgt_prompt,
        req.target_token,
        &req.mask,
        &OptimConfig::default().kernel,
        &ProbeConfig::default(),
        &coords,
        TENDENCY_EPS,
    )
    .expect("tendency gradient check runs");
    let secs = t0.elapsed().as_secs_f64();
    let ok = op_err <= OP_TOL && tend_err <= TENDENCY_TOL && secs < GRADCHECK_SECONDS;
    (
        ok,
        format!(
            "ops over {OP_SEEDS} seeds max rel err {op_err:.2e} ({op_name}, tol {OP_TOL:.0e}); tendency graph {tend_err:.2e} on {} coords (tol {TENDENCY_TOL:.0e}); {secs:.1}s (limit {GRADCHECK_SECONDS}s)",
            coords.len()
        ),
    )
}

fn criterion_2(params: &ModelParams, oracle: &Oracle) -> (bool, String) {
    let sched = Schedule::new(GATE_STEPS).expect("schedule");
    let rep = generation_accuracy(params, oracle, GATE_SAMPLES, sched, GATE_GUIDANCE, 0).expect("gate runs");
    (
        rep.accuracy >= GATE_THRESHOLD,
        format!(
            "generation accuracy {:.3} ({}/{} objects in {} samples, g={GATE_GUIDANCE}); threshold {GATE_THRESHOLD}",
            rep.accuracy, rep.correct, rep.objects, rep.samples
        ),
    )
}

fn criterion_5(params: &ModelParams) -> (bool, String) {
    let cfg = *params.config();
    let sched = Schedule::new(15).expect("schedule");
    let g = 2.0;
    let tasks = build_suite(SuiteKind::PieLike, IDENTITY_TASKS, None, 0).expect("suite");
    let full = TokenMask::full(cfg.grid(), true);
    let none = vec![false; cfg.image_tokens()];
    let (mut ones_ok, mut zeros_ok) = (0, 0);
    for task in &tasks {
        let x = patchify(&cfg, &task.image).expect("patchify");
        let (z, cache) = invert(params, &x, &task.src_prompt, sched, g, true).expect("invert");
        let cache = cache.expect("values recorded");
        let plain = denoise(params, &z, &task.tgt_prompt, sched, g, None).expect("denoise");
        let injected =
            denoise_with_injection(params, &z, &task.tgt_prompt, &cache, &full, sched, g, None).expect("denoise");
        ones_ok += plain.bit_eq(&injected) as usize;

        let mut zz = z.clone();
        let mut same = true;
        for i in 0..sched.steps {
            let k = cache.denoise_index(i);
            let inj = BranchInjection {
                cond: cache.cond(k),
                null: cache.null(k),
                keep: &none,
            };
            let (v, vals) = params
                .guided(&zz, &task.tgt_prompt, sched.denoise_t(i), g, Some(inj), true)
                .expect("guided step");
            for l in 0..cfg.layers {
                same &= vals.cond[l].bit_eq(&cache.cond(k)[l]) && vals.null[l].bit_eq(&cache.null(k)[l]);
            }
            zz = zz.zip_with(&v, |a, b| a - sched.tau() * b).expect("euler step");
        }
        zeros_ok += same as usize;
    }
    let n = tasks.len();
    (
        ones_ok == n && zeros_ok == n,
        format!("all-ones mask matches plain denoise bitwise on {ones_ok}/{n}; all-zeros mask reproduces cached values on {zeros_ok}/{n}"),
    )
}

fn run<'a>(out: &'a BenchOutput, key: &str) -> &'a RunReport {
    out.report.runs.get(key).unwrap_or_else(|| panic!("missing run {key}"))
}

fn criterion_3(out: &BenchOutput) -> (bool, String) {
    let rt = &out.report.roundtrip;
    let at = rt.iter().find(|r| r.steps == ROUNDTRIP_STEPS).map(|r| r.mse);
    let below = at.is_some_and(|m| m < ROUNDTRIP_TOL);
    let decreasing = rt.windows(2).all(|w| w[1].mse < w[0].mse);
    let parts: Vec<String> = rt.iter().map(|r| format!("T={} {:.5}", r.steps, r.mse)).collect();
    (
        below && decreasing && rt.len() == 3,
        format!(
            "round-trip MSE {} (T={ROUNDTRIP_STEPS} below {ROUNDTRIP_TOL}: {below}, strictly decreasing: {decreasing})",
            parts.join(", ")
        ),
    )
}

fn criterion_4(out: &BenchOutput) -> (bool, String) {
    let r = run(out, "pie-like/lr=0.01/E=10/inj");
    let t = &r.metrics.tendency;
    let a = t.source_pre > t.target_pre;
    let up = r.metrics.target_tendency_up;
    let b = up >= TENDENCY_UP_FRACTION && t.target_post > t.source_post;
    (
        a && b,
        format!(
            "(a) {} src {:.5} vs tgt {:.5} on inverted noise; (b) {} target rose in {:.1}% (need {:.0}%), post tgt {:.5} vs src {:.5}",
            if a { "ok" } else { "no" },
            t.source_pre,
            t.target_pre,
            if b { "ok" } else { "no" },
            100.0 * up,
            100.0 * TENDENCY_UP_FRACTION,
            t.target_post,
            t.source_post
        ),
    )
}

fn criterion_6(out: &BenchOutput) -> (bool, String) {
    let inj = run(out, "pie-like/lr=0.01/E=10/inj");
    let raw = run(out, "pie-like/lr=0.01/E=10/no-inj");
    let n = inj.outcomes.len();
    let better = inj
        .outcomes
        .iter()
        .zip(&raw.outcomes)
        .filter(|(a, b)| {
            assert_eq!(a.id, b.id);
            a.background_mse <= b.background_mse
        })
        .count();
    let frac = better as f64 / n.max(1) as f64;
    let (mi, mr) = (inj.metrics.background_mse, raw.metrics.background_mse);
    (
        frac >= INJECTION_FRACTION && mi < mr,
        format!("injection bg MSE <= plain on {better}/{n} tasks (need {:.0}%); mean {mi:.3} vs {mr:.3}", 100.0 * INJECTION_FRACTION),
    )
}

fn criterion_7(out: &BenchOutput) -> (bool, String) {
    let gain = |suite: &str| {
        run(out, &format!("{suite}/lr=0.01/E=10/inj")).metrics.success_rate
            - run(out, &format!("{suite}/lr=0.01/E=0/inj")).metrics.success_rate
    };
    let (pie, gap, smart) = (gain("pie-like"), gain("gap-like"), gain("smart-like"));
    (
        pie >= SUCCESS_GAIN && gap >= pie,
        format!(
            "success gain over E=0: pie-like {:+.1}pp (need +{:.0}pp), gap-like {:+.1}pp (need >= pie-like), smart-like {:+.1}pp",
            100.0 * pie,
            100.0 * SUCCESS_GAIN,
            100.0 * gap,
            100.0 * smart
        ),
    )
}

fn criterion_8(out: &BenchOutput, cfg: &BenchConfig) -> (bool, String) {
    let rows: Vec<(f32, f64, f64)> = cfg
        .lr_sweep
        .iter()
        .map(|&lr| {
            let m = &run(out, &format!("gap-like/lr={lr}/E=10/inj")).metrics;
            (lr, m.alignment, m.background_mse)
        })
        .collect();
    let n = rows.len();
    let peak = (0..n).fold(0, |best, i| if rows[i].1 > rows[best].1 { i } else { best });
    let interior = peak > 0 && peak + 1 < n && above(rows[peak].1, rows[0].1) && above(rows[peak].1, rows[n - 1].1);
    let last = rows[n - 1];
    let worst_align = rows[..n - 1].iter().all(|r| above(r.1, last.1));
    let worst_bg = rows[..n - 1].iter().all(|r| above(last.2, r.2));
    let parts: Vec<String> = rows.iter().map(|r| format!("lr={} align {:.6} bg {:.4}", r.0, r.1, r.2)).collect();
    (
        interior && worst_align && worst_bg,
        format!(
            "{}; interior peak {interior}, largest rate worst on alignment {worst_align} and bg {worst_bg} (ties within {TIE:.0e})",
            parts.join(", ")
        ),
    )
}

fn criterion_9(out: &BenchOutput, cfg: &BenchConfig) -> (bool, String) {
    let m = |e: usize| &run(out, &format!("gap-like/lr=0.01/E={e}/inj")).metrics;
    let time = |e: usize| out.timings[&format!("gap-like/lr=0.01/E={e}/inj")];
    let align_ok = at_least(m(10).alignment, m(2).alignment) && at_least(m(2).alignment, m(0).alignment);
    let bg_ok = at_least(m(20).background_mse, m(10).background_mse);
    let times: Vec<f64> = cfg.iteration_sweep.iter().map(|&e| time(e)).collect();
    let time_ok = times.windows(2).all(|w| w[1] > w[0]);
    let ratio = time(5) / time(0);
    (
        align_ok && bg_ok && time_ok,
        format!(
            "align E0 {:.6} E2 {:.6} E10 {:.6} (ordered within {TIE:.0e}: {align_ok}); bg E10 {:.3} E20 {:.3} (E20 not better {bg_ok}); time monotone {time_ok}; time E5/E0 = {ratio:.2}",
            m(0).alignment,
            m(2).alignment,
            m(10).alignment,
            m(10).background_mse,
            m(20).background_mse
        ),
    )
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let mut files = 0;
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(a.join(&rel))
            .map_err(|e| e.to_string())?
            .map(|e| e.expect("dir entry").file_name())
            .collect();
        entries.sort();
        for name in entries {
            let r = rel.join(&name);
            if a.join(&r).is_dir() {
                stack.push(r);
            } else if r != Path::new("timings.json") {
                let (x, y) = (std::fs::read(a.join(&r)), std::fs::read(b.join(&r)));
                match (x, y) {
                    (Ok(x), Ok(y)) if x == y => files += 1,
                    _ => return Err(format!("{} differs", r.display())),
                }
            }
        }
    }
    Ok(files)
}

fn main() {
    let dir = artifacts();
    let params = ModelParams::load(&dir.join("model.lore")).expect("artifacts/model.lore");
    let oracle = Oracle::load(&dir.join("oracle.loro")).expect("artifacts/oracle.loro");
    let mut ledger = Ledger { lines: Vec::new() };
    let t0 = Instant::now();

    let (ok, d) = criterion_1(&params);
    ledger.record(1, ok, d);
    let (ok, d) = criterion_2(&params, &oracle);
    ledger.record(2, ok, d);

    let cfg = BenchConfig::default();
    let first = run_bench(&params, &oracle, &cfg, 1).expect("bench run");
    let (ok, d) = criterion_3(&first);
    ledger.record(3, ok, d);
    let (ok, d) = criterion_4(&first);
    ledger.record(4, ok, d);
    let (ok, d) = criterion_5(&params);
    ledger.record(5, ok, d);
    let (ok, d) = criterion_6(&first);
    ledger.record(6, ok, d);
    let (ok, d) = criterion_7(&first);
    ledger.record(7, ok, d);
    let (ok, d) = criterion_8(&first, &cfg);
    ledger.record(8, ok, d);
    let (ok, d) = criterion_9(&first, &cfg);
    ledger.record(9, ok, d);

    let second = run_bench(&params, &oracle, &cfg, 2).expect("bench run");
    let tmp = tempfile::tempdir().expect("temp dir");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    write_bench(&a, &first).expect("write bench");
    write_bench(&b, &second).expect("write bench");
    let (ok, d) = match same_tree(&a, &b) {
        Ok(n) => (true, format!("two bench runs (1 and 2 threads) wrote {n} byte-identical files")),
        Err(e) => (false, format!("bench runs differ: {e}")),
    };
    ledger.record(10, ok, d);

    let passed = ledger.lines.iter().filter(|l| l.1).count();
    println!("{passed}/{} criteria pass ({:.0}s)", ledger.lines.len(), t0.elapsed().as_secs_f64());
    let red: Vec<u32> = ledger.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    let unexpected: Vec<u32> = red.iter().copied().filter(|n| !KNOWN_RED.contains(n)).collect();
    let fixed: Vec<u32> = KNOWN_RED.iter().copied().filter(|n| !red.contains(n)).collect();
    if !red.is_empty() {
        println!("failing: {red:?} (known red: {KNOWN_RED:?})");
    }
    if !fixed.is_empty() {
        println!("listed as known red but passing: {fixed:?}");
    }
    if !unexpected.is_empty() || !fixed.is_empty() {
        std::process::exit(1);
    }
}
