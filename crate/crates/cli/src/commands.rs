//! One function per subcommand. Each writes its artifacts under `cfg.out`
//! and returns a JSON summary that is also saved there.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use lore_bench::bench::{json_value, run_bench, sorted_json, write_bench};
use lore_bench::metrics::background_mse;
use lore_bench::oracle::Oracle;
use lore_bench::ppm::{heatmap_overlay, mask_from_image, read_ppm, write_ppm};
use lore_bench::suite::{build_suite, SuiteKind};
use lore_bench::tasks::write_tasks;
use lore_bench::train::{generation_accuracy, Trainer};
use lore_core::edit::{edit_inverted, invert_request, map_at, optimize_latent, tendency_grad_check, EditRequest};
use lore_core::flow::{denoise, invert, sample, Schedule};
use lore_core::model::{patchify, unpatchify};
use lore_core::probe::{tendency, TokenMask};
use lore_core::{ModelConfig, ModelParams, PromptSeq};
use lore_tensor::{op_cases, write_blob, Rng, Tensor};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, Subcommand, TrainTarget};
use crate::error::{Numerical, Usage};
use crate::log::log;

/// JSON for values holding `f32`, printed in their shortest form.
fn tv<T: Serialize>(v: &T) -> Value {
    json_value(v).unwrap_or(Value::Null)
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Usage(format!("missing required flag --{flag}")).into())
}

fn load_model(path: &Path) -> Result<ModelParams> {
    ModelParams::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_oracle(path: &Path) -> Result<Oracle> {
    Oracle::load(path).with_context(|| format!("loading oracle {}", path.display()))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, sorted_json(value)?).with_context(|| format!("writing {}", path.display()))
}

fn prompt(text: &str) -> Result<PromptSeq> {
    PromptSeq::parse(text).map_err(|e| Usage(e.to_string()).into())
}

fn read_image(path: &Path, mc: &ModelConfig) -> Result<Tensor> {
    let img = read_ppm(path).with_context(|| format!("reading image {}", path.display()))?;
    if img.shape() != [mc.image_size, mc.image_size, 3] {
        bail!(Usage(format!(
            "image {} is {:?}, the model expects {}x{}",
            path.display(),
            img.shape(),
            mc.image_size,
            mc.image_size
        )));
    }
    Ok(img)
}

/// Runs the configured subcommand and returns its summary.
pub fn execute(cfg: &RunConfig) -> Result<Value> {
    let out = &cfg.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(out, "config.json", cfg)?;
    let summary = match cfg.subcommand {
        Subcommand::Train => train(cfg)?,
        Subcommand::Sample => sample_cmd(cfg)?,
        Subcommand::Invert => invert_cmd(cfg)?,
        Subcommand::Edit => edit_cmd(cfg)?,
        Subcommand::Tendency => tendency_cmd(cfg)?,
        Subcommand::Bench => bench(cfg)?,
        Subcommand::Gradcheck => gradcheck(cfg)?,
        Subcommand::DatasetGen => dataset_gen(cfg)?,
    };
    Ok(summary)
}

fn train(cfg: &RunConfig) -> Result<Value> {
    let t = &cfg.train;
    match t.target {
        TrainTarget::Oracle => {
            let t0 = Instant::now();
            let (oracle, report) = Oracle::train(&t.oracle)?;
            let path = cfg.out.join("oracle.loro");
            oracle.save(&path).with_context(|| format!("writing {}", path.display()))?;
            log("train", "oracle", json!({"seconds": t0.elapsed().as_secs_f64(), "report": tv(&report)}));
            let summary = json!({"seed": cfg.seed, "target": "oracle", "report": tv(&report), "oracle": path});
            write_json(&cfg.out, "oracle_report.json", &summary)?;
            Ok(summary)
        }
        TrainTarget::Model => {
            let t0 = Instant::now();
            let mut trainer = Trainer::new(ModelConfig::default(), t.plan.clone())?;
            let mut window = Vec::new();
            let mut curve = String::new();
            let every = t.log_every.max(1);
            while !trainer.done() {
                window.push(trainer.advance()? as f64);
                let step = trainer.step();
                if step % every == 0 || trainer.done() {
                    let loss = window.iter().sum::<f64>() / window.len() as f64;
                    window.clear();
                    let line = json!({"step": step, "loss": loss});
                    curve.push_str(&format!("{line}\n"));
                    log("train", "step", json!({"step": step, "loss": loss, "seconds": t0.elapsed().as_secs_f64()}));
                }
            }
            let params = trainer.finish();
            let path = cfg.out.join("model.lore");
            params.save(&path).with_context(|| format!("writing {}", path.display()))?;
            std::fs::write(cfg.out.join("train_log.jsonl"), curve)?;
            let mut summary = json!({"seed": cfg.seed, "target": "model", "steps": t.plan.steps, "model": path});
            if t.gate_samples > 0 {
                let oracle = load_oracle(&cfg.oracle)?;
                let t1 = Instant::now();
                let sched = Schedule::new(cfg.schedule.steps)?;
                let rep = generation_accuracy(&params, &oracle, t.gate_samples, sched, cfg.schedule.guidance, cfg.seed)?;
                let passed = rep.accuracy >= t.gate_threshold;
                log("train", "gate", json!({"seconds": t1.elapsed().as_secs_f64(), "accuracy": rep.accuracy, "passed": passed}));
                summary["gate"] = json!({"report": tv(&rep), "threshold": t.gate_threshold, "passed": passed});
            }
            write_json(&cfg.out, "train_report.json", &summary)?;
            Ok(summary)
        }
    }
}

fn sample_cmd(cfg: &RunConfig) -> Result<Value> {
    let params = load_model(&cfg.model)?;
    let mc = *params.config();
    let p = prompt(required(&cfg.inputs.src_prompt, "prompt")?)?;
    let sched = Schedule::new(cfg.schedule.steps)?;
    let root = Rng::new(cfg.seed);
    let mut files = Vec::new();
    for i in 0..cfg.inputs.count {
        let t0 = Instant::now();
        let z1: Tensor = root.derive(i as u64).normal_tensor(vec![mc.image_tokens(), mc.token_dim()], 1.0);
        let x = sample(&params, &z1, &p, sched, cfg.schedule.guidance)?;
        let name = format!("sample_{i:03}.ppm");
        write_ppm(&cfg.out.join(&name), &unpatchify(&mc, &x)?)?;
        log("sample", "sample", json!({"index": i, "seconds": t0.elapsed().as_secs_f64()}));
        files.push(name);
    }
    let summary = json!({"seed": cfg.seed, "prompt": p.to_string(), "files": files});
    write_json(&cfg.out, "sample.json", &summary)?;
    Ok(summary)
}

fn invert_cmd(cfg: &RunConfig) -> Result<Value> {
    let params = load_model(&cfg.model)?;
    let mc = *params.config();
    let image = read_image(required(&cfg.inputs.image, "image")?, &mc)?;
    let p = prompt(required(&cfg.inputs.src_prompt, "prompt")?)?;
    let sched = Schedule::new(cfg.schedule.steps)?;
    let g = cfg.schedule.guidance;
    let x = patchify(&mc, &image)?;
    let t0 = Instant::now();
    let (z, _) = invert(&params, &x, &p, sched, g, false)?;
    log("invert", "invert", json!({"seconds": t0.elapsed().as_secs_f64()}));
    let t1 = Instant::now();
    let back = denoise(&params, &z, &p, sched, g, None)?;
    log("invert", "reconstruct", json!({"seconds": t1.elapsed().as_secs_f64()}));
    let mse = back.data().iter().zip(x.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / x.numel() as f64;
    let mut f = std::fs::File::create(cfg.out.join("latent.lort"))?;
    write_blob(&mut f, &z)?;
    write_ppm(&cfg.out.join("reconstruction.ppm"), &unpatchify(&mc, &back)?)?;
    let summary = json!({"seed": cfg.seed, "roundtrip_mse": mse, "latent": "latent.lort", "reconstruction": "reconstruction.ppm"});
    write_json(&cfg.out, "invert.json", &summary)?;
    Ok(summary)
}

/// Image, pixel mask and request assembled from the edit inputs.
struct Prepared {
    request: EditRequest,
    pixels: Vec<bool>,
}

fn prepare(cfg: &RunConfig, params: &ModelParams) -> Result<Prepared> {
    let mc = params.config();
    let i = &cfg.inputs;
    let image = read_image(required(&i.image, "image")?, mc)?;
    let mask_img = read_image(required(&i.mask, "mask")?, mc)?;
    let pixels = mask_from_image(&mask_img);
    let mask = TokenMask::from_pixels(&pixels, mc.image_size, mc.patch)?;
    if mask.is_empty() {
        bail!(Usage("mask is empty".into()));
    }
    let src = prompt(required(&i.src_prompt, "src-prompt")?)?;
    let tgt = prompt(required(&i.tgt_prompt, "tgt-prompt")?)?;
    let word = required(&i.target_word, "target-word")?;
    let target_token = tgt.locate(word, Some(&src)).map_err(|e| Usage(e.to_string()))?;
    let source_token = match &i.source_word {
        Some(w) => src.locate(w, Some(&tgt)).map_err(|e| Usage(e.to_string()))?,
        None => target_token,
    };
    if source_token >= src.len() {
        bail!(Usage(format!("source prompt has no slot {source_token}; pass --source-word")));
    }
    Ok(Prepared {
        request: EditRequest {
            image,
            mask,
            src_prompt: src,
            tgt_prompt: tgt,
            target_token,
            source_token,
        },
        pixels,
    })
}

fn edit_cmd(cfg: &RunConfig) -> Result<Value> {
    let params = load_model(&cfg.model)?;
    let prep = prepare(cfg, &params)?;
    let ec = cfg.edit_config()?;
    let inv = invert_request(&params, &prep.request, &ec)?;
    log("edit", "invert", json!({"seconds": inv.seconds}));
    let res = edit_inverted(&params, &prep.request, &ec, &inv)?;
    log("edit", "optimize", json!({"seconds": res.times.optimize_s, "loss_trace": tv(&res.loss_trace)}));
    log("edit", "denoise", json!({"seconds": res.times.denoise_s}));
    write_ppm(&cfg.out.join("edited.ppm"), &res.image)?;
    let mut f = std::fs::File::create(cfg.out.join("latent.lort"))?;
    write_blob(&mut f, &res.latent)?;
    let bg = background_mse(&res.image, &prep.request.image, &prep.pixels)?;
    let summary = json!({
        "seed": cfg.seed,
        "target_token": prep.request.target_token,
        "source_token": prep.request.source_token,
        "loss_trace": tv(&res.loss_trace),
        "tendencies": tv(&res.tendencies),
        "background_mse": tv(&bg),
        "image": "edited.ppm",
    });
    write_json(&cfg.out, "edit.json", &summary)?;
    Ok(summary)
}

fn tendency_cmd(cfg: &RunConfig) -> Result<Value> {
    let params = load_model(&cfg.model)?;
    let prep = prepare(cfg, &params)?;
    let req = &prep.request;
    let ec = cfg.edit_config()?;
    let inv = invert_request(&params, req, &ec)?;
    log("tendency", "invert", json!({"seconds": inv.seconds}));
    let t0 = Instant::now();
    let mut rng = Rng::new(cfg.seed);
    let source = Some((&req.src_prompt, req.source_token));
    let (z, trace) = optimize_latent(
        &params,
        &inv.latent,
        &req.tgt_prompt,
        req.target_token,
        source,
        &req.mask,
        &cfg.optim,
        &cfg.probe,
        &mut rng,
    )?;
    log("tendency", "optimize", json!({"seconds": t0.elapsed().as_secs_f64()}));
    let word = |p: &PromptSeq, tok: usize| p.ids().get(tok).and_then(|&i| lore_core::prompt::word_of(i)).unwrap_or("");
    let concepts = [
        ("source", &req.src_prompt, req.source_token),
        ("target", &req.tgt_prompt, req.target_token),
    ];
    let noises = [("inverted", &inv.latent), ("optimized", &z)];
    let mut tend = BTreeMap::new();
    let mut table = format!("{:<10} {:>12} {:>12}\n", "noise", "source %", "target %");
    for (noise, latent) in noises {
        table += &format!("{noise:<10}");
        for (concept, prompt, tok) in concepts {
            let map = map_at(&params, latent, prompt, tok, &cfg.probe)?;
            let t = tendency(&map, &req.mask)?;
            table += &format!(" {:>12.3}", 100.0 * t);
            tend.insert(format!("{concept}_{}", if noise == "inverted" { "pre" } else { "post" }), t);
            let heat = heatmap_overlay(&req.image, map.grid, &map.values)?;
            write_ppm(&cfg.out.join(format!("heat_{noise}_{concept}.ppm")), &heat)?;
        }
        table += "\n";
    }
    std::fs::write(cfg.out.join("tendency.txt"), &table)?;
    eprint!("{table}");
    let summary = json!({
        "seed": cfg.seed,
        "iterations": cfg.optim.iterations,
        "lr": tv(&cfg.optim.lr),
        "loss_trace": tv(&trace),
        "source_word": word(&req.src_prompt, req.source_token),
        "target_word": word(&req.tgt_prompt, req.target_token),
        "source_pre": tv(&tend["source_pre"]),
        "target_pre": tv(&tend["target_pre"]),
        "source_post": tv(&tend["source_post"]),
        "target_post": tv(&tend["target_post"]),
    });
    write_json(&cfg.out, "tendency.json", &summary)?;
    Ok(summary)
}

fn bench(cfg: &RunConfig) -> Result<Value> {
    let params = load_model(&cfg.model)?;
    let oracle = load_oracle(&cfg.oracle)?;
    let t0 = Instant::now();
    let out = run_bench(&params, &oracle, &cfg.bench, cfg.jobs)?;
    log("bench", "run", json!({"seconds": t0.elapsed().as_secs_f64(), "jobs": cfg.jobs}));
    write_bench(&cfg.out, &out)?;
    let success: BTreeMap<&str, f64> = out
        .report
        .runs
        .iter()
        .map(|(k, r)| (k.as_str(), r.metrics.success_rate))
        .collect();
    Ok(json!({"seed": cfg.seed, "report": "report.json", "success_rate": success}))
}

fn gradcheck(cfg: &RunConfig) -> Result<Value> {
    let g = &cfg.gradcheck;
    let t0 = Instant::now();
    let mut ops: BTreeMap<&'static str, f32> = BTreeMap::new();
    for s in 0..g.seeds as u64 {
        for case in op_cases(cfg.seed.wrapping_add(s)) {
            let e = case.check(g.eps)?;
            let w = ops.entry(case.name).or_insert(0.0);
            *w = w.max(e);
        }
    }
    let max_rel_err = ops.values().fold(0.0f32, |a, &b| a.max(b));
    log("gradcheck", "ops", json!({"seconds": t0.elapsed().as_secs_f64(), "max_rel_err": tv(&max_rel_err)}));
    let mut summary = json!({
        "seed": cfg.seed,
        "seeds": g.seeds,
        "eps": tv(&g.eps),
        "threshold": tv(&g.threshold),
        "ops": tv(&ops),
        "max_rel_err": tv(&max_rel_err),
    });
    let mut failures = Vec::new();
    if !(max_rel_err < g.threshold) {
        let worst: Vec<_> = ops.iter().filter(|(_, &e)| !(e < g.threshold)).collect();
        failures.push(format!("ops over threshold {}: {worst:?}", g.threshold));
    }
    if g.tendency {
        let t1 = Instant::now();
        let err = tendency_check(cfg)?;
        log("gradcheck", "tendency", json!({"seconds": t1.elapsed().as_secs_f64(), "rel_err": tv(&err)}));
        summary["tendency"] = json!({"rel_err": tv(&err), "threshold": tv(&g.tendency_threshold), "stride": g.tendency_stride});
        if !(err < g.tendency_threshold) {
            failures.push(format!("tendency graph error {err} over {}", g.tendency_threshold));
        }
    }
    write_json(&cfg.out, "gradcheck.json", &summary)?;
    if !failures.is_empty() {
        bail!(Numerical(failures.join("; ")));
    }
    Ok(summary)
}

/// Tendency-loss gradient check on a seeded scene and random latent.
fn tendency_check(cfg: &RunConfig) -> Result<f32> {
    let params = load_model(&cfg.model)?;
    let mc = *params.config();
    let tasks = build_suite(SuiteKind::PieLike, 1, None, cfg.seed)?;
    let req = tasks[0].request(&mc)?;
    let z0: Tensor = Rng::new(cfg.seed).derive(7).normal_tensor(vec![mc.image_tokens(), mc.token_dim()], 1.0);
    let coords: Vec<usize> = (0..z0.numel()).step_by(cfg.gradcheck.tendency_stride).collect();
    Ok(tendency_grad_check(
        &params,
        &z0,
        &req.tgt_prompt,
        req.target_token,
        &req.mask,
        &cfg.optim.kernel,
        &cfg.probe,
        &coords,
        cfg.gradcheck.tendency_eps,
    )?)
}

fn dataset_gen(cfg: &RunConfig) -> Result<Value> {
    let d = &cfg.dataset;
    let params = match d.suite {
        SuiteKind::GapLike => Some(load_model(&cfg.model)?),
        _ => None,
    };
    let t0 = Instant::now();
    let tasks = build_suite(d.suite, d.tasks, params.as_ref(), cfg.seed)?;
    let file: PathBuf = write_tasks(&cfg.out, &tasks)?;
    log("dataset-gen", "write", json!({"seconds": t0.elapsed().as_secs_f64(), "tasks": tasks.len()}));
    let summary = json!({
        "seed": cfg.seed,
        "suite": d.suite,
        "tasks": tasks.len(),
        "file": file.file_name().map(|f| f.to_string_lossy().into_owned()),
    });
    write_json(&cfg.out, "dataset.json", &summary)?;
    Ok(summary)
}
