use lore_bench::bench::{run_bench, sorted_json, write_bench, BenchConfig};
use lore_bench::oracle::Oracle;
use lore_bench::suite::SuiteKind;
use lore_core::{ModelConfig, ModelParams};
use lore_tensor::Rng;

fn tiny_bench() -> BenchConfig {
    BenchConfig {
        tasks_per_suite: 2,
        steps: 2,
        iterations: 2,
        lr_sweep: vec![1e-3],
        iteration_sweep: vec![1],
        roundtrip_tasks: 2,
        roundtrip_steps: vec![1, 2],
        ..BenchConfig::default()
    }
}

fn model() -> ModelParams {
    let cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        layers: 1,
        time_embed_dim: 16,
        ..ModelConfig::default()
    };
    let mut p = ModelParams::init(cfg, &mut Rng::new(4)).unwrap();
    let mut rng = Rng::new(5);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.normal() * 0.2;
        }
    }
    p
}

#[test]
fn reports_do_not_depend_on_thread_count_and_rewrite_identically() {
    let params = model();
    let oracle = Oracle::init(&mut Rng::new(6));
    let cfg = tiny_bench();
    let a = run_bench(&params, &oracle, &cfg, 1).unwrap();
    let b = run_bench(&params, &oracle, &cfg, 3).unwrap();
    assert_eq!(sorted_json(&a.report).unwrap(), sorted_json(&b.report).unwrap());
    assert_eq!(a.images.len(), b.images.len());
    for (k, img) in &a.images {
        assert!(img.bit_eq(&b.images[k]), "{k:?}");
    }

    let runs = cfg.runs();
    assert_eq!(a.report.runs.len(), runs.len());
    for r in a.report.runs.values() {
        assert_eq!(r.metrics.n, 2);
        let bg = r.metrics.background_mse;
        assert!(bg.is_finite() && bg >= 0.0);
    }
    let e0 = &a.report.runs["pie-like/lr=0.01/E=0/inj"];
    assert!(e0.outcomes.iter().all(|o| o.tendencies.target_pre == o.tendencies.target_post));
    assert_eq!(a.report.roundtrip.len(), 2);
    assert!(a.report.runs.keys().any(|k| k.starts_with(SuiteKind::GapLike.name())));

    let dir = tempfile::tempdir().unwrap();
    let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
    write_bench(&d1, &a).unwrap();
    write_bench(&d2, &b).unwrap();
    for f in ["report.json", "report.txt"] {
        assert_eq!(std::fs::read(d1.join(f)).unwrap(), std::fs::read(d2.join(f)).unwrap(), "{f}");
    }
    let img = d1.join("images").join("pie-like_lr_0.01_E_2_inj").join("pie-like-0000.ppm");
    assert!(img.exists(), "{}", img.display());
}
