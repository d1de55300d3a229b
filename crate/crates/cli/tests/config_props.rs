use lore_cli::config::{RunConfig, Subcommand};
use proptest::prelude::*;

const SUBS: [Subcommand; 8] = [
    Subcommand::Train,
    Subcommand::Sample,
    Subcommand::Invert,
    Subcommand::Edit,
    Subcommand::Tendency,
    Subcommand::Bench,
    Subcommand::Gradcheck,
    Subcommand::DatasetGen,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dumped_configs_reload_to_the_same_bytes(
        sub in 0usize..8,
        seed in any::<u64>(),
        lr in 1e-6f32..10.0,
        iters in 0usize..100,
        steps in 1usize..200,
        guidance in -5.0f32..10.0,
        jobs in 1usize..64,
        renoise in any::<bool>(),
        word in proptest::option::of("[a-z-]{1,12}"),
    ) {
        let mut cfg = RunConfig::new(SUBS[sub]);
        cfg.seed = seed;
        cfg.optim.lr = lr;
        cfg.optim.iterations = iters;
        cfg.optim.renoise = renoise;
        cfg.schedule.steps = steps;
        cfg.schedule.guidance = guidance;
        cfg.jobs = jobs;
        cfg.inputs.target_word = word;
        cfg.sync();
        let text = cfg.to_json().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn config_parser_never_panics(s in ".{0,300}") {
        let _ = RunConfig::from_json(&s);
    }
}
