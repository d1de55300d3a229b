use lore_core::flow::{combine_guidance, Schedule};
use lore_core::model::{patchify, unpatchify};
use lore_core::probe::{tendency, GaussianKernel, SpatialAttnMap, TokenMask};
use lore_core::prompt::{Background, Cell, Class};
use lore_core::{ModelConfig, ModelParams, PromptSeq};
use lore_tensor::{Rng, Tensor};
use proptest::prelude::*;

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        time_embed_dim: 8,
        ..ModelConfig::default()
    }
}

fn scene_prompt() -> impl Strategy<Value = PromptSeq> {
    (0usize..3, proptest::sample::subsequence(vec![0usize, 1, 2, 3], 0..=3), proptest::collection::vec(0usize..36, 3))
        .prop_map(|(bg, cells, classes)| {
            let objs: Vec<(Class, Cell)> = cells
                .iter()
                .zip(&classes)
                .map(|(&c, &k)| (Class::from_index(k).unwrap(), Cell::ALL[c]))
                .collect();
            PromptSeq::scene(Background::ALL[bg], &objs)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prompts_print_and_parse_back(p in scene_prompt()) {
        prop_assert_eq!(PromptSeq::parse(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn patchify_inverts_unpatchify(seed in any::<u64>()) {
        let cfg = ModelConfig::default();
        let img: Tensor = Rng::new(seed).uniform_tensor(vec![32, 32, 3], -1.0, 1.0);
        let tokens = patchify(&cfg, &img).unwrap();
        prop_assert_eq!(tokens.shape(), &[64, 48]);
        prop_assert!(unpatchify(&cfg, &tokens).unwrap().bit_eq(&img));
    }

    #[test]
    fn guidance_is_affine_in_the_scale(seed in any::<u64>(), g in -4.0f32..8.0) {
        let mut rng = Rng::new(seed);
        let c: Tensor = rng.normal_tensor(vec![5, 3], 1.0);
        let n: Tensor = rng.normal_tensor(vec![5, 3], 1.0);
        let out = combine_guidance(&c, &n, g).unwrap();
        for ((o, a), b) in out.data().iter().zip(c.data()).zip(n.data()) {
            let want = g * a + (1.0 - g) * b;
            prop_assert!((o - want).abs() <= 1e-5 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn denoise_and_inversion_times_mirror(steps in 1usize..64) {
        let s = Schedule::new(steps).unwrap();
        for i in 0..steps {
            let a = s.denoise_t(i);
            let b = s.invert_t(steps - i);
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn smoothing_operator_rows_are_stochastic(half in 0usize..4, sigma in 0.2f32..4.0, grid in 1usize..10) {
        let k = GaussianKernel { size: 2 * half + 1, sigma };
        let w = k.weights().unwrap();
        prop_assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        let op = k.operator(grid).unwrap();
        for row in op.data().chunks(grid * grid) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn dilation_grows_and_tendency_is_a_mean(cells in proptest::collection::vec(any::<bool>(), 64), vals in proptest::collection::vec(0.0f32..1.0, 64)) {
        let m = TokenMask { grid: 8, cells };
        let d = m.dilate();
        prop_assert!(m.cells.iter().zip(&d.cells).all(|(&a, &b)| !a || b));
        let map = SpatialAttnMap { grid: 8, values: vals.clone() };
        if m.is_empty() {
            prop_assert!(tendency(&map, &m).is_err());
        } else {
            let t = tendency(&map, &m).unwrap();
            let lo = m.indices().iter().map(|&i| vals[i]).fold(f32::MAX, f32::min);
            let hi = m.indices().iter().map(|&i| vals[i]).fold(f32::MIN, f32::max);
            prop_assert!(t >= lo - 1e-6 && t <= hi + 1e-6);
        }
    }

    #[test]
    fn pixel_masks_survive_the_token_round_trip(cells in proptest::collection::vec(any::<bool>(), 64)) {
        let m = TokenMask { grid: 8, cells };
        let back = TokenMask::from_pixels(&m.to_pixels(4), 32, 4).unwrap();
        prop_assert_eq!(back, m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_and_truncations_fail(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let p = ModelParams::init(small(), &mut Rng::new(seed)).unwrap();
        let bytes = p.to_bytes();
        prop_assert_eq!(ModelParams::from_bytes(&bytes).unwrap(), p);
        let n = (bytes.len() as f64 * cut) as usize;
        prop_assert!(ModelParams::from_bytes(&bytes[..n]).is_err());
    }
}
