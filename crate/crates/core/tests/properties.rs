mod common;

use alacarte_core::composition::{apt_predict, PoolingMode};
use alacarte_core::prompt::{build_mask, composed_forward, reference_forward, AttentionMode};
use alacarte_core::{PromptPool, SourcePromptSet};
use proptest::prelude::*;
use proptest::sample::subsequence;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::oracle::{max_rel, oracle_forward};
use common::{jittered_backbone, mixed_sets, random_image, small_config};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shared_prompt_outputs_ignore_the_rest_of_the_subset(
        seed in 0u64..1000,
        a in subsequence((0..6usize).collect::<Vec<_>>(), 1..=6),
        b in subsequence((0..6usize).collect::<Vec<_>>(), 1..=6),
    ) {
        let cfg = small_config(2);
        let bb = jittered_backbone::<f32>(&cfg, 3);
        let sets = mixed_sets(&bb, 6, 3, 10);
        let image = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let pick = |idx: &[usize]| idx.iter().map(|&i| &sets[i]).collect::<Vec<_>>();
        let oa = composed_forward(&bb, &image, &pick(&a)).unwrap();
        let ob = composed_forward(&bb, &image, &pick(&b)).unwrap();
        prop_assert_eq!(oa.z_l(), ob.z_l());
        for (ia, s) in a.iter().enumerate() {
            if let Some(ib) = b.iter().position(|x| x == s) {
                prop_assert_eq!(&oa.prompts[ia], &ob.prompts[ib]);
            }
        }
    }

    #[test]
    fn composed_forward_matches_the_loop_oracle(seed in 0u64..1000, k in 0usize..5) {
        let cfg = small_config(2);
        let bb = jittered_backbone::<f64>(&cfg, seed);
        let sets = mixed_sets(&bb, k, 3, seed);
        let chosen: Vec<&SourcePromptSet<f64>> = sets.iter().collect();
        let image = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let out = composed_forward(&bb, &image, &chosen).unwrap();
        let oracle = oracle_forward(&bb, &image, &chosen, true);
        prop_assert!(max_rel(out.z_l(), &oracle.z, 1e-6) < 1e-9);
        for (p, o) in out.prompts.iter().zip(&oracle.prompts) {
            prop_assert!(max_rel(p, o, 1e-6) < 1e-9);
        }
    }

    #[test]
    fn full_attention_matches_the_unmasked_oracle(seed in 0u64..1000, k in 1usize..4) {
        let cfg = small_config(1);
        let bb = jittered_backbone::<f64>(&cfg, seed);
        let sets = mixed_sets(&bb, k, 3, seed);
        let chosen: Vec<&SourcePromptSet<f64>> = sets.iter().collect();
        let image = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let (z, prompts) = reference_forward(&bb, &image, &chosen, AttentionMode::Full).unwrap();
        let oracle = oracle_forward(&bb, &image, &chosen, false);
        prop_assert!(max_rel(&z, &oracle.z, 1e-6) < 1e-9);
        for (p, o) in prompts.iter().zip(&oracle.prompts) {
            prop_assert!(max_rel(p, o, 1e-6) < 1e-9);
        }
    }

    #[test]
    fn masks_have_one_row_per_query_and_valid_rows(n_z in 1usize..20, k in 0usize..40) {
        let ids: Vec<String> = (0..k).map(|i| format!("p{i}")).collect();
        let m = build_mask(n_z, &ids).unwrap();
        prop_assert_eq!(m.mask.queries(), n_z + k);
        prop_assert_eq!(m.mask.keys(), n_z + 2 * k);
        prop_assert!(m.check_structure().is_ok());
        prop_assert_eq!(m.mask.count_allowed(), (n_z + k) * n_z + 2 * k);
    }

    #[test]
    fn prediction_is_invariant_to_subset_order(seed in 0u64..1000) {
        let cfg = small_config(2);
        let bb = jittered_backbone::<f32>(&cfg, 4);
        let mut pool = PromptPool::<f32>::in_memory("p", &bb.fingerprint(), 3);
        for s in mixed_sets(&bb, 3, 3, 20) {
            pool.add(s).unwrap();
        }
        let image = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = apt_predict(&bb, &pool, &["s0", "s1", "s2"], &image, PoolingMode::Probabilities).unwrap();
        let b = apt_predict(&bb, &pool, &["s2", "s0", "s1"], &image, PoolingMode::Probabilities).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
