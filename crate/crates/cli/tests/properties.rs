use proptest::prelude::*;
use roadsim_cli::config::PlacementCount;
use roadsim_cli::pipeline::{requested_count, FrameSelection};
use roadsim_cli::seeds::derive_seed;
use roadsim_cli::Config;

fn base_config(seed: u64, placements: PlacementCount) -> Config {
    let mut cfg: Config = toml::from_str(
        r#"
seed = 0
scene_root = "scene"
output_root = "out"
[grid]
origin = [0.0, 0.0]
cell_size = 1.0
nx = 2
ny = 2
"#,
    )
    .unwrap();
    cfg.seed = seed;
    cfg.placements = placements;
    cfg
}

fn frame_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{i:06}")).collect()
}

proptest! {
    #[test]
    fn seed_streams_separate_by_scope(seed in any::<u64>(), a in "[a-z0-9]{1,8}", b in "[a-z0-9]{1,8}") {
        prop_assume!(a != b);
        prop_assert_eq!(derive_seed(seed, &["sample", &a]), derive_seed(seed, &["sample", &a]));
        prop_assert_ne!(derive_seed(seed, &["sample", &a]), derive_seed(seed, &["sample", &b]));
        prop_assert_ne!(derive_seed(seed, &["sample", &a]), derive_seed(seed, &["count", &a]));
    }

    #[test]
    fn half_open_range_selects_its_indices(n in 1usize..40, start in 0usize..40, len in 1usize..40) {
        let frames = frame_ids(n);
        let sel: FrameSelection = format!("{start}..{}", start + len).parse().unwrap();
        let expected: Vec<String> = frames.iter().skip(start).take(len).cloned().collect();
        prop_assert_eq!(sel.apply(&frames), expected);
    }

    #[test]
    fn inclusive_range_and_list_agree(n in 1usize..30, start in 0usize..30, len in 0usize..10) {
        let frames = frame_ids(n);
        let end = start + len;
        let range: FrameSelection = format!("{start}..={end}").parse().unwrap();
        let list: FrameSelection = (start..=end).map(|i| i.to_string()).collect::<Vec<_>>().join(",").parse().unwrap();
        prop_assert_eq!(range.apply(&frames), list.apply(&frames));
    }

    #[test]
    fn requested_counts_respect_their_mode(seed in any::<u64>(), frame in 0u32..1000, min in 0usize..5, span in 0usize..5, mean in 0.0f64..8.0) {
        let id = format!("{frame:06}");
        let max = min + span;
        prop_assert_eq!(requested_count(&base_config(seed, PlacementCount::Fixed { count: min }), &id), min);
        let uniform = base_config(seed, PlacementCount::Uniform { min, max });
        let n = requested_count(&uniform, &id);
        prop_assert!((min..=max).contains(&n));
        prop_assert_eq!(n, requested_count(&uniform, &id));
        let poisson = base_config(seed, PlacementCount::Poisson { mean, max });
        prop_assert!(requested_count(&poisson, &id) <= max);
    }
}
