use hot_core::config::{HotConfig, Preset, RunConfig};
use hot_core::memory::MemoryEstimate;
use hot_core::Error;
use proptest::prelude::*;

#[test]
fn defaults_match_published_parameters() {
    let c = HotConfig::default();
    assert_eq!((c.d, c.d_t, c.d_c, c.d_out), (50, 100, 50, 172));
    assert_eq!((c.heads, c.block, c.segment, c.states), (4, 16, 32, 32));
    assert_eq!((c.batch_size, c.learning_rate, c.epochs, c.dropout), (100, 1e-4, 50, 0.1));
    let b = c.brt_config();
    assert_eq!((b.width, b.block, b.segment, b.states, b.heads), (400, 16, 32, 32, 4));
    let pairs: Vec<_> = Preset::ALL.iter().map(|p| (p.seq_cap(), p.patch(), p.patience())).collect();
    assert_eq!(pairs, vec![(256, 8, 2), (512, 16, 0), (2048, 64, 2)]);
    c.validate().unwrap();
    HotConfig::toy().validate().unwrap();
}

#[test]
fn run_config_round_trip_is_byte_identical() {
    let text = RunConfig::default().to_text();
    let back = RunConfig::parse(&text).unwrap();
    assert_eq!(back, RunConfig::default());
    assert_eq!(back.to_text(), text);
    let model = HotConfig::from_kv(&HotConfig::preset(Preset::CanParl).to_kv()).unwrap();
    assert_eq!(model, HotConfig::preset(Preset::CanParl));
}

#[test]
fn parsing_rules() {
    let cfg = RunConfig::parse("# comment\n\n d = 8 # trailing\nbudgets = 4, 2, 1\ndataset = x.csv\n").unwrap();
    assert_eq!(cfg.model.d, 8);
    assert_eq!(cfg.model.budgets, vec![4, 2, 1]);
    assert_eq!(cfg.model.feature_config(0, 2).hop_width, 3);
    assert!(matches!(RunConfig::parse("colour = red\n"), Err(Error::Config(m)) if m.contains("colour")));
    assert!(RunConfig::parse("d = -1\n").is_err());
    assert!(RunConfig::parse("d\n").is_err());
    assert!(RunConfig::parse("dropout = 1.0\n").is_err());
    assert!(RunConfig::parse("segment = 24\n").is_err());
    assert!(RunConfig::parse("train_ratio = 0.9\n").is_err());
    assert!(matches!(RunConfig::load(std::path::Path::new("/nonexistent/run.cfg")), Err(Error::MissingFile(_))));
}

#[test]
fn save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    let mut cfg = RunConfig::default();
    cfg.model.seed = 99;
    cfg.model.learning_rate = 3e-3;
    cfg.save(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
}

proptest! {
    #[test]
    fn random_configs_round_trip(
        d in 1usize..64, seed in any::<u64>(), lr in 1e-6f64..1.0, drop in 0.0f64..0.9,
        budgets in prop::collection::vec(0usize..300, 1..4), b in 1usize..8, k in 1usize..4,
    ) {
        let mut cfg = RunConfig::default();
        cfg.model = HotConfig {
            d, seed, learning_rate: lr, dropout: drop, block: b, segment: b * k,
            budgets: std::iter::once(1 + budgets[0]).chain(budgets[1..].iter().copied()).collect(),
            heads: 2, ..HotConfig::default()
        };
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }
}

#[test]
fn memory_examples() {
    let m = MemoryEstimate::new(256, 8, 16, 50).unwrap();
    assert_eq!(m.vanilla_elements, 38_400);
    assert_eq!(m.brt_per_block_elements, 115_200);
    assert!(m.exact());
    let odd = MemoryEstimate::new(250, 8, 16, 50).unwrap();
    assert!(!odd.exact());
    assert_eq!(odd.vanilla_elements, 3 * 32 * 400);
    assert!(MemoryEstimate::new(0, 8, 16, 50).is_err());
    assert!(MemoryEstimate::new(256, 8, 16, 0).is_err());
}

proptest! {
    #[test]
    fn memory_is_linear_in_d(s in 1u64..5000, p in 1u64..64, b in 1u64..64, d in 1u64..500) {
        let one = MemoryEstimate::new(s, p, b, d).unwrap();
        let two = MemoryEstimate::new(s, p, b, 2 * d).unwrap();
        prop_assert_eq!(two.vanilla_elements, 2 * one.vanilla_elements);
        prop_assert_eq!(two.brt_per_block_elements, 2 * one.brt_per_block_elements);
        prop_assert!(one.vanilla_elements > 0 && one.brt_per_block_elements > 0);
    }
}
