//! Property tests for structural invariants: routing mass, cost accounting,
//! persistence, data splitting, and the config round trip.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ant::config::{DatasetConfig, DatasetKind, ModulesConfig, RunConfig};
use ant::data::{split_train_val, Augment, Dataset, PreprocessKind, Targets};
use ant::model::AntModel;
use ant::model_io::{load_model, save_model};
use ant::module::{ModuleKind, ModuleSpec, TaskKind};
use ant::tensor::Tensor;
use ant::train::{init_root_model, Ablation, GrowthSpecs, TrainConfig};

/// Seeded FC tree with up to eight growth mutations.
fn build_tree(seed: u64) -> (AntModel, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = rng.gen_range(2..=6);
    let task = if rng.gen_bool(0.5) {
        TaskKind::Classification { classes: rng.gen_range(2..=5) }
    } else {
        TaskKind::Regression { dim: rng.gen_range(1..=3) }
    };
    let solver = if matches!(task, TaskKind::Classification { .. }) { "lc" } else { "lr" };
    let specs = GrowthSpecs {
        router: ModuleSpec::parse(ModuleKind::Router, "fc3,relu,fc1,sigmoid", 0).unwrap(),
        transformer: ModuleSpec::parse(ModuleKind::Transformer, "fc4,tanh", 0).unwrap(),
        solver: ModuleSpec::parse(ModuleKind::Solver, solver, 0).unwrap(),
    };
    let cfg = TrainConfig { rng_seed: seed, ..TrainConfig::default() };
    let mut m = init_root_model(task, &[input_dim], &specs, Ablation::None, &cfg).unwrap();
    for _ in 0..rng.gen_range(0..8) {
        let leaves = m.leaves();
        let leaf = leaves[rng.gen_range(0..leaves.len())];
        if m.depth(leaf) >= 5 {
            continue;
        }
        m = if rng.gen_bool(0.5) {
            m.split_leaf(leaf, &specs.router, &specs.solver, rng.gen()).unwrap()
        } else {
            m.deepen_edge(leaf, &specs.transformer, &specs.solver, rng.gen()).unwrap()
        };
    }
    (m, input_dim)
}

fn sample_input(dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor { shape: vec![dim], data: (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Leaf probabilities form a distribution for any tree and input.
    #[test]
    fn leaf_mass_is_a_distribution(seed: u64, xseed: u64) {
        let (model, dim) = build_tree(seed);
        let assignment = model.leaf_assignment(&sample_input(dim, xseed)).unwrap();
        let sum: f64 = assignment.pi.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9, "pi sums to {sum}");
        for &p in &assignment.pi {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&p), "pi out of range: {p}");
        }
        prop_assert_eq!(assignment.leaves.len(), model.num_leaves());
    }

    /// Every root-to-leaf path costs at most the whole tree.
    #[test]
    fn path_costs_never_exceed_totals(seed: u64) {
        let (model, _) = build_tree(seed);
        for leaf in model.leaves() {
            prop_assert!(model.path_params(leaf) <= model.total_params());
            prop_assert!(model.path_flops(leaf) <= model.total_flops());
        }
    }

    /// Save then load reproduces the topology, parameters, and predictions.
    #[test]
    fn model_files_round_trip(seed: u64, xseed: u64) {
        let (model, dim) = build_tree(seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        prop_assert_eq!(loaded.num_nodes(), model.num_nodes());
        prop_assert_eq!(loaded.leaves(), model.leaves());
        prop_assert_eq!(loaded.task, model.task);
        let x = sample_input(dim, xseed);
        let a = model.predict_multi_path(&x).unwrap();
        let b = loaded.predict_multi_path(&x).unwrap();
        prop_assert_eq!(&a.values().data, &b.values().data);
    }

    /// Validation splits partition the dataset: sizes add up, no sample is
    /// lost or duplicated, and the split is deterministic in the seed.
    #[test]
    fn train_val_split_partitions(n in 2usize..120, frac in 0.05f64..0.7, seed: u64) {
        let inputs: Vec<Tensor> = (0..n)
            .map(|i| Tensor { shape: vec![1], data: vec![i as f64] })
            .collect();
        let data = Dataset::new(inputs, Targets::Classes((0..n).map(|i| i % 2).collect())).unwrap();
        let (train, val) = split_train_val(&data, frac, seed).unwrap();
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert!(val.len() >= 1, "validation side must not be empty");
        prop_assert!(train.len() >= 1, "train side must not be empty");
        let mut seen: Vec<usize> = train
            .inputs
            .iter()
            .chain(&val.inputs)
            .map(|t| t.data[0] as usize)
            .collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let (train2, val2) = split_train_val(&data, frac, seed).unwrap();
        prop_assert_eq!(train.len(), train2.len());
        prop_assert_eq!(val.inputs[0].data[0], val2.inputs[0].data[0]);
    }
}

// -- config round trip ------------------------------------------------------

fn arb_dataset() -> impl Strategy<Value = DatasetConfig> {
    let image = (prop_oneof![Just(DatasetKind::Mnist), Just(DatasetKind::Cifar10)],
        prop_oneof![Just(PreprocessKind::None), Just(PreprocessKind::MeanSubtract)],
        proptest::option::of(1usize..50_000),
        proptest::option::of(1usize..10_000))
        .prop_map(|(kind, preprocess, limit_train, limit_test)| DatasetConfig {
            kind,
            train_images: Some("data/train-images".into()),
            train_labels: Some("data/train-labels".into()),
            test_images: Some("data/test-images".into()),
            test_labels: Some("data/test-labels".into()),
            preprocess,
            limit_train,
            limit_test,
            ..DatasetConfig::new(kind)
        });
    let tabular = (1usize..40, 1usize..10).prop_map(|(input_cols, target_cols)| DatasetConfig {
        input_cols,
        target_cols,
        train_csv: Some("data/train.csv".into()),
        test_csv: Some("data/test.csv".into()),
        ..DatasetConfig::new(DatasetKind::Sarcos)
    });
    prop_oneof![image, tabular]
}

fn arb_run_config() -> impl Strategy<Value = RunConfig> {
    (
        arb_dataset(),
        0usize..4,
        (1usize..600, 1usize..8, 1usize..300, any::<u64>()),
        (proptest::option::of(1usize..30), proptest::option::of(1usize..20)),
        prop_oneof![Just(Ablation::None), Just(Ablation::NoRouter), Just(Ablation::NoTransformer)],
        0.05f64..0.9,
    )
        .prop_map(|(dataset, dsf, (batch, patience, refine, seed), (me, mg), ablation, vf)| {
            let classify = dataset.kind != DatasetKind::Sarcos;
            let mut dataset = dataset;
            dataset.val_fraction = vf;
            let modules = ModulesConfig {
                router: "fc4,relu,fc1,sigmoid".into(),
                transformer: if dsf > 0 { "conv3-4,relu".into() } else { "fc8,tanh".into() },
                solver: if classify { "lc".into() } else { "lr".into() },
                downsample_freq: if classify { dsf } else { 0 },
            };
            let training = TrainConfig {
                batch_size: batch,
                patience,
                refine_epochs: refine,
                rng_seed: seed,
                max_epochs_per_phase: me,
                max_growth_decisions: mg,
                augment: if classify && seed % 3 == 0 {
                    Augment::PadCropFlip
                } else {
                    Augment::None
                },
                ..TrainConfig::default()
            };
            RunConfig { dataset, modules, training, ablation, out_dir: "runs/prop".into() }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// The canonical serializer and the parser are inverses, and everything
    /// the serializer emits passes validation.
    #[test]
    fn config_text_round_trips(cfg in arb_run_config()) {
        let text = cfg.to_text();
        let parsed = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&parsed, &cfg);
        prop_assert_eq!(parsed.to_text(), text);
        cfg.validate().unwrap();
    }
}
