use std::sync::OnceLock;

use eaconv::basis::{build_basis_bank, BasisConfig};
use eaconv::data::{generate_synthetic, load_checkpoint, save_checkpoint, Dataset, Meta, SyntheticSpec};
use eaconv::eaconv::{build_model, transfer_weights, Layer, LayerConfig, Model, ModelConfig};
use eaconv::perturb::{default_schedules, PerturbKind};
use eaconv::train::{evaluate, predict, robustness_sweep, train, TrainConfig};
use eaconv::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Baseline {
    train: Dataset,
    test: Dataset,
    model: Model,
}

fn baseline() -> &'static Baseline {
    static CELL: OnceLock<Baseline> = OnceLock::new();
    CELL.get_or_init(|| {
        let train_set = generate_synthetic(&SyntheticSpec::new(100, 10)).unwrap();
        let test = generate_synthetic(&SyntheticSpec::new(40, 11)).unwrap();
        let host = ModelConfig::four_conv([1, 32, 32], [8, 16, 16, 32], 4);
        let mut model = build_model(&host, None, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            ..TrainConfig::default()
        };
        train(&mut model, &train_set, &cfg, None).unwrap();
        Baseline {
            train: train_set,
            test,
            model,
        }
    })
}

fn transferred(b: &Baseline) -> Model {
    let bank = build_basis_bank(&BasisConfig::standard(3, 1.0, 0.5)).unwrap();
    let cfg = b.model.config().augment_first_conv().unwrap();
    let mut ea = build_model(&cfg, Some(bank.into_shared()), 99).unwrap();
    transfer_weights(&b.model, &mut ea).unwrap();
    ea
}

#[test]
fn baseline_learns_the_synthetic_task() {
    let b = baseline();
    assert!(evaluate(&b.model, &b.test).unwrap() >= 90.0);
}

#[test]
fn transferred_model_starts_exactly_where_the_source_is() {
    let b = baseline();
    let ea = transferred(b);
    assert_eq!(evaluate(&ea, &b.test).unwrap(), evaluate(&b.model, &b.test).unwrap());
    assert_eq!(predict(&ea, &b.test).unwrap(), predict(&b.model, &b.test).unwrap());
    let (x, _) = b.test.batch(&(0..16).collect::<Vec<_>>());
    let diff = ea.forward(&x).unwrap().max_abs_diff(&b.model.forward(&x).unwrap());
    assert!(diff < 1e-8);
}

#[test]
fn fine_tuning_moves_beta() {
    let b = baseline();
    let mut ea = transferred(b);
    let before = ea.betas();
    assert_eq!(before, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    let cfg = TrainConfig {
        epochs: 1,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    train(&mut ea, &b.train, &cfg, None).unwrap();
    let after = ea.betas();
    assert!(after.iter().zip(&before).any(|(a, b)| a != b), "{after:?}");
    assert!(after[1..].iter().any(|&v| v != 0.0));
}

#[test]
fn sweep_accuracy_mostly_falls_with_severity() {
    let b = baseline();
    let schedules = default_schedules(32);
    let report = robustness_sweep(&[("standard", &b.model)], &b.test, &schedules, 0).unwrap();
    let rows: usize = schedules.iter().map(|s| s.severities.len()).sum::<usize>() + 1;
    assert_eq!(report.rows.len(), rows);
    let (mut pairs, mut falling) = (0, 0);
    for kind in PerturbKind::ALL.into_iter().filter(|&k| k != PerturbKind::Clean) {
        let mut curve = vec![report.clean_accuracy("standard").unwrap()];
        curve.extend(report.curve(kind, "standard").into_iter().map(|(_, a)| a));
        for p in curve.windows(2) {
            pairs += 1;
            falling += usize::from(p[1] <= p[0]);
        }
    }
    assert!(falling as f64 >= 0.7 * pairs as f64, "{falling}/{pairs}");
}

#[test]
fn constant_predictor_scores_chance_on_uniform_labels() {
    let n = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let images = Tensor::from_fn(&[n, 1, 4, 4], |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let names = (0..10).map(|i| i.to_string()).collect();
    let data = Dataset::new(images, labels, names, Meta::default()).unwrap();
    let cfg = ModelConfig {
        input: [1, 4, 4],
        layers: vec![LayerConfig::Gap, LayerConfig::Linear { out: 10 }],
    };
    let mut model = build_model(&cfg, None, 0).unwrap();
    if let Layer::Linear(l) = &mut model.layers_mut()[1] {
        l.weight.value.fill(0.0);
        l.bias.value = Tensor::from_fn(&[10], |i| if i == 3 { 1.0 } else { 0.0 });
    }
    let acc = evaluate(&model, &data).unwrap();
    // 10% ± 3 binomial standard deviations
    let sd = 100.0 * (0.1f64 * 0.9 / n as f64).sqrt();
    assert!((acc - 10.0).abs() < 3.0 * sd, "{acc}");
}

#[test]
fn training_memorizes_a_tiny_set() {
    let data = generate_synthetic(&SyntheticSpec {
        image_size: 16,
        ..SyntheticSpec::new(2, 13)
    })
    .unwrap();
    let cfg = ModelConfig::four_conv([1, 16, 16], [8, 8, 8, 8], 4);
    let mut model = build_model(&cfg, None, 1).unwrap();
    let tc = TrainConfig {
        epochs: 60,
        batch_size: 8,
        horizontal_flip: false,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &tc, None).unwrap();
    assert_eq!(evaluate(&model, &data).unwrap(), 100.0);
}

#[test]
fn checkpoint_round_trip_of_a_trained_augmented_model() {
    let b = baseline();
    let ea = transferred(b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ea.ckpt");
    save_checkpoint(&ea, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let (x, _) = b.test.batch(&(0..8).collect::<Vec<_>>());
    assert!(ea.forward(&x).unwrap().max_abs_diff(&back.forward(&x).unwrap()) < 1e-5);
    assert_eq!(back.betas(), ea.betas());
}

#[test]
fn identical_configs_train_identically() {
    let data = generate_synthetic(&SyntheticSpec {
        image_size: 16,
        ..SyntheticSpec::new(4, 14)
    })
    .unwrap();
    let cfg = ModelConfig::four_conv([1, 16, 16], [4, 4, 4, 4], 4);
    let run = || {
        let mut m = build_model(&cfg, None, 2).unwrap();
        let h = train(&mut m, &data, &TrainConfig { epochs: 2, ..TrainConfig::default() }, None).unwrap();
        (h, m.named_tensors())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    for ((na, ta), (nb, tb)) in a.1.iter().zip(&b.1) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }
}
