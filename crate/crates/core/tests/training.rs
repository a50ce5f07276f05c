use affwild::dataset::LabeledSequence;
use affwild::model::{build, Head, Layer, ModelConfig, ModelInstance, RnnConfig};
use affwild::synthetic::{sinusoid_video, Geometry};
use affwild::tensor::Padding;
use affwild::train::{
    evaluate, finetune_checkpoint, train, EvalMode, Freeze, LossKind, ModelPredictor, TrainConfig,
};

fn geo(pattern_seed: u64) -> Geometry {
    Geometry {
        height: 8,
        width: 8,
        channels: 1,
        landmark_points: 2,
        pattern_seed,
    }
}

fn config() -> ModelConfig {
    ModelConfig {
        input: [8, 8, 1],
        backbone: vec![
            Layer::Conv {
                kh: 3,
                kw: 3,
                input: 1,
                out: 4,
                stride: 1,
                padding: Padding::Same,
            },
            Layer::Relu,
            Layer::Maxpool {
                k: 2,
                stride: 2,
                padding: Padding::Valid,
            },
        ],
        fc1_units: 32,
        use_landmarks: false,
        landmark_dim: 4,
        rnn: RnnConfig {
            layers: 1,
            units: 16,
        },
        head: Head::Regression2,
        dropout_rate: 0.2,
    }
}

fn videos(pattern_seed: u64, count: u64) -> Vec<LabeledSequence<f64>> {
    (0..count)
        .map(|i| {
            sinusoid_video(
                &format!("p{pattern_seed}v{i}"),
                120,
                &geo(pattern_seed),
                0.9 * i as f64,
                100 + i,
            )
            .unwrap()
        })
        .collect()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 2,
        seq_len: 40,
        epochs,
        seed: 4,
        loss: LossKind::Ccc,
        ..TrainConfig::default()
    }
}

fn mean_ccc(m: &ModelInstance<f64>, data: &[LabeledSequence<f64>]) -> f64 {
    evaluate(
        &ModelPredictor {
            model: m,
            seq_len: 40,
        },
        data,
        EvalMode::Concatenated,
    )
    .unwrap()
    .mean_ccc
}

#[test]
fn loss_curve_trends_down_and_exports() {
    let data = videos(1, 2);
    let mut m = build::<f64>(&config(), 2).unwrap();
    let report = train(&mut m, &data, &cfg(40), Freeze::None).unwrap();
    assert_eq!(report.loss_curve.len(), 40);
    let first: f64 = report.loss_curve[..5].iter().sum();
    let last: f64 = report.loss_curve[35..].iter().sum();
    assert!(last < first, "{first} -> {last}");
    let csv = report.to_csv();
    assert!(csv.starts_with("epoch,loss\n"));
    assert_eq!(csv.lines().count(), 41);
}

#[test]
fn finetuning_a_checkpoint_adapts_to_a_new_visual_domain() {
    let source = videos(1, 2);
    let target = videos(2, 2);
    let mut m = build::<f64>(&config(), 2).unwrap();
    train(&mut m, &source, &cfg(80), Freeze::None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("source.ckpt");
    m.save(&ckpt).unwrap();

    let before = mean_ccc(&m, &target);
    let (full, _) = finetune_checkpoint::<f64>(&ckpt, &target, &cfg(60), Freeze::None).unwrap();
    let (frozen, _) =
        finetune_checkpoint::<f64>(&ckpt, &target, &cfg(60), Freeze::Backbone).unwrap();
    let (after_full, after_frozen) = (mean_ccc(&full, &target), mean_ccc(&frozen, &target));
    assert!(after_full > before + 0.1, "{before} -> {after_full}");
    assert!(after_frozen > before + 0.1, "{before} -> {after_frozen}");

    for (name, t) in m.params.iter().filter(|(k, _)| k.starts_with("conv")) {
        assert_eq!(
            frozen.params[name], *t,
            "{name} moved under a frozen backbone"
        );
        assert_ne!(full.params[name], *t, "{name} did not move");
    }
}

#[test]
fn single_precision_training_runs() {
    let data: Vec<LabeledSequence<f32>> = (0..2)
        .map(|i| sinusoid_video(&format!("f{i}"), 80, &geo(1), i as f64, i).unwrap())
        .collect();
    let mut m = build::<f32>(&config(), 2).unwrap();
    let report = train(&mut m, &data, &cfg(10), Freeze::None).unwrap();
    assert!(report.loss_curve.iter().all(|l| l.is_finite()));
    assert!(report.loss_curve[9] < report.loss_curve[0]);
}
