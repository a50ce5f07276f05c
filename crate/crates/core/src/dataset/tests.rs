use super::*;
use crate::annotation::Dimension;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seq(id: &str, labels: &[(f64, f64)]) -> LabeledSequence<f64> {
    let n = labels.len();
    LabeledSequence::new(
        id,
        (0..n)
            .map(|i| Tensor::full(&[1, 1, 1], (i % 7) as f64 / 7.0))
            .collect(),
        vec![vec![0.5, 0.5]; n],
        labels.iter().map(|l| l.0).collect(),
        labels.iter().map(|l| l.1).collect(),
    )
    .unwrap()
}

const CORNERS: [(f64, f64); 4] = [(0.5, 0.5), (-0.5, 0.5), (0.5, -0.5), (-0.5, -0.5)];

/// Runs of constant quadrant, `counts[q]` frames each, in blocks of `block`.
fn blocky(
    id: &str,
    counts: [usize; 4],
    block: usize,
    rng: &mut ChaCha8Rng,
) -> LabeledSequence<f64> {
    let mut remaining = counts;
    let mut labels = Vec::new();
    while remaining.iter().any(|&c| c > 0) {
        let q = loop {
            let q = rng.gen_range(0..4);
            if remaining[q] > 0 {
                break q;
            }
        };
        let take = block.min(remaining[q]);
        remaining[q] -= take;
        let (v, a) = CORNERS[q];
        labels
            .extend((0..take).map(|_| (v * rng.gen_range(0.1..1.9), a * rng.gen_range(0.1..1.9))));
    }
    seq(id, &labels)
}

#[test]
fn stats_all_in_one_quadrant() {
    let s = quadrant_stats(&[seq("a", &[(0.5, 0.5); 5])]).unwrap();
    assert_eq!(s.proportions(), [1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn stats_one_frame_per_quadrant() {
    let s = quadrant_stats(&[seq("a", &CORNERS)]).unwrap();
    assert_eq!(s.proportions(), [0.25; 4]);
}

#[test]
fn zero_counts_as_positive() {
    assert_eq!(Quadrant::of(0.0, 0.0), Quadrant::PosValencePosArousal);
    assert_eq!(Quadrant::of(-0.1, 0.0), Quadrant::NegValencePosArousal);
    assert_eq!(Quadrant::of(0.0, -0.1), Quadrant::PosValenceNegArousal);
    assert!(quadrant_stats::<f64>(&[]).is_err());
}

#[test]
fn stats_match_exhaustive_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let data: Vec<LabeledSequence<f64>> = (0..5)
        .map(|i| {
            let labels: Vec<(f64, f64)> = (0..200)
                .map(|_| {
                    let pick = |rng: &mut ChaCha8Rng| {
                        if rng.gen_bool(0.05) {
                            0.0
                        } else {
                            rng.gen_range(-1.0..1.0)
                        }
                    };
                    (pick(&mut rng), pick(&mut rng))
                })
                .collect();
            seq(&format!("v{i}"), &labels)
        })
        .collect();
    let mut oracle = [0usize; 4];
    for s in &data {
        for f in 0..s.len() {
            let (v, a) = (s.valence()[f], s.arousal()[f]);
            let idx = if v >= 0.0 && a >= 0.0 {
                0
            } else if a >= 0.0 {
                1
            } else if v >= 0.0 {
                2
            } else {
                3
            };
            oracle[idx] += 1;
        }
    }
    let stats = quadrant_stats(&data).unwrap();
    assert_eq!(stats.counts, oracle);
    assert_eq!(stats.total(), 1000);
    assert!((stats.proportions().iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn sequence_validation() {
    let f = || vec![Tensor::zeros(&[2, 2, 1])];
    assert!(LabeledSequence::new("a", f(), vec![vec![]], vec![0.0], vec![0.0]).is_ok());
    assert!(LabeledSequence::new("a", f(), vec![vec![]], vec![1.5], vec![0.0]).is_err());
    assert!(LabeledSequence::new("a", f(), vec![vec![1.2, 0.0]], vec![0.0], vec![0.0]).is_err());
    assert!(LabeledSequence::new("a", f(), vec![vec![0.3]], vec![0.0], vec![0.0]).is_err());
    assert!(LabeledSequence::new("a", f(), vec![], vec![0.0], vec![0.0]).is_err());
    assert!(LabeledSequence::new(
        "a",
        vec![Tensor::full(&[1, 1, 1], 2.0)],
        vec![vec![]],
        vec![0.0],
        vec![0.0]
    )
    .is_err());
    let s = LabeledSequence::new("a", f(), vec![vec![]], vec![0.0], vec![0.0]).unwrap();
    assert!(s.clone().with_classes(vec![1, 2]).is_err());
    assert_eq!(s.with_classes(vec![3]).unwrap().classes(), Some(&[3][..]));
}

#[test]
fn balance_identity_when_on_target() {
    let data = vec![seq("a", &CORNERS)];
    let out = balance(&data, [0.25; 4], 2, 0.0, 1).unwrap();
    assert_eq!(out.sequences, data);
    assert_eq!(out.selections, 0);
}

#[test]
fn balance_two_quadrants() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let data: Vec<_> = (0..4)
        .map(|i| blocky(&format!("v{i}"), [225, 25, 0, 0], 25, &mut rng))
        .collect();
    let out = balance(&data, [0.5, 0.5, 0.0, 0.0], 20, 0.02, 5).unwrap();
    let p = quadrant_stats(&out.sequences).unwrap().proportions();
    assert!(
        (p[0] - 0.5).abs() <= 0.02 && (p[1] - 0.5).abs() <= 0.02,
        "{p:?}"
    );
    assert_eq!(&out.sequences[..4], &data[..]);
    assert_eq!(quadrant_stats(&out.sequences).unwrap(), out.after);
}

#[test]
fn balance_reaches_reference_proportions() {
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let data: Vec<_> = (0..10)
        .map(|i| blocky(&format!("v{i}"), [280, 60, 40, 20], 20, &mut rng))
        .collect();
    let before = quadrant_stats(&data).unwrap().proportions();
    assert_eq!(before, [0.70, 0.15, 0.10, 0.05]);
    let targets = [0.43, 0.24, 0.19, 0.14];
    let out = balance(&data, targets, 20, 0.02, 9).unwrap();
    let after = quadrant_stats(&out.sequences).unwrap();
    assert!(after.within(&targets, 0.02), "{after}");
    assert_eq!(&out.sequences[..10], &data[..]);
    assert!(out.sequences[10..].iter().all(|s| s.len() == 20));
}

#[test]
fn balance_reports_unreachable_targets() {
    // every length-2 segment holds one frame of each quadrant
    let labels: Vec<(f64, f64)> = (0..40).map(|i| CORNERS[i % 2]).collect();
    let data = vec![seq("a", &labels)];
    match balance(&data, [0.9, 0.1, 0.0, 0.0], 2, 0.01, 3) {
        Err(DatasetError::BalanceFailure {
            iterations,
            achieved,
            ..
        }) => {
            assert_eq!(iterations, iteration_cap(40, 2));
            assert!((achieved[0] - 0.5).abs() < 1e-12);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn balance_rejects_bad_requests() {
    let data = vec![seq("a", &[(0.5, 0.5), (-0.5, 0.5)])];
    assert!(balance(&data, [0.5, 0.5, 0.0, 0.0], 0, 0.01, 0).is_err());
    assert!(balance(&data, [0.5, 0.4, 0.0, 0.0], 1, 0.01, 0).is_err());
    assert!(matches!(
        balance(&data, [0.4, 0.4, 0.2, 0.0], 1, 0.01, 0),
        Err(DatasetError::Usage(_))
    ));
}

#[test]
fn balance_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let data: Vec<_> = (0..3)
        .map(|i| blocky(&format!("v{i}"), [150, 30, 15, 5], 10, &mut rng))
        .collect();
    let a = balance(&data, [0.4, 0.3, 0.2, 0.1], 10, 0.02, 4).unwrap();
    let b = balance(&data, [0.4, 0.3, 0.2, 0.1], 10, 0.02, 4).unwrap();
    assert_eq!(a.sequences, b.sequences);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn balance_preserves_originals_and_meets_tolerance(
        seed in any::<u64>(),
        counts in prop::array::uniform4(5usize..60),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<_> = (0..3).map(|i| blocky(&format!("v{i}"), counts, 5, &mut rng)).collect();
        if let Ok(out) = balance(&data, [0.25; 4], 5, 0.03, seed) {
            prop_assert_eq!(&out.sequences[..3], &data[..]);
            prop_assert!(quadrant_stats(&out.sequences).unwrap().within(&[0.25; 4], 0.03));
        }
    }
}

#[test]
fn two_windows_from_160_frames() {
    let data = vec![seq("a", &vec![(0.1, 0.1); 160])];
    let stream = batch_sequences(&data, 80, 4, 0).unwrap();
    assert_eq!(stream.windows().len(), 2);
    let batches: Vec<_> = stream.map(Result::unwrap).collect();
    assert_eq!(batches.len(), 1);
    assert_eq!(batches[0].frames.shape(), &[2, 80, 1, 1, 1]);
    assert_eq!(batches[0].landmarks.shape(), &[2, 80, 2]);
}

#[test]
fn too_short_video_is_a_usage_error() {
    let data = vec![seq("a", &vec![(0.1, 0.1); 79])];
    assert!(matches!(
        batch_sequences(&data, 80, 4, 0),
        Err(DatasetError::Usage(_))
    ));
    assert!(batch_sequences(&data, 0, 4, 0).is_err());
    assert!(batch_sequences(&data, 10, 0, 0).is_err());
}

#[test]
fn windows_match_enumeration() {
    let lens = [37, 80, 12, 5, 64];
    let data: Vec<_> = lens
        .iter()
        .enumerate()
        .map(|(i, &n)| seq(&format!("v{i}"), &vec![(0.2, -0.2); n]))
        .collect();
    let seq_len = 12;
    let mut oracle = Vec::new();
    for (s, &n) in lens.iter().enumerate() {
        let mut start = 0;
        while start + seq_len <= n {
            oracle.push(Window { sequence: s, start });
            start += seq_len;
        }
    }
    let stream = batch_sequences(&data, seq_len, 3, 11).unwrap();
    let mut seen: Vec<Window> = stream.flat_map(|b| b.unwrap().windows).collect();
    let first_order = seen.clone();
    seen.sort();
    assert_eq!(seen, oracle);
    let again: Vec<Window> = batch_sequences(&data, seq_len, 3, 11)
        .unwrap()
        .flat_map(|b| b.unwrap().windows)
        .collect();
    assert_eq!(again, first_order);
    let other: Vec<Window> = batch_sequences(&data, seq_len, 3, 12)
        .unwrap()
        .flat_map(|b| b.unwrap().windows)
        .collect();
    assert_ne!(other, first_order);
}

#[test]
fn batch_contents_follow_windows() {
    let labels: Vec<(f64, f64)> = (0..30)
        .map(|i| (i as f64 / 30.0, -(i as f64) / 30.0))
        .collect();
    let data = vec![seq("a", &labels)
        .with_classes((0..30).map(|i| i % 7).collect())
        .unwrap()];
    let w = [
        Window {
            sequence: 0,
            start: 10,
        },
        Window {
            sequence: 0,
            start: 0,
        },
    ];
    let b = Batch::assemble(&data, &w, 5).unwrap();
    assert_eq!(b.valence.data()[0], 10.0 / 30.0);
    assert_eq!(b.arousal.data()[5], 0.0);
    assert_eq!(b.frames.data()[1], 4.0 / 7.0);
    assert_eq!(b.classes.as_ref().unwrap()[..3], [3, 4, 5]);
    assert!(Batch::assemble(
        &data,
        &[Window {
            sequence: 0,
            start: 28
        }],
        5
    )
    .is_err());
}

#[test]
fn label_rescale_endpoints() {
    assert_eq!(
        rescale_labels(&[10.0, -10.0, 0.0, 5.0], 10.0).unwrap(),
        vec![1.0, -1.0, 0.0, 0.5]
    );
    assert!(rescale_labels(&[10.5], 10.0).is_err());
}

#[test]
fn loads_png_manifest() {
    use crate::annotation::io;
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames/v1");
    std::fs::create_dir_all(&frames).unwrap();
    for i in 0..3u8 {
        let img = image::RgbImage::from_fn(4, 2, |x, y| {
            image::Rgb([i * 100, x as u8 * 85, y as u8 * 255])
        });
        img.save(frames.join(format!("{i:04}.png"))).unwrap();
    }
    let write = |name: &str, text: String| std::fs::write(dir.path().join(name), text).unwrap();
    write(
        "v1.lm",
        io::format_landmarks("v1", &vec![vec![2.0, 1.0, 4.0, 3.0]; 3]).unwrap(),
    );
    write(
        "v1.val",
        io::format_labels("v1", Dimension::Valence, &[10.0, -5.0, 0.0]).unwrap(),
    );
    write(
        "v1.aro",
        io::format_labels("v1", Dimension::Arousal, &[1.0, 2.0, -10.0]).unwrap(),
    );
    write(
        "data.tsv",
        "# affwild-dataset v1 label_range=10\nv1\tframes/v1\tv1.lm\tv1.val\tv1.aro\n".into(),
    );
    let data = load_dataset::<f64>(&dir.path().join("data.tsv")).unwrap();
    assert_eq!(data.len(), 1);
    let s = &data[0];
    assert_eq!(s.len(), 3);
    assert_eq!(s.frame_shape(), &[2, 4, 3]);
    assert_eq!(s.frames()[0].data()[..3], [-1.0, -1.0, -1.0]);
    assert_eq!(
        s.frames()[2].data()[3 * 7..],
        [200.0 / 127.5 - 1.0, 1.0, 1.0]
    );
    assert_eq!(s.landmarks()[0], vec![0.5, 0.5, 1.0, 1.0]);
    assert_eq!(s.valence(), &[1.0, -0.5, 0.0]);
    assert_eq!(s.arousal(), &[0.1, 0.2, -1.0]);

    write("bad.tsv", "# affwild-dataset v1\nv1\tframes/v1\n".into());
    assert!(matches!(
        load_dataset::<f64>(&dir.path().join("bad.tsv")),
        Err(DatasetError::Parse { line: 2, .. })
    ));
    write(
        "nolm.tsv",
        "# affwild-dataset v1\nv1\tframes/v1\t-\tv1.val\tv1.aro\n".into(),
    );
    // labels exceed ±1 without a label_range
    assert!(load_dataset::<f64>(&dir.path().join("nolm.tsv")).is_err());
}

#[test]
fn saved_dataset_loads_back() {
    use crate::synthetic::{landmark_video, Geometry};
    let dir = tempfile::tempdir().unwrap();
    for channels in [1, 3] {
        let geo = Geometry {
            height: 5,
            width: 7,
            channels,
            landmark_points: 3,
            pattern_seed: 2,
        };
        let data: Vec<LabeledSequence<f64>> = (0..2)
            .map(|i| landmark_video(&format!("s{i}"), 6, &geo, i).unwrap())
            .collect();
        let out = dir.path().join(format!("c{channels}"));
        let manifest = save_dataset(&out, &data).unwrap();
        let back = load_dataset::<f64>(&manifest).unwrap();
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.video_id(), b.video_id());
            assert_eq!(a.valence(), b.valence());
            assert_eq!(a.arousal(), b.arousal());
            assert_eq!(b.frame_shape(), &[5, 7, 3]);
            for (fa, fb) in a.frames().iter().zip(b.frames()) {
                for (k, &v) in fb.data().iter().enumerate() {
                    let src = fa.data()[k / 3 * channels + if channels == 3 { k % 3 } else { 0 }];
                    assert!((v - src).abs() <= 1.0 / 127.5, "{v} vs {src}");
                }
            }
            for (ra, rb) in a.landmarks().iter().zip(b.landmarks()) {
                for (x, y) in ra.iter().zip(rb) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
