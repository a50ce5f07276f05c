use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use affwild::annotation::io::{format_trace, read_labels};
use affwild::annotation::{resample, AnnotationTrace, Dimension};
use affwild::dataset::{quadrant_stats, save_dataset, LabeledSequence};
use affwild::model::{build, Head, Layer, ModelConfig, ModelInstance, RnnConfig};
use affwild::synthetic::{landmark_video, Geometry};
use affwild::tensor::{Padding, Tensor};

fn affwild(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_affwild"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn run_record(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

// ------------------------------------------------------------- annotation

fn write_trace(
    dir: &Path,
    annotator: &str,
    video: &str,
    dim: Dimension,
    samples: Vec<(f64, f64)>,
) -> String {
    let name = format!("{annotator}_{video}_{dim}.trace");
    let t = AnnotationTrace::new(annotator, video, dim, samples).unwrap();
    std::fs::write(dir.join(&name), format_trace(&t).unwrap()).unwrap();
    name
}

#[test]
fn single_selected_annotator_labels_equal_resampled_trace() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<(f64, f64)> = (0..37)
        .map(|i| (i as f64 * 0.027, (i as f64 * 0.3).sin() * 0.9))
        .collect();
    let name = write_trace(dir.path(), "a1", "v1", Dimension::Valence, samples.clone());
    let manifest = dir.path().join("m.toml");
    std::fs::write(
        &manifest,
        format!("[[video]]\nid = \"v1\"\nframe_rate = 25.0\nframe_count = 40\ntrace = [\"{name}\"]\n[video.selected]\nvalence = [\"a1\"]\n"),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = affwild(&[
        "annotate-process",
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let labels = read_labels::<f64>(&out.join("labels/v1.valence.labels")).unwrap();
    let trace = AnnotationTrace::new("a1", "v1", Dimension::Valence, samples).unwrap();
    assert_eq!(labels.values, resample(&trace, 25.0, 40).unwrap());
    assert!(!out.join("labels/v1.arousal.labels").exists());
    assert_eq!(run_record(&out)["command"], "annotate-process");
}

fn brute_nearest(samples: &[(f64, f64)], rate: f64, frames: usize) -> Vec<f64> {
    (0..frames)
        .map(|f| {
            let t = f as f64 / rate;
            let mut best = 0;
            for (i, s) in samples.iter().enumerate() {
                if (s.0 - t).abs() < (samples[best].0 - t).abs() - 1e-9 {
                    best = i;
                }
            }
            samples[best].1
        })
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let syy: f64 = y.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn six_annotator_mac_table_matches_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let (rate, frames) = (30.0, 150);
    let mut names = Vec::new();
    let mut grids = Vec::new();
    for a in 0..6 {
        let samples: Vec<(f64, f64)> = (0..130)
            .map(|i| {
                let t = i as f64 * 0.039 + a as f64 * 0.003;
                (
                    t,
                    (0.7 * (t * 1.3).sin() + 0.25 * (t * (2.0 + a as f64)).cos()).clamp(-1.0, 1.0),
                )
            })
            .collect();
        grids.push(brute_nearest(&samples, rate, frames));
        names.push(format!(
            "\"{}\"",
            write_trace(
                dir.path(),
                &format!("a{a}"),
                "v9",
                Dimension::Arousal,
                samples
            )
        ));
    }
    let manifest = dir.path().join("m.toml");
    std::fs::write(
        &manifest,
        format!(
            "[[video]]\nid = \"v9\"\nframe_rate = {rate:?}\nframe_count = {frames}\ntrace = [{}]\n[video.selected]\narousal = [\"a1\", \"a3\", \"a4\"]\n",
            names.join(", ")
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = affwild(&[
        "annotate-process",
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let avg = |members: &[usize]| {
        members
            .iter()
            .map(|&i| {
                let others: Vec<f64> = members
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| pearson(&grids[i], &grids[j]))
                    .collect();
                others.iter().sum::<f64>() / others.len() as f64
            })
            .sum::<f64>()
            / members.len() as f64
    };
    let table = std::fs::read_to_string(out.join("mac_report.tsv")).unwrap();
    let row: Vec<&str> = table.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(&row[..3], &["v9", "arousal", "6"]);
    let mac_a: f64 = row[3].parse().unwrap();
    let mac_s: f64 = row[4].parse().unwrap();
    assert!((mac_a - avg(&[0, 1, 2, 3, 4, 5])).abs() < 1e-6);
    assert!((mac_s - avg(&[1, 3, 4])).abs() < 1e-6);

    let cdf = std::fs::read_to_string(out.join("mac_cdf_arousal.csv")).unwrap();
    assert_eq!(cdf.lines().count(), 202);
    let labels = read_labels::<f64>(&out.join("labels/v9.arousal.labels")).unwrap();
    for (f, v) in labels.values.iter().enumerate() {
        let m = (grids[1][f] + grids[3][f] + grids[4][f]) / 3.0;
        assert!((v - m).abs() < 1e-12);
    }
}

#[test]
fn bad_trace_inputs_exit_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.toml");
    let out = dir.path().join("out");
    std::fs::write(
        &manifest,
        "[[video]]\nid = \"v1\"\nframe_rate = 25.0\nframe_count = 4\ntrace = [\"missing.trace\"]\n",
    )
    .unwrap();
    let o = affwild(&[
        "annotate-process",
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.trace"));
    assert!(!out.exists());

    std::fs::write(
        dir.path().join("bad.trace"),
        "# affwild-trace v1 annotator=a video=v1 dimension=valence\n0.0,0.1\n0.1,oops\n",
    )
    .unwrap();
    std::fs::write(
        &manifest,
        "[[video]]\nid = \"v1\"\nframe_rate = 25.0\nframe_count = 4\ntrace = [\"bad.trace\"]\n",
    )
    .unwrap();
    let o = affwild(&[
        "annotate-process",
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.trace:3:"), "{}", stderr(&o));
    assert!(!out.exists());
}

// ---------------------------------------------------------------- training

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input: [8, 8, 3],
        backbone: vec![
            Layer::Conv {
                kh: 3,
                kw: 3,
                input: 3,
                out: 2,
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
        fc1_units: 8,
        use_landmarks: true,
        landmark_dim: 4,
        rnn: RnnConfig {
            layers: 1,
            units: 4,
        },
        head: Head::Regression2,
        dropout_rate: 0.5,
    }
}

fn write_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut v = serde_json::json!({ "model": tiny_model(), "seqlen": 10, "batch": 2, "epochs": 2 });
    v.as_object_mut()
        .unwrap()
        .extend(extra.as_object().unwrap().clone());
    let path = dir.join("config.toml");
    std::fs::write(&path, toml::to_string(&v).unwrap()).unwrap();
    path
}

fn small_dataset(dir: &Path) -> PathBuf {
    let geo = Geometry {
        height: 8,
        width: 8,
        channels: 3,
        landmark_points: 2,
        pattern_seed: 3,
    };
    let data: Vec<LabeledSequence<f64>> = (0..2)
        .map(|i| landmark_video(&format!("d{i}"), 30, &geo, i).unwrap())
        .collect();
    save_dataset(&dir.join("data"), &data).unwrap()
}

#[test]
fn zero_learning_rate_keeps_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let out = dir.path().join("run");
    let o = affwild(&[
        "train",
        "--manifest",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--lr",
        "0",
        "--seed",
        "11",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let init = build::<f64>(&tiny_model(), 11).unwrap().to_bytes().unwrap();
    assert_eq!(std::fs::read(out.join("model.ckpt")).unwrap(), init);
    let rec = run_record(&out);
    assert_eq!(rec["seed"], 11);
    assert_eq!(rec["seed_source"], "flag");
    assert_eq!(rec["settings"]["lr"], 0.0);
    assert_eq!(rec["settings"]["seqlen"], 10);
    assert_eq!(
        std::fs::read_to_string(out.join("loss.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}

#[test]
fn identical_runs_write_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = write_config(dir.path(), serde_json::json!({ "seed": 4, "lr": 0.01 }));
    let out = dir.path().join("run");
    let args = [
        "train",
        "--manifest",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
    ];
    assert_eq!(code(&affwild(&args)), 0);
    let first: Vec<Vec<u8>> = ["model.ckpt", "loss.csv", "run.json"]
        .iter()
        .map(|f| std::fs::read(out.join(f)).unwrap())
        .collect();
    assert_eq!(code(&affwild(&args)), 0);
    for (i, f) in ["model.ckpt", "loss.csv", "run.json"].iter().enumerate() {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), first[i], "{f} differs");
    }
    let rec = run_record(&out);
    assert_eq!(
        (rec["seed"].as_u64(), rec["seed_source"].as_str()),
        (Some(4), Some("config"))
    );
    assert_eq!(rec["settings"]["lr"], 0.01);
}

#[test]
fn missing_seed_is_drawn_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = write_config(dir.path(), serde_json::json!({ "epochs": 1 }));
    let out = dir.path().join("run");
    assert_eq!(
        code(&affwild(&[
            "train",
            "--manifest",
            p(&data),
            "--out",
            p(&out),
            "--config",
            p(&cfg)
        ])),
        0
    );
    let rec = run_record(&out);
    assert_eq!(rec["seed_source"], "random");
    let seed = rec["seed"].as_u64().unwrap().to_string();
    // replaying the recorded seed reproduces the checkpoint
    let again = dir.path().join("again");
    assert_eq!(
        code(&affwild(&[
            "train",
            "--manifest",
            p(&data),
            "--out",
            p(&again),
            "--config",
            p(&cfg),
            "--seed",
            &seed
        ])),
        0
    );
    assert_eq!(
        std::fs::read(out.join("model.ckpt")).unwrap(),
        std::fs::read(again.join("model.ckpt")).unwrap()
    );
}

#[test]
fn perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let preds = dir.path().join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    for seq in affwild::dataset::load_dataset::<f64>(&data).unwrap() {
        let text: String = seq
            .valence()
            .iter()
            .zip(seq.arousal())
            .map(|(v, a)| format!("{v},{a}\n"))
            .collect();
        std::fs::write(preds.join(format!("{}.pred", seq.video_id())), text).unwrap();
    }
    for mode in ["per-video", "concat"] {
        let out = dir.path().join(mode);
        let o = affwild(&[
            "evaluate",
            "--manifest",
            p(&data),
            "--out",
            p(&out),
            "--predictions",
            p(&preds),
            "--mode",
            mode,
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let rec = run_record(&out);
        assert_eq!(rec["results"]["ccc_valence"], 1.0);
        assert_eq!(rec["results"]["ccc_arousal"], 1.0);
        let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
        assert!(report.contains("ccc_valence=1"), "{report}");
        let hist = std::fs::read_to_string(out.join("histogram_predictions.csv")).unwrap();
        assert_eq!(
            hist,
            std::fs::read_to_string(out.join("histogram_labels.csv")).unwrap()
        );
        assert_eq!(hist.lines().count(), 20);
    }
}

#[test]
fn checkpoint_evaluation_writes_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = write_config(dir.path(), serde_json::json!({ "seed": 2 }));
    let run = dir.path().join("run");
    assert_eq!(
        code(&affwild(&[
            "train",
            "--manifest",
            p(&data),
            "--out",
            p(&run),
            "--config",
            p(&cfg)
        ])),
        0
    );
    let out = dir.path().join("eval");
    let o = affwild(&[
        "evaluate",
        "--manifest",
        p(&data),
        "--out",
        p(&out),
        "--checkpoint",
        p(&run.join("model.ckpt")),
        "--seqlen",
        "10",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pred = std::fs::read_to_string(out.join("predictions/d0.pred")).unwrap();
    assert_eq!(pred.lines().count(), 30);
}

#[test]
fn finetune_with_frozen_backbone_and_new_head() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = write_config(dir.path(), serde_json::json!({ "seed": 2, "lr": 0.01 }));
    let run = dir.path().join("run");
    assert_eq!(
        code(&affwild(&[
            "train",
            "--manifest",
            p(&data),
            "--out",
            p(&run),
            "--config",
            p(&cfg)
        ])),
        0
    );
    let ckpt = run.join("model.ckpt");
    let out = dir.path().join("ft");
    let o = affwild(&[
        "finetune",
        "--manifest",
        p(&data),
        "--out",
        p(&out),
        "--checkpoint",
        p(&ckpt),
        "--freeze",
        "backbone",
        "--lr",
        "0.01",
        "--seqlen",
        "10",
        "--epochs",
        "2",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let before = ModelInstance::<f64>::load(&ckpt).unwrap();
    let after = ModelInstance::<f64>::load(&out.join("model.ckpt")).unwrap();
    assert_eq!(before.params["conv0.w"], after.params["conv0.w"]);
    assert_ne!(before.params["fc1.w"], after.params["fc1.w"]);

    // categorical head needs class labels the TSV layout does not carry
    let o = affwild(&[
        "finetune",
        "--manifest",
        p(&data),
        "--out",
        p(&out),
        "--checkpoint",
        p(&ckpt),
        "--head",
        "categorical-7",
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_on_a_small_network() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let out = dir.path().join("gc");
    let o = affwild(&[
        "gradcheck",
        "--manifest",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--seed",
        "1",
        "--seqlen",
        "5",
        "--batch",
        "2",
    ]);
    assert_eq!(
        code(&o),
        0,
        "{}{}",
        stderr(&o),
        String::from_utf8_lossy(&o.stdout)
    );
    let rec = run_record(&out);
    assert_eq!(rec["results"]["passed"], true);
    assert!(out.join("gradcheck.json").exists());
}

// ---------------------------------------------------------------- balance

fn quadrant_dataset(dir: &Path) -> PathBuf {
    const SIGNS: [(f64, f64); 4] = [(0.5, 0.5), (-0.5, 0.5), (0.5, -0.5), (-0.5, -0.5)];
    let data: Vec<LabeledSequence<f64>> = (0..10)
        .map(|i| {
            let mut order = Vec::new();
            for (q, n) in [(0, 5), (1, 2), (0, 5), (2, 2), (0, 4), (3, 1), (1, 1)] {
                order.extend(std::iter::repeat_n(q, n * 10));
            }
            let shift = (i * 40) % order.len();
            order.rotate_left(shift);
            let v: Vec<f64> = order.iter().map(|&q| SIGNS[q].0).collect();
            let a: Vec<f64> = order.iter().map(|&q| SIGNS[q].1).collect();
            let n = v.len();
            LabeledSequence::new(
                format!("q{i}"),
                vec![Tensor::zeros(&[2, 2, 3]); n],
                vec![vec![]; n],
                v,
                a,
            )
            .unwrap()
        })
        .collect();
    assert_eq!(
        quadrant_stats(&data).unwrap().proportions(),
        [0.70, 0.15, 0.10, 0.05]
    );
    save_dataset(&dir.join("data"), &data).unwrap()
}

#[test]
fn balance_reaches_reference_targets() {
    let dir = tempfile::tempdir().unwrap();
    let data = quadrant_dataset(dir.path());
    let out = dir.path().join("bal");
    let o = affwild(&[
        "balance",
        "--manifest",
        p(&data),
        "--out",
        p(&out),
        "--targets",
        "43,24,19,14",
        "--tolerance",
        "0.02",
        "--seqlen",
        "20",
        "--seed",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rec = run_record(&out);
    let after: Vec<f64> = rec["results"]["after"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    for (a, t) in after.iter().zip([0.43, 0.24, 0.19, 0.14]) {
        assert!((a - t).abs() <= 0.02, "{after:?}");
    }
    let segments = std::fs::read_to_string(out.join("segments.tsv")).unwrap();
    let rows: Vec<&str> = segments.lines().skip(1).collect();
    assert_eq!(
        rows.len() as u64,
        rec["results"]["segments"].as_u64().unwrap()
    );
    assert!(rows.iter().all(|r| r.split('\t').nth(3) == Some("20")));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("x");
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--manifest", p(&data), "--out", p(&out), "--bogus"],
        vec![
            "evaluate",
            "--manifest",
            p(&data),
            "--out",
            p(&out),
            "--checkpoint",
            "a",
            "--predictions",
            "b",
        ],
        vec!["balance", "--manifest", p(&data), "--out", p(&out)],
        vec![
            "balance",
            "--manifest",
            p(&data),
            "--out",
            p(&out),
            "--targets",
            "1,2,3",
        ],
        vec![
            "train",
            "--manifest",
            p(&data),
            "--out",
            p(&out),
            "--epochs",
            "0",
        ],
        vec![
            "train",
            "--manifest",
            p(&data),
            "--out",
            p(&out),
            "--mode",
            "sideways",
        ],
        vec!["train", "--manifest", "nowhere.tsv", "--out", p(&out)],
        // default model expects 32x32 frames
        vec!["train", "--manifest", p(&data), "--out", p(&out)],
        vec!["serve", "--manifest", "nowhere.toml", "--out", p(&out)],
    ];
    for args in cases {
        let o = affwild(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
    assert!(!out.exists());
}

#[test]
fn synth_output_trains_with_the_default_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth");
    let o = affwild(&[
        "synth",
        "--out",
        p(&data),
        "--seed",
        "9",
        "--videos",
        "2",
        "--frames",
        "24",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("run");
    let o = affwild(&[
        "train",
        "--manifest",
        p(&data.join("dataset.tsv")),
        "--out",
        p(&out),
        "--epochs",
        "1",
        "--seqlen",
        "12",
        "--seed",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(run_record(&out)["results"]["parameters"], 160546);
}
