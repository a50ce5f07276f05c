use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use affwild::annotation::io::format_labels;
use affwild::annotation::{
    cca_first, final_labels, mac, mac_cdf, AnnotationError, AnnotationManifest, Dimension,
    MacReport, MacStatistic,
};
use affwild::dataset::{
    aligned_windows, balance as balance_dataset, load_dataset, save_dataset, Batch, DatasetError,
};
use affwild::model::{build, swap_head, ModelConfig, ModelError, ModelInstance};
use affwild::synthetic::{landmark_video, sinusoid_video, Geometry};
use affwild::train::{
    self, gradcheck as check_gradients, predict_dataset, read_predictions, report_from_predictions,
    EvaluationReport, ModelPredictor, TrainConfig, TrainError, TrainReport,
};
use affwild::Sequence;
use affwild_service::{ServeOptions, SessionStore};

use crate::output::{Outputs, RunRecord};
use crate::settings::{SeedSource, Settings};
use crate::CliError;

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn dataset_err(e: DatasetError) -> CliError {
    match e {
        DatasetError::BalanceFailure { .. } | DatasetError::Tensor(_) => {
            CliError::Runtime(e.to_string())
        }
        other => CliError::Usage(other.to_string()),
    }
}

fn model_err(e: ModelError) -> CliError {
    match e {
        ModelError::Config(_) | ModelError::Usage(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::Usage(_) => CliError::Usage(e.to_string()),
        TrainError::Dataset(d) => dataset_err(d),
        TrainError::Model(m) => model_err(m),
        other => CliError::Runtime(other.to_string()),
    }
}

fn load_data(manifest: &Path) -> Result<Vec<Sequence>, CliError> {
    load_dataset::<f64>(manifest).map_err(|e| CliError::Usage(e.to_string()))
}

fn load_checkpoint(path: &Path) -> Result<ModelInstance<f64>, CliError> {
    ModelInstance::load(path).map_err(input)
}

/// Frame shape and landmark width must match what the network expects.
fn check_compatible(cfg: &ModelConfig, data: &[Sequence]) -> Result<(), CliError> {
    for seq in data {
        if seq.frame_shape() != cfg.input {
            return Err(CliError::Usage(format!(
                "video {} has {:?} frames, the model expects {:?}",
                seq.video_id(),
                seq.frame_shape(),
                cfg.input
            )));
        }
        if cfg.use_landmarks && seq.landmark_dim() != cfg.landmark_dim {
            return Err(CliError::Usage(format!(
                "video {} has {} landmark values per frame, the model expects {}",
                seq.video_id(),
                seq.landmark_dim(),
                cfg.landmark_dim
            )));
        }
    }
    Ok(())
}

fn train_config(s: &Settings) -> TrainConfig {
    TrainConfig {
        learning_rate: s.lr,
        batch_size: s.batch,
        seq_len: s.seqlen,
        epochs: s.epochs,
        seed: s.seed,
        loss: s.loss,
        ..TrainConfig::default()
    }
}

fn training_outputs(
    out: &mut Outputs,
    model: &ModelInstance<f64>,
    report: &TrainReport,
) -> Result<serde_json::Value, CliError> {
    out.add("model.ckpt", model.to_bytes().map_err(model_err)?);
    out.add("loss.csv", report.to_csv());
    Ok(serde_json::json!({
        "steps": report.steps,
        "final_loss": report.loss_curve.last(),
        "parameters": model.parameter_count(),
    }))
}

// ---------------------------------------------------------------- annotate

fn mac_table(reports: &[MacReport<f64>]) -> String {
    let mut s = String::from("video\tdimension\tannotators\tmac_a\tmac_s\tundefined_pairs\n");
    for r in reports {
        let mac_s = r.mac_s.map_or("-".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.6}\t{mac_s}\t{}",
            r.video_id,
            r.dimension,
            r.per_annotator.len(),
            r.mac_a,
            r.undefined_pairs.len()
        );
    }
    s
}

/// Thresholds -1.00, -0.99, ..., 1.00.
fn cdf_grid() -> Vec<f64> {
    (0..=200).map(|i| (i as f64 - 100.0) / 100.0).collect()
}

fn cdf_csv(reports: &[MacReport<f64>]) -> Result<String, AnnotationError> {
    let grid = cdf_grid();
    let a = mac_cdf(reports, MacStatistic::MacA, &grid)?;
    let s = mac_cdf(reports, MacStatistic::MacS, &grid).ok();
    let mut out = String::from("threshold,mac_a,mac_s\n");
    for (i, x) in grid.iter().enumerate() {
        let ms = s.as_ref().map_or(String::new(), |s| s[i].to_string());
        let _ = writeln!(out, "{x:.2},{},{ms}", a[i]);
    }
    Ok(out)
}

pub fn annotate_process(manifest: &Path, out_dir: &Path) -> Result<(), CliError> {
    let m = AnnotationManifest::read(manifest).map_err(input)?;
    let videos = m
        .videos
        .iter()
        .map(|e| m.load_video::<f64>(e))
        .collect::<Result<Vec<_>, _>>()
        .map_err(input)?;

    let mut out = Outputs::new(out_dir);
    let mut reports: Vec<MacReport<f64>> = Vec::new();
    let mut cca = String::from("video\tdimension\tcca\n");
    let mut label_files = 0;
    for v in &videos {
        for dim in Dimension::ALL {
            if v.traces_for(dim).count() >= 2 {
                reports.push(mac(v, dim).map_err(input)?);
            }
            if v.selected_for(dim).is_none() {
                continue;
            }
            let labels = final_labels(v, dim).map_err(input)?;
            out.add(
                format!("labels/{}.{dim}.labels", v.video_id),
                format_labels(&v.video_id, dim, &labels).map_err(input)?,
            );
            label_files += 1;
            if let Some(lm) = &v.landmarks {
                match cca_first(lm, &labels) {
                    Ok(rho) => {
                        let _ = writeln!(cca, "{}\t{dim}\t{rho:.6}", v.video_id);
                    }
                    Err(AnnotationError::Degenerate(why)) => {
                        eprintln!(
                            "warning: {} {dim}: no canonical correlation ({why})",
                            v.video_id
                        );
                    }
                    Err(e) => return Err(input(e)),
                }
            }
        }
    }
    let table = mac_table(&reports);
    out.add("mac_report.tsv", table.clone());
    for dim in Dimension::ALL {
        let of_dim: Vec<MacReport<f64>> = reports
            .iter()
            .filter(|r| r.dimension == dim)
            .cloned()
            .collect();
        if !of_dim.is_empty() {
            out.add(
                format!("mac_cdf_{dim}.csv"),
                cdf_csv(&of_dim).map_err(input)?,
            );
        }
    }
    if videos.iter().any(|v| v.landmarks.is_some()) {
        out.add("cca.tsv", cca);
    }
    let mut record = RunRecord::new("annotate-process", None).input("manifest", manifest);
    record.results = serde_json::json!({
        "videos": videos.len(),
        "label_files": label_files,
        "mac_reports": reports.len(),
    });
    out.commit(record)?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------- training

pub fn train(manifest: &Path, out_dir: &Path, s: Settings) -> Result<(), CliError> {
    let mut data = load_data(manifest)?;
    check_compatible(&s.model, &data)?;
    let cfg = train_config(&s);
    cfg.validate(s.model.head).map_err(train_err)?;
    let mut model = build::<f64>(&s.model, s.seed).map_err(model_err)?;
    let mut balanced = serde_json::Value::Null;
    if let Some(targets) = s.targets {
        let outcome =
            balance_dataset(&data, targets, s.seqlen, s.tolerance, s.seed).map_err(dataset_err)?;
        balanced = serde_json::json!({
            "before": outcome.before.proportions(),
            "after": outcome.after.proportions(),
            "segments": outcome.selections,
        });
        data = outcome.sequences;
    }
    let report = train::train(&mut model, &data, &cfg, s.freeze).map_err(train_err)?;
    let mut out = Outputs::new(out_dir);
    let mut results = training_outputs(&mut out, &model, &report)?;
    results["balance"] = balanced;
    let mut record = RunRecord::new("train", Some(&s)).input("manifest", manifest);
    record.results = results;
    out.commit(record)?;
    println!(
        "trained {} steps, final loss {:.6}",
        report.steps,
        report.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn finetune(
    manifest: &Path,
    out_dir: &Path,
    checkpoint: &Path,
    s: Settings,
) -> Result<(), CliError> {
    let data = load_data(manifest)?;
    let mut model = load_checkpoint(checkpoint)?;
    if let Some(head) = s.head.filter(|h| *h != model.config.head) {
        model = swap_head(&model, head, s.seed).map_err(model_err)?;
    }
    check_compatible(&model.config, &data)?;
    let cfg = train_config(&s);
    cfg.validate(model.config.head).map_err(train_err)?;
    let report = train::finetune(&mut model, &data, &cfg, s.freeze).map_err(train_err)?;
    let mut out = Outputs::new(out_dir);
    let results = training_outputs(&mut out, &model, &report)?;
    let mut settings = s.clone();
    settings.model = model.config.clone();
    let mut record = RunRecord::new("finetune", Some(&settings))
        .input("manifest", manifest)
        .input("checkpoint", checkpoint);
    record.results = results;
    out.commit(record)?;
    println!(
        "fine-tuned {} steps, final loss {:.6}",
        report.steps,
        report.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

// -------------------------------------------------------------- evaluation

fn histogram_csv(h: &[Vec<u64>]) -> String {
    let mut s = String::new();
    for row in h {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn format_predictions(preds: &[(f64, f64)]) -> String {
    preds.iter().map(|(v, a)| format!("{v},{a}\n")).collect()
}

pub fn evaluate(
    manifest: &Path,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    s: Settings,
) -> Result<(), CliError> {
    let data = load_data(manifest)?;
    let mut out = Outputs::new(out_dir);
    let mut record = RunRecord::new("evaluate", Some(&s)).input("manifest", manifest);
    let preds: Vec<Vec<(f64, f64)>> = match (checkpoint, predictions) {
        (Some(ckpt), None) => {
            let model = load_checkpoint(ckpt)?;
            check_compatible(&model.config, &data)?;
            record = record.input("checkpoint", ckpt);
            let preds = predict_dataset(
                &ModelPredictor {
                    model: &model,
                    seq_len: s.seqlen,
                },
                &data,
            )
            .map_err(train_err)?;
            for (seq, p) in data.iter().zip(&preds) {
                out.add(
                    format!("predictions/{}.pred", seq.video_id()),
                    format_predictions(p),
                );
            }
            preds
        }
        (None, Some(dir)) => {
            record = record.input("predictions", dir);
            data.iter()
                .map(|seq| read_predictions::<f64>(&dir.join(format!("{}.pred", seq.video_id()))))
                .collect::<Result<_, _>>()
                .map_err(input)?
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --checkpoint or --predictions".into(),
            ))
        }
    };
    let report: EvaluationReport =
        report_from_predictions(&data, &preds, s.mode).map_err(train_err)?;
    let text = report.to_text();
    out.add("report.txt", text.clone());
    out.add(
        "report.json",
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    );
    out.add(
        "histogram_predictions.csv",
        histogram_csv(&report.histogram_predictions),
    );
    out.add(
        "histogram_labels.csv",
        histogram_csv(&report.histogram_labels),
    );
    record.results = serde_json::json!({
        "mean_ccc": report.mean_ccc,
        "ccc_valence": report.summary.valence.ccc,
        "ccc_arousal": report.summary.arousal.ccc,
    });
    out.commit(record)?;
    print!("{text}");
    Ok(())
}

pub fn gradcheck(
    manifest: &Path,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    s: Settings,
) -> Result<(), CliError> {
    let data = load_data(manifest)?;
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => build::<f64>(&s.model, s.seed).map_err(model_err)?,
    };
    check_compatible(&model.config, &data)?;
    train_config(&s)
        .validate(model.config.head)
        .map_err(train_err)?;
    let windows = aligned_windows(&data, s.seqlen).map_err(dataset_err)?;
    let take = s.batch.min(windows.len());
    let batch = Batch::assemble(&data, &windows[..take], s.seqlen).map_err(dataset_err)?;
    let report = check_gradients(&model, &batch, s.loss).map_err(train_err)?;
    let passed = report.max_rel_error < GRADCHECK_TOLERANCE;
    let mut out = Outputs::new(out_dir);
    out.add(
        "gradcheck.json",
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    );
    let mut record = RunRecord::new("gradcheck", Some(&s)).input("manifest", manifest);
    if let Some(p) = checkpoint {
        record = record.input("checkpoint", p);
    }
    record.results = serde_json::json!({ "max_rel_error": report.max_rel_error, "passed": passed });
    out.commit(record)?;
    println!(
        "checked {} parameters; max relative error {:.3e} at {}[{}]",
        report.checked, report.max_rel_error, report.worst_parameter, report.worst_index
    );
    if passed {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}

// ---------------------------------------------------------------- balance

/// Splits a duplicate id `"{source}#dup{k}@{start}"`.
fn duplicate_origin(id: &str) -> Option<(&str, &str)> {
    let (head, start) = id.rsplit_once('@')?;
    let (source, _) = head.rsplit_once("#dup")?;
    Some((source, start))
}

pub fn balance(manifest: &Path, out_dir: &Path, s: Settings) -> Result<(), CliError> {
    let targets = s
        .targets
        .ok_or_else(|| CliError::Usage("balance needs --targets v+a+,v-a+,v+a-,v-a-".into()))?;
    let data = load_data(manifest)?;
    let outcome =
        balance_dataset(&data, targets, s.seqlen, s.tolerance, s.seed).map_err(dataset_err)?;
    let mut segments = String::from("id\tsource\tstart\tframes\n");
    for seq in &outcome.sequences[data.len()..] {
        let (source, start) = duplicate_origin(seq.video_id()).unwrap_or(("?", "?"));
        let _ = writeln!(
            segments,
            "{}\t{source}\t{start}\t{}",
            seq.video_id(),
            seq.len()
        );
    }
    let summary = format!(
        "targets   {targets:?}\ntolerance {}\nbefore    {}\nafter     {}\nsegments  {}\n",
        s.tolerance, outcome.before, outcome.after, outcome.selections
    );
    let mut out = Outputs::new(out_dir);
    out.add("segments.tsv", segments);
    out.add("balance.txt", summary.clone());
    let mut record = RunRecord::new("balance", Some(&s)).input("manifest", manifest);
    record.results = serde_json::json!({
        "before": outcome.before.proportions(),
        "after": outcome.after.proportions(),
        "segments": outcome.selections,
    });
    out.commit(record)?;
    print!("{summary}");
    Ok(())
}

// ------------------------------------------------------------------ misc

pub fn serve(
    manifest: &Path,
    out_dir: &Path,
    addr: &str,
    ui: Option<PathBuf>,
) -> Result<(), CliError> {
    let m = AnnotationManifest::read(manifest).map_err(input)?;
    let sock: std::net::SocketAddr = addr
        .parse()
        .map_err(|e| CliError::Usage(format!("--addr {addr:?}: {e}")))?;
    if !sock.ip().is_loopback() {
        return Err(CliError::Usage(format!(
            "--addr {addr}: the service only binds loopback addresses"
        )));
    }
    if let Some(dir) = ui.as_ref().filter(|d| !d.is_dir()) {
        return Err(CliError::Usage(format!(
            "--ui {}: not a directory",
            dir.display()
        )));
    }
    let store = SessionStore::open(m, out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(sock)
            .await
            .map_err(|e| CliError::Runtime(format!("bind {sock}: {e}")))?;
        let bound = listener
            .local_addr()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut record = RunRecord::new("serve", None).input("manifest", manifest);
        record.results = serde_json::json!({ "address": bound.to_string() });
        Outputs::new(out_dir).commit(record)?;
        println!("listening on http://{bound}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        affwild_service::serve(
            listener,
            Arc::new(store),
            ServeOptions { ui_dir: ui },
            shutdown,
        )
        .await
        .map_err(|e| CliError::Runtime(e.to_string()))
    })
}

pub fn synth(
    out_dir: &Path,
    seed: u64,
    seed_source: SeedSource,
    videos: usize,
    frames: usize,
    size: usize,
    landmark_points: usize,
) -> Result<(), CliError> {
    if videos == 0 || frames < 2 || size == 0 {
        return Err(CliError::Usage(
            "--videos, --size must be at least 1 and --frames at least 2".into(),
        ));
    }
    let geo = Geometry {
        height: size,
        width: size,
        channels: 3,
        landmark_points,
        pattern_seed: seed,
    };
    // even-numbered videos follow sinusoids, odd ones follow their landmarks
    let data: Vec<Sequence> = (0..videos)
        .map(|i| {
            let id = format!("synth{i:03}");
            let k = seed.wrapping_mul(1000).wrapping_add(i as u64);
            if i % 2 == 0 || landmark_points == 0 {
                sinusoid_video(&id, frames, &geo, i as f64 * 0.7, k)
            } else {
                landmark_video(&id, frames, &geo, k)
            }
        })
        .collect::<Result<_, _>>()
        .map_err(dataset_err)?;
    let path = save_dataset(out_dir, &data).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut record = RunRecord::new("synth", None);
    record.seed = Some(seed);
    record.seed_source = Some(seed_source);
    record.results = serde_json::json!({ "videos": videos, "frames": frames, "size": size });
    Outputs::new(out_dir).commit(record)?;
    println!("wrote {}", path.display());
    Ok(())
}
