use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::dataset::LabeledSequence;
use crate::metrics::{MetricError, SeriesPair};
use crate::model::{Head, ModelInstance};
use crate::tensor::Tensor;
use crate::Scalar;

pub const HISTOGRAM_BINS: usize = 20;

/// Produces per-frame `(valence, arousal)` predictions for a sequence.
pub trait Predictor<T>: Sync {
    fn predict(&self, seq: &LabeledSequence<T>) -> Result<Vec<(T, T)>, TrainError>;
}

/// Runs a regression model over `seq_len` windows with fresh recurrent state
/// per window. The last window is zero-padded and its extra outputs dropped.
pub struct ModelPredictor<'a, T> {
    pub model: &'a ModelInstance<T>,
    pub seq_len: usize,
}

impl<T: Scalar> Predictor<T> for ModelPredictor<'_, T> {
    fn predict(&self, seq: &LabeledSequence<T>) -> Result<Vec<(T, T)>, TrainError> {
        if self.model.config.head != Head::Regression2 {
            return Err(TrainError::Usage(
                "evaluation needs the regression head".into(),
            ));
        }
        let rows = windowed_outputs(self.model, seq, self.seq_len)?;
        Ok(rows.into_iter().map(|r| (r[0], r[1])).collect())
    }
}

/// Per-frame model outputs over `seq_len` windows with fresh recurrent
/// state per window; the last window is zero-padded and truncated.
pub fn windowed_outputs<T: Scalar>(
    model: &ModelInstance<T>,
    seq: &LabeledSequence<T>,
    seq_len: usize,
) -> Result<Vec<Vec<T>>, TrainError> {
    let cfg = &model.config;
    if seq_len == 0 {
        return Err(TrainError::Usage("seq_len must be positive".into()));
    }
    if seq.frame_shape() != cfg.input {
        return Err(TrainError::Config(format!(
            "video {} has frames {:?}, model expects {:?}",
            seq.video_id(),
            seq.frame_shape(),
            cfg.input
        )));
    }
    let lm_dim = if cfg.use_landmarks {
        cfg.landmark_dim
    } else {
        0
    };
    if cfg.use_landmarks && seq.landmark_dim() != lm_dim {
        return Err(TrainError::Config(format!(
            "video {} has {} landmark values per frame, model expects {lm_dim}",
            seq.video_id(),
            seq.landmark_dim()
        )));
    }
    let n = seq.len();
    let windows = n.div_ceil(seq_len);
    let frame_len: usize = cfg.input.iter().product();
    let mut frames = vec![T::zero(); windows * seq_len * frame_len];
    let mut landmarks = vec![T::zero(); windows * seq_len * lm_dim];
    for (i, f) in seq.frames().iter().enumerate() {
        frames[i * frame_len..(i + 1) * frame_len].copy_from_slice(f.data());
        if lm_dim > 0 {
            landmarks[i * lm_dim..(i + 1) * lm_dim].copy_from_slice(&seq.landmarks()[i]);
        }
    }
    let mut shape = vec![windows, seq_len];
    shape.extend_from_slice(&cfg.input);
    let frames = Tensor::new(shape, frames)?;
    let landmarks = Tensor::new(vec![windows, seq_len, lm_dim], landmarks)?;
    let out = model.forward(&frames, cfg.use_landmarks.then_some(&landmarks))?;
    Ok(out
        .data()
        .chunks(cfg.head.outputs())
        .take(n)
        .map(<[T]>::to_vec)
        .collect())
}

/// Fraction of frames whose most probable class is the labelled one.
pub fn frame_accuracy<T: Scalar>(
    model: &ModelInstance<T>,
    dataset: &[LabeledSequence<T>],
    seq_len: usize,
) -> Result<f64, TrainError> {
    let (mut hit, mut total) = (0usize, 0usize);
    for seq in dataset {
        let classes = seq.classes().ok_or_else(|| {
            TrainError::Usage(format!("video {} has no class labels", seq.video_id()))
        })?;
        for (row, &c) in windowed_outputs(model, seq, seq_len)?.iter().zip(classes) {
            let best = (1..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            hit += usize::from(best == c);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    #[serde(rename = "per-video")]
    PerVideo,
    #[serde(rename = "concat")]
    Concatenated,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::PerVideo => "per-video",
            EvalMode::Concatenated => "concat",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-video" => Ok(EvalMode::PerVideo),
            "concat" | "concatenated" => Ok(EvalMode::Concatenated),
            _ => Err(TrainError::Usage(format!(
                "unknown mode {s:?} (expected per-video or concat)"
            ))),
        }
    }
}

/// Scores for one dimension. A correlation that is undefined (constant
/// series, fewer than two frames) is reported as 0 with `degenerate` set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimScores {
    pub ccc: f64,
    pub pearson: f64,
    pub mse: f64,
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub valence: DimScores,
    pub arousal: DimScores,
}

impl PairScores {
    pub fn mean_ccc(&self) -> f64 {
        (self.valence.ccc + self.arousal.ccc) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub video_id: String,
    pub frames: usize,
    pub scores: PairScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: EvalMode,
    pub frames: usize,
    pub videos: Vec<VideoScores>,
    pub concatenated: PairScores,
    /// Headline scores of `mode`: per-video means or the concatenated values.
    pub summary: PairScores,
    pub mean_ccc: f64,
    /// Counts indexed `[valence bin][arousal bin]` over `[-1, 1]²`.
    pub histogram_predictions: Vec<Vec<u64>>,
    pub histogram_labels: Vec<Vec<u64>>,
}

fn score<T: Scalar>(pred: &[T], label: &[T]) -> Result<DimScores, TrainError> {
    let pair = SeriesPair::new(pred, label).map_err(|e| TrainError::Usage(e.to_string()))?;
    let soft = |r: Result<T, MetricError>| match r {
        Ok(v) => Ok((v.to_f64_lossless(), false)),
        Err(MetricError::LengthMismatch(a, b)) => {
            Err(TrainError::Usage(format!("{a} predictions for {b} labels")))
        }
        Err(_) => Ok((0.0, true)),
    };
    let (ccc, d1) = soft(pair.ccc())?;
    let (pearson, d2) = soft(pair.pearson())?;
    let mse = pair
        .mse()
        .map_err(|e| TrainError::Usage(e.to_string()))?
        .to_f64_lossless();
    Ok(DimScores {
        ccc,
        pearson,
        mse,
        degenerate: d1 || d2,
    })
}

fn pair_scores<T: Scalar>(
    pred: &[(T, T)],
    valence: &[T],
    arousal: &[T],
) -> Result<PairScores, TrainError> {
    let pv: Vec<T> = pred.iter().map(|p| p.0).collect();
    let pa: Vec<T> = pred.iter().map(|p| p.1).collect();
    Ok(PairScores {
        valence: score(&pv, valence)?,
        arousal: score(&pa, arousal)?,
    })
}

/// Bin of `v` on a [`HISTOGRAM_BINS`] grid over `[-1, 1]`; values outside
/// fall into the edge bins.
pub fn histogram_bin(v: f64) -> usize {
    let b = ((v + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor();
    if b.is_nan() || b < 0.0 {
        0
    } else {
        (b as usize).min(HISTOGRAM_BINS - 1)
    }
}

fn histogram<T: Scalar>(points: impl Iterator<Item = (T, T)>) -> Vec<Vec<u64>> {
    let mut h = vec![vec![0u64; HISTOGRAM_BINS]; HISTOGRAM_BINS];
    for (v, a) in points {
        h[histogram_bin(v.to_f64_lossless())][histogram_bin(a.to_f64_lossless())] += 1;
    }
    h
}

/// Predictions for every video, computed in parallel across videos.
pub fn predict_dataset<T: Scalar, P: Predictor<T>>(
    predictor: &P,
    dataset: &[LabeledSequence<T>],
) -> Result<Vec<Vec<(T, T)>>, TrainError> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(dataset.len().max(1));
    let chunk = dataset.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = dataset
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|seq| predictor.predict(seq))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("prediction thread panicked"))
            .collect()
    })
}

/// Scores precomputed predictions against the dataset labels.
pub fn report_from_predictions<T: Scalar>(
    dataset: &[LabeledSequence<T>],
    predictions: &[Vec<(T, T)>],
    mode: EvalMode,
) -> Result<EvaluationReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::Usage("empty dataset".into()));
    }
    if predictions.len() != dataset.len() {
        return Err(TrainError::Usage(format!(
            "{} prediction series for {} videos",
            predictions.len(),
            dataset.len()
        )));
    }
    let mut videos = Vec::with_capacity(dataset.len());
    let (mut all_pred, mut all_v, mut all_a) = (Vec::new(), Vec::new(), Vec::new());
    for (seq, pred) in dataset.iter().zip(predictions) {
        videos.push(VideoScores {
            video_id: seq.video_id().to_string(),
            frames: seq.len(),
            scores: pair_scores(pred, seq.valence(), seq.arousal())?,
        });
        all_pred.extend_from_slice(pred);
        all_v.extend_from_slice(seq.valence());
        all_a.extend_from_slice(seq.arousal());
    }
    let concatenated = pair_scores(&all_pred, &all_v, &all_a)?;
    let summary = match mode {
        EvalMode::Concatenated => concatenated,
        EvalMode::PerVideo => {
            let k = videos.len() as f64;
            let mean = |f: &dyn Fn(&PairScores) -> DimScores| DimScores {
                ccc: videos.iter().map(|v| f(&v.scores).ccc).sum::<f64>() / k,
                pearson: videos.iter().map(|v| f(&v.scores).pearson).sum::<f64>() / k,
                mse: videos.iter().map(|v| f(&v.scores).mse).sum::<f64>() / k,
                degenerate: videos.iter().any(|v| f(&v.scores).degenerate),
            };
            PairScores {
                valence: mean(&|s| s.valence),
                arousal: mean(&|s| s.arousal),
            }
        }
    };
    Ok(EvaluationReport {
        mode,
        frames: all_v.len(),
        videos,
        concatenated,
        summary,
        mean_ccc: summary.mean_ccc(),
        histogram_predictions: histogram(all_pred.iter().copied()),
        histogram_labels: histogram(all_v.iter().copied().zip(all_a.iter().copied())),
    })
}

pub fn evaluate<T: Scalar, P: Predictor<T>>(
    predictor: &P,
    dataset: &[LabeledSequence<T>],
    mode: EvalMode,
) -> Result<EvaluationReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::Usage("empty dataset".into()));
    }
    let preds = predict_dataset(predictor, dataset)?;
    report_from_predictions(dataset, &preds, mode)
}

impl EvaluationReport {
    /// Human-readable table followed by a `[metrics]` key=value block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "evaluation mode: {}  frames: {}",
            self.mode.as_str(),
            self.frames
        );
        let _ = writeln!(
            s,
            "{:<16} {:>7} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "video", "frames", "ccc_v", "ccc_a", "pcc_v", "pcc_a", "mse_v", "mse_a"
        );
        let row = |s: &mut String, name: &str, frames: usize, p: &PairScores| {
            let flag = if p.valence.degenerate || p.arousal.degenerate {
                " *"
            } else {
                ""
            };
            let _ = writeln!(
                s,
                "{:<16} {:>7} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}{flag}",
                name,
                frames,
                p.valence.ccc,
                p.arousal.ccc,
                p.valence.pearson,
                p.arousal.pearson,
                p.valence.mse,
                p.arousal.mse
            );
        };
        for v in &self.videos {
            row(&mut s, &v.video_id, v.frames, &v.scores);
        }
        row(&mut s, "(concatenated)", self.frames, &self.concatenated);
        let _ = writeln!(s, "mean CCC: {:.4}", self.mean_ccc);
        if self
            .videos
            .iter()
            .any(|v| v.scores.valence.degenerate || v.scores.arousal.degenerate)
        {
            let _ = writeln!(s, "* undefined correlation reported as 0");
        }
        s.push_str("\n[metrics]\n");
        for (k, v) in self.key_values() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn key_values(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("mode".to_string(), self.mode.as_str().to_string()),
            ("frames".into(), self.frames.to_string()),
        ];
        let mut dims = |prefix: &str, p: &PairScores| {
            for (dim, d) in [("valence", &p.valence), ("arousal", &p.arousal)] {
                kv.push((format!("{prefix}ccc_{dim}"), d.ccc.to_string()));
                kv.push((format!("{prefix}pearson_{dim}"), d.pearson.to_string()));
                kv.push((format!("{prefix}mse_{dim}"), d.mse.to_string()));
                kv.push((
                    format!("{prefix}degenerate_{dim}"),
                    d.degenerate.to_string(),
                ));
            }
        };
        dims("", &self.summary);
        dims("concat.", &self.concatenated);
        for v in &self.videos {
            dims(&format!("video.{}.", v.video_id), &v.scores);
        }
        kv.push(("mean_ccc".into(), self.mean_ccc.to_string()));
        kv
    }
}

/// Writes `<dir>/<video_id>.pred` with one `valence,arousal` line per frame.
pub fn write_predictions<T: Scalar>(
    dir: &Path,
    video_id: &str,
    preds: &[(T, T)],
) -> Result<PathBuf, TrainError> {
    let path = dir.join(format!("{video_id}.pred"));
    let mut s = String::with_capacity(preds.len() * 24);
    for (v, a) in preds {
        let _ = writeln!(s, "{v},{a}");
    }
    std::fs::write(&path, s).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

pub fn read_predictions<T: Scalar>(path: &Path) -> Result<Vec<(T, T)>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let parse = |s: Option<&str>| s.and_then(|s| s.trim().parse::<T>().ok());
            let mut it = l.split(',');
            match (parse(it.next()), parse(it.next()), it.next()) {
                (Some(v), Some(a), None) => Ok((v, a)),
                _ => Err(TrainError::Usage(format!(
                    "{}:{}: expected valence,arousal",
                    path.display(),
                    i + 1
                ))),
            }
        })
        .collect()
}
