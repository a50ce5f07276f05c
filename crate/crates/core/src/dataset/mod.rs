//! Labelled frame sequences, quadrant statistics, oversampling and batching.

mod balance;
mod batch;
mod loader;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use balance::{balance, iteration_cap, BalanceOutcome};
pub use batch::{aligned_windows, batch_sequences, Batch, BatchStream, Window};
pub use loader::{
    load_dataset, parse_manifest, rescale_labels, save_dataset, ManifestEntry, DATASET_FORMAT,
};

use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("balancing stopped after {iterations} selections at proportions {achieved:?} (targets {targets:?})")]
    BalanceFailure {
        iterations: usize,
        achieved: [f64; 4],
        targets: [f64; 4],
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Load { path: String, msg: String },
    #[error(transparent)]
    Annotation(#[from] crate::annotation::AnnotationError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Per-frame images, landmarks and valence/arousal labels of one video.
///
/// Frames are `[H, W, C]` tensors in `[-1, 1]`; landmark rows hold `2·L`
/// coordinates in `[0, 1]` (`L` may be zero); labels lie in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence<T> {
    video_id: String,
    frames: Vec<Tensor<T>>,
    landmarks: Vec<Vec<T>>,
    valence: Vec<T>,
    arousal: Vec<T>,
    classes: Option<Vec<usize>>,
}

fn in_range<T: Scalar>(v: T, lo: T, hi: T) -> bool {
    v >= lo && v <= hi
}

impl<T: Scalar> LabeledSequence<T> {
    pub fn new(
        video_id: impl Into<String>,
        frames: Vec<Tensor<T>>,
        landmarks: Vec<Vec<T>>,
        valence: Vec<T>,
        arousal: Vec<T>,
    ) -> Result<Self, DatasetError> {
        let video_id = video_id.into();
        let n = frames.len();
        let bad = |msg: String| DatasetError::Usage(format!("sequence {video_id}: {msg}"));
        if n == 0 {
            return Err(bad("no frames".into()));
        }
        if landmarks.len() != n || valence.len() != n || arousal.len() != n {
            return Err(bad(format!(
                "{n} frames, {} landmark rows, {} valence and {} arousal labels",
                landmarks.len(),
                valence.len(),
                arousal.len()
            )));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(bad(format!("frames must be [H, W, C], got {shape:?}")));
        }
        let (neg, one) = (-T::one(), T::one());
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != shape.as_slice() {
                return Err(bad(format!(
                    "frame {i} has shape {:?}, expected {shape:?}",
                    f.shape()
                )));
            }
            if !f.data().iter().all(|&v| in_range(v, neg, one)) {
                return Err(bad(format!("frame {i} has intensities outside [-1, 1]")));
            }
        }
        let width = landmarks[0].len();
        for (i, row) in landmarks.iter().enumerate() {
            if row.len() != width || width % 2 != 0 {
                return Err(bad(format!("landmark row {i} has width {}", row.len())));
            }
            if !row.iter().all(|&v| in_range(v, T::zero(), one)) {
                return Err(bad(format!("landmark row {i} leaves [0, 1]")));
            }
        }
        for (name, labels) in [("valence", &valence), ("arousal", &arousal)] {
            if let Some(i) = labels.iter().position(|&v| !in_range(v, neg, one)) {
                return Err(bad(format!("{name} label {i} outside [-1, 1]")));
            }
        }
        Ok(LabeledSequence {
            video_id,
            frames,
            landmarks,
            valence,
            arousal,
            classes: None,
        })
    }

    /// Attaches per-frame categorical class indices.
    pub fn with_classes(mut self, classes: Vec<usize>) -> Result<Self, DatasetError> {
        if classes.len() != self.len() {
            return Err(DatasetError::Usage(format!(
                "sequence {}: {} class labels for {} frames",
                self.video_id,
                classes.len(),
                self.len()
            )));
        }
        self.classes = Some(classes);
        Ok(self)
    }

    pub fn classes(&self) -> Option<&[usize]> {
        self.classes.as_deref()
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Tensor<T>] {
        &self.frames
    }

    pub fn frame_shape(&self) -> &[usize] {
        self.frames[0].shape()
    }

    pub fn landmarks(&self) -> &[Vec<T>] {
        &self.landmarks
    }

    pub fn landmark_dim(&self) -> usize {
        self.landmarks[0].len()
    }

    pub fn valence(&self) -> &[T] {
        &self.valence
    }

    pub fn arousal(&self) -> &[T] {
        &self.arousal
    }

    pub fn quadrant(&self, frame: usize) -> Quadrant {
        Quadrant::of(self.valence[frame], self.arousal[frame])
    }

    /// Copy of frames `start..start + len` as a new sequence.
    pub fn segment(&self, start: usize, len: usize, video_id: impl Into<String>) -> Self {
        let r = start..start + len;
        LabeledSequence {
            video_id: video_id.into(),
            frames: self.frames[r.clone()].to_vec(),
            landmarks: self.landmarks[r.clone()].to_vec(),
            valence: self.valence[r.clone()].to_vec(),
            arousal: self.arousal[r.clone()].to_vec(),
            classes: self.classes.as_ref().map(|c| c[r].to_vec()),
        }
    }
}

/// Valence/arousal sign quadrant. Zero counts as positive on either axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    PosValencePosArousal,
    NegValencePosArousal,
    PosValenceNegArousal,
    NegValenceNegArousal,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::PosValencePosArousal,
        Quadrant::NegValencePosArousal,
        Quadrant::PosValenceNegArousal,
        Quadrant::NegValenceNegArousal,
    ];

    pub fn of<T: Scalar>(valence: T, arousal: T) -> Quadrant {
        match (valence >= T::zero(), arousal >= T::zero()) {
            (true, true) => Quadrant::PosValencePosArousal,
            (false, true) => Quadrant::NegValencePosArousal,
            (true, false) => Quadrant::PosValenceNegArousal,
            (false, false) => Quadrant::NegValenceNegArousal,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Quadrant::PosValencePosArousal => "v+a+",
            Quadrant::NegValencePosArousal => "v-a+",
            Quadrant::PosValenceNegArousal => "v+a-",
            Quadrant::NegValenceNegArousal => "v-a-",
        }
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Frame counts per quadrant in [`Quadrant::ALL`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadrantStats {
    pub counts: [usize; 4],
}

impl QuadrantStats {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn proportions(&self) -> [f64; 4] {
        let total = self.total() as f64;
        self.counts.map(|c| c as f64 / total)
    }

    pub fn within(&self, targets: &[f64; 4], tolerance: f64) -> bool {
        self.proportions()
            .iter()
            .zip(targets)
            .all(|(p, t)| (p - t).abs() <= tolerance)
    }
}

impl fmt::Display for QuadrantStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.proportions();
        for (i, q) in Quadrant::ALL.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{q}={}({:.4})", self.counts[i], p[i])?;
        }
        Ok(())
    }
}

pub fn quadrant_stats<T: Scalar>(
    dataset: &[LabeledSequence<T>],
) -> Result<QuadrantStats, DatasetError> {
    if dataset.is_empty() {
        return Err(DatasetError::Usage("empty dataset".into()));
    }
    let mut stats = QuadrantStats::default();
    for seq in dataset {
        for (&v, &a) in seq.valence.iter().zip(&seq.arousal) {
            stats.counts[Quadrant::of(v, a).index()] += 1;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests;
