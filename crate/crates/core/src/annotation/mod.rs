//! Post-processing of continuous annotation traces.
//!
//! Raw traces arrive with irregular timestamps. They are resampled onto the
//! video frame grid, compared pairwise across annotators (MAC-A / MAC-S
//! statistics), and the selected subset is averaged into final per-frame
//! labels.

mod cca;
pub mod io;
mod manifest;
mod resample;
mod stats;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cca::{cca_first, CCA_RIDGE};
pub use manifest::{AnnotationManifest, VideoEntry};
pub use resample::{resample, TIE_TOLERANCE};
pub use stats::{
    final_labels, inter_annotator_correlations, mac, mac_cdf, CorrelationMatrix, MacReport,
    MacStatistic,
};

use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Valence,
    Arousal,
}

impl Dimension {
    pub const ALL: [Dimension; 2] = [Dimension::Valence, Dimension::Arousal];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Valence => "valence",
            Dimension::Arousal => "arousal",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = AnnotationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "valence" => Ok(Dimension::Valence),
            "arousal" => Ok(Dimension::Arousal),
            other => Err(AnnotationError::Usage(format!(
                "unknown dimension {other:?} (expected valence or arousal)"
            ))),
        }
    }
}

/// Time-stamped samples from one annotator for one dimension.
///
/// Timestamps are media time in seconds and strictly increasing; values lie
/// in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationTrace<T> {
    annotator_id: String,
    video_id: String,
    dimension: Dimension,
    samples: Vec<(f64, T)>,
}

impl<T: Scalar> AnnotationTrace<T> {
    pub fn new(
        annotator_id: impl Into<String>,
        video_id: impl Into<String>,
        dimension: Dimension,
        samples: Vec<(f64, T)>,
    ) -> Result<Self, AnnotationError> {
        if samples.is_empty() {
            return Err(AnnotationError::Usage("trace has no samples".into()));
        }
        for (i, &(t, v)) in samples.iter().enumerate() {
            if !t.is_finite() {
                return Err(AnnotationError::Usage(format!(
                    "sample {i}: timestamp {t} not finite"
                )));
            }
            if i > 0 && t <= samples[i - 1].0 {
                return Err(AnnotationError::Usage(format!(
                    "sample {i}: timestamp {t} does not increase"
                )));
            }
            if !(v >= -T::one() && v <= T::one()) {
                return Err(AnnotationError::Usage(format!(
                    "sample {i}: value {v} outside [-1, 1]"
                )));
            }
        }
        Ok(AnnotationTrace {
            annotator_id: annotator_id.into(),
            video_id: video_id.into(),
            dimension,
            samples,
        })
    }

    pub fn annotator_id(&self) -> &str {
        &self.annotator_id
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn dimension(&self) -> Dimension {
        self.dimension
    }

    pub fn samples(&self) -> &[(f64, T)] {
        &self.samples
    }

    pub fn negated(&self) -> Self {
        AnnotationTrace {
            samples: self.samples.iter().map(|&(t, v)| (t, -v)).collect(),
            ..self.clone()
        }
    }
}

/// Everything known about one video's annotation.
#[derive(Clone, Debug)]
pub struct VideoAnnotations<T> {
    pub video_id: String,
    pub frame_rate: f64,
    pub frame_count: usize,
    pub traces: Vec<AnnotationTrace<T>>,
    /// Per-dimension annotators whose mean forms the final labels.
    pub selected: BTreeMap<Dimension, Vec<String>>,
    /// Per-frame landmark coordinates, `2·L` values per row.
    pub landmarks: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> VideoAnnotations<T> {
    /// Checks selection membership and landmark row count.
    pub fn validate(&self) -> Result<(), AnnotationError> {
        if self.frame_count == 0 || !(self.frame_rate > 0.0) {
            return Err(AnnotationError::Usage(format!(
                "video {}: frame_count must be ≥ 1 and frame_rate > 0",
                self.video_id
            )));
        }
        for (dim, ids) in &self.selected {
            let present: Vec<&str> = self.traces_for(*dim).map(|t| t.annotator_id()).collect();
            for id in ids {
                if !present.contains(&id.as_str()) {
                    return Err(AnnotationError::Usage(format!(
                        "video {}: selected {dim} annotator {id} has no trace",
                        self.video_id
                    )));
                }
            }
        }
        if let Some(rows) = &self.landmarks {
            if rows.len() != self.frame_count {
                return Err(AnnotationError::Usage(format!(
                    "video {}: {} landmark rows for {} frames",
                    self.video_id,
                    rows.len(),
                    self.frame_count
                )));
            }
        }
        Ok(())
    }

    pub fn traces_for(&self, dim: Dimension) -> impl Iterator<Item = &AnnotationTrace<T>> {
        self.traces.iter().filter(move |t| t.dimension() == dim)
    }

    pub fn selected_for(&self, dim: Dimension) -> Option<&[String]> {
        self.selected
            .get(&dim)
            .map(Vec::as_slice)
            .filter(|s| !s.is_empty())
    }
}
