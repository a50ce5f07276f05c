//! TOML manifest listing videos, their trace files and annotator selections.
//!
//! ```toml
//! [[video]]
//! id = "v01"
//! frame_rate = 25.0
//! frame_count = 750
//! media = "media/v01.mp4"
//! landmarks = "landmarks/v01.lm"
//! trace = ["traces/a1_v01_valence.trace", "traces/a2_v01_valence.trace"]
//!
//! [video.selected]
//! valence = ["a1", "a2"]
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{read_landmarks, read_text, read_trace};
use super::{AnnotationError, Dimension, VideoAnnotations};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    pub frame_rate: f64,
    pub frame_count: usize,
    /// Playable media for the annotation UI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<PathBuf>,
    #[serde(default, rename = "trace")]
    pub traces: Vec<PathBuf>,
    #[serde(default)]
    pub selected: BTreeMap<Dimension, Vec<String>>,
}

impl VideoEntry {
    pub fn duration(&self) -> f64 {
        self.frame_count as f64 / self.frame_rate
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationManifest {
    #[serde(default, rename = "video")]
    pub videos: Vec<VideoEntry>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl AnnotationManifest {
    /// `path` labels diagnostics and supplies the resolution root.
    pub fn parse(path: &Path, text: &str) -> Result<Self, AnnotationError> {
        let label = path.display().to_string();
        let mut m: AnnotationManifest = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(1);
            AnnotationError::Parse {
                path: label.clone(),
                line,
                msg: e.message().to_string(),
            }
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut seen = HashSet::new();
        for v in &m.videos {
            let bad =
                |msg: String| AnnotationError::Usage(format!("{label}: video {:?}: {msg}", v.id));
            if v.id.is_empty()
                || v.id
                    .chars()
                    .any(|c| c.is_whitespace() || c == '/' || c == '=' || c == ',')
            {
                return Err(bad(
                    "id must be nonempty without whitespace, '/', '=' or ','".into(),
                ));
            }
            if !seen.insert(&v.id) {
                return Err(bad("listed twice".into()));
            }
            if !(v.frame_rate > 0.0 && v.frame_rate.is_finite()) {
                return Err(bad(format!("frame_rate {} must be positive", v.frame_rate)));
            }
            if v.frame_count == 0 {
                return Err(bad("frame_count must be at least 1".into()));
            }
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self, AnnotationError> {
        Self::parse(path, &read_text(path)?)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn video(&self, id: &str) -> Option<&VideoEntry> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Reads every trace and the landmark file of one entry.
    pub fn load_video<T: Scalar>(
        &self,
        entry: &VideoEntry,
    ) -> Result<VideoAnnotations<T>, AnnotationError> {
        let mut traces = Vec::with_capacity(entry.traces.len());
        for p in &entry.traces {
            let path = self.resolve(p);
            let t = read_trace::<T>(&path)?;
            if t.video_id() != entry.id {
                return Err(AnnotationError::Parse {
                    path: path.display().to_string(),
                    line: 1,
                    msg: format!(
                        "trace is for video {}, manifest lists it under {}",
                        t.video_id(),
                        entry.id
                    ),
                });
            }
            traces.push(t);
        }
        let landmarks = entry
            .landmarks
            .as_ref()
            .map(|p| read_landmarks::<T>(&self.resolve(p)))
            .transpose()?;
        let v = VideoAnnotations {
            video_id: entry.id.clone(),
            frame_rate: entry.frame_rate,
            frame_count: entry.frame_count,
            traces,
            selected: entry.selected.clone(),
            landmarks,
        };
        v.validate()?;
        Ok(v)
    }
}
