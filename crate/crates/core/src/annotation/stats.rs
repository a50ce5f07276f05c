use serde::{Deserialize, Serialize};

use super::{resample, AnnotationError, Dimension, VideoAnnotations};
use crate::metrics;
use crate::Scalar;

/// Pairwise Pearson correlations between annotators of one dimension.
///
/// `values[i][j]` is `None` when either trace is constant on the frame grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix<T> {
    pub annotators: Vec<String>,
    pub values: Vec<Vec<Option<T>>>,
}

impl<T: Scalar> CorrelationMatrix<T> {
    pub fn get(&self, i: usize, j: usize) -> Option<T> {
        self.values[i][j]
    }

    /// Pairs whose correlation is undefined, listed once with `i < j`.
    pub fn undefined_pairs(&self) -> Vec<(String, String)> {
        let k = self.annotators.len();
        let mut out = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                if self.values[i][j].is_none() {
                    out.push((self.annotators[i].clone(), self.annotators[j].clone()));
                }
            }
        }
        out
    }

    /// Mean correlation of each listed annotator with the other listed ones,
    /// skipping the diagonal and undefined pairs.
    fn average_within(&self, members: &[usize]) -> Vec<Option<T>> {
        members
            .iter()
            .map(|&i| {
                let defined: Vec<T> = members
                    .iter()
                    .filter(|&&j| j != i)
                    .filter_map(|&j| self.values[i][j])
                    .collect();
                (!defined.is_empty()).then(|| {
                    defined.iter().copied().sum::<T>() / T::from_usize_lossy(defined.len())
                })
            })
            .collect()
    }
}

/// Resamples every trace of `dim` to the frame grid and correlates each pair.
pub fn inter_annotator_correlations<T: Scalar>(
    v: &VideoAnnotations<T>,
    dim: Dimension,
) -> Result<CorrelationMatrix<T>, AnnotationError> {
    let traces: Vec<_> = v.traces_for(dim).collect();
    if traces.len() < 2 {
        return Err(AnnotationError::Usage(format!(
            "video {}: need at least two {dim} traces, found {}",
            v.video_id,
            traces.len()
        )));
    }
    let grid = traces
        .iter()
        .map(|t| resample(t, v.frame_rate, v.frame_count))
        .collect::<Result<Vec<_>, _>>()?;
    let k = traces.len();
    let mut values = vec![vec![None; k]; k];
    for i in 0..k {
        values[i][i] = Some(T::one());
        for j in i + 1..k {
            let r = metrics::pearson(&grid[i], &grid[j]).ok();
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        annotators: traces
            .iter()
            .map(|t| t.annotator_id().to_string())
            .collect(),
        values,
    })
}

/// Per-video agreement summary for one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacReport<T> {
    pub video_id: String,
    pub dimension: Dimension,
    /// Each annotator's mean correlation with all others (`None` if every
    /// pair involving it was undefined).
    pub per_annotator: Vec<(String, Option<T>)>,
    pub mac_a: T,
    /// Present when a selection of at least two annotators exists.
    pub mac_s: Option<T>,
    pub undefined_pairs: Vec<(String, String)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacStatistic {
    MacA,
    MacS,
}

fn mean_defined<T: Scalar>(values: &[Option<T>]) -> Option<T> {
    let defined: Vec<T> = values.iter().flatten().copied().collect();
    (!defined.is_empty())
        .then(|| defined.iter().copied().sum::<T>() / T::from_usize_lossy(defined.len()))
}

/// MAC-A over all annotators and, given a selection, MAC-S over the
/// selected ones.
pub fn mac<T: Scalar>(
    v: &VideoAnnotations<T>,
    dim: Dimension,
) -> Result<MacReport<T>, AnnotationError> {
    v.validate()?;
    let m = inter_annotator_correlations(v, dim)?;
    let everyone: Vec<usize> = (0..m.annotators.len()).collect();
    let averages = m.average_within(&everyone);
    let mac_a = mean_defined(&averages).ok_or_else(|| {
        AnnotationError::Degenerate(format!(
            "video {}: no defined {dim} inter-annotator correlation",
            v.video_id
        ))
    })?;
    let mac_s = v.selected_for(dim).and_then(|sel| {
        let idx: Vec<usize> = sel
            .iter()
            .filter_map(|id| m.annotators.iter().position(|a| a == id))
            .collect();
        (idx.len() >= 2)
            .then(|| mean_defined(&m.average_within(&idx)))
            .flatten()
    });
    Ok(MacReport {
        video_id: v.video_id.clone(),
        dimension: dim,
        per_annotator: m.annotators.iter().cloned().zip(averages).collect(),
        mac_a,
        mac_s,
        undefined_pairs: m.undefined_pairs(),
    })
}

/// Frame-wise mean of the selected annotators' resampled traces.
pub fn final_labels<T: Scalar>(
    v: &VideoAnnotations<T>,
    dim: Dimension,
) -> Result<Vec<T>, AnnotationError> {
    v.validate()?;
    let selected = v.selected_for(dim).ok_or_else(|| {
        AnnotationError::Usage(format!("video {}: no {dim} selection", v.video_id))
    })?;
    let mut sum = vec![T::zero(); v.frame_count];
    for id in selected {
        let trace = v
            .traces_for(dim)
            .find(|t| t.annotator_id() == id)
            .expect("validated selection");
        for (s, x) in sum
            .iter_mut()
            .zip(resample(trace, v.frame_rate, v.frame_count)?)
        {
            *s += x;
        }
    }
    let k = T::from_usize_lossy(selected.len());
    Ok(sum
        .into_iter()
        .map(|s| (s / k).max(-T::one()).min(T::one()))
        .collect())
}

/// Fraction of reports whose statistic is at least each threshold.
///
/// Reports without the requested statistic (no selection) are skipped.
pub fn mac_cdf<T: Scalar>(
    reports: &[MacReport<T>],
    which: MacStatistic,
    grid: &[T],
) -> Result<Vec<T>, AnnotationError> {
    let values: Vec<T> = reports
        .iter()
        .filter_map(|r| match which {
            MacStatistic::MacA => Some(r.mac_a),
            MacStatistic::MacS => r.mac_s,
        })
        .collect();
    if values.is_empty() {
        return Err(AnnotationError::Usage(format!(
            "no reports carry {which:?}"
        )));
    }
    let n = T::from_usize_lossy(values.len());
    Ok(grid
        .iter()
        .map(|&x| T::from_usize_lossy(values.iter().filter(|&&v| v >= x).count()) / n)
        .collect())
}
