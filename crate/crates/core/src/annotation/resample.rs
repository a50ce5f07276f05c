use super::{AnnotationError, AnnotationTrace};
use crate::Scalar;

/// Distances closer than this count as a midpoint tie (1 ns, far below the
/// millisecond resolution of recorded timestamps).
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Nearest-neighbour resampling onto frame times `f / frame_rate`.
///
/// Frames outside the sampled span take the first or last value. A frame
/// halfway between two samples (within [`TIE_TOLERANCE`]) takes the earlier
/// one.
pub fn resample<T: Scalar>(
    trace: &AnnotationTrace<T>,
    frame_rate: f64,
    frame_count: usize,
) -> Result<Vec<T>, AnnotationError> {
    if frame_count == 0 {
        return Err(AnnotationError::Usage(
            "frame_count must be at least 1".into(),
        ));
    }
    if !(frame_rate > 0.0 && frame_rate.is_finite()) {
        return Err(AnnotationError::Usage(format!(
            "invalid frame rate {frame_rate}"
        )));
    }
    let samples = trace.samples();
    if samples.is_empty() {
        return Err(AnnotationError::Usage(
            "cannot resample an empty trace".into(),
        ));
    }
    Ok((0..frame_count)
        .map(|f| {
            let t = f as f64 / frame_rate;
            let after = samples.partition_point(|&(ts, _)| ts < t);
            let idx = match after {
                0 => 0,
                n if n == samples.len() => n - 1,
                n => {
                    let (before_t, after_t) = (samples[n - 1].0, samples[n].0);
                    if (after_t - t) < (t - before_t) - TIE_TOLERANCE {
                        n
                    } else {
                        n - 1
                    }
                }
            };
            samples[idx].1
        })
        .collect())
}
