use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, LabeledSequence};
use crate::tensor::Tensor;
use crate::Scalar;

/// A window of consecutive frames inside one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Window {
    pub sequence: usize,
    pub start: usize,
}

/// Stacked windows: frames `[B, T, H, W, C]`, landmarks `[B, T, 2L]`,
/// labels `[B, T]`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub windows: Vec<Window>,
    pub frames: Tensor<T>,
    pub landmarks: Tensor<T>,
    pub valence: Tensor<T>,
    pub arousal: Tensor<T>,
    /// Row-major `B·T` class indices when every sequence carries them.
    pub classes: Option<Vec<usize>>,
}

impl<T: Scalar> Batch<T> {
    pub fn assemble(
        dataset: &[LabeledSequence<T>],
        windows: &[Window],
        seq_len: usize,
    ) -> Result<Self, DatasetError> {
        let first = windows
            .first()
            .ok_or_else(|| DatasetError::Usage("empty batch".into()))?;
        let frame_shape = dataset[first.sequence].frame_shape().to_vec();
        let lm_dim = dataset[first.sequence].landmark_dim();
        let b = windows.len();
        let mut frames = Vec::with_capacity(b * seq_len * frame_shape.iter().product::<usize>());
        let mut landmarks = Vec::with_capacity(b * seq_len * lm_dim);
        let mut valence = Vec::with_capacity(b * seq_len);
        let mut arousal = Vec::with_capacity(b * seq_len);
        let mut classes = Some(Vec::with_capacity(b * seq_len));
        for w in windows {
            let seq = &dataset[w.sequence];
            if seq.frame_shape() != frame_shape.as_slice() || seq.landmark_dim() != lm_dim {
                return Err(DatasetError::Usage(format!(
                    "sequence {} differs in frame shape or landmark width",
                    seq.video_id()
                )));
            }
            if w.start + seq_len > seq.len() {
                return Err(DatasetError::Usage(format!(
                    "window {}..{} exceeds sequence {} of {} frames",
                    w.start,
                    w.start + seq_len,
                    seq.video_id(),
                    seq.len()
                )));
            }
            let r = w.start..w.start + seq_len;
            for f in &seq.frames()[r.clone()] {
                frames.extend_from_slice(f.data());
            }
            for row in &seq.landmarks()[r.clone()] {
                landmarks.extend_from_slice(row);
            }
            valence.extend_from_slice(&seq.valence()[r.clone()]);
            arousal.extend_from_slice(&seq.arousal()[r.clone()]);
            classes = match (classes, seq.classes()) {
                (Some(mut acc), Some(c)) => {
                    acc.extend_from_slice(&c[r]);
                    Some(acc)
                }
                _ => None,
            };
        }
        let mut shape = vec![b, seq_len];
        shape.extend_from_slice(&frame_shape);
        Ok(Batch {
            windows: windows.to_vec(),
            frames: Tensor::new(shape, frames)?,
            landmarks: Tensor::new(vec![b, seq_len, lm_dim], landmarks)?,
            valence: Tensor::new(vec![b, seq_len], valence)?,
            arousal: Tensor::new(vec![b, seq_len], arousal)?,
            classes,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.windows.len()
    }
}

/// Every non-overlapping window of `seq_len` frames aligned to frame 0 of its
/// sequence, in dataset order. Trailing remainders are dropped.
pub fn aligned_windows<T: Scalar>(
    dataset: &[LabeledSequence<T>],
    seq_len: usize,
) -> Result<Vec<Window>, DatasetError> {
    if seq_len == 0 {
        return Err(DatasetError::Usage("seq_len must be at least 1".into()));
    }
    let windows: Vec<Window> = dataset
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| {
            (0..seq.len() / seq_len).map(move |k| Window {
                sequence: s,
                start: k * seq_len,
            })
        })
        .collect();
    if windows.is_empty() {
        return Err(DatasetError::Usage(format!(
            "no sequence has at least {seq_len} frames"
        )));
    }
    Ok(windows)
}

/// One epoch of shuffled batches.
pub struct BatchStream<'a, T> {
    dataset: &'a [LabeledSequence<T>],
    windows: Vec<Window>,
    seq_len: usize,
    batch_size: usize,
    next: usize,
}

impl<T> BatchStream<'_, T> {
    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn num_batches(&self) -> usize {
        self.windows.len().div_ceil(self.batch_size)
    }
}

impl<T: Scalar> Iterator for BatchStream<'_, T> {
    type Item = Result<Batch<T>, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.windows.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.windows.len());
        let chunk = &self.windows[self.next..end];
        self.next = end;
        Some(Batch::assemble(self.dataset, chunk, self.seq_len))
    }
}

/// Shuffles the aligned windows with `seed` and groups them into batches of
/// `batch_size`; the last batch may be smaller.
pub fn batch_sequences<T: Scalar>(
    dataset: &[LabeledSequence<T>],
    seq_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BatchStream<'_, T>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::Usage("batch_size must be at least 1".into()));
    }
    let mut windows = aligned_windows(dataset, seq_len)?;
    windows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BatchStream {
        dataset,
        windows,
        seq_len,
        batch_size,
        next: 0,
    })
}
