use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{quadrant_stats, DatasetError, LabeledSequence, QuadrantStats};
use crate::Scalar;

/// Result of a successful [`balance`] run.
#[derive(Clone, Debug)]
pub struct BalanceOutcome<T> {
    /// Original sequences in input order followed by the duplicates.
    pub sequences: Vec<LabeledSequence<T>>,
    pub before: QuadrantStats,
    pub after: QuadrantStats,
    pub selections: usize,
}

/// Upper bound on segment selections: `10 · frames / segment_len`, at least 1.
pub fn iteration_cap(frames: usize, segment_len: usize) -> usize {
    (10 * frames / segment_len).max(1)
}

#[derive(Clone, Copy)]
struct Candidate {
    sequence: usize,
    start: usize,
    len: usize,
    counts: [usize; 4],
}

fn candidates<T: Scalar>(dataset: &[LabeledSequence<T>], segment_len: usize) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (s, seq) in dataset.iter().enumerate() {
        let len = segment_len.min(seq.len());
        let mut prefix = vec![[0usize; 4]; seq.len() + 1];
        for f in 0..seq.len() {
            prefix[f + 1] = prefix[f];
            prefix[f + 1][seq.quadrant(f).index()] += 1;
        }
        for start in 0..=seq.len() - len {
            let mut counts = [0; 4];
            for q in 0..4 {
                counts[q] = prefix[start + len][q] - prefix[start][q];
            }
            out.push(Candidate {
                sequence: s,
                start,
                len,
                counts,
            });
        }
    }
    out
}

fn majority(counts: &[usize; 4]) -> usize {
    let mut best = 0;
    for q in 1..4 {
        if counts[q] > counts[best] {
            best = q;
        }
    }
    best
}

/// Oversamples by appending duplicated contiguous segments until every
/// quadrant proportion is within `tolerance` of `targets`.
///
/// Each step picks the quadrant with the largest shortfall and duplicates a
/// seeded-random segment whose majority quadrant it is. When no segment has
/// that majority, segments holding the most frames of that quadrant are used
/// instead. Sequences shorter than `segment_len` contribute whole.
pub fn balance<T: Scalar>(
    dataset: &[LabeledSequence<T>],
    targets: [f64; 4],
    segment_len: usize,
    tolerance: f64,
    seed: u64,
) -> Result<BalanceOutcome<T>, DatasetError> {
    if segment_len == 0 {
        return Err(DatasetError::Usage("segment_len must be at least 1".into()));
    }
    if !(tolerance >= 0.0) {
        return Err(DatasetError::Usage(format!(
            "invalid tolerance {tolerance}"
        )));
    }
    if targets.iter().any(|t| !(*t >= 0.0)) || (targets.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::Usage(format!(
            "targets {targets:?} must be nonnegative and sum to 1"
        )));
    }
    let before = quadrant_stats(dataset)?;
    for q in 0..4 {
        if targets[q] > 0.0 && before.counts[q] == 0 {
            return Err(DatasetError::Usage(format!(
                "target quadrant {} has no frames",
                super::Quadrant::ALL[q]
            )));
        }
    }

    let all = candidates(dataset, segment_len);
    let pools: Vec<Vec<Candidate>> = (0..4)
        .map(|q| {
            let by_majority: Vec<Candidate> = all
                .iter()
                .filter(|c| majority(&c.counts) == q)
                .copied()
                .collect();
            if !by_majority.is_empty() {
                return by_majority;
            }
            let most = all.iter().map(|c| c.counts[q]).max().unwrap_or(0);
            all.iter()
                .filter(|c| most > 0 && c.counts[q] == most)
                .copied()
                .collect()
        })
        .collect();

    let cap = iteration_cap(before.total(), segment_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = dataset.to_vec();
    let mut stats = before;
    let mut selections = 0;
    loop {
        if stats.within(&targets, tolerance) {
            return Ok(BalanceOutcome {
                sequences,
                before,
                after: stats,
                selections,
            });
        }
        if selections == cap {
            return Err(DatasetError::BalanceFailure {
                iterations: selections,
                achieved: stats.proportions(),
                targets,
            });
        }
        let p = stats.proportions();
        let mut q = 0;
        for k in 1..4 {
            if targets[k] - p[k] > targets[q] - p[q] {
                q = k;
            }
        }
        let pick = *pools[q].choose(&mut rng).ok_or_else(|| {
            DatasetError::Usage(format!(
                "no segment covers quadrant {}",
                super::Quadrant::ALL[q]
            ))
        })?;
        let src = &dataset[pick.sequence];
        let id = format!("{}#dup{}@{}", src.video_id(), selections, pick.start);
        sequences.push(src.segment(pick.start, pick.len, id));
        for k in 0..4 {
            stats.counts[k] += pick.counts[k];
        }
        selections += 1;
    }
}
