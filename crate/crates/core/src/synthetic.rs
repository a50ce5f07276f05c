//! Seeded toy videos for smoke tests and sanity runs.
//!
//! Every generator draws its fixed image patterns from `pattern_seed`, so
//! videos built with the same pattern seed share one "visual vocabulary".

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetError, LabeledSequence};
use crate::tensor::Tensor;
use crate::Scalar;

/// Frame and landmark geometry shared by the generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub landmark_points: usize,
    pub pattern_seed: u64,
}

impl Geometry {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn patterns(&self, count: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.pattern_seed);
        (0..count)
            .map(|_| {
                (0..self.frame_len())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect()
    }

    fn frame<T: Scalar>(&self, pixels: impl Iterator<Item = f64>) -> Tensor<T> {
        let data = pixels.map(|p| T::lit(p.clamp(-1.0, 1.0))).collect();
        Tensor::new(vec![self.height, self.width, self.channels], data).expect("frame shape")
    }

    fn idle_landmarks<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Vec<T> {
        (0..2 * self.landmark_points)
            .map(|_| T::lit(rng.gen_range(0.3..0.7)))
            .collect()
    }
}

fn mix<T: Scalar>(
    geo: &Geometry,
    patterns: &[Vec<f64>],
    weights: &[f64],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    geo.frame((0..geo.frame_len()).map(|i| {
        let s: f64 = patterns.iter().zip(weights).map(|(p, w)| p[i] * w).sum();
        s + rng.gen_range(-noise..=noise)
    }))
}

/// Smooth sinusoidal valence/arousal whose frames are a label-weighted
/// blend of two fixed patterns plus small noise.
pub fn sinusoid_video<T: Scalar>(
    id: &str,
    frames: usize,
    geo: &Geometry,
    phase: f64,
    seed: u64,
) -> Result<LabeledSequence<T>, DatasetError> {
    let patterns = geo.patterns(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut imgs, mut lms, mut vs, mut as_) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for f in 0..frames {
        let t = f as f64 / frames as f64;
        let v = 0.8 * (std::f64::consts::TAU * 2.0 * t + phase).sin();
        let a = 0.7 * (std::f64::consts::TAU * 3.0 * t + 2.0 * phase).cos();
        imgs.push(mix(geo, &patterns, &[0.6 * v, 0.6 * a], 0.05, &mut rng));
        lms.push(geo.idle_landmarks(&mut rng));
        vs.push(T::lit(v));
        as_.push(T::lit(a));
    }
    LabeledSequence::new(id, imgs, lms, vs, as_)
}

/// Frames show an i.i.d. signal `s_t`; labels are `s` delayed by `lag`
/// frames, so they depend on the past rather than the current frame.
pub fn lagged_video<T: Scalar>(
    id: &str,
    frames: usize,
    geo: &Geometry,
    lag: usize,
    seed: u64,
) -> Result<LabeledSequence<T>, DatasetError> {
    let patterns = geo.patterns(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sig: Vec<(f64, f64)> = (0..frames + lag)
        .map(|_| (rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)))
        .collect();
    let (mut imgs, mut lms, mut vs, mut as_) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for f in 0..frames {
        let (sv, sa) = sig[f + lag];
        imgs.push(mix(geo, &patterns, &[0.6 * sv, 0.6 * sa], 0.02, &mut rng));
        lms.push(geo.idle_landmarks(&mut rng));
        vs.push(T::lit(sig[f].0));
        as_.push(T::lit(sig[f].1));
    }
    LabeledSequence::new(id, imgs, lms, vs, as_)
}

/// Uninformative frames; labels are affine in the first two landmark
/// coordinates, which follow a random walk.
pub fn landmark_video<T: Scalar>(
    id: &str,
    frames: usize,
    geo: &Geometry,
    seed: u64,
) -> Result<LabeledSequence<T>, DatasetError> {
    if geo.landmark_points == 0 {
        return Err(DatasetError::Usage(
            "landmark_video needs landmark points".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = geo.patterns(1).remove(0);
    let (mut x, mut y): (f64, f64) = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
    let (mut imgs, mut lms, mut vs, mut as_) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..frames {
        x = (x + rng.gen_range(-0.15..0.15)).clamp(0.05, 0.95);
        y = (y + rng.gen_range(-0.15..0.15)).clamp(0.05, 0.95);
        imgs.push(geo.frame(flat.iter().map(|p| 0.3 * p)));
        let mut row = geo.idle_landmarks::<T>(&mut rng);
        row[0] = T::lit(x);
        row[1] = T::lit(y);
        lms.push(row);
        vs.push(T::lit(2.0 * x - 1.0));
        as_.push(T::lit(1.0 - 2.0 * y));
    }
    LabeledSequence::new(id, imgs, lms, vs, as_)
}

/// Seven-class video: runs of `run` frames per class, each frame its class
/// prototype plus noise. Valence/arousal follow a fixed per-class layout.
pub fn categorical_video<T: Scalar>(
    id: &str,
    frames: usize,
    run: usize,
    geo: &Geometry,
    seed: u64,
) -> Result<LabeledSequence<T>, DatasetError> {
    let protos = geo.patterns(7);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class = rng.gen_range(0..7);
    let (mut imgs, mut lms, mut vs, mut as_, mut cs) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for f in 0..frames {
        if run > 0 && f % run == 0 && f > 0 {
            class = rng.gen_range(0..7);
        }
        let angle = std::f64::consts::TAU * class as f64 / 7.0;
        imgs.push(
            geo.frame(
                protos[class]
                    .iter()
                    .map(|p| 0.7 * p + rng.gen_range(-0.1..0.1)),
            ),
        );
        lms.push(geo.idle_landmarks(&mut rng));
        vs.push(T::lit(0.6 * angle.cos()));
        as_.push(T::lit(0.6 * angle.sin()));
        cs.push(class);
    }
    LabeledSequence::new(id, imgs, lms, vs, as_)?.with_classes(cs)
}
