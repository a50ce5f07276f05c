//! Agreement metrics for continuous valence/arousal traces.
//!
//! All second moments are population moments (divide by `N`). The
//! concordance correlation coefficient is
//!
//! ```text
//! ρc = 2·s_xy / (s_x² + s_y² + (x̄ − ȳ)²)
//! ```
//!
//! and the training loss is `1 − (ρc_valence + ρc_arousal) / 2`.

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("degenerate series: {0}")]
    Degenerate(&'static str),
}

/// First and second moments of a pair of series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments<T> {
    pub n: usize,
    pub mean_x: T,
    pub mean_y: T,
    pub var_x: T,
    pub var_y: T,
    pub cov_xy: T,
}

/// A prediction series and its annotation series, validated to equal length.
#[derive(Clone, Copy, Debug)]
pub struct SeriesPair<'a, T> {
    pub predictions: &'a [T],
    pub annotations: &'a [T],
}

impl<'a, T: Scalar> SeriesPair<'a, T> {
    pub fn new(predictions: &'a [T], annotations: &'a [T]) -> Result<Self, MetricError> {
        if predictions.len() != annotations.len() {
            return Err(MetricError::LengthMismatch(
                predictions.len(),
                annotations.len(),
            ));
        }
        Ok(SeriesPair {
            predictions,
            annotations,
        })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    fn require(&self, needed: usize) -> Result<(), MetricError> {
        if self.len() < needed {
            Err(MetricError::TooShort {
                needed,
                got: self.len(),
            })
        } else {
            Ok(())
        }
    }

    /// Two-pass population moments.
    pub fn moments(&self) -> Result<Moments<T>, MetricError> {
        self.require(1)?;
        let (x, y) = (self.predictions, self.annotations);
        let n = T::from_usize_lossy(x.len());
        let mean_x = x.iter().copied().sum::<T>() / n;
        let mean_y = y.iter().copied().sum::<T>() / n;
        let (mut vx, mut vy, mut cxy) = (T::zero(), T::zero(), T::zero());
        for (&a, &b) in x.iter().zip(y) {
            let (dx, dy) = (a - mean_x, b - mean_y);
            vx += dx * dx;
            vy += dy * dy;
            cxy += dx * dy;
        }
        Ok(Moments {
            n: x.len(),
            mean_x,
            mean_y,
            var_x: vx / n,
            var_y: vy / n,
            cov_xy: cxy / n,
        })
    }

    pub fn pearson(&self) -> Result<T, MetricError> {
        self.require(2)?;
        let m = self.moments()?;
        let constant = |s: &[T]| s.iter().all(|&v| v == s[0]);
        if constant(self.predictions) || constant(self.annotations) {
            return Err(MetricError::Degenerate(
                "zero variance in Pearson correlation",
            ));
        }
        Ok(m.cov_xy / (m.var_x * m.var_y).sqrt())
    }

    pub fn ccc(&self) -> Result<T, MetricError> {
        self.require(2)?;
        let m = self.moments()?;
        let denom = ccc_denominator(&m);
        if denom <= T::zero() {
            return Err(MetricError::Degenerate(
                "constant series with equal means in CCC",
            ));
        }
        Ok(T::lit(2.0) * m.cov_xy / denom)
    }

    pub fn mse(&self) -> Result<T, MetricError> {
        self.require(1)?;
        let s: T = self
            .predictions
            .iter()
            .zip(self.annotations)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(s / T::from_usize_lossy(self.len()))
    }
}

fn ccc_denominator<T: Scalar>(m: &Moments<T>) -> T {
    let d = m.mean_x - m.mean_y;
    m.var_x + m.var_y + d * d
}

pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Result<T, MetricError> {
    SeriesPair::new(x, y)?.pearson()
}

pub fn ccc<T: Scalar>(x: &[T], y: &[T]) -> Result<T, MetricError> {
    SeriesPair::new(x, y)?.ccc()
}

pub fn mse<T: Scalar>(x: &[T], y: &[T]) -> Result<T, MetricError> {
    SeriesPair::new(x, y)?.mse()
}

/// Closed-form `∂ρc/∂pred_i`:
///
/// ```text
/// 2 / (N·D) · [(y_i − ȳ) − ρc·(x_i − ȳ)]
/// ```
///
/// where `D` is the CCC denominator.
pub fn ccc_gradient<T: Scalar>(pred: &[T], target: &[T]) -> Result<Vec<T>, MetricError> {
    let pair = SeriesPair::new(pred, target)?;
    pair.require(2)?;
    let m = pair.moments()?;
    let denom = ccc_denominator(&m);
    if denom <= T::zero() {
        return Err(MetricError::Degenerate(
            "constant series with equal means in CCC",
        ));
    }
    let rho = T::lit(2.0) * m.cov_xy / denom;
    let k = T::lit(2.0) / (T::from_usize_lossy(m.n) * denom);
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&x, &y)| k * ((y - m.mean_y) - rho * (x - m.mean_y)))
        .collect())
}

/// Value and prediction gradients of the two-dimensional CCC loss.
#[derive(Clone, Debug, PartialEq)]
pub struct CccLoss<T> {
    pub loss: T,
    pub ccc_valence: T,
    pub ccc_arousal: T,
    pub grad_valence: Vec<T>,
    pub grad_arousal: Vec<T>,
}

/// `1 − (ρc_v + ρc_a) / 2` over flattened batch predictions.
pub fn ccc_loss<T: Scalar>(
    pred_valence: &[T],
    ann_valence: &[T],
    pred_arousal: &[T],
    ann_arousal: &[T],
) -> Result<CccLoss<T>, MetricError> {
    let ccc_valence = ccc(pred_valence, ann_valence)?;
    let ccc_arousal = ccc(pred_arousal, ann_arousal)?;
    let half = T::lit(0.5);
    let scale = |g: Vec<T>| g.into_iter().map(|v| -half * v).collect();
    Ok(CccLoss {
        loss: T::one() - half * (ccc_valence + ccc_arousal),
        ccc_valence,
        ccc_arousal,
        grad_valence: scale(ccc_gradient(pred_valence, ann_valence)?),
        grad_arousal: scale(ccc_gradient(pred_arousal, ann_arousal)?),
    })
}
