//! Adam training, finite-difference gradient checks and evaluation.

mod eval;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use eval::{
    evaluate, frame_accuracy, histogram_bin, predict_dataset, read_predictions,
    report_from_predictions, windowed_outputs, write_predictions, DimScores, EvalMode,
    EvaluationReport, ModelPredictor, PairScores, Predictor, VideoScores, HISTOGRAM_BINS,
};

use crate::dataset::{batch_sequences, Batch, DatasetError, LabeledSequence};
use crate::model::{Head, ModelError, ModelInstance};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "ccc")]
    Ccc,
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "cross-entropy")]
    CrossEntropy,
}

impl std::str::FromStr for LossKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ccc" => Ok(LossKind::Ccc),
            "mse" => Ok(LossKind::Mse),
            "cross-entropy" => Ok(LossKind::CrossEntropy),
            _ => Err(TrainError::Usage(format!(
                "unknown loss {s:?} (expected ccc, mse or cross-entropy)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Freeze {
    #[default]
    None,
    Backbone,
}

impl std::str::FromStr for Freeze {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Freeze::None),
            "backbone" => Ok(Freeze::Backbone),
            _ => Err(TrainError::Usage(format!(
                "unknown freeze mode {s:?} (expected none or backbone)"
            ))),
        }
    }
}

impl Freeze {
    pub fn trains(self, name: &str) -> bool {
        match self {
            Freeze::None => true,
            Freeze::Backbone => !name.starts_with("conv"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            seq_len: 80,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            loss: LossKind::Ccc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, head: Head) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be finite and nonnegative",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return bad("Adam needs betas in [0, 1) and a positive epsilon".into());
        }
        match (self.loss, head) {
            (LossKind::CrossEntropy, Head::Categorical7)
            | (LossKind::Ccc | LossKind::Mse, Head::Regression2) => Ok(()),
            (loss, head) => bad(format!("loss {loss:?} does not fit head {head:?}")),
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    step: i32,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            learning_rate: T::lit(cfg.learning_rate),
            beta1: T::lit(cfg.beta1),
            beta2: T::lit(cfg.beta2),
            epsilon: T::lit(cfg.epsilon),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) {
        self.step += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.step);
        let c2 = one - self.beta2.powi(self.step);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let n = g.numel();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (one - self.beta1) * gi;
                *vi = self.beta2 * *vi + (one - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Builds the selected loss over every frame of the batch.
///
/// `ccc` is `1 − (ρ_v + ρ_a)/2`, `mse` averages both dimensions and
/// `cross-entropy` is the mean negative log-probability of the frame class.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    batch: &Batch<T>,
    loss: LossKind,
) -> Result<Var, TrainError> {
    let shape = g.shape(pred).to_vec();
    let n = shape[0] * shape[1];
    let width = shape[2];
    let flat = g.reshape(pred, &[n, width])?;
    match loss {
        LossKind::Ccc => {
            let pv = g.column(flat, 0)?;
            let pa = g.column(flat, 1)?;
            let rv = g.ccc(pv, batch.valence.data())?;
            let ra = g.ccc(pa, batch.arousal.data())?;
            let s = g.add(rv, ra)?;
            Ok(g.affine(s, T::lit(-0.5), T::one()))
        }
        LossKind::Mse => {
            let target: Vec<T> = batch
                .valence
                .data()
                .iter()
                .zip(batch.arousal.data())
                .flat_map(|(&v, &a)| [v, a])
                .collect();
            let t = g.constant(Tensor::new(vec![n, 2], target)?);
            let d = g.sub(flat, t)?;
            let sq = g.mul(d, d)?;
            Ok(g.mean(sq))
        }
        LossKind::CrossEntropy => {
            let classes = batch.classes.as_ref().ok_or_else(|| {
                TrainError::Usage("cross-entropy needs per-frame class labels".into())
            })?;
            let mut onehot = vec![T::zero(); n * width];
            for (i, &c) in classes.iter().enumerate() {
                if c >= width {
                    return Err(TrainError::Usage(format!("class {c} outside 0..{width}")));
                }
                onehot[i * width + c] = T::one();
            }
            let mask = g.constant(Tensor::new(vec![n, width], onehot)?);
            let logp = g.log(flat);
            let picked = g.mul(logp, mask)?;
            let s = g.sum(picked);
            Ok(g.scale(s, -T::one() / T::from_usize_lossy(n)))
        }
    }
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (e, l) in self.loss_curve.iter().enumerate() {
            s.push_str(&format!("{},{l}\n", e + 1));
        }
        s
    }
}

fn check_compatible<T: Scalar>(
    model: &ModelInstance<T>,
    dataset: &[LabeledSequence<T>],
) -> Result<(), TrainError> {
    let cfg = &model.config;
    for seq in dataset {
        if seq.frame_shape() != cfg.input {
            return Err(TrainError::Config(format!(
                "video {} has frames {:?}, model expects {:?}",
                seq.video_id(),
                seq.frame_shape(),
                cfg.input
            )));
        }
        if cfg.use_landmarks && seq.landmark_dim() != cfg.landmark_dim {
            return Err(TrainError::Config(format!(
                "video {} has {} landmark values per frame, model expects {}",
                seq.video_id(),
                seq.landmark_dim(),
                cfg.landmark_dim
            )));
        }
    }
    Ok(())
}

/// Shuffle seed of one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains in place with Adam; parameters excluded by `freeze` stay fixed.
pub fn train<T: Scalar>(
    model: &mut ModelInstance<T>,
    dataset: &[LabeledSequence<T>],
    cfg: &TrainConfig,
    freeze: Freeze,
) -> Result<TrainReport, TrainError> {
    cfg.validate(model.config.head)?;
    model.validate()?;
    check_compatible(model, dataset)?;
    let mut adam = Adam::new(cfg);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let stream = batch_sequences(
            dataset,
            cfg.seq_len,
            cfg.batch_size,
            epoch_seed(cfg.seed, epoch),
        )?;
        let (mut total, mut count) = (0.0, 0usize);
        for (bi, batch) in stream.enumerate() {
            let batch = batch?;
            let mut g = Graph::new();
            let p = model.bind(&mut g, |n| freeze.trains(n));
            let frames = g.constant(batch.frames.clone());
            let lm = g.constant(batch.landmarks.clone());
            let pred = model.forward_graph(&mut g, &p, frames, Some(lm), true, &mut dropout_rng)?;
            let loss = loss_graph(&mut g, pred, &batch, cfg.loss)?;
            let value = g.value(loss).item()?.to_f64_lossless();
            if !value.is_finite() {
                return Err(TrainError::Divergence {
                    epoch: epoch + 1,
                    batch: bi + 1,
                    loss: value,
                });
            }
            g.backward(loss)?;
            let grads: BTreeMap<String, Tensor<T>> = p
                .iter()
                .filter(|(n, _)| freeze.trains(n))
                .filter_map(|(n, v)| g.grad(v).map(|t| (n.to_string(), t)))
                .collect();
            adam.step(&mut model.params, &grads);
            total += value;
            count += 1;
            steps += 1;
        }
        curve.push(total / count as f64);
    }
    Ok(TrainReport {
        loss_curve: curve,
        steps,
    })
}

/// Continues training a loaded model on new data.
pub fn finetune<T: Scalar>(
    model: &mut ModelInstance<T>,
    dataset: &[LabeledSequence<T>],
    cfg: &TrainConfig,
    freeze: Freeze,
) -> Result<TrainReport, TrainError> {
    train(model, dataset, cfg, freeze)
}

pub fn finetune_checkpoint<T: Scalar>(
    checkpoint: &Path,
    dataset: &[LabeledSequence<T>],
    cfg: &TrainConfig,
    freeze: Freeze,
) -> Result<(ModelInstance<T>, TrainReport), TrainError> {
    let mut model = ModelInstance::load(checkpoint)?;
    let report = finetune(&mut model, dataset, cfg, freeze)?;
    Ok((model, report))
}

/// Finite-difference step used by [`gradcheck`].
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Denominator floor in the relative error. Gradients below it are judged
/// on absolute error, since central-difference roundoff is about
/// `1e-16 · |loss| / ε`.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub checked: usize,
}

fn eval_loss<T: Scalar>(
    model: &ModelInstance<T>,
    batch: &Batch<T>,
    loss: LossKind,
) -> Result<(Graph<T>, Var, crate::model::Bound), TrainError> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, |_| true);
    let frames = g.constant(batch.frames.clone());
    let lm = g.constant(batch.landmarks.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pred = model.forward_graph(&mut g, &p, frames, Some(lm), false, &mut rng)?;
    let l = loss_graph(&mut g, pred, batch, loss)?;
    Ok((g, l, p))
}

/// Central differences on every parameter versus the analytic gradient.
///
/// Dropout is off. The error of one entry is
/// `|analytic − numeric| / max(|analytic|, |numeric|, GRADCHECK_FLOOR)`.
pub fn gradcheck<T: Scalar>(
    model: &ModelInstance<T>,
    batch: &Batch<T>,
    loss: LossKind,
) -> Result<GradcheckReport, TrainError> {
    let (mut g, l, p) = eval_loss(model, batch, loss)?;
    g.backward(l)?;
    let eps = T::lit(GRADCHECK_EPS);
    let mut probe = model.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (name, var) in p.iter() {
        let analytic = g.grad(var).unwrap_or_else(|| Tensor::zeros(g.shape(var)));
        for i in 0..analytic.numel() {
            let orig = probe.params[name].data()[i];
            let mut at = |v: T| -> Result<f64, TrainError> {
                probe.params.get_mut(name).unwrap().data_mut()[i] = v;
                let (g2, l2, _) = eval_loss(&probe, batch, loss)?;
                Ok(g2.value(l2).item()?.to_f64_lossless())
            };
            let (hi, lo) = (orig + eps, orig - eps);
            let plus = at(hi)?;
            let minus = at(lo)?;
            probe.params.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (hi - lo).to_f64_lossless();
            let a = analytic.data()[i].to_f64_lossless();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = err;
                report.worst_parameter = name.to_string();
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
