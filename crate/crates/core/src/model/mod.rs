//! Configurable CNN → FC1 → GRU → head network.

mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use config::{head_shapes, GATES};
pub use config::{Head, Layer, ModelConfig, RnnConfig, ShapePlan};

use crate::tensor::{
    gru_cell, read_archive, write_archive, Graph, GruParams, ParamStore, Tensor, TensorError, Var,
};
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub const INIT_SCHEME: &str = "uniform-fan-in";

/// How a parameter set was initialised.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitRecord {
    pub seed: u64,
    pub scheme: String,
    /// Seed of the most recent head replacement, if any.
    pub head_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelInstance<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub init: InitRecord,
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b") || name.contains(".b_")
}

fn init_param<T: Scalar>(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    if is_bias(name) {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[..shape.len() - 1].iter().product();
    let a = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-a..a))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Allocates parameters from `config`: weights uniform in `±sqrt(1/fan_in)`,
/// biases zero.
pub fn build<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelInstance<T>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = config
        .parameter_shapes()?
        .into_iter()
        .map(|(name, shape)| {
            let t = init_param(&name, &shape, &mut rng);
            (name, t)
        })
        .collect();
    Ok(ModelInstance {
        config: config.clone(),
        params,
        init: InitRecord {
            seed,
            scheme: INIT_SCHEME.into(),
            head_seed: None,
        },
    })
}

/// Replaces the output layer with a freshly initialised one of the new kind.
pub fn swap_head<T: Scalar>(
    m: &ModelInstance<T>,
    head: Head,
    seed: u64,
) -> Result<ModelInstance<T>, ModelError> {
    let mut config = m.config.clone();
    config.head = head;
    let plan = config.plan()?;
    let mut params = m.params.clone();
    params.retain(|name, _| !name.starts_with("head."));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, shape) in head_shapes(plan.head_in, head) {
        let t = init_param(&name, &shape, &mut rng);
        params.insert(name, t);
    }
    Ok(ModelInstance {
        config,
        params,
        init: InitRecord {
            head_seed: Some(seed),
            ..m.init.clone()
        },
    })
}

/// Argmax of the mean probability row; ties go to the lowest class index.
pub fn aggregate_video<T: Scalar>(frame_probs: &[Vec<T>]) -> Result<usize, ModelError> {
    let first = frame_probs
        .first()
        .ok_or_else(|| ModelError::Usage("no frames to aggregate".into()))?;
    let k = first.len();
    if k == 0 || frame_probs.iter().any(|r| r.len() != k) {
        return Err(ModelError::Usage(
            "probability rows must share a nonzero width".into(),
        ));
    }
    let mut sums = vec![T::zero(); k];
    for row in frame_probs {
        for (s, &p) in sums.iter_mut().zip(row) {
            *s += p;
        }
    }
    let n = T::from_usize_lossy(frame_probs.len());
    let mean: Vec<T> = sums.into_iter().map(|s| s / n).collect();
    let mut best = 0;
    for c in 1..k {
        if mean[c] > mean[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Parameter handles inside one [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    init: InitRecord,
}

impl<T: Scalar> ModelInstance<T> {
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Places every parameter on `g`, trainable when `trainable(name)` holds.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Builds the forward pass on `g`.
    ///
    /// `frames` is `[B, T, H, W, C]` and `landmarks` `[B, T, 2L]`; the result
    /// is `[B, T, outputs]`. Landmarks are ignored unless the config fuses
    /// them. `rng` drives dropout when `train` is set.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        frames: Var,
        landmarks: Option<Var>,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let plan = cfg.plan()?;
        let fs = g.shape(frames).to_vec();
        if fs.len() != 5 || fs[2..] != cfg.input {
            return Err(ModelError::Usage(format!(
                "frames have shape {fs:?}, expected [B, T, {}, {}, {}]",
                cfg.input[0], cfg.input[1], cfg.input[2]
            )));
        }
        let (b, t) = (fs[0], fs[1]);
        let n = b * t;

        let mut x = g.reshape(frames, &[n, cfg.input[0], cfg.input[1], cfg.input[2]])?;
        for (i, layer) in cfg.backbone.iter().enumerate() {
            x = match layer {
                Layer::Conv {
                    stride, padding, ..
                } => {
                    let y = g.conv2d(
                        x,
                        p.get(&format!("conv{i}.w")),
                        (*stride, *stride),
                        *padding,
                    )?;
                    g.add_bias(y, p.get(&format!("conv{i}.b")))?
                }
                Layer::Maxpool { k, stride, padding } => {
                    g.maxpool2d(x, (*k, *k), (*stride, *stride), *padding)?
                }
                Layer::Relu => g.relu(x),
            };
        }
        x = g.reshape(x, &[n, plan.features])?;
        if cfg.use_landmarks {
            let lm = landmarks.ok_or_else(|| {
                ModelError::Usage("this model fuses landmarks but none were given".into())
            })?;
            let ls = g.shape(lm).to_vec();
            if ls != [b, t, cfg.landmark_dim] {
                return Err(ModelError::Usage(format!(
                    "landmarks have shape {ls:?}, expected [{b}, {t}, {}]",
                    cfg.landmark_dim
                )));
            }
            let lm = g.reshape(lm, &[n, cfg.landmark_dim])?;
            x = g.concat(&[x, lm])?;
        }
        if cfg.fc1_units > 0 {
            let y = g.matmul(x, p.get("fc1.w"))?;
            let y = g.add_bias(y, p.get("fc1.b"))?;
            let y = g.relu(y);
            x = g.dropout(y, T::lit(cfg.dropout_rate), train, rng)?;
        }
        let width = g.shape(x)[1];
        x = g.reshape(x, &[b, t, width])?;

        for l in 0..cfg.rnn.layers {
            let gp = |kind: &str, gate: &str| p.get(&format!("gru{l}.{kind}_{gate}"));
            let params = GruParams {
                w_reset: gp("w", GATES[0]),
                w_update: gp("w", GATES[1]),
                w_cand: gp("w", GATES[2]),
                u_reset: gp("u", GATES[0]),
                u_update: gp("u", GATES[1]),
                u_cand: gp("u", GATES[2]),
                b_reset: gp("b", GATES[0]),
                b_update: gp("b", GATES[1]),
                b_cand: gp("b", GATES[2]),
            };
            let mut h = g.constant(Tensor::zeros(&[b, cfg.rnn.units]));
            let mut states = Vec::with_capacity(t);
            for step in 0..t {
                let xt = g.select_step(x, step)?;
                h = gru_cell(g, xt, h, &params)?;
                states.push(h);
            }
            x = g.stack_steps(&states)?;
        }

        let width = g.shape(x)[2];
        let flat = g.reshape(x, &[n, width])?;
        let y = g.matmul(flat, p.get("head.w"))?;
        let y = g.add_bias(y, p.get("head.b"))?;
        let y = match cfg.head {
            Head::Regression2 => y,
            Head::Categorical7 => g.softmax(y)?,
        };
        Ok(g.reshape(y, &[b, t, cfg.head.outputs()])?)
    }

    /// Inference forward pass (dropout off).
    pub fn forward(
        &self,
        frames: &Tensor<T>,
        landmarks: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_| false);
        let f = g.constant(frames.clone());
        let lm = landmarks.map(|l| g.constant(l.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_graph(&mut g, &p, f, lm, false, &mut rng)?;
        Ok(g.value(out).clone())
    }

    /// Checks that the parameter set is exactly the one the config implies.
    pub fn validate(&self) -> Result<(), ModelError> {
        let expected = self.config.parameter_shapes()?;
        if expected.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "config implies {} parameters, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape) in expected {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Config(format!(
                        "parameter {name} has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Config(format!("parameter {name} missing"))),
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let meta = serde_json::to_string_pretty(&CheckpointMeta {
            config: self.config.clone(),
            init: self.init.clone(),
        })
        .map_err(|e| ModelError::Config(e.to_string()))?;
        let mut out = Vec::new();
        write_archive(&mut out, &self.params, &meta)?;
        Ok(out)
    }

    pub fn from_reader(r: impl std::io::Read) -> Result<Self, ModelError> {
        let archive = read_archive::<T, _>(r)?;
        let meta: CheckpointMeta = serde_json::from_str(&archive.meta)
            .map_err(|e| ModelError::Config(format!("checkpoint config block: {e}")))?;
        let m = ModelInstance {
            config: meta.config,
            params: archive.params,
            init: meta.init,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io_err = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let f = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(f);
        std::io::Write::write_all(&mut w, &self.to_bytes()?).map_err(io_err)?;
        std::io::Write::flush(&mut w).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let f = File::open(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_reader(BufReader::new(f))
    }
}
