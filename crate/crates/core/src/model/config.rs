use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::{Padding, PoolGeometry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Layer {
    Conv {
        kh: usize,
        kw: usize,
        #[serde(rename = "in")]
        input: usize,
        out: usize,
        stride: usize,
        padding: Padding,
    },
    Maxpool {
        k: usize,
        stride: usize,
        padding: Padding,
    },
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnnConfig {
    pub layers: usize,
    pub units: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Head {
    #[serde(rename = "regression-2")]
    Regression2,
    #[serde(rename = "categorical-7")]
    Categorical7,
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Regression2 => 2,
            Head::Categorical7 => 7,
        }
    }
}

impl std::str::FromStr for Head {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regression-2" => Ok(Head::Regression2),
            "categorical-7" => Ok(Head::Categorical7),
            _ => Err(ModelError::Config(format!(
                "unknown head {s:?} (expected regression-2 or categorical-7)"
            ))),
        }
    }
}

/// Backbone → FC1 (with optional landmark concatenation) → GRU stack → head.
///
/// `fc1_units = 0` drops FC1 and its dropout, feeding flattened features
/// straight to the next stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Frame shape `[H, W, C]`.
    pub input: [usize; 3],
    pub backbone: Vec<Layer>,
    pub fc1_units: usize,
    pub use_landmarks: bool,
    pub landmark_dim: usize,
    pub rnn: RnnConfig,
    pub head: Head,
    pub dropout_rate: f64,
}

/// Shapes flowing through a validated config.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapePlan {
    /// Per-frame shape after each backbone layer.
    pub backbone: Vec<[usize; 3]>,
    pub features: usize,
    pub fc1_in: usize,
    pub rnn_in: usize,
    pub head_in: usize,
}

impl ModelConfig {
    /// Two conv blocks with 16 and 32 maps on 32×32 RGB crops, FC1 of 64,
    /// a 2×32 GRU and the regression head.
    pub fn desk_default() -> Self {
        ModelConfig {
            input: [32, 32, 3],
            backbone: vec![
                Layer::Conv {
                    kh: 3,
                    kw: 3,
                    input: 3,
                    out: 16,
                    stride: 1,
                    padding: Padding::Same,
                },
                Layer::Relu,
                Layer::Maxpool {
                    k: 2,
                    stride: 2,
                    padding: Padding::Valid,
                },
                Layer::Conv {
                    kh: 3,
                    kw: 3,
                    input: 16,
                    out: 32,
                    stride: 1,
                    padding: Padding::Same,
                },
                Layer::Relu,
                Layer::Maxpool {
                    k: 2,
                    stride: 2,
                    padding: Padding::Valid,
                },
            ],
            fc1_units: 64,
            use_landmarks: true,
            landmark_dim: 136,
            rnn: RnnConfig {
                layers: 2,
                units: 32,
            },
            head: Head::Regression2,
            dropout_rate: 0.5,
        }
    }

    /// Type-checks the layer chain and returns the resulting shapes.
    pub fn plan(&self) -> Result<ShapePlan, ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.input.iter().any(|&d| d == 0) {
            return err(format!("input shape {:?} has a zero extent", self.input));
        }
        if self.rnn.layers > 2 {
            return err(format!(
                "rnn.layers = {} (allowed 0, 1 or 2)",
                self.rnn.layers
            ));
        }
        if self.rnn.layers > 0 && self.rnn.units == 0 {
            return err("rnn.units must be positive".into());
        }
        if !(self.dropout_rate >= 0.0 && self.dropout_rate < 1.0) {
            return err(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.use_landmarks && (self.landmark_dim == 0 || self.landmark_dim % 2 != 0) {
            return err(format!(
                "landmark_dim {} must be a positive even number",
                self.landmark_dim
            ));
        }
        let mut shape = self.input;
        let mut shapes = Vec::with_capacity(self.backbone.len());
        for (i, layer) in self.backbone.iter().enumerate() {
            let nhwc = [1, shape[0], shape[1], shape[2]];
            shape = match layer {
                Layer::Conv {
                    kh,
                    kw,
                    input,
                    out,
                    stride,
                    padding,
                } => {
                    if *input != shape[2] {
                        return err(format!(
                            "layer {i}: conv expects {input} channels, receives {}",
                            shape[2]
                        ));
                    }
                    if *out == 0 {
                        return err(format!("layer {i}: conv has no output maps"));
                    }
                    let g = PoolGeometry::resolve(
                        "conv",
                        &nhwc,
                        (*kh, *kw),
                        (*stride, *stride),
                        *padding,
                    )
                    .map_err(|e| ModelError::Config(format!("layer {i}: {e}")))?;
                    [g.out_h, g.out_w, *out]
                }
                Layer::Maxpool { k, stride, padding } => {
                    let g = PoolGeometry::resolve(
                        "maxpool",
                        &nhwc,
                        (*k, *k),
                        (*stride, *stride),
                        *padding,
                    )
                    .map_err(|e| ModelError::Config(format!("layer {i}: {e}")))?;
                    [g.out_h, g.out_w, shape[2]]
                }
                Layer::Relu => shape,
            };
            shapes.push(shape);
        }
        let features = shape.iter().product::<usize>();
        let fc1_in = features
            + if self.use_landmarks {
                self.landmark_dim
            } else {
                0
            };
        let rnn_in = if self.fc1_units > 0 {
            self.fc1_units
        } else {
            fc1_in
        };
        let head_in = if self.rnn.layers > 0 {
            self.rnn.units
        } else {
            rnn_in
        };
        Ok(ShapePlan {
            backbone: shapes,
            features,
            fc1_in,
            rnn_in,
            head_in,
        })
    }

    /// Parameter names and shapes in allocation order.
    pub fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
        let plan = self.plan()?;
        let mut out = Vec::new();
        for (i, layer) in self.backbone.iter().enumerate() {
            if let Layer::Conv {
                kh,
                kw,
                input,
                out: o,
                ..
            } = layer
            {
                out.push((format!("conv{i}.w"), vec![*kh, *kw, *input, *o]));
                out.push((format!("conv{i}.b"), vec![*o]));
            }
        }
        if self.fc1_units > 0 {
            out.push(("fc1.w".into(), vec![plan.fc1_in, self.fc1_units]));
            out.push(("fc1.b".into(), vec![self.fc1_units]));
        }
        let mut inputs = plan.rnn_in;
        for l in 0..self.rnn.layers {
            let u = self.rnn.units;
            for gate in GATES {
                out.push((format!("gru{l}.w_{gate}"), vec![inputs, u]));
                out.push((format!("gru{l}.u_{gate}"), vec![u, u]));
                out.push((format!("gru{l}.b_{gate}"), vec![u]));
            }
            inputs = u;
        }
        out.extend(head_shapes(plan.head_in, self.head));
        Ok(out)
    }

    pub fn parameter_count(&self) -> Result<usize, ModelError> {
        Ok(self
            .parameter_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }
}

pub(crate) const GATES: [&str; 3] = ["reset", "update", "cand"];

pub(crate) fn head_shapes(inputs: usize, head: Head) -> Vec<(String, Vec<usize>)> {
    vec![
        ("head.w".into(), vec![inputs, head.outputs()]),
        ("head.b".into(), vec![head.outputs()]),
    ]
}
