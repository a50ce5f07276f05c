//! Continuous valence/arousal affect toolkit.

pub mod annotation;
pub mod dataset;
pub mod metrics;
pub mod model;
mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Model = model::ModelInstance<f64>;
pub type Model32 = model::ModelInstance<f32>;
pub type Sequence = dataset::LabeledSequence<f64>;
pub type Trace = annotation::AnnotationTrace<f64>;
pub type Annotations = annotation::VideoAnnotations<f64>;
