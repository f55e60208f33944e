//! Layers, models and the model zoo.

pub mod layers;
pub mod model;
pub mod zoo;

pub use layers::{BatchNorm, Param};
pub use model::{
    Backward, BackwardOutput, Conv, Forward, ForwardOutput, GradClip, LayerGrad, LayerQuant, Linear, Mode, Model, Node,
    ParamMut,
};
pub use zoo::ModelKind;
