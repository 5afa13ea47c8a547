//! Minimal dense-network machinery: matrices, layers, losses, Adam and the
//! gradient-reversal transform.

pub mod adam;
pub mod grl;
pub mod layer;
pub mod loss;
pub mod matrix;

pub use adam::{AdamConfig, AdamState};
pub use grl::{grl_backward, grl_forward, GrlCoefficient};
pub use layer::{sigmoid, Activation, DenseGrads, DenseLayer, DropoutSpec, LayerStack, Mode};
pub use loss::{bce_loss, mse_loss, LossOutput, PROB_FLOOR};
pub use matrix::Matrix;

/// One named parameter tensor and its gradient, as seen by the optimizer.
#[derive(Debug)]
pub struct ParamSlot<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub grad: &'a [f64],
}
