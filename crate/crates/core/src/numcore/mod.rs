//! Small differentiable-computation core: dense tensors, layers with
//! hand-written backward passes, an adaptive-moment optimizer and a
//! central-difference gradient checker.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use gradcheck::{check_param_set, finite_diff_check};
pub use layers::{
    elu, elu_derivative, elu_scalar, linear_forward, mse_loss, softmax_in_place, softmax_rows,
    Activation, Dense, Mlp, MlpCache, ParamSet, Parameter,
};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor2;
