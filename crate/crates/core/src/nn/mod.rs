//! Dense layers, activations, hand-written backward passes and Adam.

mod activation;
mod adam;
pub mod gradcheck;
mod layer;
mod mlp;

pub use activation::{
    groupsort_backward, groupsort_forward, relu_backward, relu_forward, Activation,
    ActivationRecord, ReluMask, SortPermutation,
};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use layer::{linear_forward, LayerGrads, LinearLayer};
pub use mlp::{mlp_backward, mlp_backward_params, mlp_forward, MlpGrads, MlpModel, Tape};
