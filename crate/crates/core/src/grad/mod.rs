//! Hand-written reverse-mode gradients.
//!
//! Every differentiable forward kernel has a `*_backward` counterpart that
//! takes the forward inputs (or the saved cache) and the upstream gradient.
//! [`check_kernel`] and [`check_network`] compare them with central finite
//! differences.

mod attention;
mod check;
mod kernels;
mod network;
mod sca;
pub(crate) mod store;

pub use attention::{mlp_backward, mpt_block_backward, window_attention_backward, BlockGrads};
pub use check::{
    check_kernel, check_network, finite_diff_check, kernel_report, network_check_setup, relative_error, FdReport,
    FdSample, FD_EPS, FD_MAX_COORDS, KERNELS,
};
pub use kernels::{
    compose_backward, conv2d_backward, exponentiate_backward, gelu_backward, grid_sample_backward, layer_norm_backward,
    matmul_backward, softmax_backward, warp_backward,
};
pub use network::{
    dice_loss_backward, loss_and_grad, network_backward, saturate_backward, upsample_nearest2_backward,
    velocity_backward,
};
pub use sca::{sca_backward, soft_assign_backward, update_cores_backward, ClusterGrads};
pub(crate) use store::impl_params;
pub use store::{
    adam_step, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, AdamConfig, ParamEntry, ParamStore,
    Params, CHECKPOINT_MAGIC,
};
