//! Differentiable numerical primitives and the finite-difference harness
//! used to verify every backward rule in the crate.

mod gradcheck;
mod layers;
mod ops;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, FD_STEP, KINK_RATIO};
pub use layers::{
    relu_backward_in_place, relu_in_place, sigmoid, softplus, Init, LayerNorm, LayerNormCache, LayerSpec,
    Linear, Mlp, MlpCache, LAYER_NORM_EPS,
};
pub use ops::{
    bilinear_sample, cosine_sim, cosine_sim_backward, dot, norm, softmax, softmax_backward_in_place,
    softmax_in_place, BilinearTaps,
};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;
#[allow(unused_imports)]
pub(crate) use tensor::{gemm, gemm_nt, gemm_tn_acc};
