//! Dense tensor kernels: convolutions (reference and optimized), transpose
//! convolutions, elementwise ops and weight initialization.
//!
//! Feature maps use (channels, depth, height, width) layout, row-major.
//! Convolutions are cross-correlations (no kernel flip).

mod conv;
mod fast;
mod init;
mod ops;
mod rng;
mod tensor;
mod transpose;

pub use conv::{conv3d_direct, ConvSpec};
pub use fast::conv3d_fast;
pub use init::{he_normal_init, zero_bias};
pub use ops::{add, concat_channels, relu};
pub use rng::CounterRng;
pub use tensor::Tensor;
pub use transpose::{conv_transpose3d, conv_transpose3d_direct};

pub(crate) use fast::conv3d_fast_into;
pub(crate) use ops::{add_into, concat_into, relu_into};

pub(crate) fn ops_broadcast_dims(x: &[usize], y: &[usize]) -> crate::Result<Vec<usize>> {
    ops::broadcast_dims(x, y).map(|(d, _)| d)
}

pub(crate) fn ops_concat_dims(x: &[usize], y: &[usize]) -> crate::Result<Vec<usize>> {
    ops::concat_dims(x, y)
}
pub(crate) use transpose::conv_transpose3d_into;

/// Activation applied to a convolution's output in the same pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    None,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
        }
    }
}

/// Spatial chunking shared by the parallel kernels.
///
/// Work is split into groups of whole output rows holding roughly this many
/// voxels. The split depends only on tensor shapes, never on the thread
/// count, so results are bit-identical for any degree of parallelism.
pub(crate) const CHUNK_VOXELS: usize = 2048;

pub(crate) fn rows_per_chunk(row_len: usize) -> usize {
    (CHUNK_VOXELS / row_len.max(1)).max(1)
}

/// Raw output pointer shared by tasks that write provably disjoint regions.
#[derive(Clone, Copy)]
pub(crate) struct SyncPtr(pub *mut f32);
unsafe impl Send for SyncPtr {}
unsafe impl Sync for SyncPtr {}
