//! Primitive kernels: forward functions plus the vector-Jacobian products the
//! tape calls during the backward sweep.

mod activation;
mod channel_mix;
mod conv;
mod elementwise;
mod norm;
mod pool;
mod rearrange;
mod resize;
mod softmax;

pub use activation::{activation, activation_backward, gelu_tanh, Activation};
pub use channel_mix::{
    channel_gram, channel_gram_backward, codebook_mix, codebook_mix_backward, head_mix,
    head_mix_backward, normalize_spatial, normalize_spatial_backward,
};
pub use conv::{conv2d, conv2d_backward, conv2d_raw, linear, ConvSpec, ConvWeights};
pub use elementwise::{
    concat_channels, ew, ew_backward, narrow_channels, reduce_to_shape, BinaryOp,
};
pub use norm::{layer_norm, layer_norm_backward, LAYER_NORM_EPS};
pub use pool::{global_avg_pool, global_avg_pool_backward};
pub use rearrange::{crop, crop_backward, pixel_rearrange, reflect_pad, reflect_pad_backward, Rearrange};
pub use resize::{resize_bilinear, resize_bilinear_backward};
pub use softmax::{softmax, softmax_backward};

/// Runs `f(row_index, row)` over consecutive `row_len` chunks of `out`,
/// in parallel when the `parallel` feature is on. Rows are disjoint, so the
/// result does not depend on scheduling.
pub(crate) fn for_each_row<T: Send>(
    out: &mut [T],
    row_len: usize,
    f: impl Fn(usize, &mut [T]) + Send + Sync,
) {
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}
