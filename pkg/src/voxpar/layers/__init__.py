"""Layer library: serial references, distributed versions, accounting."""

from .accounting import (
    chain_shapes,
    walk_shapes,
    flop_count,
    memory_estimate,
    network_flops,
    out_shape,
    param_count,
)
from .distributed import (
    dist_batchnorm,
    dist_batchnorm_bwd,
    dist_concat_channels,
    dist_conv3d,
    dist_conv3d_bwd_data,
    dist_conv3d_bwd_filter,
    dist_cross_entropy,
    dist_deconv3d,
    dist_deconv3d_bwd_data,
    dist_deconv3d_bwd_filter,
    dist_dropout,
    dist_leaky_relu,
    dist_leaky_relu_bwd,
    dist_mse,
    dist_pool3d,
    dist_pool3d_bwd,
    redistribute,
)
from .reference import (
    BNState,
    ConvParams,
    batchnorm_bwd_ref,
    batchnorm_fwd_ref,
    batchnorm_stats,
    concat_channels,
    conv3d_bwd_data_ref,
    conv3d_bwd_filter_ref,
    conv3d_ref,
    cross_entropy_ref,
    deconv3d_bwd_data_ref,
    deconv3d_bwd_filter_ref,
    deconv3d_ref,
    dropout_apply,
    dropout_mask,
    fully_connected,
    fully_connected_bwd,
    leaky_relu,
    leaky_relu_bwd,
    log_softmax,
    mse_loss,
    pool3d_bwd_ref,
    pool3d_ref,
)

__all__ = [n for n in dir() if not n.startswith("_")]
