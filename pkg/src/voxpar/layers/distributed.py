"""Distributed layer implementations over DistTensor blocks.

Every op here is collective across the ranks named by the tensor's rank
map: each of those ranks must call it with its own block, in the same
program order (the fabric's deadlock scan enforces this). Gathering the
outputs of any op reproduces the serial reference from
voxpar.layers.reference on the unpartitioned input.

Tensors are wrapped with the halo radii their *consumer* needs
(out_radii); only tensors feeding a convolution carry nonzero radii.
"""

from __future__ import annotations

import numpy as np

from .. import kernels, prng
from ..errors import NonDivisible, ShapeMismatch
from ..fabric import TAG_REDIST, RankCtx, halo_exchange, reverse_halo_exchange
from ..tensor import DistTensor, DistTensorMeta, Shape5D, make_partition
from . import reference as ref
from .reference import BNState, ConvParams

_NO_HALO = (0, 0, 0)


def _group(meta: DistTensorMeta):
    return sorted(set(meta.rank_map))


def _wrap(meta: DistTensorMeta, out_shape: Shape5D, out_radii, grid_rank, data):
    out_meta = make_partition(out_shape, meta.grid, out_radii, meta.rank_map)
    return DistTensor(out_meta, grid_rank, data)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


# -------------------------------------------------------------- convolution

def dist_conv3d(ctx: RankCtx, x: DistTensor, w: np.ndarray, params: ConvParams,
                out_radii=_NO_HALO) -> DistTensor:
    """Spatially partitioned convolution: halo exchange, then local conv.

    The input tensor must have been partitioned with this conv's halo radii.
    Strided convs additionally need every local extent divisible by the
    stride so output ownership lines up with the block tiling.
    """
    meta = x.meta
    if tuple(meta.radii) != params.radii:
        raise ShapeMismatch(
            f"input partitioned with radii {meta.radii}, conv needs {params.radii}"
        )
    if x.data.shape[1] != params.cin:
        raise ShapeMismatch(f"conv input channels {x.data.shape[1]} != {params.cin}")
    parts = meta.grid.spatial_parts
    local = x.data.shape[2:]
    for name, e, p, s in zip("dhw", local, parts, params.stride):
        if p > 1 and e % s:
            raise NonDivisible(
                f"local extent {name}={e} not divisible by stride {s}"
            )
    halo_exchange(ctx, x)
    y = kernels.conv3d_fwd(x.padded(), w, params.stride)
    gs = meta.global_shape
    out_shape = Shape5D(gs.n, params.cout,
                        *(_ceil_div(e, s) for e, s in zip(gs.spatial, params.stride)))
    return _wrap(meta, out_shape, out_radii, x.grid_rank, y)


def dist_conv3d_bwd_data(ctx: RankCtx, u: DistTensor, w: np.ndarray,
                         params: ConvParams, in_meta: DistTensorMeta) -> DistTensor:
    """Input gradient: local scatter into a halo-wide frame, then the
    adjoint halo exchange folds margin gradients back into their owners."""
    loc = in_meta.local_shape(u.grid_rank)
    pad_spatial = tuple(e + 2 * r for e, r in zip((loc.d, loc.h, loc.w), in_meta.radii))
    frame = kernels.conv3d_bwd_data(u.data, w, params.stride, pad_spatial)
    reverse_halo_exchange(ctx, in_meta, u.grid_rank, frame)
    rd, rh, rw = in_meta.radii
    core = frame[:, :, rd:rd + loc.d, rh:rh + loc.h, rw:rw + loc.w]
    return _wrap(in_meta, in_meta.global_shape, _NO_HALO, u.grid_rank, core)


def dist_conv3d_bwd_filter(ctx: RankCtx, x: DistTensor, u: DistTensor,
                           params: ConvParams, reduce: bool = True) -> np.ndarray:
    """Filter gradient from local partials.

    Requires x's halos to be filled (i.e. dist_conv3d already ran on it).
    With reduce=True the partials are allreduced over the tensor's rank
    group; the training loop passes reduce=False and folds the partial into
    the step's single concatenated gradient allreduce instead.
    """
    wg = kernels.conv3d_bwd_filter(x.padded(), u.data, params.stride, params.kernel)
    if reduce:
        flat = ctx.allreduce_sum(wg.ravel(), _group(x.meta))
        wg = flat.reshape(wg.shape)
    return wg


# ------------------------------------------------------------------- deconv

def dist_deconv3d(ctx: RankCtx, x: DistTensor, w: np.ndarray,
                  out_radii=_NO_HALO) -> DistTensor:
    """Transposed conv, kernel 2^3 stride 2: purely local (kernel = stride
    means each input voxel writes a disjoint output block; no halos)."""
    if tuple(x.meta.radii) != _NO_HALO:
        raise ShapeMismatch("deconv input must carry no halos")
    y = ref.deconv3d_ref(x.data, w)
    gs = x.meta.global_shape
    out_shape = Shape5D(gs.n, w.shape[1], 2 * gs.d, 2 * gs.h, 2 * gs.w)
    return _wrap(x.meta, out_shape, out_radii, x.grid_rank, y)


def dist_deconv3d_bwd_data(ctx: RankCtx, u: DistTensor, w: np.ndarray,
                           in_meta: DistTensorMeta) -> DistTensor:
    xg = ref.deconv3d_bwd_data_ref(u.data, w)
    return _wrap(in_meta, in_meta.global_shape, _NO_HALO, u.grid_rank, xg)


def dist_deconv3d_bwd_filter(ctx: RankCtx, x: DistTensor, u: DistTensor,
                             reduce: bool = True) -> np.ndarray:
    wg = ref.deconv3d_bwd_filter_ref(x.data, u.data)
    if reduce:
        flat = ctx.allreduce_sum(wg.ravel(), _group(x.meta))
        wg = flat.reshape(wg.shape)
    return wg


# ------------------------------------------------------------------ pooling

def dist_pool3d(ctx: RankCtx, x: DistTensor, kind: str = "average",
                out_radii=_NO_HALO) -> DistTensor:
    """2^3 stride-2 pooling. Windows never straddle blocks (extents and
    offsets are even), so pooling is local and needs no halo."""
    if tuple(x.meta.radii) != _NO_HALO:
        raise ShapeMismatch("pool input must carry no halos")
    y = ref.pool3d_ref(x.data, kind)
    gs = x.meta.global_shape
    out_shape = Shape5D(gs.n, gs.c, gs.d // 2, gs.h // 2, gs.w // 2)
    return _wrap(x.meta, out_shape, out_radii, x.grid_rank, y)


def dist_pool3d_bwd(ctx: RankCtx, x: DistTensor, u: DistTensor, kind: str,
                    in_meta: DistTensorMeta) -> DistTensor:
    xg = ref.pool3d_bwd_ref(x.data, u.data, kind)
    return _wrap(in_meta, in_meta.global_shape, _NO_HALO, u.grid_rank, xg)


# ---------------------------------------------------------------- batchnorm

def dist_batchnorm(ctx: RankCtx, x: DistTensor, state: BNState,
                   mode: str = "train", out_radii=_NO_HALO):
    """Batch normalization with statistics allreduced over the tensor's
    whole rank group (all samples, all spatial partitions).

    Returns (y: DistTensor, cache) where cache feeds dist_batchnorm_bwd.
    """
    gs = x.meta.global_shape
    c = gs.c
    axes = (0, 2, 3, 4)
    if mode == "train":
        count = gs.n * gs.d * gs.h * gs.w
        local = np.concatenate([x.data.sum(axis=axes), (x.data * x.data).sum(axis=axes)])
        red = ctx.allreduce_sum(local, _group(x.meta))
        mean, var = ref.batchnorm_stats(red[:c], red[c:], count)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
        count = 0
    else:
        raise ShapeMismatch(f"unknown bn mode {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    bc = lambda v: v.reshape(1, c, 1, 1, 1).astype(x.data.dtype)
    xhat = (x.data - bc(mean)) * bc(inv)
    y = bc(state.gamma) * xhat + bc(state.beta)
    out = _wrap(x.meta, gs, out_radii, x.grid_rank, y)
    return out, (xhat, inv, count)


def dist_batchnorm_bwd(ctx: RankCtx, u: DistTensor, state: BNState, cache,
                       in_meta: DistTensorMeta):
    """Returns (dx: DistTensor, dgamma_partial, dbeta_partial).

    The two reduction terms are allreduced here because dx needs the global
    sums; the returned parameter gradients stay rank-local partials so the
    training step's single gradient allreduce is not a double reduction.
    """
    xhat, inv, count = cache
    c = u.data.shape[1]
    axes = (0, 2, 3, 4)
    t_beta = u.data.sum(axis=axes)
    t_gamma = (u.data * xhat).sum(axis=axes)
    red = ctx.allreduce_sum(np.concatenate([t_beta, t_gamma]), _group(u.meta))
    g_beta, g_gamma = red[:c], red[c:]
    bc = lambda v: v.reshape(1, c, 1, 1, 1).astype(u.data.dtype)
    dx = bc(state.gamma * inv) * (u.data - (bc(g_beta) + xhat * bc(g_gamma)) / count)
    out = _wrap(in_meta, in_meta.global_shape, _NO_HALO, u.grid_rank, dx)
    return out, t_gamma, t_beta


# ---------------------------------------------------------------- pointwise

def dist_leaky_relu(x: DistTensor, slope: float, out_radii=_NO_HALO) -> DistTensor:
    y = ref.leaky_relu(x.data, slope)
    return _wrap(x.meta, x.meta.global_shape, out_radii, x.grid_rank, y)


def dist_leaky_relu_bwd(x: DistTensor, u: DistTensor, slope: float,
                        in_meta: DistTensorMeta) -> DistTensor:
    g = ref.leaky_relu_bwd(x.data, u.data, slope)
    return _wrap(in_meta, in_meta.global_shape, _NO_HALO, u.grid_rank, g)


def dist_dropout(x: DistTensor, key_base, sample_ids, keep: float,
                 out_radii=_NO_HALO) -> tuple:
    """Voxel dropout with masks keyed by global voxel coordinate.

    key_base is (seed, epoch, iteration, layer_index); the per-sample key
    appends the global sample id, and the counter is the voxel's global
    linear index over (C, D, H, W) — so masks are partition-invariant.
    Returns (y, mask).
    """
    gs = x.meta.global_shape
    region = x.meta.region(x.grid_rank)
    (od, oh, ow), (ed, eh, ew) = region.offset, region.extent
    ci = np.arange(gs.c)
    di = od + np.arange(ed)
    hi = oh + np.arange(eh)
    wi = ow + np.arange(ew)
    idx = (((ci[:, None, None, None] * gs.d + di[None, :, None, None]) * gs.h
            + hi[None, None, :, None]) * gs.w + wi[None, None, None, :])
    masks = np.empty(x.data.shape, dtype=bool)
    seed, epoch, it, layer = key_base
    for slot, sid in enumerate(sample_ids):
        u = prng.uniform01([seed, epoch, it, int(sid), layer], counters=idx.ravel())
        masks[slot] = (u < keep).reshape(idx.shape)
    y = ref.dropout_apply(x.data, masks, keep)
    return _wrap(x.meta, gs, out_radii, x.grid_rank, y), masks


def dist_concat_channels(a: DistTensor, b: DistTensor, out_radii=_NO_HALO) -> DistTensor:
    if a.meta.grid != b.meta.grid or a.meta.rank_map != b.meta.rank_map:
        raise ShapeMismatch("concat operands must share a partition layout")
    ga, gb = a.meta.global_shape, b.meta.global_shape
    if (ga.n, ga.d, ga.h, ga.w) != (gb.n, gb.d, gb.h, gb.w):
        raise ShapeMismatch(f"concat shapes {ga} vs {gb}")
    y = np.concatenate([a.data, b.data], axis=1)
    out_shape = Shape5D(ga.n, ga.c + gb.c, ga.d, ga.h, ga.w)
    return _wrap(a.meta, out_shape, out_radii, a.grid_rank, y)


# ------------------------------------------------------------------- losses

def dist_mse(ctx: RankCtx, pred, target, global_size: int, group=None):
    """MSE over rank-local rows; loss identical on every participating rank.

    pred/target may be empty on ranks that hold no rows (they contribute 0).
    Returns (loss, dpred).
    """
    if pred is None:
        pred = target = np.zeros((0,))
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse shapes {pred.shape} vs {target.shape}")
    diff = pred - target
    local = float((diff * diff).sum()) if diff.size else 0.0
    total = ctx.allreduce_sum(np.array([local]), group)[0]
    return float(total) / global_size, (2.0 / global_size) * diff


def dist_cross_entropy(ctx: RankCtx, pred: DistTensor, labels: DistTensor):
    """Per-voxel cross entropy over a spatially partitioned prediction.

    Channels are never partitioned, so the per-voxel softmax is local; only
    the scalar sum is allreduced. labels is an integer DistTensor with c=1
    in the same layout. Returns (loss, dpred: DistTensor).
    """
    pm, lm = pred.meta, labels.meta
    if pm.grid != lm.grid or pm.rank_map != lm.rank_map or pm.global_shape.spatial != lm.global_shape.spatial:
        raise ShapeMismatch("labels must be partitioned identically to pred")
    lab = labels.data[:, 0].astype(np.int64)
    logp = ref.log_softmax(pred.data)
    gs = pm.global_shape
    count = gs.n * gs.d * gs.h * gs.w
    picked = np.take_along_axis(logp, lab[:, None], axis=1)
    total = ctx.allreduce_sum(np.array([float(-picked.sum())]), _group(pm))[0]
    grad = np.exp(logp)
    np.put_along_axis(grad, lab[:, None],
                      np.take_along_axis(grad, lab[:, None], axis=1) - 1.0, axis=1)
    dpred = _wrap(pm, gs, _NO_HALO, pred.grid_rank, grad / count)
    return float(total) / count, dpred


# ------------------------------------------------------------ redistribution

def redistribute(ctx: RankCtx, x, src_meta: DistTensorMeta,
                 dst_meta: DistTensorMeta):
    """Move a tensor between partition layouts, values preserved exactly.

    Collective over the union of both rank maps (ranks in neither map may
    also call; they move nothing). x is this rank's source block (None when
    the rank holds no source part). Returns the destination DistTensor, or
    None when this rank holds no destination part. Identical layouts send
    zero messages (pure local copy).
    """
    if src_meta.global_shape != dst_meta.global_shape:
        raise ShapeMismatch(
            f"redistribute shapes differ: {src_meta.global_shape} vs {dst_meta.global_shape}"
        )
    me = ctx.rank
    src_gr = src_meta.rank_map.index(me) if me in src_meta.rank_map else None
    dst_gr = dst_meta.rank_map.index(me) if me in dst_meta.rank_map else None
    if src_gr is not None and x is None:
        raise ShapeMismatch(f"rank {me} holds a source block but passed none")

    plan = []
    for a in range(src_meta.grid.size):
        a_lo, a_hi = src_meta.sample_range(src_meta.group_of(a))
        ra = src_meta.region(a)
        for b in range(dst_meta.grid.size):
            b_lo, b_hi = dst_meta.sample_range(dst_meta.group_of(b))
            lo, hi = max(a_lo, b_lo), min(a_hi, b_hi)
            if hi <= lo:
                continue
            ov = ra.intersect(dst_meta.region(b))
            if ov is None:
                continue
            plan.append((a, b, lo, hi, ov))

    dst_block = None
    if dst_gr is not None:
        loc = dst_meta.local_shape(dst_gr)
        dtype = x.data.dtype if x is not None else None
        dst_block = np.zeros((loc.n, loc.c, loc.d, loc.h, loc.w),
                             dtype=dtype if dtype is not None else np.float64)

    for a, b, lo, hi, ov in plan:
        if a != src_gr:
            continue
        a_lo = src_meta.sample_range(src_meta.group_of(a))[0]
        sl = (slice(lo - a_lo, hi - a_lo), slice(None)) + ov.slices(src_meta.region(a).offset)
        block = np.ascontiguousarray(x.data[sl])
        dst_rank = dst_meta.fabric_rank(b)
        if dst_rank == me:
            b_lo = dst_meta.sample_range(dst_meta.group_of(b))[0]
            dsl = (slice(lo - b_lo, hi - b_lo), slice(None)) + ov.slices(dst_meta.region(b).offset)
            if dst_block.dtype != block.dtype:
                dst_block = dst_block.astype(block.dtype)
            dst_block[dsl] = block
        else:
            ctx.send(dst_rank, TAG_REDIST, block)
    for a, b, lo, hi, ov in plan:
        if b != dst_gr:
            continue
        src_rank = src_meta.fabric_rank(a)
        if src_rank == me:
            continue
        got = ctx.recv(src_rank, TAG_REDIST)
        if dst_block.dtype != got.dtype:
            dst_block = dst_block.astype(got.dtype)
        b_lo = dst_meta.sample_range(dst_meta.group_of(b))[0]
        dsl = (slice(lo - b_lo, hi - b_lo), slice(None)) + ov.slices(dst_meta.region(b).offset)
        dst_block[dsl] = got.reshape(dst_block[dsl].shape)
    if dst_gr is None:
        return None
    return DistTensor(dst_meta, dst_gr, dst_block)