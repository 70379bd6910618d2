"""Hybrid-parallel network execution over the simulated fabric.

A Plan binds a NetworkSpec to a process grid: every layer gets a placement
("spatial" until the redistribution point, "collapsed" after it, "flat"
once the tensor loses its spatial axes) and every inter-layer edge gets a
DistTensorMeta whose halo radii are what the consumer needs. Collapsed
layers run on one lead rank per data-parallel group with full spatial
extents, so the same distributed ops serve both phases.

The per-rank entry points (forward / train_step) are called inside
fabric.run workers; every rank owns its own replicated parameter set, and
replication is preserved because the single end-of-step gradient allreduce
and the optimizer are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import prng
from ..errors import NonDivisible, ShapeMismatch
from ..fabric import RankCtx
from ..layers import accounting
from ..layers import distributed as D
from ..layers import reference as ref
from ..tensor import DistTensor, DistTensorMeta, ProcessGrid, Shape5D, make_partition
from .networks import LayerSpec, NetworkSpec, param_entries
from .optim import OptimizerState, optimizer_step

_NO_HALO = (0, 0, 0)


@dataclass(frozen=True)
class Plan:
    """Layout decisions for one (network, grid, batch) combination."""

    net: NetworkSpec
    grid: ProcessGrid
    n_global: int
    w_i: int
    placement: tuple  # per layer: "spatial" | "collapsed" | "flat"
    in_meta: tuple  # per layer: DistTensorMeta of its input tensor (5D) or None
    out_radii: tuple  # per layer: halo radii its output tensor must carry
    redist_idx: int  # layer index the redistribution precedes; -1 = never
    redist_src_meta: DistTensorMeta  # spatial-layout meta of the moved edge
    leads: tuple  # fabric rank of each group's lead
    label_meta: DistTensorMeta  # xent label layout; None for mse

    @property
    def input_meta(self) -> DistTensorMeta:
        return self.in_meta[0]


def _consumer_radii(layer: LayerSpec):
    if layer.kind == "conv":
        return layer.params.radii
    return _NO_HALO


def _spatial_block(layer: LayerSpec, in_shape, parts):
    """None if the layer can run spatially partitioned on this grid, else
    a human-readable reason."""
    ext = in_shape[2:]
    for name, e, p in zip("dhw", ext, parts):
        if e % p:
            return f"extent {name}={e} not divisible by {p} partitions"
    if layer.kind == "conv":
        pr = layer.params
        for name, e, p, r, s in zip("dhw", ext, parts, pr.radii, pr.stride):
            local = e // p
            if p > 1 and r > local:
                return f"halo radius {r} exceeds local extent {local} in {name}"
            if p > 1 and local % s:
                return f"local extent {name}={local} not divisible by stride {s}"
    elif layer.kind == "pool":
        for name, e, p in zip("dhw", ext, parts):
            if (e // p) % 2:
                return f"local extent {name}={e // p} is odd"
    return None


def make_plan(net: NetworkSpec, grid: ProcessGrid, n_global: int, w_i: int,
              redistribute_before: str = None) -> Plan:
    """Choose layouts. The redistribution point defaults to the first layer
    that cannot run spatially partitioned (or the flatten), and may be moved
    earlier by name; moving it later than feasibility allows raises
    NonDivisible naming the offending layer."""
    in_shape = (n_global, net.in_channels, w_i, w_i, w_i)
    shapes = [in_shape]
    by_name = {}
    for l in net.layers:
        skip = by_name.get(l.skip) if l.kind == "concat" else None
        nxt = accounting.out_shape(l, shapes[-1], skip_shape=skip)
        by_name[l.name] = nxt
        shapes.append(nxt)

    parts = grid.spatial_parts
    forced = None if redistribute_before is None else net.layer_index(redistribute_before)
    redist = -1
    reasons = {}
    for i, l in enumerate(net.layers):
        if l.kind == "flatten":
            redist = i if redist < 0 else redist
            break
        why = _spatial_block(l, shapes[i], parts)
        if why is not None and redist < 0:
            redist = i
            reasons[i] = why
    if forced is not None:
        if redist >= 0 and forced > redist:
            l = net.layers[redist]
            raise NonDivisible(
                f"layer {l.name!r} cannot run spatially on grid {parts}: {reasons.get(redist, 'needs flat layout')}"
            )
        redist = forced
    if redist == 0 and grid.spatial_size > 1:
        l = net.layers[0]
        raise NonDivisible(
            f"layer {l.name!r} cannot run spatially on grid {parts}: {reasons.get(0)}"
        )
    if redist >= 0:
        for i, l in enumerate(net.layers):
            if l.kind == "concat" and net.layer_index(l.skip) < redist <= i:
                raise NonDivisible(
                    f"redistribution before {net.layers[redist].name!r} would split "
                    f"the {l.name!r} skip connection across layouts"
                )

    leads = tuple(grid.rank_of(g, 0, 0, 0) for g in range(grid.groups))
    grid_c = ProcessGrid(grid.groups, 1, 1, 1)

    def meta_for(shape, spatial: bool, radii):
        s5 = Shape5D(*shape)
        if spatial:
            return make_partition(s5, grid, radii)
        return make_partition(s5, grid_c, radii, rank_map=leads)

    placement = []
    in_meta = []
    out_radii = []
    flat = False
    redist_src_meta = None
    for i, l in enumerate(net.layers):
        spatial = (redist < 0 or i < redist) and not flat
        if l.kind == "flatten":
            placement.append("flat")
            in_meta.append(meta_for(shapes[i], False, _NO_HALO))
            out_radii.append(_NO_HALO)
            flat = True
            continue
        if flat:
            placement.append("flat")
            in_meta.append(None)
            out_radii.append(_NO_HALO)
            continue
        placement.append("spatial" if spatial else "collapsed")
        radii = _consumer_radii(l)
        in_meta.append(meta_for(shapes[i], spatial, radii))
        nxt = net.layers[i + 1] if i + 1 < len(net.layers) else None
        if nxt is None or nxt.kind == "flatten" or (redist >= 0 and i + 1 == redist):
            out_radii.append(_NO_HALO)
        else:
            out_radii.append(_consumer_radii(nxt))
    if redist >= 0:
        redist_src_meta = meta_for(shapes[redist], True, _NO_HALO)

    label_meta = None
    if net.loss == "xent":
        out5 = shapes[-1]
        spatial_out = placement[-1] == "spatial"
        label_meta = meta_for((out5[0], 1) + out5[2:], spatial_out, _NO_HALO)

    return Plan(net, grid, n_global, w_i, tuple(placement), tuple(in_meta),
                tuple(out_radii), redist, redist_src_meta, leads, label_meta)


@dataclass
class Batch:
    """One rank's share of a global batch.

    x_block: this rank's voxel block in plan.input_meta layout (None when
    the rank holds no part). target: the rank's group rows (mse). y_block:
    this rank's label block in plan.label_meta layout (xent). sample_ids:
    global ids of the group's samples, in row order.
    """

    x_block: np.ndarray = None
    target: np.ndarray = None
    y_block: np.ndarray = None
    sample_ids: tuple = ()
    epoch: int = 0
    iteration: int = 0


@dataclass
class RankState:
    """Per-rank replica of everything training mutates."""

    params: dict
    bn_states: dict
    opt: OptimizerState


def _grid_rank(meta: DistTensorMeta, fabric_rank: int):
    try:
        return meta.rank_map.index(fabric_rank)
    except ValueError:
        return None


def _meta_like(meta: DistTensorMeta, radii=_NO_HALO):
    return make_partition(meta.global_shape, meta.grid, radii, meta.rank_map)


def _wrap_like(meta: DistTensorMeta, radii, grid_rank, data):
    return DistTensor(_meta_like(meta, radii), grid_rank, data)


def forward(ctx: RankCtx, plan: Plan, state: RankState, batch: Batch,
            mode: str, seed: int = 0, trace: dict = None):
    """Runs the forward pass; returns (pred, stash).

    pred is a 2D lead-local array for mse networks (None off-lead) or the
    final DistTensor for xent networks (None on non-holding ranks). A trace
    dict, when given, receives this rank's ("fwd", layer name) -> local
    output entries for the verification harness.
    """
    net = plan.net
    params, states = state.params, state.bn_states
    me = ctx.rank
    step_key = (seed, batch.epoch, batch.iteration)
    cur = None
    gr0 = _grid_rank(plan.input_meta, me)
    if gr0 is not None:
        if batch.x_block is None:
            raise ShapeMismatch(f"rank {me} holds an input block but batch has none")
        cur = DistTensor(plan.input_meta, gr0, batch.x_block)
    outputs = {}
    stash = []
    for i, l in enumerate(net.layers):
        if i == plan.redist_idx and plan.placement[i] != "flat":
            cur = D.redistribute(ctx, cur, plan.redist_src_meta, plan.in_meta[i])
        if plan.placement[i] == "flat":
            if l.kind == "flatten":
                if plan.redist_idx == i:
                    cur = D.redistribute(ctx, cur, plan.redist_src_meta, plan.in_meta[i])
                if cur is not None:
                    stash.append(None)
                    cur = cur.data.reshape(cur.data.shape[0], -1)
                else:
                    stash.append(None)
            elif cur is None:
                stash.append(None)
            elif l.kind == "fc":
                stash.append(cur)
                cur = ref.fully_connected(cur, params[f"{l.name}.w"], params[f"{l.name}.b"])
            elif l.kind == "leaky":
                stash.append(cur)
                cur = ref.leaky_relu(cur, l.slope)
            elif l.kind == "dropout":
                if mode == "train":
                    masks = _flat_masks(i, step_key, batch.sample_ids, cur.shape[1], l.keep)
                    cur = ref.dropout_apply(cur, masks, l.keep)
                    stash.append(masks)
                else:
                    stash.append(None)
            else:
                raise ShapeMismatch(f"layer kind {l.kind!r} after flatten")
            outputs[l.name] = cur
            continue

        if cur is None:  # not in this placement's rank group
            stash.append(None)
            outputs[l.name] = None
            continue
        radii = plan.out_radii[i]
        if l.kind == "conv":
            stash.append(cur)
            cur = D.dist_conv3d(ctx, cur, params[f"{l.name}.w"], l.params, radii)
        elif l.kind == "deconv":
            stash.append(cur)
            cur = D.dist_deconv3d(ctx, cur, params[f"{l.name}.w"], radii)
        elif l.kind == "pool":
            stash.append(cur)
            cur = D.dist_pool3d(ctx, cur, l.pool_kind, radii)
        elif l.kind == "bn":
            cur, cache = D.dist_batchnorm(ctx, cur, states[l.name], mode, radii)
            stash.append(cache)
        elif l.kind == "leaky":
            stash.append(cur)
            cur = D.dist_leaky_relu(cur, l.slope, radii)
        elif l.kind == "dropout":
            if mode == "train":
                cur, masks = D.dist_dropout(cur, (seed, batch.epoch, batch.iteration, i),
                                            batch.sample_ids, l.keep, radii)
                stash.append(masks)
            else:
                stash.append(None)
        elif l.kind == "concat":
            skip = outputs[l.skip]
            stash.append((cur.data.shape[1], skip.data.shape[1]))
            cur = D.dist_concat_channels(cur, skip, radii)
        else:
            raise ShapeMismatch(f"unknown layer kind {l.kind!r}")
        outputs[l.name] = cur
    if trace is not None:
        for name, value in outputs.items():
            trace[("fwd", name)] = value
    return cur, stash


def _flat_masks(layer_idx, step_key, sample_ids, features, keep):
    seed, epoch, it = step_key
    rows = [
        ref.dropout_mask([seed, epoch, it, int(sid), layer_idx], features, keep)
        for sid in sample_ids
    ]
    return np.stack(rows) if rows else np.zeros((0, features), dtype=bool)


def loss_and_grad(ctx: RankCtx, plan: Plan, pred, batch: Batch):
    """Loss (bit-identical on every rank) and its gradient w.r.t. pred."""
    net = plan.net
    if net.loss == "mse":
        size = plan.n_global * net.out_dim
        if pred is None:
            local, diff = 0.0, None
        else:
            if batch.target is None or pred.shape != batch.target.shape:
                raise ShapeMismatch("mse target rows missing or mis-shaped")
            diff = pred - batch.target
            local = float((diff * diff).sum())
        total = ctx.allreduce_sum(np.array([local]), None)[0]
        dpred = None if diff is None else (2.0 / size) * diff
        return float(total) / size, dpred
    # per-voxel cross entropy
    gs = plan.label_meta.global_shape
    count = gs.n * gs.d * gs.h * gs.w
    if pred is None:
        local, grad = 0.0, None
    else:
        gr = _grid_rank(plan.label_meta, ctx.rank)
        lab = batch.y_block.reshape(plan.label_meta.local_shape(gr).n, 1,
                                    *plan.label_meta.region(gr).extent)
        lab = lab[:, 0].astype(np.int64)
        logp = ref.log_softmax(pred.data)
        picked = np.take_along_axis(logp, lab[:, None], axis=1)
        local = float(-picked.sum())
        grad = np.exp(logp)
        np.put_along_axis(grad, lab[:, None],
                          np.take_along_axis(grad, lab[:, None], axis=1) - 1.0, axis=1)
    total = ctx.allreduce_sum(np.array([local]), None)[0]
    dpred = None
    if grad is not None:
        dpred = _wrap_like(pred.meta, _NO_HALO, pred.grid_rank, grad / count)
    return float(total) / count, dpred


def backward(ctx: RankCtx, plan: Plan, state: RankState, stash, dpred,
             trace: dict = None):
    """Backward pass; returns rank-local parameter gradient partials.

    A trace dict, when given, receives ("bwd", layer name) -> the local
    gradient w.r.t. that layer's input.
    """
    net = plan.net
    params, states = state.params, state.bn_states
    grads = {}
    u = dpred
    extra = {}
    for i in range(len(net.layers) - 1, -1, -1):
        l = net.layers[i]
        kept = stash[i]
        if plan.placement[i] == "flat":
            if l.kind == "flatten":
                if u is not None:
                    m = _meta_like(plan.in_meta[i])
                    gr = _grid_rank(m, ctx.rank)
                    u = DistTensor(m, gr, u.reshape(m.local_shape(gr).n, m.global_shape.c,
                                                    *m.region(gr).extent))
                if plan.redist_idx == i:
                    u = D.redistribute(ctx, u, _meta_like(plan.in_meta[i]),
                                       plan.redist_src_meta)
            elif u is None:
                pass
            elif l.kind == "fc":
                w = params[f"{l.name}.w"]
                u, dw, db = ref.fully_connected_bwd(kept, w, u)
                grads[f"{l.name}.w"] = dw
                grads[f"{l.name}.b"] = db
            elif l.kind == "leaky":
                u = ref.leaky_relu_bwd(kept, u, l.slope)
            elif l.kind == "dropout":
                if kept is not None:
                    u = ref.dropout_apply(u, kept, l.keep)
            if trace is not None:
                trace[("bwd", l.name)] = u
            continue

        if u is not None and l.name in extra:
            g = extra.pop(l.name)
            u = _wrap_like(u.meta, _NO_HALO, u.grid_rank, u.data + g)
        if u is None:
            if i == plan.redist_idx:
                u = D.redistribute(ctx, None, _meta_like(plan.in_meta[i]),
                                   plan.redist_src_meta)
            if trace is not None:
                trace[("bwd", l.name)] = u
            continue
        in_meta = plan.in_meta[i]
        if l.kind == "conv":
            grads[f"{l.name}.w"] = D.dist_conv3d_bwd_filter(ctx, kept, u, l.params,
                                                            reduce=False)
            u = D.dist_conv3d_bwd_data(ctx, u, params[f"{l.name}.w"], l.params, in_meta)
        elif l.kind == "deconv":
            grads[f"{l.name}.w"] = D.dist_deconv3d_bwd_filter(ctx, kept, u, reduce=False)
            u = D.dist_deconv3d_bwd_data(ctx, u, params[f"{l.name}.w"], in_meta)
        elif l.kind == "pool":
            u = D.dist_pool3d_bwd(ctx, kept, u, l.pool_kind, in_meta)
        elif l.kind == "bn":
            u, dgamma, dbeta = D.dist_batchnorm_bwd(ctx, u, states[l.name], kept, in_meta)
            grads[f"{l.name}.gamma"] = dgamma
            grads[f"{l.name}.beta"] = dbeta
        elif l.kind == "leaky":
            u = D.dist_leaky_relu_bwd(kept, u, l.slope, in_meta)
        elif l.kind == "dropout":
            if kept is not None:
                u = _wrap_like(u.meta, _NO_HALO, u.grid_rank,
                               ref.dropout_apply(u.data, kept, l.keep))
        elif l.kind == "concat":
            c_main, _ = kept
            g_skip = u.data[:, c_main:]
            prev = extra.get(l.skip)
            extra[l.skip] = g_skip if prev is None else prev + g_skip
            u = _wrap_like(in_meta, _NO_HALO, u.grid_rank,
                           np.ascontiguousarray(u.data[:, :c_main]))
        if i == plan.redist_idx:
            u = D.redistribute(ctx, u, _meta_like(in_meta), plan.redist_src_meta)
        if trace is not None:
            trace[("bwd", l.name)] = u
    return grads


def _gradient_allreduce(ctx: RankCtx, plan: Plan, params: dict, grads: dict):
    """Single concatenated allreduce over all ranks; returns full grads."""
    entries = param_entries(plan.net)
    chunks = []
    for name, shape, _ in entries:
        g = grads.get(name)
        if g is None:
            g = np.zeros(shape, dtype=params[name].dtype)
        chunks.append(np.asarray(g).ravel())
    flat = ctx.allreduce_sum(np.concatenate(chunks) if chunks else np.zeros(0), None)
    out = {}
    pos = 0
    for name, shape, _ in entries:
        n = int(np.prod(shape))
        out[name] = flat[pos:pos + n].reshape(shape)
        pos += n
    return out


def train_step(ctx: RankCtx, plan: Plan, state: RankState, batch: Batch,
               lr: float, seed: int = 0) -> float:
    """One hybrid-parallel training step; loss is identical on every rank."""
    pred, stash = forward(ctx, plan, state, batch, "train", seed)
    loss, dpred = loss_and_grad(ctx, plan, pred, batch)
    partials = backward(ctx, plan, state, stash, dpred)
    grads = _gradient_allreduce(ctx, plan, state.params, partials)
    optimizer_step(state.params, grads, state.opt, lr)
    return loss


def eval_loss(ctx: RankCtx, plan: Plan, state: RankState, batch: Batch,
              seed: int = 0) -> float:
    pred, _ = forward(ctx, plan, state, batch, "eval", seed)
    return loss_and_grad(ctx, plan, pred, batch)[0]


def scatter_batch(plan: Plan, x: np.ndarray, y, sample_ids, epoch=0, iteration=0):
    """Split a global batch into per-rank Batch objects (test/CLI helper).

    x is (N, C, D, H, W) ordered group-major (group g owns rows
    [g*n_local, (g+1)*n_local)); y is (N, out_dim) targets for mse nets or
    (N, D, H, W) integer labels for xent nets; sample_ids are the N global
    ids in row order.
    """
    from ..tensor import scatter

    xb = scatter(plan.input_meta, x)
    ids = tuple(int(s) for s in sample_ids)
    n_local = plan.n_global // plan.grid.groups
    batches = {}
    yb = None
    if plan.net.loss == "xent":
        yb = scatter(plan.label_meta, np.asarray(y)[:, None])
    for rank in range(plan.grid.size):
        gin = _grid_rank(plan.input_meta, rank)
        g = plan.grid.coords(rank)[0]
        rows = slice(g * n_local, (g + 1) * n_local)
        b = Batch(sample_ids=ids[rows], epoch=epoch, iteration=iteration)
        if gin is not None:
            b.x_block = xb[gin]
        if plan.net.loss == "mse":
            b.target = np.asarray(y)[rows]
        else:
            gl = _grid_rank(plan.label_meta, rank)
            if gl is not None:
                b.y_block = yb[gl]
        batches[rank] = b
    return batches
