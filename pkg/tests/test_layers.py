"""Layer semantics: serial oracles on known values, distributed vs serial."""

import numpy as np
import pytest

from voxpar.errors import NonDivisible, ShapeMismatch
from voxpar.fabric import run_ranks
from voxpar.layers import distributed as D
from voxpar.layers import reference as R
from voxpar.tensor import (DistTensor, ProcessGrid, Shape5D, gather,
                           make_partition, scatter)

RNG = np.random.default_rng(7)


def _meta(shape, grid, radii=(0, 0, 0)):
    return make_partition(Shape5D(*shape), ProcessGrid(*grid), radii)


def _gather_out(results):
    ref = next(r for r in results if r is not None)
    return gather(ref.meta, {r.grid_rank: r.data for r in results
                             if r is not None})


# ------------------------------------------------------------ serial oracles

def test_conv_identity_kernel():
    x = RNG.normal(size=(2, 1, 4, 4, 4))
    p = R.ConvParams(1, 1, kernel=(1, 1, 1))
    np.testing.assert_array_equal(R.conv3d_ref(x, np.ones((1, 1, 1, 1, 1)), p), x)


def test_conv_ones_counts_window():
    x = np.ones((1, 1, 5, 5, 5))
    p = R.ConvParams(1, 1)
    y = R.conv3d_ref(x, np.ones((1, 1, 3, 3, 3)), p)
    assert y.shape == x.shape
    assert y[0, 0, 2, 2, 2] == 27.0  # full window
    assert y[0, 0, 0, 0, 0] == 8.0  # corner sees 2x2x2 inside the pad


def test_conv_stride2_identity_kernel_subsamples():
    x = RNG.normal(size=(1, 1, 8, 8, 8))
    p = R.ConvParams(1, 1, kernel=(1, 1, 1), stride=(2, 2, 2))
    y = R.conv3d_ref(x, np.ones((1, 1, 1, 1, 1)), p)
    np.testing.assert_array_equal(y, x[:, :, ::2, ::2, ::2])


def test_conv_even_kernel_rejected():
    with pytest.raises(ShapeMismatch):
        R.ConvParams(1, 1, kernel=(2, 3, 3))


@pytest.mark.parametrize("stride", [(1, 1, 1), (2, 2, 2)])
def test_conv_adjoint(stride):
    p = R.ConvParams(2, 3, stride=stride)
    x = RNG.normal(size=(2, 2, 8, 8, 8))
    w = RNG.normal(size=(3, 2, 3, 3, 3))
    y = R.conv3d_ref(x, w, p)
    u = RNG.normal(size=y.shape)
    lhs = float((y * u).sum())
    dx = R.conv3d_bwd_data_ref(u, w, p, x.shape[2:])
    dw = R.conv3d_bwd_filter_ref(x, u, p)
    assert abs(lhs - float((x * dx).sum())) <= 1e-10 * abs(lhs)
    assert abs(lhs - float((w * dw).sum())) <= 1e-10 * abs(lhs)


def test_deconv_one_hot_expands_block():
    x = np.zeros((1, 1, 3, 3, 3))
    x[0, 0, 1, 2, 0] = 1.0
    y = R.deconv3d_ref(x, np.ones((1, 1, 2, 2, 2)))
    assert y.shape == (1, 1, 6, 6, 6)
    assert y.sum() == 8.0
    assert (y[0, 0, 2:4, 4:6, 0:2] == 1.0).all()


def test_deconv_adjoint():
    x = RNG.normal(size=(2, 3, 4, 4, 4))
    w = RNG.normal(size=(3, 2, 2, 2, 2))
    y = R.deconv3d_ref(x, w)
    u = RNG.normal(size=y.shape)
    lhs = float((y * u).sum())
    assert abs(lhs - float((x * R.deconv3d_bwd_data_ref(u, w)).sum())) <= 1e-10 * abs(lhs)
    assert abs(lhs - float((w * R.deconv3d_bwd_filter_ref(x, u)).sum())) <= 1e-10 * abs(lhs)


def test_pool_average_constant():
    x = np.full((1, 2, 4, 4, 4), 3.5)
    y = R.pool3d_ref(x, "average")
    assert y.shape == (1, 2, 2, 2, 2)
    assert (y == 3.5).all()


def test_pool_max_takes_window_max():
    x = np.arange(4 ** 3, dtype=np.float64).reshape(1, 1, 4, 4, 4)
    y = R.pool3d_ref(x, "max")
    # max of each 2^3 window is its high corner
    np.testing.assert_array_equal(y, x[:, :, 1::2, 1::2, 1::2])


def test_pool_max_tie_takes_lowest_linear_index():
    x = np.zeros((1, 1, 2, 2, 2))
    g = R.pool3d_bwd_ref(x, np.ones((1, 1, 1, 1, 1)), "max")
    assert g[0, 0, 0, 0, 0] == 1.0
    assert g.sum() == 1.0


def test_pool_average_bwd_spreads():
    x = np.zeros((1, 1, 2, 2, 2))
    g = R.pool3d_bwd_ref(x, np.ones((1, 1, 1, 1, 1)), "average")
    assert (g == 0.125).all()


def test_pool_odd_extent_rejected():
    with pytest.raises(NonDivisible):
        R.pool3d_ref(np.zeros((1, 1, 3, 4, 4)))


@pytest.mark.parametrize("kind", ["average", "max"])
def test_pool_adjoint(kind):
    x = RNG.normal(size=(2, 2, 4, 4, 4))
    y = R.pool3d_ref(x, kind)
    u = RNG.normal(size=y.shape)
    lhs = float((y * u).sum())
    rhs = float((x * R.pool3d_bwd_ref(x, u, kind)).sum())
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_batchnorm_constant_input_maps_to_beta():
    st = R.BNState.fresh(2)
    st.beta[:] = [0.5, -1.0]
    x = np.full((2, 2, 4, 4, 4), 9.0)
    y, _ = R.batchnorm_fwd_ref(x, st, "train")
    np.testing.assert_allclose(y[:, 0], 0.5, atol=1e-12)
    np.testing.assert_allclose(y[:, 1], -1.0, atol=1e-12)


def test_batchnorm_matches_textbook():
    st = R.BNState.fresh(3)
    st.gamma[:] = [1.0, 2.0, 0.5]
    x = RNG.normal(size=(4, 3, 2, 2, 2))
    y, _ = R.batchnorm_fwd_ref(x, st, "train")
    mean = x.mean(axis=(0, 2, 3, 4))
    var = x.var(axis=(0, 2, 3, 4))
    xhat = (x - mean[:, None, None, None]) / np.sqrt(var + st.eps)[:, None, None, None]
    np.testing.assert_allclose(y, st.gamma[:, None, None, None] * xhat, atol=1e-12)


def test_batchnorm_running_stats_update():
    st = R.BNState.fresh(1)
    x = np.full((1, 1, 2, 2, 2), 4.0)
    R.batchnorm_fwd_ref(x, st, "train")
    np.testing.assert_allclose(st.running_mean, [0.9 * 0.0 + 0.1 * 4.0])
    np.testing.assert_allclose(st.running_var, [0.9 * 1.0 + 0.1 * 0.0])


def test_batchnorm_eval_uses_running_stats():
    st = R.BNState.fresh(1)
    st.running_mean[:] = 2.0
    st.running_var[:] = 4.0
    x = np.full((1, 1, 2, 2, 2), 6.0)
    y, _ = R.batchnorm_fwd_ref(x, st, "eval")
    np.testing.assert_allclose(y, (6.0 - 2.0) / np.sqrt(4.0 + st.eps))


def test_leaky_relu_values():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(R.leaky_relu(x, 0.01), [-0.01, 0.0, 2.0])
    u = np.ones(3)
    np.testing.assert_array_equal(R.leaky_relu_bwd(x, u, 0.3), [0.3, 1.0, 1.0])


def test_dropout_mask_deterministic():
    a = R.dropout_mask((1, 2, 3, 4, 5), 64, 0.8)
    b = R.dropout_mask((1, 2, 3, 4, 5), 64, 0.8)
    np.testing.assert_array_equal(a, b)
    assert R.dropout_mask((0, 0, 0, 0, 0), 4096, 1.0).all()


def test_dropout_apply_scales_kept():
    x = np.ones(8)
    mask = np.array([1, 0, 1, 1, 0, 1, 1, 1], dtype=bool)
    y = R.dropout_apply(x, mask, 0.8)
    np.testing.assert_allclose(y[mask], 1.0 / 0.8)
    assert (y[~mask] == 0.0).all()


def test_fully_connected_bwd_formulas():
    x = RNG.normal(size=(3, 5))
    w = RNG.normal(size=(5, 2))
    b = RNG.normal(size=2)
    u = RNG.normal(size=(3, 2))
    y = R.fully_connected(x, w, b)
    np.testing.assert_allclose(y, x @ w + b)
    dx, dw, db = R.fully_connected_bwd(x, w, u)
    np.testing.assert_allclose(dx, u @ w.T)
    np.testing.assert_allclose(dw, x.T @ u)
    np.testing.assert_allclose(db, u.sum(axis=0))


def test_mse_known_value():
    loss, dpred = R.mse_loss(np.array([[1.0, 2.0]]), np.zeros((1, 2)))
    assert loss == 2.5
    np.testing.assert_array_equal(dpred, [[1.0, 2.0]])
    loss0, d0 = R.mse_loss(np.ones((2, 3)), np.ones((2, 3)))
    assert loss0 == 0.0 and (d0 == 0.0).all()


def test_cross_entropy_known_value():
    logits = np.zeros((1, 2, 1, 1, 1))
    labels = np.zeros((1, 1, 1, 1), dtype=np.int64)
    loss, grad = R.cross_entropy_ref(logits, labels)
    assert abs(loss - np.log(2.0)) < 1e-15
    np.testing.assert_allclose(grad[0, :, 0, 0, 0], [-0.5, 0.5])


# --------------------------------------------------- distributed equivalence

GRIDS = [(1, 2, 1, 1), (1, 4, 1, 1), (1, 2, 2, 1), (1, 1, 2, 2)]


def _dist_conv_case(stride=(1, 1, 1)):
    p = R.ConvParams(2, 3, stride=stride)
    x = RNG.normal(size=(2, 2, 8, 8, 8))
    w = RNG.normal(size=(3, 2, 3, 3, 3))
    return p, x, w


def test_dist_conv_single_rank_bitwise():
    p, x, w = _dist_conv_case()
    meta = _meta(x.shape, (1, 1, 1, 1), p.radii)

    def fn(ctx):
        return D.dist_conv3d(ctx, DistTensor(meta, 0, x.copy()), w, p)

    np.testing.assert_array_equal(_gather_out(run_ranks(1, fn)),
                                  R.conv3d_ref(x, w, p))


@pytest.mark.parametrize("grid", GRIDS)
@pytest.mark.parametrize("stride", [(1, 1, 1), (2, 2, 2)])
def test_dist_conv_forward_bitwise(grid, stride):
    p, x, w = _dist_conv_case(stride)
    meta = _meta(x.shape, grid, p.radii)
    blocks = scatter(meta, x)

    def fn(ctx):
        return D.dist_conv3d(ctx, DistTensor(meta, ctx.rank, blocks[ctx.rank].copy()),
                             w, p)

    got = _gather_out(run_ranks(meta.grid.size, fn))
    np.testing.assert_array_equal(got, R.conv3d_ref(x, w, p))


@pytest.mark.parametrize("grid", GRIDS)
def test_dist_conv_bwd_data(grid):
    p, x, w = _dist_conv_case()
    in_meta = _meta(x.shape, grid, p.radii)
    u = RNG.normal(size=(2, 3, 8, 8, 8))
    u_meta = _meta(u.shape, grid)
    ublocks = scatter(u_meta, u)

    def fn(ctx):
        ut = DistTensor(u_meta, ctx.rank, ublocks[ctx.rank].copy())
        return D.dist_conv3d_bwd_data(ctx, ut, w, p, in_meta)

    got = _gather_out(run_ranks(in_meta.grid.size, fn))
    want = R.conv3d_bwd_data_ref(u, w, p, x.shape[2:])
    assert np.max(np.abs(got - want)) <= 1e-12


@pytest.mark.parametrize("grid", GRIDS)
def test_dist_conv_bwd_filter_reduced(grid):
    p, x, w = _dist_conv_case()
    in_meta = _meta(x.shape, grid, p.radii)
    xblocks = scatter(in_meta, x)
    u = RNG.normal(size=(2, 3, 8, 8, 8))
    u_meta = _meta(u.shape, grid)
    ublocks = scatter(u_meta, u)

    def fn(ctx):
        xt = DistTensor(in_meta, ctx.rank, xblocks[ctx.rank].copy())
        D.dist_conv3d(ctx, xt, w, p)  # fills halos
        ut = DistTensor(u_meta, ctx.rank, ublocks[ctx.rank].copy())
        return D.dist_conv3d_bwd_filter(ctx, xt, ut, p)

    results = run_ranks(in_meta.grid.size, fn)
    want = R.conv3d_bwd_filter_ref(x, u, p)
    for dw in results:
        assert np.max(np.abs(dw - want)) <= 1e-12
        np.testing.assert_array_equal(dw, results[0])  # replicated


def test_dist_conv_radii_mismatch():
    p, x, w = _dist_conv_case()
    meta = _meta(x.shape, (1, 2, 1, 1), (0, 0, 0))
    blocks = scatter(meta, x)

    def fn(ctx):
        return D.dist_conv3d(ctx, DistTensor(meta, ctx.rank, blocks[ctx.rank]), w, p)

    with pytest.raises(ShapeMismatch, match="radii"):
        run_ranks(2, fn)


def test_dist_conv_stride_misalignment():
    p = R.ConvParams(1, 1, stride=(2, 2, 2))
    x = RNG.normal(size=(1, 1, 6, 4, 4))
    meta = _meta(x.shape, (1, 2, 1, 1), p.radii)  # local d=3, stride 2
    blocks = scatter(meta, x)
    w = RNG.normal(size=(1, 1, 3, 3, 3))

    def fn(ctx):
        return D.dist_conv3d(ctx, DistTensor(meta, ctx.rank, blocks[ctx.rank]), w, p)

    with pytest.raises(NonDivisible, match="stride"):
        run_ranks(2, fn)


@pytest.mark.parametrize("grid", GRIDS)
def test_dist_deconv_matches_serial(grid):
    x = RNG.normal(size=(2, 3, 4, 4, 4))
    w = RNG.normal(size=(3, 2, 2, 2, 2))
    meta = _meta(x.shape, grid)
    blocks = scatter(meta, x)

    def fn(ctx):
        return D.dist_deconv3d(ctx, DistTensor(meta, ctx.rank, blocks[ctx.rank].copy()), w)

    got = _gather_out(run_ranks(meta.grid.size, fn))
    np.testing.assert_array_equal(got, R.deconv3d_ref(x, w))


def test_dist_deconv_bwd_data_matches_serial():
    x = RNG.normal(size=(2, 3, 4, 4, 4))
    w = RNG.normal(size=(3, 2, 2, 2, 2))
    in_meta = _meta(x.shape, (1, 2, 2, 1))
    u = RNG.normal(size=(2, 2, 8, 8, 8))
    u_meta = _meta(u.shape, (1, 2, 2, 1))
    ublocks = scatter(u_meta, u)

    def fn(ctx):
        ut = DistTensor(u_meta, ctx.rank, ublocks[ctx.rank].copy())
        return D.dist_deconv3d_bwd_data(ctx, ut, w, in_meta)

    got = _gather_out(run_ranks(4, fn))
    assert np.max(np.abs(got - R.deconv3d_bwd_data_ref(u, w))) <= 1e-12


@pytest.mark.parametrize("kind", ["average", "max"])
@pytest.mark.parametrize("grid", [(1, 2, 1, 1), (1, 2, 2, 1)])
def test_dist_pool_matches_serial(kind, grid):
    x = RNG.normal(size=(2, 2, 8, 8, 8))
    meta = _meta(x.shape, grid)
    blocks = scatter(meta, x)

    def fn(ctx):
        t = DistTensor(meta, ctx.rank, blocks[ctx.rank].copy())
        y = D.dist_pool3d(ctx, t, kind)
        u_meta = y.meta
        u = DistTensor(u_meta, ctx.rank, np.ones(y.data.shape))
        g = D.dist_pool3d_bwd(ctx, t, u, kind, meta)
        return y, g

    results = run_ranks(meta.grid.size, fn)
    got_y = _gather_out([r[0] for r in results])
    np.testing.assert_array_equal(got_y, R.pool3d_ref(x, kind))
    got_g = _gather_out([r[1] for r in results])
    want_g = R.pool3d_bwd_ref(x, np.ones((2, 2, 4, 4, 4)), kind)
    np.testing.assert_array_equal(got_g, want_g)


def test_dist_batchnorm_global_stats():
    """Stats reduce over every rank: groups and spatial parts together."""
    x = RNG.normal(size=(4, 3, 8, 8, 8)) * 2.0 + 1.0
    meta = _meta(x.shape, (2, 2, 1, 1))
    blocks = scatter(meta, x)
    ref_state = R.BNState.fresh(3)
    want, _ = R.batchnorm_fwd_ref(x, ref_state, "train")

    def fn(ctx):
        st = R.BNState.fresh(3)
        t = DistTensor(meta, ctx.rank, blocks[ctx.rank].copy())
        y, _ = D.dist_batchnorm(ctx, t, st, "train")
        return y, st

    results = run_ranks(meta.grid.size, fn)
    got = _gather_out([r[0] for r in results])
    assert np.max(np.abs(got - want)) <= 1e-12
    for _, st in results:
        np.testing.assert_allclose(st.running_mean, ref_state.running_mean,
                                   atol=1e-13)
        np.testing.assert_allclose(st.running_var, ref_state.running_var,
                                   atol=1e-13)


def test_dist_batchnorm_bwd_matches_serial():
    x = RNG.normal(size=(2, 3, 8, 8, 8))
    u = RNG.normal(size=x.shape)
    meta = _meta(x.shape, (1, 2, 2, 1))
    xb, ub = scatter(meta, x), scatter(meta, u)
    ref_state = R.BNState.fresh(3)
    ref_state.gamma[:] = [1.0, 0.5, 2.0]
    _, ref_cache = R.batchnorm_fwd_ref(x, ref_state, "train")
    want_dx, want_dg, want_db = R.batchnorm_bwd_ref(u, ref_state, ref_cache)

    def fn(ctx):
        st = R.BNState.fresh(3)
        st.gamma[:] = [1.0, 0.5, 2.0]
        t = DistTensor(meta, ctx.rank, xb[ctx.rank].copy())
        _, cache = D.dist_batchnorm(ctx, t, st, "train")
        ut = DistTensor(meta, ctx.rank, ub[ctx.rank].copy())
        dx, dg, db = D.dist_batchnorm_bwd(ctx, ut, st, cache, meta)
        total = ctx.allreduce_sum(np.concatenate([dg, db]))
        return dx, total

    results = run_ranks(meta.grid.size, fn)
    got_dx = _gather_out([r[0] for r in results])
    assert np.max(np.abs(got_dx - want_dx)) <= 1e-12
    total = results[0][1]
    np.testing.assert_allclose(total[:3], want_dg, atol=1e-12)
    np.testing.assert_allclose(total[3:], want_db, atol=1e-12)


def test_dist_leaky_and_dropout_partition_invariant():
    x = RNG.normal(size=(2, 2, 8, 8, 8))
    key = (3, 0, 1, 5)
    keep = 0.8

    def run(grid):
        meta = _meta(x.shape, grid)
        blocks = scatter(meta, x)

        def fn(ctx):
            t = DistTensor(meta, ctx.rank, blocks[ctx.rank].copy())
            y = D.dist_leaky_relu(t, 0.3)
            z, _ = D.dist_dropout(y, key, (0, 1), keep)
            return z

        return _gather_out(run_ranks(meta.grid.size, fn))

    base = run((1, 1, 1, 1))
    kept = base != 0.0
    assert 0.5 < kept.mean() < 1.0  # keep=0.8 drops some voxels
    np.testing.assert_allclose(base[kept], (R.leaky_relu(x, 0.3) / 0.8)[kept],
                               rtol=1e-15)
    for grid in GRIDS:
        np.testing.assert_array_equal(run(grid), base)


def test_dist_concat_channels():
    a = RNG.normal(size=(1, 2, 4, 4, 4))
    b = RNG.normal(size=(1, 3, 4, 4, 4))
    meta_a = _meta(a.shape, (1, 2, 1, 1))
    meta_b = _meta(b.shape, (1, 2, 1, 1))
    ab, bb = scatter(meta_a, a), scatter(meta_b, b)

    def fn(ctx):
        ta = DistTensor(meta_a, ctx.rank, ab[ctx.rank].copy())
        tb = DistTensor(meta_b, ctx.rank, bb[ctx.rank].copy())
        return D.dist_concat_channels(ta, tb)

    got = _gather_out(run_ranks(2, fn))
    np.testing.assert_array_equal(got, np.concatenate([a, b], axis=1))


def test_dist_mse_matches_serial():
    pred = RNG.normal(size=(4, 3))
    target = RNG.normal(size=(4, 3))
    want_loss, want_grad = R.mse_loss(pred, target)

    def fn(ctx):
        rows = slice(2 * ctx.rank, 2 * ctx.rank + 2)
        loss, dpred = D.dist_mse(ctx, pred[rows], target[rows], pred.size)
        return loss, dpred

    results = run_ranks(2, fn)
    assert results[0][0] == results[1][0]  # replicated bitwise
    assert abs(results[0][0] - want_loss) <= 1e-14
    got = np.concatenate([r[1] for r in results])
    np.testing.assert_allclose(got, want_grad, atol=1e-15)


def test_dist_mse_empty_rank_contributes_zero():
    pred = RNG.normal(size=(2, 3))
    target = np.zeros((2, 3))
    want_loss, _ = R.mse_loss(pred, target)

    def fn(ctx):
        if ctx.rank == 0:
            return D.dist_mse(ctx, pred, target, pred.size)[0]
        return D.dist_mse(ctx, None, None, pred.size)[0]

    results = run_ranks(2, fn)
    assert results[0] == results[1]
    assert abs(results[0] - want_loss) <= 1e-14


def test_dist_cross_entropy_matches_serial():
    logits = RNG.normal(size=(2, 3, 4, 4, 4))
    labels = RNG.integers(0, 3, size=(2, 4, 4, 4))
    want_loss, want_grad = R.cross_entropy_ref(logits, labels)
    meta = _meta(logits.shape, (1, 2, 2, 1))
    lmeta = _meta((2, 1, 4, 4, 4), (1, 2, 2, 1))
    lb = scatter(meta, logits)
    yb = scatter(lmeta, labels[:, None].astype(np.float64))

    def fn(ctx):
        pt = DistTensor(meta, ctx.rank, lb[ctx.rank].copy())
        yt = DistTensor(lmeta, ctx.rank, yb[ctx.rank].astype(np.int64))
        loss, dpred = D.dist_cross_entropy(ctx, pt, yt)
        return loss, dpred

    results = run_ranks(4, fn)
    losses = {r[0] for r in results}
    assert len(losses) == 1  # replicated bitwise
    assert abs(results[0][0] - want_loss) <= 1e-13
    got = _gather_out([r[1] for r in results])
    assert np.max(np.abs(got - want_grad)) <= 1e-14


def test_redistribute_identity_is_silent():
    from voxpar.fabric import Fabric
    x = RNG.normal(size=(2, 1, 8, 4, 4))
    meta = _meta(x.shape, (1, 2, 1, 1))
    blocks = scatter(meta, x)

    def fn(ctx):
        t = DistTensor(meta, ctx.rank, blocks[ctx.rank].copy())
        return D.redistribute(ctx, t, meta, meta)

    fab = Fabric(2)
    results = fab.run(fn)
    np.testing.assert_array_equal(_gather_out(results), x)
    assert fab.counters().total_sent == 0


def test_redistribute_moves_layout():
    x = RNG.normal(size=(2, 1, 8, 4, 4))
    src = _meta(x.shape, (1, 2, 1, 1))
    dst = _meta(x.shape, (2, 1, 1, 1))
    blocks = scatter(src, x)

    def fn(ctx):
        t = DistTensor(src, ctx.rank, blocks[ctx.rank].copy())
        out = D.redistribute(ctx, t, src, dst)
        back = D.redistribute(ctx, out, dst, src)
        return out, back

    results = run_ranks(2, fn)
    got = _gather_out([r[0] for r in results])
    np.testing.assert_array_equal(got, x)
    round_trip = _gather_out([r[1] for r in results])
    np.testing.assert_array_equal(round_trip, x)


def test_redistribute_shape_mismatch():
    a = _meta((2, 1, 8, 4, 4), (1, 2, 1, 1))
    b = _meta((2, 1, 4, 4, 4), (1, 2, 1, 1))

    def fn(ctx):
        t = DistTensor(a, ctx.rank, np.zeros((2, 1, 4, 4, 4)))
        return D.redistribute(ctx, t, a, b)

    with pytest.raises(ShapeMismatch):
        run_ranks(2, fn)
