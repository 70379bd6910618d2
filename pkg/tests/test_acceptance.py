"""Acceptance gate: the eight shipping criteria, one pass/fail line each.

Every test computes its criterion at the stated tolerance, prints a single
``criterion N: PASS/FAIL (...)`` line, and asserts. Run with -s to watch the
lines scroll by.
"""

import copy
import math

import numpy as np

from voxpar import cli
from voxpar import datastore as ds
from voxpar import perfmodel as pm
from voxpar.fabric import Fabric, run_ranks
from voxpar.layers import accounting
from voxpar.layers import reference as R
from voxpar.model import engine, serial
from voxpar.model.networks import (build_cosmoflow, build_unet_mini,
                                   total_params)
from voxpar.model.optim import OptimizerState, init_params
from voxpar.tensor import ProcessGrid

GIB = 1024 ** 3
TINY = np.finfo(np.float64).tiny


def _report(num, ok, detail):
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num}: {detail}"


def _rel(analytic, numeric):
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


# --------------------------------------------------- 1: oracle equivalence


def test_criterion_1_oracle_equivalence(capsys):
    failures, runs = [], 0
    for net, wi in (("cosmoflow", "32"), ("unet_mini", "16")):
        for grid in ("1x2x1x1", "1x4x1x1", "1x2x2x1", "2x2x1x1"):
            for fp in ("64", "32"):
                rc = cli.main(["verify", "--net", net, "--wi", wi,
                               "--grid", grid, "--n", "2", "--fp", fp])
                capsys.readouterr()
                runs += 1
                if rc != 0:
                    failures.append(f"{net} {grid} fp{fp}")
    _report(1, not failures,
            f"{runs - len(failures)}/{runs} verify runs pass, fp64 <=1e-12 "
            f"abs, fp32 <=1e-5 rel" + (f"; failed: {failures}" if failures
                                       else ""))


# ----------------------------------------------------- 2: gradient checks


def _num_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.ravel(), g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def test_criterion_2_gradient_checks():
    rng = np.random.default_rng(7)
    errs = {}

    p = R.ConvParams(2, 2)
    x = rng.normal(size=(1, 2, 6, 6, 6))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    u = rng.normal(size=R.conv3d_ref(x, w, p).shape)
    errs["conv.dx"] = _rel(
        R.conv3d_bwd_data_ref(u, w, p, x.shape[2:]),
        _num_grad(lambda v: float((R.conv3d_ref(v, w, p) * u).sum()), x))
    errs["conv.dw"] = _rel(
        R.conv3d_bwd_filter_ref(x, u, p),
        _num_grad(lambda v: float((R.conv3d_ref(x, v, p) * u).sum()), w))

    x = rng.normal(size=(1, 2, 3, 3, 3))
    w = rng.normal(size=(2, 2, 2, 2, 2))
    u = rng.normal(size=(1, 2, 6, 6, 6))
    errs["deconv.dx"] = _rel(
        R.deconv3d_bwd_data_ref(u, w),
        _num_grad(lambda v: float((R.deconv3d_ref(v, w) * u).sum()), x))
    errs["deconv.dw"] = _rel(
        R.deconv3d_bwd_filter_ref(x, u),
        _num_grad(lambda v: float((R.deconv3d_ref(x, v) * u).sum()), w))

    st = R.BNState.fresh(2)
    st.gamma[:] = [1.25, 0.8]
    x = rng.normal(size=(2, 2, 4, 4, 4))
    u = rng.normal(size=x.shape)
    _, cache = R.batchnorm_fwd_ref(x, st, "train")
    dx, dgamma, _ = R.batchnorm_bwd_ref(u, st, cache)

    def bn_loss(v):
        y, _ = R.batchnorm_fwd_ref(v, st, "train")
        return float((y * u).sum())

    errs["bn.dx"] = _rel(dx, _num_grad(bn_loss, x))

    def bn_loss_gamma(gv):
        saved = st.gamma.copy()
        st.gamma[:] = gv
        out = bn_loss(x)
        st.gamma[:] = saved
        return out

    errs["bn.dgamma"] = _rel(dgamma, _num_grad(bn_loss_gamma, st.gamma.copy()))

    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=4)
    u = rng.normal(size=(3, 4))
    dx, dw, db = R.fully_connected_bwd(x, w, u)
    errs["fc.dx"] = _rel(dx, _num_grad(
        lambda v: float((R.fully_connected(v, w, b) * u).sum()), x))
    errs["fc.dw"] = _rel(dw, _num_grad(
        lambda v: float((R.fully_connected(x, v, b) * u).sum()), w))
    errs["fc.db"] = _rel(db, _num_grad(
        lambda v: float((R.fully_connected(x, w, v) * u).sum()), b))

    pred = rng.normal(size=(3, 4))
    target = rng.normal(size=(3, 4))
    errs["mse"] = _rel(R.mse_loss(pred, target)[1],
                       _num_grad(lambda v: R.mse_loss(v, target)[0], pred))

    logits = rng.normal(size=(2, 3, 2, 2, 2))
    labels = rng.integers(0, 3, size=(2, 2, 2, 2))
    errs["xent"] = _rel(
        R.cross_entropy_ref(logits, labels)[1],
        _num_grad(lambda v: R.cross_entropy_ref(v, labels)[0], logits))

    worst = max(errs, key=errs.get)
    _report(2, errs[worst] <= 1e-6,
            f"{len(errs)} checks, worst rel err {errs[worst]:.2e} ({worst}), "
            f"tol 1e-6")


# ------------------------------------------- 3: training partition-invariance

GRIDS3 = ((1, 1, 1, 1), (1, 2, 1, 1), (2, 2, 1, 1))  # G*pd in {1, 2, 4}


def _dist_train(net, grid, x, y, ids, steps, lr, seed, dtype):
    g = ProcessGrid(*grid)
    plan = engine.make_plan(net, g, x.shape[0], x.shape[2])
    base = init_params(net, seed, dtype)
    batches = [engine.scatter_batch(plan, x, y, ids, epoch=0, iteration=s)
               for s in range(steps)]

    def fn(ctx):
        params = copy.deepcopy(base)
        st = engine.RankState(params,
                              serial.make_bn_states(net, params, dtype),
                              OptimizerState.for_params("adam", params))
        losses = [engine.train_step(ctx, plan, st, batches[s][ctx.rank], lr,
                                    seed=seed) for s in range(steps)]
        return losses, params

    return run_ranks(g.size, fn)


def _serial_train(net, x, y, ids, steps, lr, seed, dtype):
    params = init_params(net, seed, dtype)
    states = serial.make_bn_states(net, params, dtype)
    ost = OptimizerState.for_params("adam", params)
    losses = [serial.train_step(net, params, states, ost, lr, x, y, ids,
                                step_key=(seed, 0, s)) for s in range(steps)]
    return losses, params


def test_criterion_3_training_partition_invariance():
    net = build_cosmoflow(32, with_bn=True)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1.0, 1.0, size=(4, net.in_channels, 32, 32, 32))
    y = rng.uniform(-1.0, 1.0, size=(4, net.out_dim))
    ids = tuple(range(4))

    worst_w = 0.0
    _, ref_params = _serial_train(net, x, y, ids, 3, 1e-3, 0, np.float64)
    for grid in GRIDS3:
        results = _dist_train(net, grid, x, y, ids, 3, 1e-3, 0, np.float64)
        for _, params in results:
            for k, want in ref_params.items():
                scale = max(float(np.max(np.abs(want))), TINY)
                worst_w = max(worst_w,
                              float(np.max(np.abs(params[k] - want))) / scale)

    worst_l = 0.0
    x32, y32 = x.astype(np.float32), y.astype(np.float32)
    ref_losses, _ = _serial_train(net, x32, y32, ids, 3, 1e-3, 0, np.float32)
    for grid in GRIDS3:
        results = _dist_train(net, grid, x32, y32, ids, 3, 1e-3, 0, np.float32)
        for losses, _ in results:
            for got, want in zip(losses, ref_losses):
                worst_l = max(worst_l, abs(got - want) / max(abs(want), TINY))

    _report(3, worst_w <= 1e-10 and worst_l <= 1e-4,
            f"3 adam steps, grids {{1,2,4}} ranks*: fp64 weight rel err "
            f"{worst_w:.2e} (tol 1e-10), fp32 loss rel err {worst_l:.2e} "
            f"(tol 1e-4)")


# ------------------------------------------------- 4: flop table arithmetic


def test_criterion_4_flop_table():
    fails = []

    def check(label, got, want, tol):
        if abs(got - want) / want > tol:
            fails.append(f"{label}: {got} vs {want}")

    totals = {128: 55.55, 256: 443.8, 512: 3550.0}
    mem = {}
    for wi in (128, 256, 512):
        net = build_cosmoflow(wi)
        _, fwd, total = accounting.network_flops(
            net, (1, net.in_channels, wi, wi, wi))
        if wi == 128:
            check("fwd conv GF @128", fwd / 1e9, 18.52, 0.02)
        check(f"total conv GF @{wi}", total / 1e9, totals[wi], 0.02)
        mem[wi] = accounting.memory_estimate(net, wi)

    # full ladders only; desk-scale widths truncate the conv stack
    for wi in (128, 256, 512):
        check(f"params @{wi}", total_params(build_cosmoflow(wi)), 9.44e6, 0.01)

    check("memory GiB @128", mem[128] / GIB, 0.824, 0.15)
    for lo, hi in ((128, 256), (256, 512)):
        ratio = mem[hi] / mem[lo]
        if round(ratio, 2) != 8.0:
            fails.append(f"memory ratio {hi}/{lo}: {ratio!r}")

    _report(4, not fails,
            f"fwd 18.52 GF +-2%, totals 55.55/443.8/3550 +-2%, params "
            f"9.44M +-1% all widths, memory {mem[128] / GIB:.4f} GiB vs "
            f"0.824 +-15%, x8 ratios" + (f"; {fails}" if fails else ""))


# --------------------------------------------------------- 5: datastore I/O


def test_criterion_5_datastore(tmp_path):
    total, batch = 64, 8
    man = ds.generate_fixture(tmp_path / "data", total, (1, 16, 16, 16))
    grid = ProcessGrid(2, 2, 1, 1)
    epochs = [ds.epoch_schedule(0, e, total, batch, grid.groups)
              for e in range(4)]
    stores = [ds.DataStore(man, grid, r) for r in range(grid.size)]

    def fn(ctx):
        st = stores[ctx.rank]
        ds.ingest_epoch0(st, epochs[0])
        ingested = st.counters.file_bytes_read
        rec = {}
        for e, es in enumerate(epochs):
            for it in range(es.iterations):
                rec[(e, it)] = [(sid, blk.copy()) for sid, blk, _ in
                                ds.exchange_for_iteration(ctx, st, es, it)]
        return rec, ingested

    fab = Fabric(grid.size)
    results = fab.run(fn)
    fails = []

    payload = total * 16 ** 3 * 2  # int16 voxels
    read = sum(st.counters.file_bytes_read for st in stores)
    if read != payload:
        fails.append(f"epoch-0 bytes {read} != dataset {payload}")
    for r, (rec, ingested) in enumerate(results):
        if stores[r].counters.file_bytes_read != ingested:
            fails.append(f"rank {r} read files after ingest")
        for e in range(1, 4):
            if stores[r].counters.epoch_file_bytes(e):
                fails.append(f"rank {r} epoch {e} touched files")

    for e, es in enumerate(epochs):
        for r, (rec, _) in enumerate(results):
            group = grid.coords(r)[0]
            want = set()
            for it in range(es.iterations):
                want.update(es.group_samples(it, group))
            got = [sid for it in range(es.iterations)
                   for sid, _ in rec[(e, it)]]
            if len(got) != len(set(got)) or set(got) != want:
                fails.append(f"coverage epoch {e} rank {r}")

    rng = np.random.default_rng(11)
    for _ in range(100):
        r = int(rng.integers(grid.size))
        e = int(rng.integers(4))
        it = int(rng.integers(epochs[e].iterations))
        (od, oh, ow), (ed, eh, ew) = (stores[r].region.offset,
                                      stores[r].region.extent)
        for sid, blk in results[r][0][(e, it)]:
            disk = ds.read_payload(man.path(sid))[:, od:od + ed,
                                                  oh:oh + eh, ow:ow + ew]
            if not np.array_equal(blk, disk):
                fails.append(f"probe ({e},{it},{r}) sample {sid}")

    _report(5, not fails,
            "epoch-0 reads dataset exactly once, epochs 1+ read 0 bytes, "
            "coverage exact, 100 delivery probes match disk"
            + (f"; {fails[:4]}" if fails else ""))


# ---------------------------------------------------- 6: performance model


def test_criterion_6_performance_model():
    fails = []

    net = build_cosmoflow(512)
    table = pm.flop_proportional_table(net, 512, 1, (1, 1, 1))
    bd = pm.total_cost(net, 512, ProcessGrid(1, 1, 1, 1), 1, table)
    c1 = next(r for r in bd.rows if r.name == "c1")
    share = (c1.fp + c1.bd + c1.bf) / (bd.fp_sum + bd.bdbf_sum)
    if not 0.35 <= share <= 0.55:
        fails.append(f"conv1 share {share!r}")

    u = build_unet_mini(16)
    a = pm.total_cost(u, 16, ProcessGrid(1, 2, 1, 1), 2,
                      pm.ideal_table(u, 16, 2, (2, 1, 1)))
    b = pm.total_cost(u, 16, ProcessGrid(1, 4, 1, 1), 2,
                      pm.ideal_table(u, 16, 2, (4, 1, 1)))
    if b.fp_sum != a.fp_sum / 2.0 or b.bdbf_sum != a.bdbf_sum / 2.0:
        fails.append("doubling partitions did not halve Comp sums exactly")

    link = pm.fit_link([(2048, 1.5e-5), (1048576, 5.125e-3)])
    if abs(link.alpha - 5e-6) > 1e-6 or abs(link.beta - 4.8828125e-9) > 1e-6:
        fails.append(f"link fit ({link.alpha}, {link.beta})")
    c0, c1_, c2 = 2.0, 0.9, 0.3
    pts = [(m, p, math.exp(c0 + c1_ * math.log(m) + c2 * math.log(p)))
           for m in (1e3, 1e4, 1e5) for p in (2, 4, 8)]
    coll = pm.fit_allreduce(pts)
    if max(abs(coll.c0 - c0), abs(coll.c1 - c1_), abs(coll.c2 - c2)) > 1e-6:
        fails.append(f"allreduce fit ({coll.c0}, {coll.c1}, {coll.c2})")

    _report(6, not fails,
            f"conv1 share {share:.4f} in [0.35,0.55], partition doubling "
            f"halves Comp exactly, fitters within 1e-6"
            + (f"; {fails}" if fails else ""))


# -------------------------------------------------------- 7: determinism


def test_criterion_7_determinism(tmp_path, capsys):
    fails = []

    def run(argv):
        rc = cli.main(argv)
        out = capsys.readouterr().out
        return rc, out

    rcs, outs = zip(run(["flops"]), run(["flops"]))
    if rcs != (0, 0) or outs[0] != outs[1]:
        fails.append("flops rerun differs")

    fx = ["make-fixtures", "--samples", "4", "--dims", "1x8x8x8"]
    run(fx + ["--out", str(tmp_path / "fa")])
    run(fx + ["--out", str(tmp_path / "fb")])
    for name in sorted((tmp_path / "fa").iterdir()):
        if name.read_bytes() != (tmp_path / "fb" / name.name).read_bytes():
            fails.append(f"fixture file {name.name} differs")

    tr = ["train", "--net", "unet_mini", "--wi", "16", "--grid", "1x2x1x1",
          "--n", "2", "--epochs", "1", "--data", str(tmp_path / "ds"),
          "--synthetic", "4"]
    run(tr + ["--out", str(tmp_path / "m1.csv")])
    run(tr + ["--out", str(tmp_path / "m2.csv")])
    run(tr + ["--out", str(tmp_path / "m3.csv"), "--parallel-ranks"])
    m1, m2, m3 = ((tmp_path / n).read_bytes()
                  for n in ("m1.csv", "m2.csv", "m3.csv"))
    if m1 != m2:
        fails.append("train rerun differs")
    if m1 != m3:
        fails.append("parallel train differs from single")

    vf = ["verify", "--net", "unet_mini", "--wi", "16", "--grid", "1x2x1x1",
          "--n", "2"]
    _, v1 = run(vf)
    _, v2 = run(vf + ["--parallel-ranks"])
    if v1 != v2:
        fails.append("parallel verify output differs from single")

    _report(7, not fails,
            "rerun and parallel-vs-single byte-identical for flops, "
            "fixtures, train metrics, verify" + (f"; {fails}" if fails
                                                 else ""))


# ------------------------------------------------------ 8: smoke learning


def test_criterion_8_smoke_learning(tmp_path):
    total, batch, epochs = 8, 4, 25
    man = ds.generate_fixture(tmp_path / "smoke", total, (4, 32, 32, 32))
    net = build_cosmoflow(32)
    grid = ProcessGrid(1, 1, 1, 1)
    plan = engine.make_plan(net, grid, batch, 32)
    base = init_params(net, 0, np.float32)

    def fn(ctx):
        store = ds.DataStore(man, grid, ctx.rank)
        sched0 = ds.epoch_schedule(0, 0, total, batch, 1)
        ds.ingest_epoch0(store, sched0)
        st = engine.RankState(copy.deepcopy(base),
                              serial.make_bn_states(net, base, np.float32),
                              OptimizerState.for_params("adam", base))
        losses = []
        for e in range(epochs):
            es = sched0 if e == 0 else ds.epoch_schedule(0, e, total, batch, 1)
            for it in range(es.iterations):
                got = ds.exchange_for_iteration(ctx, store, es, it)
                x, targets, labels = ds.materialize_batch(store, got,
                                                          np.float32)
                b = engine.Batch(x_block=x, target=targets, y_block=labels,
                                 sample_ids=tuple(g[0] for g in got),
                                 epoch=e, iteration=it)
                losses.append(engine.train_step(ctx, plan, st, b, 1e-3, 0))
        return losses

    losses = run_ranks(1, fn)[0]
    ratio = losses[0] / losses[-1]
    _report(8, len(losses) == 50 and ratio >= 10.0,
            f"50 adam steps, loss {losses[0]:.4f} -> {losses[-1]:.6f}, "
            f"drop x{ratio:.1f} (need >=x10)")
