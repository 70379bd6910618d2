"""Command-line entry points: verify, train, perf, flops, make-fixtures.

Thin orchestration over the library modules. Every command is deterministic
under a fixed seed; `--parallel-ranks` swaps the single-scheduler rank loop
for real threads and must not change a single output byte. Exit status is 0
when every declared tolerance holds, 1 on a tolerance breach, 2 on
configuration or I/O errors.
"""

from __future__ import annotations

import argparse
import copy
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import datastore, perfmodel, prng
from .errors import ConfigError, VoxparError
from .fabric import run_ranks
from .layers import accounting
from .model import engine, serial
from .model.networks import (COSMOFLOW_WIDTHS, UNET_WIDTHS, NetworkSpec,
                             build_cosmoflow, build_unet_mini, total_params)
from .model.optim import OptimizerState, Schedule, init_params, lr_at
from .tensor import DistTensor, ProcessGrid, gather

_NETS = ("cosmoflow", "unet_mini")
_FLOPS_WIDTHS = (128, 256, 512)  # the headline scaling rows
GIB = 1024 ** 3


@dataclass
class RunConfig:
    """Validated knobs shared by the run-style commands."""

    command: str
    data: str = None
    net: str = "cosmoflow"
    wi: int = 32
    grid: tuple = (1, 1, 1, 1)
    n: int = 2
    epochs: int = 1
    seed: int = 0
    fp: int = 64
    out: str = None

    def validate(self) -> "RunConfig":
        if self.net not in _NETS:
            raise ConfigError(f"net: unknown network {self.net!r} "
                              f"(choices: {', '.join(_NETS)})")
        widths = COSMOFLOW_WIDTHS if self.net == "cosmoflow" else UNET_WIDTHS
        if self.wi not in widths:
            raise ConfigError(f"wi: width {self.wi} unsupported for "
                              f"{self.net} (choices: {widths})")
        if len(self.grid) != 4 or any(v < 1 for v in self.grid):
            raise ConfigError(f"grid: all four extents must be >= 1, "
                              f"got {self.grid}")
        if self.n < 1:
            raise ConfigError(f"n: global batch must be >= 1, got {self.n}")
        if self.n % self.grid[0]:
            raise ConfigError(f"n: global batch {self.n} not divisible by "
                              f"{self.grid[0]} data-parallel groups")
        if self.epochs < 0:
            raise ConfigError(f"epochs: must be >= 0, got {self.epochs}")
        if self.fp not in (32, 64):
            raise ConfigError(f"fp: mode must be 32 or 64, got {self.fp}")
        return self


def parse_grid(text: str) -> tuple:
    """'GxPDxPHxPW' -> (g, pd, ph, pw)."""
    parts = text.lower().split("x")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        vals = ()
    if len(vals) != 4:
        raise ConfigError(f"grid: expected GxPDxPHxPW, got {text!r}")
    return vals


def parse_dims(text: str) -> tuple:
    """'CxDxHxW' -> (c, d, h, w)."""
    try:
        vals = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        vals = ()
    if len(vals) != 4 or any(v < 1 for v in vals):
        raise ConfigError(f"dims: expected CxDxHxW positive extents, "
                          f"got {text!r}")
    return vals


def _build_net(cfg: RunConfig, with_bn: bool = False) -> NetworkSpec:
    if cfg.net == "cosmoflow":
        return build_cosmoflow(cfg.wi, with_bn=with_bn)
    return build_unet_mini(cfg.wi)


def _dtype(cfg: RunConfig):
    return np.float64 if cfg.fp == 64 else np.float32


def _mode(args) -> str:
    return "parallel" if getattr(args, "parallel_ranks", False) else "single"


def _synthetic_batch(net: NetworkSpec, wi: int, n: int, seed: int, dtype):
    """Deterministic input batch; key branch -3 stays clear of the init
    (-1), fixture (-2) and shuffle (epoch >= 0) streams."""
    shape = (n, net.in_channels, wi, wi, wi)
    x = prng.uniform([seed, -3, 0], math.prod(shape), -1.0, 1.0)
    x = x.reshape(shape).astype(dtype)
    ids = tuple(range(n))
    if net.loss == "mse":
        y = prng.uniform([seed, -3, 1], n * net.out_dim, -1.0, 1.0)
        y = y.reshape(n, net.out_dim).astype(dtype)
    else:
        y = prng.randint([seed, -3, 1], n * wi ** 3, 0, net.out_dim)
        y = y.reshape(n, wi, wi, wi)
    return x, y, ids


# ---------------------------------------------------------------- verify


def _gather_trace(plan, traces, key):
    """Reassemble one traced tensor from the per-rank trace dicts."""
    pieces, meta = {}, None
    flat = []
    for rank, tr in enumerate(traces):
        v = tr.get(key)
        if v is None:
            continue
        if isinstance(v, DistTensor):
            meta = v.meta
            pieces[v.grid_rank] = v.data
        else:
            flat.append((plan.grid.coords(rank)[0], np.asarray(v)))
    if meta is not None:
        return gather(meta, pieces)
    if flat:
        flat.sort(key=lambda t: t[0])
        return np.concatenate([a for _, a in flat], axis=0)
    return None


def cmd_verify(cfg: RunConfig, args) -> int:
    """Distributed-vs-serial equivalence report for one grid."""
    net = _build_net(cfg, with_bn=args.bn)
    dtype = _dtype(cfg)
    grid = ProcessGrid(*cfg.grid)
    plan = engine.make_plan(net, grid, cfg.n, cfg.wi, args.redistribute_before)
    x, y, ids = _synthetic_batch(net, cfg.wi, cfg.n, cfg.seed, dtype)

    params = init_params(net, cfg.seed, dtype)
    states = serial.make_bn_states(net, params, dtype)
    ser_trace = {}
    pred, stash = serial.forward(net, params, states, x, "train",
                                 (cfg.seed, 0, 0), ids, trace=ser_trace)
    loss_ref, dpred = serial.loss_and_grad(net, pred, y)
    serial.backward(net, params, states, stash, dpred, trace=ser_trace)

    batches = engine.scatter_batch(plan, x, y, ids)

    def rank_fn(ctx):
        mine = copy.deepcopy(params)
        st = engine.RankState(params=mine,
                              bn_states=serial.make_bn_states(net, mine, dtype),
                              opt=None)
        tr = {}
        p, sd = engine.forward(ctx, plan, st, batches[ctx.rank], "train",
                               cfg.seed, trace=tr)
        loss, dp = engine.loss_and_grad(ctx, plan, p, batches[ctx.rank])
        engine.backward(ctx, plan, st, sd, dp, trace=tr)
        return loss, tr

    results = run_ranks(grid.size, rank_fn, mode=_mode(args))
    losses = [r[0] for r in results]
    traces = [r[1] for r in results]

    tol = 1e-12 if cfg.fp == 64 else 1e-5
    gate = "abs" if cfg.fp == 64 else "rel"
    print(f"# verify {net.name} grid {'x'.join(str(v) for v in cfg.grid)} "
          f"n {cfg.n} fp{cfg.fp} ({gate} tol {tol:g})")
    worst, bad = 0.0, []
    for key, ref_val in ser_trace.items():
        got = _gather_trace(plan, traces, key)
        phase, name = key
        if got is None or got.shape != ref_val.shape:
            print(f"{phase:4s} {name:16s} SHAPE MISMATCH "
                  f"{None if got is None else got.shape} != {ref_val.shape}")
            bad.append(name)
            continue
        a = float(np.max(np.abs(got - ref_val))) if got.size else 0.0
        scale = float(np.max(np.abs(ref_val))) if ref_val.size else 0.0
        r = a / scale if scale > 0.0 else (0.0 if a == 0.0 else math.inf)
        err = a if gate == "abs" else r
        worst = max(worst, err)
        mark = ""
        if err > tol:
            bad.append(name)
            mark = "  BREACH"
        print(f"{phase:4s} {name:16s} abs {a:.3e}  rel {r:.3e}{mark}")

    loss_dev = max(abs(l - loss_ref) for l in losses)
    loss_err = loss_dev if gate == "abs" else \
        loss_dev / max(abs(loss_ref), np.finfo(np.float64).tiny)
    replicated = all(l == losses[0] for l in losses)
    print(f"loss serial {loss_ref!r}  max dev {loss_dev:.3e}  "
          f"replicated {replicated}")
    if loss_err > tol or not replicated:
        bad.append("loss")
    status = "PASS" if not bad else f"FAIL ({len(bad)} breaches)"
    print(f"verify: {status}  worst {gate} err {worst:.3e}")
    return 0 if not bad else 1


# ----------------------------------------------------------------- train


def _load_dataset(cfg: RunConfig, net: NetworkSpec, args):
    if args.synthetic:
        root = cfg.data or f"{cfg.net}{cfg.wi}-synth"
        dims = (net.in_channels,) + (cfg.wi,) * 3
        return datastore.generate_fixture(root, args.synthetic, dims,
                                          net.loss, cfg.seed)
    if not cfg.data:
        raise ConfigError("data: dataset path required (or pass --synthetic S)")
    path = cfg.data
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    man = datastore.load_manifest(path)
    want = (net.in_channels,) + (cfg.wi,) * 3
    if tuple(man.dims) != want:
        raise ConfigError(f"data: manifest dims {tuple(man.dims)} do not "
                          f"match {net.name} input {want}")
    if man.loss != net.loss:
        raise ConfigError(f"data: manifest loss {man.loss!r} does not match "
                          f"network loss {net.loss!r}")
    return man


def _eval_epoch(ctx, store, plan, state, schedule, seed, dtype):
    """Eval-mode loss over the training samples in identity order."""
    total = 0.0
    for it in range(schedule.iterations):
        delivered = datastore.exchange_for_iteration(ctx, store, schedule, it)
        x, targets, labels = datastore.materialize_batch(store, delivered, dtype)
        batch = engine.Batch(x_block=x, target=targets, y_block=labels,
                             sample_ids=tuple(d[0] for d in delivered),
                             epoch=schedule.epoch, iteration=it)
        total += engine.eval_loss(ctx, plan, state, batch, seed)
    return total / schedule.iterations


def cmd_train(cfg: RunConfig, args) -> int:
    """Hybrid-parallel training loop; writes epoch,train_loss,val_loss."""
    net = _build_net(cfg, with_bn=args.bn)
    dtype = _dtype(cfg)
    grid = ProcessGrid(*cfg.grid)
    plan = engine.make_plan(net, grid, cfg.n, cfg.wi, args.redistribute_before)
    manifest = _load_dataset(cfg, net, args)
    total = manifest.size

    out = cfg.out or "metrics.csv"
    if cfg.epochs == 0:
        with open(out, "w") as f:
            f.write("epoch,train_loss,val_loss\n")
        print(f"wrote {out} (0 epochs)")
        return 0

    params0 = init_params(net, cfg.seed, dtype)
    sched = Schedule(args.lr)

    def rank_fn(ctx):
        counters = datastore.IoCounters()
        store = datastore.DataStore(manifest, grid, ctx.rank, counters)
        sched0 = datastore.epoch_schedule(cfg.seed, 0, total, cfg.n,
                                          grid.groups)
        datastore.ingest_epoch0(store, sched0)
        mine = copy.deepcopy(params0)
        state = engine.RankState(
            params=mine,
            bn_states=serial.make_bn_states(net, mine, dtype),
            opt=OptimizerState.for_params(args.opt, mine))
        identity = datastore.EpochSchedule(
            epoch=0, perm=tuple(range(total)), batch=cfg.n, groups=grid.groups)
        rows = []
        for e in range(cfg.epochs):
            es = sched0 if e == 0 else datastore.epoch_schedule(
                cfg.seed, e, total, cfg.n, grid.groups)
            lr = lr_at(sched, e)
            losses = []
            for it in range(es.iterations):
                delivered = datastore.exchange_for_iteration(ctx, store, es, it)
                x, targets, labels = datastore.materialize_batch(
                    store, delivered, dtype)
                batch = engine.Batch(x_block=x, target=targets, y_block=labels,
                                     sample_ids=tuple(d[0] for d in delivered),
                                     epoch=e, iteration=it)
                losses.append(engine.train_step(ctx, plan, state, batch, lr,
                                                cfg.seed))
            val = _eval_epoch(ctx, store, plan, state, identity, cfg.seed,
                              dtype)
            rows.append((e, sum(losses) / len(losses), val))
        return rows

    results = run_ranks(grid.size, rank_fn, mode=_mode(args))
    rows = results[0]
    with open(out, "w") as f:
        f.write("epoch,train_loss,val_loss\n")
        for e, tr, va in rows:
            f.write(f"{e},{tr!r},{va!r}\n")
    for e, tr, va in rows:
        print(f"epoch {e}: train {tr!r} val {va!r}")
    print(f"wrote {out}")
    return 0


# ------------------------------------------------------------ perf, flops


def cmd_perf(cfg: RunConfig, args) -> int:
    """Evaluate the iteration-cost model and print the breakdown."""
    net = _build_net(cfg, with_bn=args.bn)
    grid = ProcessGrid(*cfg.grid)
    if args.kernel_table:
        table = perfmodel.parse_kernel_table(args.kernel_table)
    else:
        table = perfmodel.ideal_table(net, cfg.wi, cfg.n // grid.groups,
                                      grid.spatial_parts)
    link = perfmodel.ZERO_LINK
    if args.pingpong:
        link = perfmodel.fit_link(perfmodel.load_pingpong(args.pingpong))
    coll = perfmodel.ZERO_COLLECTIVE
    if args.allreduce:
        coll = perfmodel.fit_allreduce(perfmodel.load_allreduce(args.allreduce))
    bd = perfmodel.total_cost(net, cfg.wi, grid, cfg.n, table, link, coll)
    text = (f"# perf {net.name} grid {'x'.join(str(v) for v in cfg.grid)} "
            f"n {cfg.n} ranks {grid.size}\n" + bd.report() + "\n")
    print(text, end="")
    if cfg.out:
        with open(cfg.out, "w") as f:
            f.write(text)
        print(f"wrote {cfg.out}")
    return 0


def cmd_flops(args) -> int:
    """Per-width flop, parameter and activation-memory table."""
    if args.net not in _NETS:
        raise ConfigError(f"net: unknown network {args.net!r} "
                          f"(choices: {', '.join(_NETS)})")
    supported = COSMOFLOW_WIDTHS if args.net == "cosmoflow" else UNET_WIDTHS
    if args.wi is None:
        widths = [w for w in (_FLOPS_WIDTHS if args.net == "cosmoflow"
                              else UNET_WIDTHS) if w in supported]
    else:
        if args.wi not in supported:
            raise ConfigError(f"wi: width {args.wi} unsupported for "
                              f"{args.net} (choices: {supported})")
        widths = [args.wi]
    print("wi,conv_fwd_gflops,conv_total_gflops,params,memory_gib")
    for wi in widths:
        net = (build_cosmoflow(wi) if args.net == "cosmoflow"
               else build_unet_mini(wi))
        in_shape = (1, net.in_channels, wi, wi, wi)
        _, conv_fwd, conv_total = accounting.network_flops(net, in_shape)
        mem = accounting.memory_estimate(net, wi)
        print(f"{wi},{conv_fwd / 1e9!r},{conv_total / 1e9!r},"
              f"{total_params(net)},{mem / GIB!r}")
    return 0


# -------------------------------------------------------------- fixtures


def cmd_make_fixtures(args) -> int:
    """Write a synthetic dataset (or report its size under --dry-run)."""
    dims = parse_dims(args.dims)
    if args.samples < 1:
        raise ConfigError(f"samples: must be >= 1, got {args.samples}")
    payload = math.prod(dims) * 2  # int16 storage
    per_file = datastore.HEADER_BYTES + payload
    if args.dry_run:
        print(f"dry run: {args.samples} samples, dims "
              f"{'x'.join(str(v) for v in dims)}, dtype int16")
        print(f"per sample: {per_file} bytes "
              f"({payload / GIB:.3f} GiB payload)")
        print(f"dataset total: {args.samples * per_file} bytes")
        return 0
    man = datastore.generate_fixture(args.out, args.samples, dims,
                                     args.loss, args.seed)
    print(f"wrote {man.size} samples of {per_file} bytes each plus "
          f"manifest.json under {args.out}")
    return 0


# ------------------------------------------------------------------ main


def _add_run_flags(sp, fp_default: int):
    sp.add_argument("--net", default="cosmoflow",
                    help="cosmoflow | unet_mini (default cosmoflow)")
    sp.add_argument("--wi", type=int, default=32, help="input width W_i")
    sp.add_argument("--grid", default="1x1x1x1",
                    help="process grid GxPDxPHxPW (default 1x1x1x1)")
    sp.add_argument("--n", type=int, default=2, help="global batch size")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--fp", type=int, default=fp_default,
                    help=f"32 | 64 (default {fp_default})")
    sp.add_argument("--bn", action="store_true",
                    help="insert batchnorm after each conv (cosmoflow only)")
    sp.add_argument("--redistribute-before", default=None, metavar="LAYER",
                    help="move the spatial-to-collapsed switch to LAYER")
    sp.add_argument("--parallel-ranks", action="store_true",
                    help="run ranks on real threads instead of the "
                         "deterministic single scheduler")
    sp.add_argument("--out", default=None, help="output file path")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="voxpar",
        description="Rank-simulated hybrid-parallel training for 3D CNNs.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify",
                       help="check distributed vs serial equivalence")
    _add_run_flags(v, fp_default=64)

    t = sub.add_parser("train", help="run the training loop, write metrics")
    _add_run_flags(t, fp_default=32)
    t.add_argument("--data", default=None,
                   help="dataset root (directory with manifest.json)")
    t.add_argument("--synthetic", type=int, default=0, metavar="S",
                   help="generate an S-sample fixture set instead")
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--opt", default="adam", help="adam | sgd (default adam)")
    t.add_argument("--lr", type=float, default=1e-3)

    pf = sub.add_parser("perf", help="evaluate the iteration-cost model")
    _add_run_flags(pf, fp_default=32)
    pf.add_argument("--kernel-table", default=None, metavar="CSV",
                    help="measured kind,phase,n,c,d,h,w,seconds table "
                         "(default: ideal voxel-proportional table)")
    pf.add_argument("--pingpong", default=None, metavar="CSV",
                    help="bytes,seconds points for the link alpha-beta fit")
    pf.add_argument("--allreduce", default=None, metavar="CSV",
                    help="elements,ranks,seconds points for the "
                         "collective fit")

    fl = sub.add_parser("flops", help="flop / parameter / memory table")
    fl.add_argument("--net", default="cosmoflow")
    fl.add_argument("--wi", type=int, default=None,
                    help="single width (default: the 128/256/512 ladder)")

    mk = sub.add_parser("make-fixtures", help="write a synthetic dataset")
    mk.add_argument("--out", required=True, help="destination directory")
    mk.add_argument("--samples", type=int, default=8, metavar="S")
    mk.add_argument("--dims", default="1x16x16x16",
                    help="sample dims CxDxHxW (default 1x16x16x16)")
    mk.add_argument("--loss", default="mse", choices=("mse", "xent"))
    mk.add_argument("--seed", type=int, default=0)
    mk.add_argument("--dry-run", action="store_true",
                    help="print per-sample byte counts without writing")
    return p


def _run_config(args) -> RunConfig:
    return RunConfig(command=args.command,
                     data=getattr(args, "data", None),
                     net=args.net, wi=args.wi, grid=parse_grid(args.grid),
                     n=args.n, epochs=getattr(args, "epochs", 1),
                     seed=args.seed, fp=args.fp, out=args.out).validate()


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(_run_config(args), args)
        if args.command == "train":
            return cmd_train(_run_config(args), args)
        if args.command == "perf":
            return cmd_perf(_run_config(args), args)
        if args.command == "flops":
            return cmd_flops(args)
        return cmd_make_fixtures(args)
    except VoxparError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
