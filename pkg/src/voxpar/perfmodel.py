"""Analytic iteration-cost model for spatially partitioned 3D networks.

Per layer, on the symmetric local domain of one rank:

    FP = max{ Comp(D_main), sum_d 2*SR(halo_d) } + Comp(D_halo)

where D_main is the output interior computable before halos arrive, D_halo
the remaining boundary shell, and SR(D) = alpha + beta*bytes the modeled
point-to-point time (send plus receive, hence the factor 2). BD mirrors FP
with backward-data kernel entries; BF is pure computation (its activations
already carry halos from the forward pass). Batch normalization adds the
time of an allreduce of its 2C statistics. The whole iteration:

    Cost = sum FP + max{ sum(BD + BF), sum AR(theta) }

modeling full overlap of the backward pass with gradient reduction. Only
conv / deconv / pool / bn layers are costed; everything else is treated as
negligible. Kernel times come from a CSV table keyed by local output shape:
exact shape hits are used directly, misses interpolate linearly in output
voxel count, and out-of-range lookups extrapolate proportionally (flagged
in the report).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import (ConfigError, DegenerateFit, InsufficientData,
                     NoComparableEntry)
from .layers import accounting
from .model.networks import NetworkSpec
from .tensor import ProcessGrid, Shape5D

PHASES = ("fwd", "bwd_data", "bwd_filter")
COSTED_KINDS = ("conv", "deconv", "pool", "bn")

TABLE_COLUMNS = "kind,phase,n,c,d,h,w,seconds"


class KernelTimeTable:
    """Measured (or synthesized) kernel times keyed by local output shape."""

    def __init__(self):
        self._exact = {}
        self._series = {}

    def add_row(self, kind: str, phase: str, shape, seconds: float, line=None):
        where = f"line {line}: " if line is not None else ""
        if phase not in PHASES:
            raise ConfigError(f"{where}unknown phase {phase!r}")
        if seconds <= 0:
            raise ConfigError(f"{where}seconds must be > 0, got {seconds}")
        shape = tuple(int(x) for x in shape)
        if len(shape) != 5 or any(x < 1 for x in shape):
            raise ConfigError(f"{where}bad shape {shape}")
        key = (kind, phase, shape)
        if key in self._exact:
            raise ConfigError(f"{where}duplicate entry for {key}")
        self._exact[key] = float(seconds)
        self._series.setdefault((kind, phase), []).append(
            (math.prod(shape), float(seconds)))
        self._series[(kind, phase)].sort()

    def exact(self, kind, phase, shape):
        return self._exact.get((kind, phase, tuple(shape)))

    def series(self, kind, phase):
        rows = self._series.get((kind, phase))
        if not rows:
            raise NoComparableEntry(f"no table entries for kind={kind!r} "
                                    f"phase={phase!r}")
        return rows

    def __len__(self):
        return len(self._exact)


def parse_kernel_table(lines) -> KernelTimeTable:
    """Parse the kind,phase,n,c,d,h,w,seconds CSV (header row required)."""
    if isinstance(lines, str):
        with open(lines) as f:
            lines = f.read().splitlines()
    lines = list(lines)
    if not lines or [c.strip() for c in lines[0].split(",")] != TABLE_COLUMNS.split(","):
        raise ConfigError(f"line 1: header must be exactly {TABLE_COLUMNS!r}")
    table = KernelTimeTable()
    for no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        cols = [c.strip() for c in raw.split(",")]
        if len(cols) != 8:
            raise ConfigError(f"line {no}: expected 8 columns, got {len(cols)}")
        try:
            shape = tuple(int(c) for c in cols[2:7])
            seconds = float(cols[7])
        except ValueError as e:
            raise ConfigError(f"line {no}: {e}") from e
        table.add_row(cols[0], cols[1], shape, seconds, line=no)
    return table


def write_kernel_table(path, table: KernelTimeTable) -> None:
    with open(path, "w") as f:
        f.write(TABLE_COLUMNS + "\n")
        for (kind, phase, shape), secs in sorted(table._exact.items()):
            f.write(f"{kind},{phase},{','.join(str(x) for x in shape)},{secs!r}\n")


def comp_time(table: KernelTimeTable, kind: str, phase: str, domain):
    """Modeled kernel seconds on a domain: a 5-shape or a raw voxel count.

    Returns (seconds, note); note is None for exact hits and interpolations,
    a human-readable flag for out-of-range extrapolations.
    """
    shape = None
    if isinstance(domain, (int, np.integer)):
        voxels = int(domain)
    else:
        shape = tuple(int(x) for x in domain)
        voxels = math.prod(shape)
    if voxels == 0:
        return 0.0, None
    if shape is not None:
        hit = table.exact(kind, phase, shape)
        if hit is not None:
            return hit, None
    rows = table.series(kind, phase)
    lo_v, lo_t = rows[0]
    hi_v, hi_t = rows[-1]
    # Fraction arithmetic keeps blends exact-rational with one final
    # rounding, so proportional tables stay exactly proportional.
    if voxels < lo_v:
        return (float(Fraction(lo_t) * voxels / lo_v),
                f"{kind}/{phase}: extrapolated below table range "
                f"({voxels} < {lo_v} voxels)")
    if voxels > hi_v:
        return (float(Fraction(hi_t) * voxels / hi_v),
                f"{kind}/{phase}: extrapolated above table range "
                f"({voxels} > {hi_v} voxels)")
    prev = rows[0]
    for cur in rows[1:]:
        if voxels == prev[0]:
            break
        if prev[0] < voxels <= cur[0]:
            if voxels == cur[0]:
                prev = cur
                break
            frac = Fraction(voxels - prev[0], cur[0] - prev[0])
            blend = Fraction(prev[1]) + frac * (Fraction(cur[1]) - Fraction(prev[1]))
            return float(blend), None
        prev = cur
    return prev[1], None


# --------------------------------------------------------------------------
# communication regressions

@dataclass(frozen=True)
class LinkModel:
    """Point-to-point time alpha + beta*bytes."""

    alpha: float
    beta: float

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError(f"link beta must be >= 0, got {self.beta}")

    def sr(self, nbytes: int) -> float:
        return self.alpha + self.beta * nbytes


ZERO_LINK = LinkModel(0.0, 0.0)


@dataclass(frozen=True)
class CollectiveModel:
    """Allreduce time exp(c0 + c1*log m + c2*log p); zero for p <= 1."""

    c0: float
    c1: float
    c2: float
    residual: float = 0.0

    def time(self, elements: int, ranks: int) -> float:
        if ranks <= 1 or elements <= 0:
            return 0.0
        return math.exp(self.c0 + self.c1 * math.log(elements)
                        + self.c2 * math.log(ranks))


ZERO_COLLECTIVE = CollectiveModel(-math.inf, 0.0, 0.0)


def fit_link(samples) -> LinkModel:
    """Least-squares alpha/beta from (bytes, seconds) ping-pong points."""
    pts = [(float(b), float(t)) for b, t in samples]
    if len(pts) < 2:
        raise InsufficientData(f"link fit needs >= 2 points, got {len(pts)}")
    xs = np.array([p[0] for p in pts])
    ts = np.array([p[1] for p in pts])
    if np.ptp(xs) == 0:
        raise DegenerateFit("all ping-pong sizes identical")
    design = np.stack([np.ones_like(xs), xs], axis=1)
    (alpha, beta), *_ = np.linalg.lstsq(design, ts, rcond=None)
    if beta < 0:
        raise DegenerateFit(f"fitted beta {beta:.3e} < 0; data is not "
                            "consistent with a linear link model")
    return LinkModel(float(alpha), float(beta))


def fit_allreduce(samples) -> CollectiveModel:
    """Log-log least squares over (elements, ranks, seconds) points."""
    pts = [(float(m), float(p), float(t)) for m, p, t in samples]
    if len(pts) < 3:
        raise InsufficientData(f"allreduce fit needs >= 3 points, got {len(pts)}")
    if any(m <= 0 or p <= 0 or t <= 0 for m, p, t in pts):
        raise DegenerateFit("allreduce fit needs positive sizes and times")
    lm = np.log([p[0] for p in pts])
    lp = np.log([p[1] for p in pts])
    lt = np.log([p[2] for p in pts])
    if np.ptp(lm) == 0 or np.ptp(lp) == 0:
        raise DegenerateFit("allreduce fit needs spread in both m and p")
    design = np.stack([np.ones_like(lm), lm, lp], axis=1)
    coef, *_ = np.linalg.lstsq(design, lt, rcond=None)
    resid = lt - design @ coef
    rms = float(np.sqrt((resid * resid).mean()))
    return CollectiveModel(float(coef[0]), float(coef[1]), float(coef[2]), rms)


def load_pingpong(path) -> list:
    return _load_points(path, "bytes,seconds", 2)


def load_allreduce(path) -> list:
    return _load_points(path, "elements,ranks,seconds", 3)


def _load_points(path, header, ncols):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or [c.strip() for c in lines[0].split(",")] != header.split(","):
        raise ConfigError(f"line 1: header must be exactly {header!r}")
    pts = []
    for no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        cols = raw.split(",")
        if len(cols) != ncols:
            raise ConfigError(f"line {no}: expected {ncols} columns, "
                              f"got {len(cols)}")
        try:
            pts.append(tuple(float(c) for c in cols))
        except ValueError as e:
            raise ConfigError(f"line {no}: {e}") from e
    return pts


# --------------------------------------------------------------------------
# per-layer cost geometry

def _main_extent(local_in: int, out_e: int, radius: int, stride: int,
                 parts: int) -> int:
    """Output positions per dim whose stencil needs no exchanged halo."""
    if parts == 1 or radius == 0:
        return out_e
    lo = -(-radius // stride)
    hi = (local_in - 1 - radius) // stride
    return max(0, hi - lo + 1)


@dataclass(frozen=True)
class LayerGeometry:
    """One costed layer's local domains under a fixed partition."""

    name: str
    kind: str
    theta: int            # parameters synced by the gradient allreduce
    out_local: tuple      # (n,c,d,h,w) local output block
    main_local: tuple     # interior sub-block of out_local
    sr_bytes: tuple       # halo slab bytes per spatial dim (0 if no exchange)
    bn_elements: int = 0  # statistics allreduce size (bn only)

    @property
    def out_voxels(self) -> int:
        return math.prod(self.out_local)

    @property
    def halo_voxels(self) -> int:
        return self.out_voxels - math.prod(self.main_local)


def network_geometry(net: NetworkSpec, w_i: int, n_local: int,
                     parts, dtype_bytes: int = 4) -> list:
    """LayerGeometry rows for every costed layer of the network.

    parts = (pd, ph, pw) spatial partition counts; every extent is assumed
    divisible (the training-side planner enforces the real constraints).
    """
    shapes = accounting.walk_shapes(
        net, (n_local, net.in_channels, w_i, w_i, w_i))
    rows = []
    for layer, in_shape, out_shape in shapes:
        if layer.kind not in COSTED_KINDS:
            continue
        lin = (in_shape[0], in_shape[1],
               in_shape[2] // parts[0], in_shape[3] // parts[1],
               in_shape[4] // parts[2])
        lout = (out_shape[0], out_shape[1],
                out_shape[2] // parts[0], out_shape[3] // parts[1],
                out_shape[4] // parts[2])
        sr = (0, 0, 0)
        main = lout
        if layer.kind == "conv":
            radii = layer.params.radii
            stride = layer.params.stride
            main = lout[:2] + tuple(
                _main_extent(lin[2 + i], lout[2 + i], radii[i], stride[i],
                             parts[i])
                for i in range(3))
            sr = tuple(
                0 if (parts[i] == 1 or radii[i] == 0) else
                lin[0] * lin[1] * radii[i]
                * math.prod(lin[2 + j] for j in range(3) if j != i)
                * dtype_bytes
                for i in range(3))
        rows.append(LayerGeometry(
            name=layer.name, kind=layer.kind,
            theta=accounting.param_count(layer),
            out_local=lout, main_local=main, sr_bytes=sr,
            bn_elements=2 * layer.channels if layer.kind == "bn" else 0))
    return rows


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    fp: float
    bd: float
    bf: float
    ar: float
    sr_bytes: int   # halo traffic modeled into fp (and mirrored in bd)
    notes: tuple = ()


@dataclass(frozen=True)
class CostBreakdown:
    rows: tuple
    ranks: int

    @property
    def fp_sum(self) -> float:
        return sum(r.fp for r in self.rows)

    @property
    def bdbf_sum(self) -> float:
        return sum(r.bd + r.bf for r in self.rows)

    @property
    def ar_sum(self) -> float:
        return sum(r.ar for r in self.rows)

    @property
    def total(self) -> float:
        return self.fp_sum + max(self.bdbf_sum, self.ar_sum)

    def report(self) -> str:
        """layer,phase,seconds,bytes rows plus totals (machine-readable)."""
        lines = ["layer,phase,seconds,bytes"]
        for r in self.rows:
            lines.append(f"{r.name},fp,{r.fp!r},{r.sr_bytes}")
            lines.append(f"{r.name},bd,{r.bd!r},{r.sr_bytes}")
            lines.append(f"{r.name},bf,{r.bf!r},0")
            lines.append(f"{r.name},ar,{r.ar!r},0")
        lines.append(f"total,fp,{self.fp_sum!r},0")
        lines.append(f"total,bd+bf,{self.bdbf_sum!r},0")
        lines.append(f"total,ar,{self.ar_sum!r},0")
        lines.append(f"total,iteration,{self.total!r},0")
        for r in self.rows:
            for note in r.notes:
                lines.append(f"# note: {r.name}: {note}")
        return "\n".join(lines)


def _phase_cost(table, geo: LayerGeometry, phase: str, link: LinkModel,
                with_sr: bool, notes: list):
    comp_main, n1 = comp_time(table, geo.kind, phase, geo.main_local)
    comp_halo, n2 = comp_time(table, geo.kind, phase, geo.halo_voxels)
    for n in (n1, n2):
        if n:
            notes.append(n)
    sr_total = sum(2.0 * link.sr(b) for b in geo.sr_bytes if b > 0)
    if not with_sr:
        return comp_main + comp_halo
    return max(comp_main, sr_total) + comp_halo


def layer_fp_cost(table, geo: LayerGeometry, link: LinkModel,
                  coll: CollectiveModel, ranks: int, notes=None) -> float:
    """FP = max{Comp(D_main), sum 2*SR(halo)} + Comp(D_halo) (+ bn stats AR)."""
    notes = notes if notes is not None else []
    fp = _phase_cost(table, geo, "fwd", link, with_sr=True, notes=notes)
    if geo.kind == "bn":
        fp += coll.time(geo.bn_elements, ranks)
    return fp


def layer_bwd_costs(table, geo: LayerGeometry, link: LinkModel,
                    coll: CollectiveModel, ranks: int, notes=None):
    """(BD, BF); BD mirrors FP's structure, BF is computation only."""
    notes = notes if notes is not None else []
    bd = _phase_cost(table, geo, "bwd_data", link, with_sr=True, notes=notes)
    if geo.kind == "bn":
        bd += coll.time(geo.bn_elements, ranks)
    bf = 0.0
    if geo.theta > 0:
        bf = _phase_cost(table, geo, "bwd_filter", link, with_sr=False,
                         notes=notes)
    return bd, bf


def bn_cost(table, geo: LayerGeometry, coll: CollectiveModel,
            ranks: int) -> float:
    """Forward bn time: kernel computation plus the 2C statistics allreduce."""
    comp, _ = comp_time(table, "bn", "fwd", geo.out_local)
    return comp + coll.time(geo.bn_elements, ranks)


def total_cost(net: NetworkSpec, w_i: int, grid: ProcessGrid, n_global: int,
               table: KernelTimeTable, link: LinkModel = ZERO_LINK,
               coll: CollectiveModel = ZERO_COLLECTIVE,
               dtype_bytes: int = 4) -> CostBreakdown:
    """Evaluate the full iteration-cost formula for one network/partition."""
    if n_global % grid.groups:
        raise ConfigError(f"batch {n_global} not divisible by {grid.groups} groups")
    geos = network_geometry(net, w_i, n_global // grid.groups,
                            grid.spatial_parts, dtype_bytes)
    rows = []
    for geo in geos:
        notes = []
        fp = layer_fp_cost(table, geo, link, coll, grid.size, notes)
        bd, bf = layer_bwd_costs(table, geo, link, coll, grid.size, notes)
        ar = coll.time(geo.theta, grid.size) if geo.theta else 0.0
        rows.append(LayerCost(geo.name, geo.kind, fp, bd, bf, ar,
                              sr_bytes=sum(geo.sr_bytes),
                              notes=tuple(dict.fromkeys(notes))))
    return CostBreakdown(rows=tuple(rows), ranks=grid.size)


def ideal_table(net: NetworkSpec, w_i: int, n_local: int, parts_list,
                secs_per_voxel: float = 2.0**-30) -> KernelTimeTable:
    """Ideal-scaling table: every kernel costs exactly voxels * rate.

    All rows of one (kind, phase) series are collinear through the origin,
    so interpolated and extrapolated lookups stay exactly proportional to
    the domain's voxel count; halving the local domain halves every Comp
    term bit-exactly.
    """
    if parts_list and isinstance(parts_list[0], int):
        parts_list = [parts_list]
    shapes = list(accounting.walk_shapes(
        net, (n_local, net.in_channels, w_i, w_i, w_i)))
    table = KernelTimeTable()
    for parts in parts_list:
        for layer, _, out_shape in shapes:
            if layer.kind not in COSTED_KINDS:
                continue
            lout = (out_shape[0], out_shape[1],
                    out_shape[2] // parts[0], out_shape[3] // parts[1],
                    out_shape[4] // parts[2])
            for phase in PHASES:
                if table.exact(layer.kind, phase, lout) is None:
                    table.add_row(layer.kind, phase, lout,
                                  math.prod(lout) * secs_per_voxel)
    return table


def flop_proportional_table(net: NetworkSpec, w_i: int, n_local: int,
                            parts_list, secs_per_flop: float = 1e-12,
                            bwd_scale: float = 1.0) -> KernelTimeTable:
    """Synthetic table with time exactly proportional to layer flops.

    parts_list is one (pd,ph,pw) tuple or a list of them; each contributes
    one row per costed layer and phase, keyed by the layer's local output
    shape under that partition, so lookups on those partitions are exact
    hits. The first layer producing a given key wins (later identical keys
    are skipped, which only matters when two layers share an output shape).
    """
    if parts_list and isinstance(parts_list[0], int):
        parts_list = [parts_list]
    shapes = list(accounting.walk_shapes(
        net, (n_local, net.in_channels, w_i, w_i, w_i)))
    table = KernelTimeTable()
    for parts in parts_list:
        for layer, in_shape, out_shape in shapes:
            if layer.kind not in COSTED_KINDS:
                continue
            lin = (in_shape[0], in_shape[1],
                   in_shape[2] // parts[0], in_shape[3] // parts[1],
                   in_shape[4] // parts[2])
            lout = (out_shape[0], out_shape[1],
                    out_shape[2] // parts[0], out_shape[3] // parts[1],
                    out_shape[4] // parts[2])
            flops = accounting.flop_count(layer, lin)
            for phase in PHASES:
                scale = 1.0 if phase == "fwd" else bwd_scale
                if table.exact(layer.kind, phase, lout) is None:
                    table.add_row(layer.kind, phase, lout,
                                  flops * secs_per_flop * scale)
    return table
