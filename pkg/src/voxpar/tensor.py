"""Index arithmetic for 5D (N,C,D,H,W) tensors.

Block partitioning over a process grid, halo-face geometry, hyperslab
byte-range computation, and pack/unpack of boundary slabs. Everything here
is pure metadata arithmetic except DistTensor, which owns one rank's local
voxel block plus its halo buffers.

Conventions:
  * rank <-> (group, gd, gh, gw) is row-major with w fastest, group slowest;
  * N is split over groups only, C is never split;
  * regions use global voxel coordinates; halo radii are per-face widths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BatchIndivisible, NonDivisible, OutOfBounds, ShapeMismatch


@dataclass(frozen=True)
class Shape5D:
    n: int
    c: int
    d: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("n", "c", "d", "h", "w"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"Shape5D.{name} must be >= 1, got {getattr(self, name)}")

    @property
    def spatial(self):
        return (self.d, self.h, self.w)

    def voxels(self) -> int:
        return self.n * self.c * self.d * self.h * self.w


@dataclass(frozen=True)
class ProcessGrid:
    groups: int
    pd: int
    ph: int
    pw: int

    def __post_init__(self):
        for name in ("groups", "pd", "ph", "pw"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"ProcessGrid.{name} must be >= 1")

    @property
    def size(self) -> int:
        return self.groups * self.pd * self.ph * self.pw

    @property
    def spatial_size(self) -> int:
        return self.pd * self.ph * self.pw

    @property
    def spatial_parts(self):
        return (self.pd, self.ph, self.pw)

    def coords(self, rank: int):
        """rank -> (group, gd, gh, gw); w fastest, group slowest."""
        if not 0 <= rank < self.size:
            raise OutOfBounds(f"rank {rank} outside grid of size {self.size}")
        gw = rank % self.pw
        rank //= self.pw
        gh = rank % self.ph
        rank //= self.ph
        gd = rank % self.pd
        g = rank // self.pd
        return (g, gd, gh, gw)

    def rank_of(self, g: int, gd: int, gh: int, gw: int) -> int:
        if not (0 <= g < self.groups and 0 <= gd < self.pd
                and 0 <= gh < self.ph and 0 <= gw < self.pw):
            raise OutOfBounds(f"grid coords {(g, gd, gh, gw)} outside {self}")
        return ((g * self.pd + gd) * self.ph + gh) * self.pw + gw


@dataclass(frozen=True)
class Region:
    """Axis-aligned block of the (D,H,W) domain, global coordinates."""

    offset: tuple
    extent: tuple

    def __post_init__(self):
        if len(self.offset) != 3 or len(self.extent) != 3:
            raise ShapeMismatch("Region needs 3 offsets and 3 extents (D,H,W)")
        if any(o < 0 for o in self.offset) or any(e < 0 for e in self.extent):
            raise OutOfBounds(f"negative region {self}")

    @property
    def end(self):
        return tuple(o + e for o, e in zip(self.offset, self.extent))

    def volume(self) -> int:
        ed, eh, ew = self.extent
        return ed * eh * ew

    def slices(self, base=(0, 0, 0)):
        """Index slices for the spatial axes, relative to a base offset."""
        return tuple(
            slice(o - b, o - b + e)
            for o, e, b in zip(self.offset, self.extent, base)
        )

    def intersect(self, other: "Region"):
        off, ext = [], []
        for (a0, ae), (b0, be) in zip(
            zip(self.offset, self.extent), zip(other.offset, other.extent)
        ):
            lo = max(a0, b0)
            hi = min(a0 + ae, b0 + be)
            if hi <= lo:
                return None
            off.append(lo)
            ext.append(hi - lo)
        return Region(tuple(off), tuple(ext))


def split_extent(extent: int, parts: int):
    """Split an extent into `parts` equal blocks: [(offset, extent), ...].

    Uneven splits are rejected rather than padded; a NonDivisible error at a
    network layer signals that the layer/grid pairing needs a redistribution
    point (see voxpar.model).
    """
    if parts < 1:
        raise NonDivisible(f"parts must be >= 1, got {parts}")
    if extent % parts != 0:
        raise NonDivisible(f"extent {extent} not divisible into {parts} parts")
    block = extent // parts
    return [(i * block, block) for i in range(parts)]


@dataclass(frozen=True)
class DistTensorMeta:
    """Placement of one logical 5D tensor on a process grid.

    rank_map maps grid-rank index (0..grid.size-1) to the fabric rank that
    holds it; identity for freshly partitioned tensors, sparse (lead ranks
    only) after a redistribution collapses spatial parts.
    """

    global_shape: Shape5D
    grid: ProcessGrid
    radii: tuple
    rank_map: tuple

    @property
    def n_local(self) -> int:
        return self.global_shape.n // self.grid.groups

    def region(self, grid_rank: int) -> Region:
        _, gd, gh, gw = self.grid.coords(grid_rank)
        parts = self.grid.spatial_parts
        coords = (gd, gh, gw)
        offs, exts = [], []
        for extent, p, i in zip(self.global_shape.spatial, parts, coords):
            off, ext = split_extent(extent, p)[i]
            offs.append(off)
            exts.append(ext)
        return Region(tuple(offs), tuple(exts))

    def local_shape(self, grid_rank: int) -> Shape5D:
        r = self.region(grid_rank)
        return Shape5D(self.n_local, self.global_shape.c, *r.extent)

    def fabric_rank(self, grid_rank: int) -> int:
        return self.rank_map[grid_rank]

    def grid_rank_of(self, fabric_rank: int) -> int:
        try:
            return self.rank_map.index(fabric_rank)
        except ValueError:
            raise OutOfBounds(f"fabric rank {fabric_rank} holds no part of this tensor")

    def group_of(self, grid_rank: int) -> int:
        return self.grid.coords(grid_rank)[0]

    def sample_range(self, group: int):
        return (group * self.n_local, (group + 1) * self.n_local)

    def neighbor(self, grid_rank: int, dim: int, side: int):
        """Grid rank of the (dim, side) spatial neighbor, or None at the wall."""
        g, gd, gh, gw = self.grid.coords(grid_rank)
        coords = [gd, gh, gw]
        coords[dim] += side
        parts = self.grid.spatial_parts
        if not 0 <= coords[dim] < parts[dim]:
            return None
        return self.grid.rank_of(g, *coords)

    def halo_slab_shape(self, grid_rank: int, dim: int):
        loc = self.local_shape(grid_rank)
        ext = list(loc.spatial)
        ext[dim] = self.radii[dim]
        return (loc.n, loc.c, *ext)


def make_partition(shape: Shape5D, grid: ProcessGrid, radii, rank_map=None) -> DistTensorMeta:
    """Partition a global shape over a grid, validating divisibility."""
    if shape.n % grid.groups != 0:
        raise BatchIndivisible(f"N={shape.n} not divisible by G={grid.groups}")
    for name, extent, parts in zip("dhw", shape.spatial, grid.spatial_parts):
        if extent % parts != 0:
            raise NonDivisible(
                f"extent {name}={extent} not divisible by {parts} partitions"
            )
    if len(radii) != 3 or any(r < 0 for r in radii):
        raise ShapeMismatch(f"bad halo radii {radii}")
    for name, extent, parts, r in zip("dhw", shape.spatial, grid.spatial_parts, radii):
        if parts > 1 and r > extent // parts:
            raise NonDivisible(
                f"halo radius {r} exceeds local extent {extent // parts} in {name}"
            )
    if rank_map is None:
        rank_map = tuple(range(grid.size))
    else:
        rank_map = tuple(rank_map)
        if len(rank_map) != grid.size or len(set(rank_map)) != grid.size:
            raise ShapeMismatch("rank_map must be a bijection onto grid ranks")
    return DistTensorMeta(shape, grid, tuple(radii), rank_map)


@dataclass(frozen=True)
class HaloFace:
    """One exchange pair seen from the owning rank's side.

    dim: 0=D,1=H,2=W; side: -1 low face, +1 high face. send is the rank's own
    boundary layer of thickness r; recv is the halo slab just outside the
    rank's region (inside the neighbor). Regions are global coordinates.
    """

    dim: int
    side: int
    neighbor: int
    send: Region
    recv: Region

    @property
    def face_id(self) -> int:
        return self.dim * 2 + (0 if self.side < 0 else 1)

    @property
    def mirror_face_id(self) -> int:
        return self.dim * 2 + (1 if self.side < 0 else 0)


def halo_faces(meta: DistTensorMeta, grid_rank: int):
    """All (neighbor, send slab, recv slab) pairs for one rank.

    Outer domain faces produce no pair: zero padding applies there.
    """
    region = meta.region(grid_rank)
    faces = []
    for dim in range(3):
        r = meta.radii[dim]
        if r == 0:
            continue
        for side in (-1, +1):
            nbr = meta.neighbor(grid_rank, dim, side)
            if nbr is None:
                continue
            send_off = list(region.offset)
            send_ext = list(region.extent)
            recv_off = list(region.offset)
            recv_ext = list(region.extent)
            if side < 0:
                send_ext[dim] = r
                recv_off[dim] = region.offset[dim] - r
                recv_ext[dim] = r
            else:
                send_off[dim] = region.end[dim] - r
                send_ext[dim] = r
                recv_off[dim] = region.end[dim]
                recv_ext[dim] = r
            faces.append(
                HaloFace(dim, side, nbr,
                         Region(tuple(send_off), tuple(send_ext)),
                         Region(tuple(recv_off), tuple(recv_ext)))
            )
    return faces


class DistTensor:
    """One rank's local block of a distributed 5D tensor plus halo margins.

    Storage is a single zero-initialized frame of shape
    (n_local, c, ed+2rd, eh+2rh, ew+2rw); `data` is the interior view. Halo
    margins live in the frame so that edge and corner voxels (which a 3D
    stencil reads when two or three dims are partitioned at once) have a
    home. Outer-wall margins stay zero, which is exactly the serial "same"
    padding.
    """

    def __init__(self, meta: DistTensorMeta, grid_rank: int, data: np.ndarray):
        loc = meta.local_shape(grid_rank)
        expect = (loc.n, loc.c, loc.d, loc.h, loc.w)
        if tuple(data.shape) != expect:
            raise ShapeMismatch(f"local block shape {data.shape} != {expect}")
        self.meta = meta
        self.grid_rank = grid_rank
        rd, rh, rw = meta.radii
        self._frame = np.zeros(
            (loc.n, loc.c, loc.d + 2 * rd, loc.h + 2 * rh, loc.w + 2 * rw),
            dtype=data.dtype,
        )
        self._frame[:, :, rd:rd + loc.d, rh:rh + loc.h, rw:rw + loc.w] = data

    @property
    def data(self) -> np.ndarray:
        """Interior (n_local, c, ed, eh, ew) view; writable in place."""
        rd, rh, rw = self.meta.radii
        n, c, fd, fh, fw = self._frame.shape
        return self._frame[:, :, rd:fd - rd, rh:fh - rh, rw:fw - rw]

    @property
    def region(self) -> Region:
        return self.meta.region(self.grid_rank)

    def padded(self) -> np.ndarray:
        """The live halo-wide frame (interior + margins), contiguous C order.

        After a halo exchange this equals the matching slice of the
        zero-padded global tensor; before one, margins are zero.
        """
        return self._frame

    def halo_view(self, dim: int, side: int) -> np.ndarray:
        """Writable view of one face's halo slab (unextended in other dims)."""
        radii = self.meta.radii
        ext = self.data.shape[2:]
        sl = [slice(None), slice(None)]
        for j in range(3):
            r, e = radii[j], ext[j]
            if j != dim:
                sl.append(slice(r, r + e))
            elif side < 0:
                sl.append(slice(0, r))
            else:
                sl.append(slice(r + e, 2 * r + e))
        return self._frame[tuple(sl)]


def round_slices(meta: DistTensorMeta, grid_rank: int, dim: int, side: int):
    """(boundary, margin) frame slices for dimension-ordered halo rounds.

    Halo exchange runs one round per dimension in ascending order; a round's
    slabs span the full already-exchanged extents (dims < dim, margins
    included) so that edge/corner values propagate across rounds, and only
    the interior of dims not yet exchanged. `boundary` is the rank's own
    layer of thickness r inside the block, `margin` the adjoining halo rows.
    The same geometry serves the adjoint (gradient) exchange run in
    descending dimension order with the roles of the two slices swapped.
    """
    loc = meta.local_shape(grid_rank)
    ext = (loc.d, loc.h, loc.w)
    sl_b = [slice(None), slice(None)]
    sl_m = [slice(None), slice(None)]
    for j in range(3):
        r, e = meta.radii[j], ext[j]
        if j < dim:
            s = slice(0, e + 2 * r)
            sl_b.append(s)
            sl_m.append(s)
        elif j > dim:
            s = slice(r, r + e)
            sl_b.append(s)
            sl_m.append(s)
        elif side < 0:
            sl_b.append(slice(r, 2 * r))
            sl_m.append(slice(0, r))
        else:
            sl_b.append(slice(e, r + e))
            sl_m.append(slice(r + e, 2 * r + e))
    return tuple(sl_b), tuple(sl_m)


def pack_faces(tensor: DistTensor, faces):
    """Densely pack each face's send slab (C order) into its own buffer."""
    base = tensor.region.offset
    bufs = []
    for face in faces:
        sl = (slice(None), slice(None)) + face.send.slices(base)
        bufs.append(np.ascontiguousarray(tensor.data[sl]))
    return bufs


def unpack_faces(tensor: DistTensor, faces, buffers):
    """Inverse of pack_faces: write received buffers into the halo slabs."""
    if len(faces) != len(buffers):
        raise ShapeMismatch(f"{len(faces)} faces but {len(buffers)} buffers")
    for face, buf in zip(faces, buffers):
        slab = tensor.halo_view(face.dim, face.side)
        buf = np.asarray(buf)
        if buf.size != slab.size:
            raise ShapeMismatch(
                f"halo buffer of {buf.size} elements does not fill slab {slab.shape}"
            )
        slab[...] = buf.reshape(slab.shape)


def hyperslab_byte_ranges(file_shape, region: Region, elem_bytes: int):
    """Maximal contiguous byte runs covering a region of a (C,D,H,W) file.

    Offsets are relative to the start of the voxel payload, ascending, and
    cover every channel (C is never spatially split). Adjacent runs are
    merged, so a full-file region collapses to a single range.
    """
    c, d, h, w = file_shape
    (od, oh, ow), (ed, eh, ew) = region.offset, region.extent
    if od + ed > d or oh + eh > h or ow + ew > w:
        raise OutOfBounds(f"region {region} outside file shape {file_shape}")
    if ed == 0 or eh == 0 or ew == 0:
        return []
    ranges = []
    row_len = ew * elem_bytes
    for ci in range(c):
        for di in range(od, od + ed):
            for hi in range(oh, oh + eh):
                start = (((ci * d + di) * h + hi) * w + ow) * elem_bytes
                if ranges and ranges[-1][0] + ranges[-1][1] == start:
                    ranges[-1][1] += row_len
                else:
                    ranges.append([start, row_len])
    return [tuple(r) for r in ranges]


def gather(meta: DistTensorMeta, locals_by_grid_rank) -> np.ndarray:
    """Assemble local blocks into the full (N,C,D,H,W) array (test/verify aid)."""
    gs = meta.global_shape
    sample = next(iter(locals_by_grid_rank.values()))
    out = np.zeros((gs.n, gs.c, gs.d, gs.h, gs.w), dtype=sample.dtype)
    seen = np.zeros((gs.n, gs.d, gs.h, gs.w), dtype=bool)
    for grid_rank, block in locals_by_grid_rank.items():
        g = meta.group_of(grid_rank)
        lo, hi = meta.sample_range(g)
        sl = (slice(lo, hi), slice(None)) + meta.region(grid_rank).slices()
        out[sl] = block
        seen[(slice(lo, hi),) + meta.region(grid_rank).slices()] = True
    if not seen.all():
        raise ShapeMismatch("gather did not cover the global domain")
    return out


def scatter(meta: DistTensorMeta, full: np.ndarray):
    """Split a full array into {grid_rank: local block} (inverse of gather)."""
    gs = meta.global_shape
    if tuple(full.shape) != (gs.n, gs.c, gs.d, gs.h, gs.w):
        raise ShapeMismatch(f"scatter input {full.shape} != global {gs}")
    out = {}
    for grid_rank in range(meta.grid.size):
        g = meta.group_of(grid_rank)
        lo, hi = meta.sample_range(g)
        sl = (slice(lo, hi), slice(None)) + meta.region(grid_rank).slices()
        out[grid_rank] = full[sl].copy()
    return out
