"""Sample files, epoch schedules, and the distributed in-memory cache.

The ingestion flow has two phases. In epoch 0 every rank reads, for each
sample its group is scheduled to process, only the hyperslab covering its
own spatial region; collectively each byte of the dataset is read exactly
once and stays cached. From then on the parallel filesystem is silent:
before every iteration the owner ranks ship the cached hyperslabs to the
consuming group over the fabric.

Sample file format (HSB1, all fields little-endian):

    offset  size  field
    0       4     magic "HSB1"
    4       1     version, currently 1
    5       1     dtype code: 0 = int16, 1 = fp32
    6       2     reserved, zero
    8       16    reserved, zero
    24      32    dims C, D, H, W as four u64
    56      -     payload: voxels in C order, W fastest

A dataset is a directory with one manifest.json plus one .hsb file per
sample (and one per label volume for segmentation sets). The manifest
schema is documented in the README.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import prng
from .errors import (BadBatch, BadMagic, BadVersion, CacheNotEmpty, IoError,
                     MissingSample, ShapeMismatch)
from .fabric import RankCtx, TAG_DATA, TAG_LABEL
from .tensor import ProcessGrid, Region, split_extent

_HEADER = struct.Struct("<4sBBH16x4Q")
HEADER_BYTES = _HEADER.size
MAGIC = b"HSB1"
VERSION = 1

_DTYPE_BY_CODE = {0: np.dtype("<i2"), 1: np.dtype("<f4")}
_CODE_BY_NAME = {"int16": 0, "fp32": 1}
_NAME_BY_CODE = {v: k for k, v in _CODE_BY_NAME.items()}


@dataclass(frozen=True)
class SampleHeader:
    dtype_code: int
    dims: tuple  # (C, D, H, W)

    @property
    def dtype(self) -> np.dtype:
        return _DTYPE_BY_CODE[self.dtype_code]

    @property
    def dtype_name(self) -> str:
        return _NAME_BY_CODE[self.dtype_code]

    @property
    def payload_bytes(self) -> int:
        c, d, h, w = self.dims
        return c * d * h * w * self.dtype.itemsize


def write_sample(path, dims, dtype, voxels) -> None:
    """Write one HSB1 file; round-trip reads reproduce the bits exactly."""
    if isinstance(dtype, str):
        if dtype not in _CODE_BY_NAME:
            raise IoError(f"unknown dtype name {dtype!r} (want int16 or fp32)")
        code = _CODE_BY_NAME[dtype]
    else:
        code = dtype
    if code not in _DTYPE_BY_CODE:
        raise IoError(f"unknown dtype code {code}")
    dims = tuple(int(x) for x in dims)
    if len(dims) != 4:
        raise ShapeMismatch(f"dims must be (C,D,H,W), got {dims}")
    arr = np.ascontiguousarray(voxels, dtype=_DTYPE_BY_CODE[code])
    if arr.size != int(np.prod(dims)):
        raise ShapeMismatch(f"{arr.size} voxels for dims {dims}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, code, 0, *dims))
        f.write(arr.tobytes())


def read_header(path) -> SampleHeader:
    """Parse and validate the 56-byte header; checks the full file length."""
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as f:
            raw = f.read(HEADER_BYTES)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(raw) < HEADER_BYTES:
        raise IoError(f"{path}: expected at least {HEADER_BYTES} header bytes, "
                      f"found {len(raw)}")
    magic, version, code, reserved, c, d, h, w = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise BadMagic(f"{path}: magic {magic!r} != {MAGIC!r}")
    if version != VERSION:
        raise BadVersion(f"{path}: version {version} unsupported")
    if code not in _DTYPE_BY_CODE:
        raise IoError(f"{path}: unknown dtype code {code}")
    hdr = SampleHeader(code, (c, d, h, w))
    expect = HEADER_BYTES + hdr.payload_bytes
    if size != expect:
        raise IoError(f"{path}: expected {expect} bytes, found {size}")
    return hdr


def read_payload(path) -> np.ndarray:
    """Whole voxel payload as a (C,D,H,W) array (test oracle / small files)."""
    hdr = read_header(path)
    with open(path, "rb") as f:
        f.seek(HEADER_BYTES)
        raw = f.read(hdr.payload_bytes)
    return np.frombuffer(raw, dtype=hdr.dtype).reshape(hdr.dims)


@dataclass
class IoCounters:
    """File and fabric traffic attributable to the data pipeline.

    file_bytes_read counts voxel payload bytes only (headers are metadata);
    exchange_bytes counts hyperslab payload bytes sent over the fabric.
    """

    file_bytes_read: int = 0
    file_opens: int = 0
    exchange_bytes: int = 0
    per_epoch: dict = field(default_factory=dict)

    def _bucket(self, epoch: int) -> dict:
        return self.per_epoch.setdefault(epoch, {"file_bytes": 0, "exchange_bytes": 0})

    def note_open(self):
        self.file_opens += 1

    def note_read(self, nbytes: int, epoch: int):
        self.file_bytes_read += nbytes
        self._bucket(epoch)["file_bytes"] += nbytes

    def note_exchange(self, nbytes: int, epoch: int):
        self.exchange_bytes += nbytes
        self._bucket(epoch)["exchange_bytes"] += nbytes

    def epoch_file_bytes(self, epoch: int) -> int:
        return self.per_epoch.get(epoch, {}).get("file_bytes", 0)


def read_hyperslab(path, region: Region, counters: IoCounters = None,
                   epoch: int = 0) -> np.ndarray:
    """Read one spatial region (all channels) using minimal byte ranges."""
    from .tensor import hyperslab_byte_ranges

    hdr = read_header(path)
    ranges = hyperslab_byte_ranges(hdr.dims, region, hdr.dtype.itemsize)
    if counters is not None:
        counters.note_open()
    chunks = []
    with open(path, "rb") as f:
        for off, length in ranges:
            f.seek(HEADER_BYTES + off)
            raw = f.read(length)
            if len(raw) != length:
                raise IoError(f"{path}: short read at offset {off}: "
                              f"wanted {length} bytes, got {len(raw)}")
            chunks.append(raw)
    total = sum(len(c) for c in chunks)
    if counters is not None:
        counters.note_read(total, epoch)
    flat = np.frombuffer(b"".join(chunks), dtype=hdr.dtype)
    ed, eh, ew = region.extent
    return flat.reshape(hdr.dims[0], ed, eh, ew)


# --------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class SampleEntry:
    id: int
    file: str
    target: tuple = None  # 4 regression targets (mse datasets)
    label: str = None     # label volume file name (xent datasets)


@dataclass(frozen=True)
class Manifest:
    root: str
    dtype: str
    dims: tuple  # (C, D, H, W)
    loss: str    # "mse" | "xent"
    samples: tuple

    def __post_init__(self):
        if self.dtype not in _CODE_BY_NAME:
            raise IoError(f"manifest dtype {self.dtype!r} unsupported")
        if self.loss not in ("mse", "xent"):
            raise IoError(f"manifest loss {self.loss!r} unsupported")
        ids = [s.id for s in self.samples]
        if ids != list(range(len(ids))):
            raise IoError("manifest sample ids must be dense 0..S-1 in order")

    @property
    def size(self) -> int:
        return len(self.samples)

    def path(self, sample_id: int) -> str:
        return os.path.join(self.root, self.samples[sample_id].file)

    def label_path(self, sample_id: int) -> str:
        entry = self.samples[sample_id]
        if entry.label is None:
            raise IoError(f"sample {sample_id} has no label volume")
        return os.path.join(self.root, entry.label)

    def targets(self) -> np.ndarray:
        return np.array([s.target for s in self.samples], dtype=np.float64)

    def save(self, path) -> None:
        rows = []
        for s in self.samples:
            row = {"id": s.id, "file": s.file}
            if s.target is not None:
                row["target"] = list(s.target)
            if s.label is not None:
                row["label"] = s.label
            rows.append(row)
        doc = {"format": "voxpar-manifest-v1", "dtype": self.dtype,
               "dims": list(self.dims), "loss": self.loss, "samples": rows}
        with open(path, "w") as f:
            json.dump(doc, f, indent=1)
            f.write("\n")


def load_manifest(path) -> Manifest:
    """Load manifest.json; sample paths resolve relative to its directory."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise IoError(f"cannot read manifest {path}: {e}") from e
    except ValueError as e:
        raise IoError(f"manifest {path} is not valid JSON: {e}") from e
    if doc.get("format") != "voxpar-manifest-v1":
        raise IoError(f"manifest {path}: unknown format {doc.get('format')!r}")
    samples = tuple(
        SampleEntry(
            id=int(row["id"]),
            file=row["file"],
            target=tuple(row["target"]) if "target" in row else None,
            label=row.get("label"),
        )
        for row in doc["samples"]
    )
    return Manifest(root=os.path.dirname(os.path.abspath(path)),
                    dtype=doc["dtype"], dims=tuple(doc["dims"]),
                    loss=doc["loss"], samples=samples)


# --------------------------------------------------------------------------
# schedule and owner map

@dataclass(frozen=True)
class EpochSchedule:
    """Seeded permutation of sample ids plus its iteration/group carving.

    Iteration i, group g processes perm[i*N + g*(N/G) .. +N/G). A trailing
    slice shorter than N is dropped from the iteration count (documented),
    though owners are still assigned to those samples.
    """

    epoch: int
    perm: tuple
    batch: int
    groups: int

    @property
    def iterations(self) -> int:
        return len(self.perm) // self.batch

    @property
    def per_group(self) -> int:
        return self.batch // self.groups

    def group_samples(self, iteration: int, group: int) -> tuple:
        base = iteration * self.batch + group * self.per_group
        return self.perm[base:base + self.per_group]

    def flat(self, iteration: int) -> tuple:
        """All N ids of one iteration, group-major (matches batch row order)."""
        base = iteration * self.batch
        return self.perm[base:base + self.batch]


def epoch_schedule(seed: int, epoch: int, total: int, batch: int,
                   groups: int) -> EpochSchedule:
    """Deterministic schedule keyed by (seed, epoch)."""
    if batch < 1 or groups < 1 or batch % groups != 0:
        raise BadBatch(f"batch {batch} not divisible by groups {groups}")
    if total < batch:
        raise BadBatch(f"{total} samples cannot fill one batch of {batch}")
    perm = tuple(int(x) for x in prng.permutation((seed, epoch), total))
    return EpochSchedule(epoch=epoch, perm=perm, batch=batch, groups=groups)


def build_owner_map(manifest: Manifest, grid: ProcessGrid,
                    schedule0: EpochSchedule) -> dict:
    """sample id -> owner group: whichever group ingests it in epoch 0.

    Samples in a trailing partial batch are never trained on in epoch 0 but
    are still ingested and owned, so later epochs can schedule them.
    """
    if schedule0.groups != grid.groups:
        raise BadBatch(f"schedule groups {schedule0.groups} != grid {grid.groups}")
    if len(schedule0.perm) != manifest.size:
        raise BadBatch(f"schedule covers {len(schedule0.perm)} samples, "
                       f"manifest has {manifest.size}")
    owners = {}
    for pos, sid in enumerate(schedule0.perm):
        owners[sid] = (pos % schedule0.batch) // schedule0.per_group
    return owners


# --------------------------------------------------------------------------
# distributed cache

class DataStore:
    """One rank's slice of the distributed in-memory cache.

    Holds, per owned sample, the hyperslab covering this rank's spatial
    region (and the matching label slab for segmentation sets), in the
    file's storage dtype. Conversion to the training dtype happens at
    batch materialization, after any exchange.
    """

    def __init__(self, manifest: Manifest, grid: ProcessGrid, rank: int,
                 counters: IoCounters = None):
        self.manifest = manifest
        self.grid = grid
        self.rank = rank
        self.group, gd, gh, gw = grid.coords(rank)
        self.spatial = (gd, gh, gw)
        _, d, h, w = manifest.dims
        od, ed = split_extent(d, grid.pd)[gd]
        oh, eh = split_extent(h, grid.ph)[gh]
        ow, ew = split_extent(w, grid.pw)[gw]
        self.region = Region((od, oh, ow), (ed, eh, ew))
        self.counters = counters if counters is not None else IoCounters()
        self.cache = {}
        self.label_cache = {}
        self.owner_map = None

    def slab_bytes(self) -> int:
        elem = _DTYPE_BY_CODE[_CODE_BY_NAME[self.manifest.dtype]].itemsize
        return self.manifest.dims[0] * self.region.volume() * elem


def ingest_epoch0(store: DataStore, schedule0: EpochSchedule) -> None:
    """Populate the cache from disk: every owned sample, this rank's region.

    Pure file I/O; ranks read disjoint hyperslabs so collectively every
    payload byte is read exactly once.
    """
    if store.cache or store.label_cache:
        raise CacheNotEmpty(f"rank {store.rank} cache already populated")
    store.owner_map = build_owner_map(store.manifest, store.grid, schedule0)
    mine = sorted(s for s, g in store.owner_map.items() if g == store.group)
    for sid in mine:
        store.cache[sid] = read_hyperslab(store.manifest.path(sid), store.region,
                                          store.counters, epoch=0)
        if store.manifest.loss == "xent":
            store.label_cache[sid] = read_hyperslab(store.manifest.label_path(sid),
                                                    store.region, store.counters,
                                                    epoch=0)


def exchange_for_iteration(ctx: RankCtx, store: DataStore,
                           schedule: EpochSchedule, iteration: int) -> list:
    """Deliver this rank's group's mini-batch hyperslabs from owner ranks.

    Every rank walks the iteration's global sample list in the same order;
    the owner rank with matching spatial coordinates sends, the consumer
    receives. Owner == consumer is a local copy with zero messages. No
    file reads happen here, ever.

    Returns [(sample_id, voxels, label_slab_or_None), ...] covering the
    caller's group, in schedule order.
    """
    if store.owner_map is None:
        raise MissingSample("cache not populated; run ingest_epoch0 first")
    grid = store.grid
    labeled = store.manifest.loss == "xent"
    out = []
    for group in range(schedule.groups):
        for sid in schedule.group_samples(iteration, group):
            owner = store.owner_map.get(sid)
            if owner is None:
                raise MissingSample(f"sample {sid} has no owner")
            src = grid.rank_of(owner, *store.spatial)
            dst = grid.rank_of(group, *store.spatial)
            consuming = dst == store.rank
            if src == store.rank:
                blk = store.cache.get(sid)
                if blk is None:
                    raise MissingSample(f"rank {store.rank} owns no slab "
                                        f"for sample {sid}")
                lab = store.label_cache.get(sid) if labeled else None
                if not consuming:
                    ctx.send(dst, TAG_DATA, blk, kind="data")
                    store.counters.note_exchange(blk.nbytes, schedule.epoch)
                    if labeled:
                        ctx.send(dst, TAG_LABEL, lab, kind="data")
                        store.counters.note_exchange(lab.nbytes, schedule.epoch)
            elif consuming:
                blk = ctx.recv(src, TAG_DATA)
                lab = ctx.recv(src, TAG_LABEL) if labeled else None
            if consuming:
                out.append((sid, blk, lab))
    return out


def materialize_batch(store: DataStore, delivered, dtype=np.float32):
    """Stack delivered hyperslabs into training arrays.

    Returns (x, targets, labels): x is (n_local, C, ld, lh, lw) in the
    requested float dtype (int16 storage is exactly representable); targets
    are the manifest's regression rows or None; labels are (n_local, ld,
    lh, lw) int64 class ids or None.
    """
    ids = [sid for sid, _, _ in delivered]
    x = np.stack([blk for _, blk, _ in delivered]).astype(dtype)
    targets = labels = None
    if store.manifest.loss == "mse":
        targets = store.manifest.targets()[ids].astype(dtype)
    else:
        labels = np.stack([lab for _, _, lab in delivered])[:, 0].astype(np.int64)
    return x, targets, labels


# --------------------------------------------------------------------------
# synthetic fixtures

def _fixture_voxels(seed: int, sample_id: int, dims) -> np.ndarray:
    # small magnitudes keep int16 -> fp32 conversion exact
    count = int(np.prod(dims))
    vals = prng.randint((seed, -2, sample_id), count, -8, 9)
    return vals.astype(np.int16).reshape(dims)


def fixture_target(voxels: np.ndarray) -> tuple:
    """Four linear statistics of the sample, each clipped to [-1, 1]."""
    x = voxels.astype(np.float64)
    stats = np.array([
        x.mean(),
        np.abs(x).mean() - 4.0,
        x[0].mean() - x[-1].mean() if x.shape[0] > 1 else x[0, 0].mean(),
        (x > 0).mean() * 2.0 - 1.0,
    ])
    return tuple(np.clip(stats, -1.0, 1.0))


def fixture_labels(voxels: np.ndarray) -> np.ndarray:
    """Per-voxel 2-class labels: sign of the channel sum."""
    return (voxels.astype(np.int64).sum(axis=0, keepdims=True) > 0).astype(np.int16)


def generate_fixture(root, total: int, dims, loss: str = "mse",
                     seed: int = 0) -> Manifest:
    """Write a deterministic synthetic dataset: S files plus manifest.json."""
    os.makedirs(root, exist_ok=True)
    dims = tuple(int(x) for x in dims)
    entries = []
    for sid in range(total):
        vox = _fixture_voxels(seed, sid, dims)
        fname = f"s{sid:05d}.hsb"
        write_sample(os.path.join(root, fname), dims, "int16", vox)
        if loss == "xent":
            lname = f"l{sid:05d}.hsb"
            lab = fixture_labels(vox)
            write_sample(os.path.join(root, lname), (1,) + dims[1:], "int16", lab)
            entries.append(SampleEntry(sid, fname, label=lname))
        else:
            entries.append(SampleEntry(sid, fname, target=fixture_target(vox)))
    man = Manifest(root=os.path.abspath(root), dtype="int16", dims=dims,
                   loss=loss, samples=entries)
    man.save(os.path.join(root, "manifest.json"))
    return man
