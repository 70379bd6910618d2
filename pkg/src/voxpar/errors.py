"""Exception taxonomy shared by all voxpar modules."""


class VoxparError(Exception):
    """Base class for all voxpar errors."""


class NonDivisible(VoxparError):
    """A spatial extent does not divide evenly over its partition count.

    For network layers this signals that the layer/grid pairing needs a
    redistribution point (see voxpar.model).
    """


class BatchIndivisible(VoxparError):
    """Mini-batch size N is not divisible by the group count G."""


class OutOfBounds(VoxparError):
    """A region or index lies outside its global domain."""


class ShapeMismatch(VoxparError):
    """Array/buffer shapes are inconsistent with the operation's contract."""


class LengthMismatch(VoxparError):
    """Collective participants disagree on vector length."""


class DeadlockError(VoxparError):
    """All live ranks are blocked with no deliverable message."""


class IoError(VoxparError):
    """Sample file I/O failure (truncation, bad sizes, unreadable path)."""


class BadMagic(IoError):
    """Sample file does not start with the HSB1 magic."""


class BadVersion(IoError):
    """Sample file header version is unsupported."""


class CacheNotEmpty(VoxparError):
    """Epoch-0 ingestion was requested on a non-empty cache."""


class MissingSample(VoxparError):
    """The distributed cache has no entry for a scheduled sample."""


class BadBatch(VoxparError):
    """Schedule parameters are inconsistent (N vs G vs S)."""


class InsufficientData(VoxparError):
    """Too few samples to fit a regression."""


class DegenerateFit(VoxparError):
    """Regression design matrix is rank-deficient (no spread in inputs)."""


class NoComparableEntry(VoxparError):
    """Kernel-time table has no entry of the requested kind/phase."""


class UnsupportedWidth(VoxparError):
    """Requested network input width is outside the supported set."""


class ConfigError(VoxparError):
    """Run configuration failed validation."""
