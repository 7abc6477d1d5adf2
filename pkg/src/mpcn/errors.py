"""Exception types shared across the package."""


class MpcnError(Exception):
    """Base class for all package errors."""


class ShapeError(MpcnError, ValueError):
    """Tensor shapes or dimensions violate an operation's contract."""


class AxisError(ShapeError):
    """Reduction axis out of range."""


class ParameterError(MpcnError, ValueError):
    """A scalar or configuration parameter is outside its valid range."""


class LabelError(MpcnError, ValueError):
    """A class label is outside [0, n_classes)."""


class StateError(MpcnError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class DecodeError(MpcnError, ValueError):
    """An image file could not be decoded."""


class DatasetError(MpcnError, ValueError):
    """Empty dataset/class, malformed manifest, or an impossible partition."""


class CheckpointError(MpcnError, RuntimeError):
    """Base class for checkpoint I/O failures."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint file has an unknown format version."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is truncated or structurally invalid."""


class ArchitectureMismatchError(CheckpointError):
    """Checkpoint architecture differs from the expected network spec."""


class PersistedStateError(MpcnError, RuntimeError):
    """Writing run state to disk failed; previous on-disk state is intact."""
