"""Dense tensor primitives.

A tensor here is a contiguous row-major numpy array of 32-bit floats; the
layer stack builds everything on the operations below.  A 64-bit variant of
every operation exists implicitly (pass float64 arrays) and is used only by
the finite-difference gradient checks, which need more precision than
float32 affords.

Activation tensors follow the NCHW convention.
"""

import numpy as np

from .errors import AxisError, ShapeError

DTYPE = np.float32

ELEMENTWISE_OPS = ("add", "sub", "mul", "max", "scale")
REDUCE_OPS = ("sum", "max", "argmax")


def alloc(shape, fill=0.0, dtype=DTYPE):
    """New tensor of `shape` with every element set to `fill`."""
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: every dim must be >= 1")
    return np.full(shape, fill, dtype=dtype)


def as_tensor(data, dtype=DTYPE):
    """Contiguous row-major tensor view/copy of `data`."""
    return np.ascontiguousarray(data, dtype=dtype)


def reshape(t, shape):
    """Row-major reshape; never changes length or element order."""
    shape = tuple(int(d) for d in shape)
    n = int(np.prod(shape)) if shape else 0
    if n != t.size:
        raise ShapeError(f"cannot reshape {t.size} elements into {shape}")
    return np.reshape(t, shape)


def elementwise(op, a, b):
    """Apply `op` elementwise.

    `op` is one of add/sub/mul/max (tensor-tensor, equal shapes) or
    scale (tensor-scalar).
    """
    if op == "scale":
        return a * a.dtype.type(b)
    if op not in ELEMENTWISE_OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape} for {op}")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    return np.maximum(a, b)


def scale(t, s):
    """Multiply by a scalar, staying in the tensor's dtype."""
    return elementwise("scale", t, s)


def matmul(a, b):
    """Standard 2-D matrix product.

    Delegates to numpy; the accumulation order is whatever the linked BLAS
    uses, which is fixed for a given build and thread count, so repeated
    runs on one machine stay bit-identical.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def reduce(op, a, axis=None):
    """sum/max/argmax over `axis` (or the whole tensor when axis is None).

    argmax ties break toward the lowest index.
    """
    if op not in REDUCE_OPS:
        raise ValueError(f"unknown reduce op {op!r}")
    if axis is not None:
        axis = int(axis)
        if axis < -a.ndim or axis >= a.ndim:
            raise AxisError(f"axis {axis} out of range for rank {a.ndim}")
    if op == "sum":
        return np.sum(a, axis=axis)
    if op == "max":
        return np.max(a, axis=axis)
    return np.argmax(a, axis=axis)
