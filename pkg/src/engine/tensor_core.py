"""
NHWC tensor helpers shared by every layer.

Tensors are plain numpy arrays of shape (N, H, W, C), row-major, float32
for activities. Reductions accumulate in float64.
"""

from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from .errors import NumericalAbortError, ShapeMismatchError

Tensor4 = NDArray[np.float32]

ACTIVITY_DTYPE = np.float32


class Shape3(NamedTuple):
    """Per-sample shape (H, W, C); the batch dimension is omitted."""

    H: int
    W: int
    C: int

    @classmethod
    def parse(cls, text: str) -> "Shape3":
        """Parses '28x28x1' style strings."""
        try:
            h, w, c = (int(part) for part in text.lower().split("x"))
        except ValueError as e:
            raise ShapeMismatchError(f"cannot parse shape '{text}', expected HxWxC") from e
        return cls(h, w, c).validated()

    def validated(self) -> "Shape3":
        if min(self) < 1:
            raise ShapeMismatchError(f"shape {tuple(self)} has a non-positive dimension")
        return self

    @property
    def size(self) -> int:
        return self.H * self.W * self.C

    def __str__(self):
        return f"{self.H}x{self.W}x{self.C}"


def as_tensor4(data, dtype=ACTIVITY_DTYPE) -> Tensor4:
    """Returns `data` as a 4-D array of `dtype`, copying only when needed."""
    t = np.asarray(data, dtype=dtype)
    if t.ndim != 4:
        raise ShapeMismatchError(f"expected an NHWC tensor, got {t.ndim} dimensions")
    return t


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NumericalAbortError(f"{what} contains non-finite values")
    return t


def channel_vector(t: Tensor4, n: int, h: int, w: int) -> np.ndarray:
    """Read-only view of the C channel values at (n, h, w)."""
    for index, size, axis in zip((n, h, w), t.shape[:3], "NHW"):
        if not 0 <= index < size:
            raise IndexError(f"{axis} index {index} out of range for size {size}")
    view = t[n, h, w, :]
    view.flags.writeable = False
    return view


def log_sum_exp(v) -> float:
    """Numerically stable log(sum(exp(v))) of a non-empty vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    return float(logsumexp(v))
