"""
Forward and backward transforms of the four DCGMM layer types.

Folding F(f, stride) rearranges f x f patches into channels, pooling
P(f, stride) takes channel-wise window maxima, G(K) evaluates a mixture at
every position and C(S) is a linear softmax classifier. Backward functions
turn a control signal for a layer's output into one for its input.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse
from scipy.special import softmax

from ..config import settings
from ..models.schemas import LayerKind, LayerSpec
from . import gmm_core
from .errors import ConfigurationError, ShapeMismatchError, UnsupportedConfigurationError
from .gmm_core import CGMMParams
from .tensor_core import Shape3, as_tensor4

logger = logging.getLogger(__name__)


# --- shape inference -------------------------------------------------------

def output_shape(spec: LayerSpec, in_shape: Shape3, layer_index: Optional[int] = None) -> Shape3:
    in_shape = Shape3(*in_shape)
    H_, W_, C_ = in_shape
    if spec.kind in (LayerKind.FOLDING, LayerKind.POOLING):
        f, stride = spec.kernel, spec.stride
        if f > H_ or f > W_:
            raise ConfigurationError(
                f"kernel {f} exceeds input {H_}x{W_}", layer_index=layer_index, token=spec.token
            )
        if (H_ - f) % stride or (W_ - f) % stride:
            logger.warning(
                "layer %s %s: (%d-%d) not divisible by stride %d on %s, using floor",
                layer_index, spec.token, H_, f, stride, in_shape,
            )
        H = 1 + (H_ - f) // stride
        W = 1 + (W_ - f) // stride
        C = f * f * C_ if spec.kind == LayerKind.FOLDING else C_
        return Shape3(H, W, C)
    if spec.kind == LayerKind.CGMM:
        return Shape3(H_, W_, spec.components)
    return Shape3(1, 1, spec.classes)


# --- folding ---------------------------------------------------------------

def folding_source_index(f: int, stride: int, C_in: int, m: tuple[int, int, int]) -> tuple[int, int, int]:
    """Source position (h', w', c') of folding output entry m = (h, w, c)."""
    h, w, c = m
    if not 0 <= c < f * f * C_in:
        raise ValueError(f"channel {c} out of range for f={f}, C'={C_in}")
    return (h * stride + c // (f * C_in), w * stride + (c // C_in) % f, c % C_in)


@lru_cache(maxsize=64)
def _folding_index(f: int, stride: int, in_shape: Shape3) -> np.ndarray:
    H_, W_, C_ = in_shape
    H, W = 1 + (H_ - f) // stride, 1 + (W_ - f) // stride
    h, w, c = np.meshgrid(np.arange(H), np.arange(W), np.arange(f * f * C_), indexing="ij")
    hs = h * stride + c // (f * C_)
    ws = w * stride + (c // C_) % f
    flat = (hs * W_ + ws) * C_ + c % C_
    flat.flags.writeable = False
    return flat


@lru_cache(maxsize=64)
def _folding_scatter(f: int, stride: int, in_shape: Shape3) -> tuple[sparse.csr_matrix, np.ndarray]:
    idx = _folding_index(f, stride, in_shape).ravel()
    n_in = in_shape[0] * in_shape[1] * in_shape[2]
    scatter = sparse.csr_matrix(
        (np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n_in, idx.size)
    )
    counts = np.bincount(idx, minlength=n_in)
    return scatter, counts


def _default_folding_input(spec: LayerSpec, out: Shape3) -> Shape3:
    f, stride = spec.kernel, spec.stride
    if out.C % (f * f):
        raise ShapeMismatchError(f"{out.C} channels cannot come from a {f}x{f} fold")
    return Shape3((out.H - 1) * stride + f, (out.W - 1) * stride + f, out.C // (f * f))


def folding_forward(spec: LayerSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    in_shape = Shape3(*x.shape[1:])
    out = output_shape(spec, in_shape)
    idx = _folding_index(spec.kernel, spec.stride, in_shape)
    return x.reshape(x.shape[0], -1)[:, idx.ravel()].reshape((x.shape[0],) + tuple(out))


def folding_scatter_add(spec: LayerSpec, g: np.ndarray, input_shape: Shape3) -> np.ndarray:
    """Transpose of the folding gather: sums every output entry into its source (float64)."""
    g = np.asarray(g, dtype=np.float64)
    input_shape = Shape3(*input_shape)
    scatter, _ = _folding_scatter(spec.kernel, spec.stride, input_shape)
    if g.shape[1:] != tuple(output_shape(spec, input_shape)):
        raise ShapeMismatchError(f"control shape {g.shape[1:]} does not match the fold of {input_shape}")
    sums = scatter @ g.reshape(g.shape[0], -1).T
    return np.asarray(sums).T.reshape((g.shape[0],) + tuple(input_shape))


def folding_backward(spec: LayerSpec, t: np.ndarray, input_shape: Optional[Shape3] = None) -> np.ndarray:
    """Averages, for every source position, all output entries that were gathered from it."""
    t = np.asarray(t)
    input_shape = Shape3(*input_shape) if input_shape is not None else _default_folding_input(spec, Shape3(*t.shape[1:]))
    sums = folding_scatter_add(spec, t, input_shape)
    _, counts = _folding_scatter(spec.kernel, spec.stride, input_shape)
    averaged = sums / np.maximum(counts, 1).reshape(tuple(input_shape))
    return averaged.astype(t.dtype, copy=False)


# --- max-pooling -----------------------------------------------------------

def _pooling_windows(spec: LayerSpec, x: np.ndarray) -> np.ndarray:
    f, stride = spec.kernel, spec.stride
    windows = sliding_window_view(x, (f, f), axis=(1, 2))[:, ::stride, ::stride]
    return windows.reshape(windows.shape[:4] + (f * f,))


def pooling_forward(spec: LayerSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Channel-wise window max plus the window-local argmax (lowest index on ties)."""
    x = np.asarray(x)
    output_shape(spec, Shape3(*x.shape[1:]))
    windows = _pooling_windows(spec, x)
    argmax = np.argmax(windows, axis=-1)
    values = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return values, argmax


def pooling_backward(spec: LayerSpec, t: np.ndarray, input_shape: Optional[Shape3] = None) -> np.ndarray:
    """Nearest-neighbour upsampling of the control signal over each receptive field."""
    f, stride = spec.kernel, spec.stride
    if f != stride:
        raise UnsupportedConfigurationError(
            f"backward mode needs non-overlapping pooling, got f={f}, stride={stride}", token=spec.token
        )
    t = np.asarray(t)
    up = np.repeat(np.repeat(t, f, axis=1), f, axis=2)
    if input_shape is None:
        return up
    H_, W_, C_ = input_shape
    if C_ != t.shape[3] or H_ < up.shape[1] or W_ < up.shape[2]:
        raise ShapeMismatchError(f"control {t.shape[1:]} cannot be upsampled to {tuple(input_shape)}")
    pad = ((0, 0), (0, H_ - up.shape[1]), (0, W_ - up.shape[2]), (0, 0))
    return np.pad(up, pad, mode="edge")


def pooling_route_gradient(spec: LayerSpec, g: np.ndarray, argmax: np.ndarray, input_shape: Shape3) -> np.ndarray:
    """Subgradient of the max: routes each output gradient to its argmax source."""
    f, stride = spec.kernel, spec.stride
    N, H, W, C = argmax.shape
    n, h, w, c = np.indices((N, H, W, C))
    hs = h * stride + argmax // f
    ws = w * stride + argmax % f
    out = np.zeros((N,) + tuple(input_shape))
    np.add.at(out, (n, hs, ws, c), np.asarray(g, dtype=np.float64))
    return out


# --- cGMM ------------------------------------------------------------------

def cgmm_forward(params: CGMMParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior activities (float32) and per-position max-component log-likelihoods (N, H, W, 1)."""
    x = as_tensor4(x, dtype=np.float64)
    lj = gmm_core.log_joint(params, x)
    activities = softmax(lj, axis=-1).astype(np.float32)
    return activities, np.max(lj, axis=-1, keepdims=True)


def layer_loss(loglik: np.ndarray) -> np.ndarray:
    """Per-sample layer loss: mean over positions of the max-component log-likelihood."""
    return loglik.reshape(loglik.shape[0], -1).mean(axis=1)


def cgmm_backward(
    params: CGMMParams,
    t: Optional[np.ndarray],
    rng: np.random.Generator,
    batch_shape: Optional[tuple[int, int, int]] = None,
    variance_scale: float = 1.0,
) -> tuple[np.ndarray, int]:
    """
    Samples an input-space control signal. Negative control entries are
    clipped, rows without positive mass fall back to uniform (the returned
    count reports how many did). Absent control means uniform everywhere.
    """
    if t is None:
        if batch_shape is None:
            raise ShapeMismatchError("an absent control signal needs an explicit (N, H, W)")
        control = np.ones(tuple(batch_shape) + (params.K,))
        fallbacks = 0
    else:
        control = np.clip(np.asarray(t, dtype=np.float64), 0.0, None)
        if control.ndim != 4 or control.shape[-1] != params.K:
            raise ShapeMismatchError(f"control shape {control.shape} does not carry K={params.K} channels")
        empty = ~(control.sum(axis=-1) > 0)
        fallbacks = int(empty.sum())
        if fallbacks:
            control[empty] = 1.0
            logger.warning("cGMM backward: %d positions had no positive control, sampled uniformly", fallbacks)
    sample = gmm_core.sample_components(params, control, rng, variance_scale)
    return sample.astype(np.float32), fallbacks


def cgmm_input_gradient(params: CGMMParams, x) -> np.ndarray:
    return gmm_core.input_gradient(params, x)


# --- classifier ------------------------------------------------------------

@dataclass
class ClassifierParams:
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def initialize(cls, D: int, S: int) -> "ClassifierParams":
        return cls(weights=np.zeros((D, S), dtype=np.float32), bias=np.zeros(S, dtype=np.float32))

    @property
    def D(self) -> int:
        return self.weights.shape[0]

    @property
    def S(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(weights=self.weights.copy(), bias=self.bias.copy())

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}


def _flatten_input(params: ClassifierParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != params.D:
        raise ShapeMismatchError(f"classifier expects {params.D} inputs, got {flat.shape[1]}")
    return flat


def classifier_forward(params: ClassifierParams, x: np.ndarray) -> np.ndarray:
    """Class probabilities, shape (N, S)."""
    flat = _flatten_input(params, x)
    return softmax(flat @ params.weights.astype(np.float64) + params.bias.astype(np.float64), axis=-1)


def classifier_gradients(params: ClassifierParams, x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean cross-entropy gradient w.r.t. (W, b)."""
    flat = _flatten_input(params, x)
    delta = classifier_forward(params, x) - np.eye(params.S)[labels]
    return flat.T @ delta / flat.shape[0], delta.mean(axis=0)


def classifier_backward(
    params: ClassifierParams,
    t: np.ndarray,
    input_shape: Shape3,
    log_floor: Optional[float] = None,
    positivity_eps: Optional[float] = None,
) -> np.ndarray:
    """
    Approximate inversion W^T (log t - b) + c, with c chosen per sample so
    that the smallest output entry equals `positivity_eps`.
    """
    log_floor = settings.CLASSIFIER_LOG_FLOOR if log_floor is None else log_floor
    positivity_eps = settings.CLASSIFIER_POSITIVITY_EPS if positivity_eps is None else positivity_eps
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    if t.shape[-1] != params.S:
        raise ShapeMismatchError(f"class control has {t.shape[-1]} entries, expected S={params.S}")
    if np.any(np.abs(t.sum(axis=-1) - 1.0) > 1e-3):
        raise ValueError("class control must sum to 1")
    input_shape = Shape3(*input_shape)
    if input_shape.size != params.D:
        raise ShapeMismatchError(f"cannot reshape {params.D} classifier inputs to {input_shape}")
    log_t = np.log(np.clip(t, log_floor, 1.0 - log_floor))
    v = (log_t - params.bias.astype(np.float64)) @ params.weights.astype(np.float64).T
    out = (v - v.min(axis=1, keepdims=True)) + positivity_eps
    return out.reshape((t.shape[0],) + tuple(input_shape))
