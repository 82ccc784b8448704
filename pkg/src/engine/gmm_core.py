"""
Gaussian-mixture math for cGMM layers.

Parameters are stored unconstrained: weights as logits (softmax maps them
onto the simplex) and diagonal precisions as pre-images of a softplus map,
clamped to [precision_min, precision_max] after mapping. All evaluation is
done in float64 regardless of the storage dtype.

Shapes: in shared mode the arrays are (K,), (K, D), (K, D) and inputs are
(..., D). In independent mode they carry a leading (H, W) grid and inputs
must be (..., H, W, D).
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import expit, log_softmax, logsumexp, softmax

from ..config import settings
from .errors import ShapeMismatchError

LOG_2PI = float(np.log(2.0 * np.pi))
QUAD_CHUNK_ELEMENTS = 1 << 22


class SharingMode(str, Enum):
    SHARED = "shared"
    INDEPENDENT = "independent"


def softplus(r):
    return np.logaddexp(0.0, np.asarray(r, dtype=np.float64))


def softplus_inverse(p):
    p = np.asarray(p, dtype=np.float64)
    return p + np.log(-np.expm1(-p))


@dataclass
class CGMMParams:
    logits: np.ndarray
    centroids: np.ndarray
    precision_raw: np.ndarray
    sharing: SharingMode = SharingMode.SHARED
    precision_min: float = field(default_factory=lambda: settings.PRECISION_MIN)
    precision_max: float = field(default_factory=lambda: settings.PRECISION_MAX)

    def __post_init__(self):
        self.sharing = SharingMode(self.sharing)
        lead = 0 if self.sharing == SharingMode.SHARED else 2
        if self.centroids.ndim != lead + 2 or self.logits.ndim != lead + 1:
            raise ShapeMismatchError(
                f"{self.sharing.value} parameters need {lead + 2}-D centroids and {lead + 1}-D logits"
            )
        if self.precision_raw.shape != self.centroids.shape:
            raise ShapeMismatchError("precision and centroid arrays differ in shape")
        if self.logits.shape != self.centroids.shape[:-1]:
            raise ShapeMismatchError("logit and centroid arrays disagree on K")

    @classmethod
    def initialize(
        cls,
        K: int,
        D: int,
        sharing: SharingMode = SharingMode.SHARED,
        grid: Optional[tuple[int, int]] = None,
        rng: Optional[np.random.Generator] = None,
        centroid_range: Optional[float] = None,
        init_precision: Optional[float] = None,
    ) -> "CGMMParams":
        rng = rng if rng is not None else np.random.default_rng()
        centroid_range = settings.INIT_CENTROID_RANGE if centroid_range is None else centroid_range
        init_precision = settings.INIT_PRECISION if init_precision is None else init_precision
        sharing = SharingMode(sharing)
        lead = tuple(grid) if sharing == SharingMode.INDEPENDENT else ()
        if sharing == SharingMode.INDEPENDENT and len(lead) != 2:
            raise ShapeMismatchError("independent parameters need an (H, W) grid")
        centroids = rng.uniform(-centroid_range, centroid_range, size=lead + (K, D)).astype(np.float32)
        raw = np.full(lead + (K, D), softplus_inverse(init_precision), dtype=np.float32)
        logits = np.zeros(lead + (K,), dtype=np.float32)
        return cls(logits=logits, centroids=centroids, precision_raw=raw, sharing=sharing)

    @property
    def K(self) -> int:
        return self.centroids.shape[-2]

    @property
    def D(self) -> int:
        return self.centroids.shape[-1]

    @property
    def grid(self) -> Optional[tuple[int, int]]:
        return None if self.sharing == SharingMode.SHARED else self.centroids.shape[:2]

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits.astype(np.float64), axis=-1)

    @property
    def log_weights(self) -> np.ndarray:
        return log_softmax(self.logits.astype(np.float64), axis=-1)

    @property
    def precisions(self) -> np.ndarray:
        return np.clip(softplus(self.precision_raw), self.precision_min, self.precision_max)

    def at(self, h: int, w: int) -> "CGMMParams":
        """Shared-mode view of the parameters at one grid position."""
        if self.sharing == SharingMode.SHARED:
            return self
        return CGMMParams(
            logits=self.logits[h, w],
            centroids=self.centroids[h, w],
            precision_raw=self.precision_raw[h, w],
            sharing=SharingMode.SHARED,
            precision_min=self.precision_min,
            precision_max=self.precision_max,
        )

    def copy(self) -> "CGMMParams":
        return CGMMParams(
            logits=self.logits.copy(),
            centroids=self.centroids.copy(),
            precision_raw=self.precision_raw.copy(),
            sharing=self.sharing,
            precision_min=self.precision_min,
            precision_max=self.precision_max,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"logits": self.logits, "centroids": self.centroids, "precision_raw": self.precision_raw}


@dataclass
class CGMMGradients:
    logits: np.ndarray
    centroids: np.ndarray
    precision_raw: np.ndarray


def _check_input(params: CGMMParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != params.D:
        raise ShapeMismatchError(f"input dimension {x.shape[-1:] or ()} does not match D={params.D}")
    if params.sharing == SharingMode.INDEPENDENT and (x.ndim < 3 or x.shape[-3:-1] != params.grid):
        raise ShapeMismatchError(f"independent parameters expect inputs on the {params.grid} grid")
    return x


def _select(arr: np.ndarray, kstar: np.ndarray, params: CGMMParams) -> np.ndarray:
    """Picks arr[..., k*, :] per position; arr is (K, D) or (H, W, K, D)."""
    if params.sharing == SharingMode.SHARED:
        return arr[kstar]
    H, W = params.grid
    return arr[np.arange(H)[:, None], np.arange(W)[None, :], kstar]


def component_log_density(params: CGMMParams, x) -> np.ndarray:
    """log N_k(x) for every component; output shape x.shape[:-1] + (K,)."""
    x = _check_input(params, x)
    mu = params.centroids.astype(np.float64)
    p = params.precisions
    if params.sharing == SharingMode.SHARED:
        rows = x.reshape(-1, params.D)
        subscripts = "mkd,kd->mk"
    else:
        rows = x.reshape((-1,) + x.shape[-3:])
        subscripts = "mhwkd,hwkd->mhwk"
    quad = np.empty(rows.shape[:-1] + (params.K,))
    # (x - mu)^2 per component, chunked to bound the (rows, K, D) temporary
    chunk = max(1, QUAD_CHUNK_ELEMENTS // (mu.size or 1))
    for start in range(0, len(rows), chunk):
        diff = rows[start : start + chunk, ..., None, :] - mu
        quad[start : start + chunk] = np.einsum(subscripts, diff * diff, p)
    log_norm = 0.5 * (np.sum(np.log(p), axis=-1) - params.D * LOG_2PI)
    return log_norm - 0.5 * quad.reshape(x.shape[:-1] + (params.K,))


def log_joint(params: CGMMParams, x) -> np.ndarray:
    """log pi_k + log N_k(x)."""
    return params.log_weights + component_log_density(params, x)


def responsibilities(params: CGMMParams, x) -> np.ndarray:
    return softmax(log_joint(params, x), axis=-1)


def full_log_likelihood(params: CGMMParams, x) -> np.ndarray:
    return logsumexp(log_joint(params, x), axis=-1)


def max_component_log_likelihood(params: CGMMParams, x) -> np.ndarray:
    return np.max(log_joint(params, x), axis=-1)


def best_component(params: CGMMParams, x) -> np.ndarray:
    return np.argmax(log_joint(params, x), axis=-1)


def loss_gradients(params: CGMMParams, x) -> CGMMGradients:
    """
    Gradient of the max-component log-likelihood w.r.t. the stored parameters.

    For a batch of inputs the gradient is averaged over every leading axis
    (shared mode) or over the batch axes only (independent mode, where each
    grid position owns its parameters).
    """
    x = _check_input(params, x)
    K, D = params.K, params.D
    mu = params.centroids.astype(np.float64)
    p = params.precisions

    if params.sharing == SharingMode.SHARED:
        X = x.reshape(-1, D)
        M = X.shape[0]
        kstar = best_component(params, X)
        onehot = np.eye(K)[kstar]
        diff = X - mu[kstar]
        counts = onehot.sum(axis=0)
        s1 = onehot.T @ diff
        s2 = onehot.T @ (diff * diff)
        count_axes = counts[:, None]
    else:
        X = x.reshape((-1,) + x.shape[-3:])
        M = X.shape[0]
        kstar = best_component(params, X)
        onehot = np.eye(K)[kstar]
        diff = X - _select(mu, kstar, params)
        counts = onehot.sum(axis=0)
        s1 = np.einsum("nhwk,nhwd->hwkd", onehot, diff)
        s2 = np.einsum("nhwk,nhwd->hwkd", onehot, diff * diff)
        count_axes = counts[..., None]

    g_logits = counts / M - params.weights
    g_mu = p * s1 / M
    g_prec = 0.5 * (count_axes / p - s2) / M

    raw = params.precision_raw.astype(np.float64)
    mapped = softplus(raw)
    inside = (mapped >= params.precision_min) & (mapped <= params.precision_max)
    g_raw = g_prec * expit(raw) * inside
    return CGMMGradients(logits=g_logits, centroids=g_mu, precision_raw=g_raw)


def input_gradient(params: CGMMParams, x) -> np.ndarray:
    """d/dx of the max-component log-likelihood: p_k* (mu_k* - x)."""
    x = _check_input(params, x)
    kstar = best_component(params, x)
    mu = _select(params.centroids.astype(np.float64), kstar, params)
    p = _select(params.precisions, kstar, params)
    return p * (mu - x)


def sample_components(
    params: CGMMParams,
    control: np.ndarray,
    rng: np.random.Generator,
    variance_scale: float = 1.0,
) -> np.ndarray:
    """
    Draws z ~ Multinomial(control) then x ~ N(mu_z, diag(variance_scale / p_z))
    per position. `control` must be non-negative with a positive sum per row.
    """
    control = np.asarray(control, dtype=np.float64)
    if control.shape[-1] != params.K:
        raise ShapeMismatchError(f"control has {control.shape[-1]} entries, expected K={params.K}")
    cdf = np.cumsum(control, axis=-1)
    cdf /= cdf[..., -1:]
    u = rng.random(control.shape[:-1])
    z = np.minimum(np.sum(cdf <= u[..., None], axis=-1), params.K - 1)
    mu = _select(params.centroids.astype(np.float64), z, params)
    p = _select(params.precisions, z, params)
    noise = rng.standard_normal(mu.shape)
    return mu + noise * np.sqrt(variance_scale / p)


def sample_component(
    params: CGMMParams,
    control,
    rng: np.random.Generator,
    variance_scale: float = 1.0,
) -> np.ndarray:
    """Single draw at one position with a control vector over the K components."""
    control = np.asarray(control, dtype=np.float64)
    if control.ndim != 1:
        raise ShapeMismatchError("sample_component takes a single control vector")
    if np.any(control < 0) or not np.sum(control) > 0:
        raise ValueError("control must be non-negative with at least one positive entry")
    if params.sharing == SharingMode.INDEPENDENT:
        raise ShapeMismatchError("use params.at(h, w) to sample from independent parameters")
    return sample_components(params, control[None, :], rng, variance_scale)[0]
