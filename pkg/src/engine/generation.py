"""
Sampling extras on top of the backward pass: top-S control thresholding,
gradient-ascent sharpening at folding layers and in-painting.
"""

import logging
from typing import Optional

import numpy as np

from ..models.schemas import LayerKind, SamplerConfig, SharpenConfig
from . import gmm_core
from . import layers as L
from .errors import ConfigurationError, UnsupportedConfigurationError, UsageError
from .model_graph import DcgmmModel, backward, forward
from .tensor_core import as_tensor4

logger = logging.getLogger(__name__)

ERASE_SIDES = ("right", "left", "top", "bottom")


def top_s_filter(control: np.ndarray, S: int) -> np.ndarray:
    """Keeps the S largest entries along the last axis (ties to the lower index) and renormalizes."""
    control = np.asarray(control, dtype=np.float64)
    K = control.shape[-1]
    if not 1 <= S <= K:
        raise ValueError(f"top-S needs 1 <= S <= {K}, got {S}")
    order = np.argsort(-control, axis=-1, kind="stable")[..., :S]
    kept = np.zeros_like(control)
    np.put_along_axis(kept, order, np.take_along_axis(control, order, axis=-1), axis=-1)
    kept = np.clip(kept, 0.0, None)
    total = kept.sum(axis=-1, keepdims=True)
    return np.divide(kept, total, out=np.zeros_like(kept), where=total > 0)


def sharpening_target(model: DcgmmModel, folding_index: int, cfg: Optional[SharpenConfig] = None) -> int:
    """Index of the cGMM whose loss sharpening at `folding_index` maximizes."""
    layer = model.layer(folding_index)
    if layer.kind != LayerKind.FOLDING:
        raise UnsupportedConfigurationError(f"sharpening starts at a folding layer, got {layer.spec.token}")
    requested = cfg.target_layer if cfg is not None else None
    if requested is not None:
        if requested <= folding_index:
            raise ConfigurationError(
                f"sharpening target {requested} must lie above folding layer {folding_index}", layer_index=folding_index
            )
        target = requested
    else:
        above = [i for i in model.cgmm_indices if i > folding_index]
        if not above:
            raise UnsupportedConfigurationError(f"no cGMM above folding layer {folding_index}")
        target = above[0]
    if model.layer(target).kind != LayerKind.CGMM:
        raise UnsupportedConfigurationError(f"sharpening target {target} is not a cGMM layer")
    for between in model.layers[folding_index - 1 : target - 1]:
        if between.kind not in (LayerKind.FOLDING, LayerKind.POOLING):
            raise UnsupportedConfigurationError(
                f"sharpening from layer {folding_index} to {target} would cross {between.spec.token}"
            )
    return target


def sharpening_objective(model: DcgmmModel, folding_index: int, t: np.ndarray, target: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Per-sample target-layer loss of the sub-chain starting at `folding_index`
    fed with `t`, and its gradient with respect to `t`.
    """
    x = np.asarray(t, dtype=np.float64)
    chain = model.layers[folding_index - 1 : target - 1]
    routes = []
    for layer in chain:
        if layer.kind == LayerKind.FOLDING:
            routes.append((layer, None))
            x = L.folding_forward(layer.spec, x)
        else:
            x, argmax = L.pooling_forward(layer.spec, x)
            routes.append((layer, argmax))

    params = model.layer(target).params
    loglik = np.max(gmm_core.log_joint(params, x), axis=-1)
    positions = loglik.shape[1] * loglik.shape[2]
    loss = loglik.reshape(loglik.shape[0], -1).mean(axis=1)

    grad = L.cgmm_input_gradient(params, x) / positions
    for layer, argmax in reversed(routes):
        if argmax is None:
            grad = L.folding_scatter_add(layer.spec, grad, layer.input_shape)
        else:
            grad = L.pooling_route_gradient(layer.spec, grad, argmax, layer.input_shape)
    return loss, grad


def sharpen(model: DcgmmModel, folding_layer_index: int, t0: np.ndarray, cfg: Optional[SharpenConfig] = None) -> np.ndarray:
    """
    Gradient ascent on a folding layer's backward output toward a higher
    cGMM's loss. A sample's step is kept only if its loss does not drop;
    otherwise its step size is halved.
    """
    cfg = cfg or SharpenConfig()
    if cfg.iterations == 0:
        return t0
    target = sharpening_target(model, folding_layer_index, cfg)
    t = np.array(t0, dtype=np.float64)
    loss, grad = sharpening_objective(model, folding_layer_index, t, target)
    step = np.full(t.shape[0], cfg.step)
    expand = (slice(None),) + (None,) * (t.ndim - 1)
    initial = loss.copy()

    for i in range(cfg.iterations):
        if not np.all(np.isfinite(grad)):
            logger.warning("sharpening layer %d: non-finite gradient at iteration %d, stopping", folding_layer_index, i)
            break
        candidate = t + step[expand] * grad
        cand_loss, cand_grad = sharpening_objective(model, folding_layer_index, candidate, target)
        accept = np.isfinite(cand_loss) & (cand_loss >= loss)
        t[accept] = candidate[accept]
        loss[accept] = cand_loss[accept]
        grad[accept] = cand_grad[accept]
        step[~accept] *= 0.5

    logger.debug(
        "sharpening layer %d -> %d: mean loss %.4f -> %.4f", folding_layer_index, target, initial.mean(), loss.mean()
    )
    return t


def sample(
    model: DcgmmModel,
    class_index: Optional[int] = None,
    sampler: Optional[SamplerConfig] = None,
    sharpening: Optional[SharpenConfig] = None,
    n: int = 1,
) -> np.ndarray:
    """Generates n samples, conditioned on a class when the model ends in a classifier."""
    sampler = sampler or SamplerConfig()
    rng = np.random.default_rng(sampler.seed)
    if class_index is None:
        return backward(model, None, rng, sampler, sharpening, start_layer=model.top_cgmm_index, n=n)
    classifier = model.classifier
    if classifier is None:
        raise UsageError("class-conditional sampling needs a model with a classifier layer")
    if not 0 <= class_index < classifier.spec.classes:
        raise UsageError(f"class {class_index} is outside [0, {classifier.spec.classes})")
    control = np.zeros((n, classifier.spec.classes))
    control[:, class_index] = 1.0
    return backward(model, control, rng, sampler, sharpening, start_layer=classifier.index)


def _known_mask(mask: np.ndarray, images: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != images.shape[1:3]:
        raise UsageError(f"mask {mask.shape} does not cover images of {images.shape[1:3]}")
    return np.broadcast_to(mask.reshape(mask.shape[:-2] + images.shape[1:3])[..., None], images.shape)


def inpaint(
    model: DcgmmModel,
    image: np.ndarray,
    mask: np.ndarray,
    sampler: Optional[SamplerConfig] = None,
    sharpening: Optional[SharpenConfig] = None,
) -> np.ndarray:
    """
    Completes the pixels where `mask` is False. Unknown pixels are zeroed,
    the batch is forwarded to the topmost cGMM and sampled back down with
    that layer's activities as control. Known pixels are copied through.
    """
    sampler = sampler or SamplerConfig()
    images = as_tensor4(image)
    known = _known_mask(mask, images)
    if known.all():
        return images.copy()
    top = model.top_cgmm_index
    trace = forward(model, np.where(known, images, 0.0))
    generated = backward(model, trace.activities[top], np.random.default_rng(sampler.seed), sampler, sharpening, start_layer=top)
    return np.where(known, images, generated).astype(np.float32)


def half_mask(height: int, width: int, erase: str = "right") -> np.ndarray:
    """Known-pixel mask with one half erased."""
    if erase not in ERASE_SIDES:
        raise UsageError(f"erase must be one of {', '.join(ERASE_SIDES)}")
    mask = np.ones((height, width), dtype=bool)
    if erase == "right":
        mask[:, width // 2 :] = False
    elif erase == "left":
        mask[:, : (width + 1) // 2] = False
    elif erase == "bottom":
        mask[height // 2 :, :] = False
    else:
        mask[: (height + 1) // 2, :] = False
    return mask
