"""Class-conditional saliency grounding and evidence-patch geometry.

Three grounding methods produce a non-negative saliency grid at image
resolution for a chosen class:

  * Grad-CAM: ReLU of the gradient-weighted channel sum at the grounding
    block, upsampled bilinearly.
  * Excitation backprop (EB): a probability mass starts as one-hot on the
    class logit and is redistributed layer by layer through non-negative
    weights, p_i = a_i * sum_j(w+_ij * p_j / Z_j) with Z_j = sum_i a_i w+_ij.
    The contrastive variant (cEB) runs a second pass with the negated head,
    subtracts it below the classifier, clamps at zero and renormalizes,
    which cancels evidence shared between classes.  With a pooled linear
    head the two passes occupy disjoint channel sets (head-positive vs
    head-negative), so the difference is taken where channels first mix:
    after both passes have crossed the deepest conv layer.  Subtracting
    any higher would change nothing.
  * RISE: score-weighted average of random binary masks, needing only
    black-box access to the classifier.

The module also provides peak finding, clamped patch extraction and black
square erasing, which together implement one adversarial-erasing step.

Batch helpers (ground_batch and friends) vectorize over images; the public
single-image operations wrap them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import ConfigError, NoEvidenceError, ShapeError
from .network import Model
from .util import bilinear_resize, new_rng

METHOD_TAGS = {"eb": "EB", "ceb": "cEB", "gradcam": "GradCAM", "rise": "RISE"}


@dataclass(frozen=True)
class RiseConfig:
    n_masks: int = 4000
    grid: int = 7
    keep_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_masks < 1:
            raise ConfigError(f"RISE needs at least one mask, got {self.n_masks}")
        if self.grid < 1:
            raise ConfigError(f"RISE cell grid must be >= 1, got {self.grid}")
        if not 0 < self.keep_prob < 1:
            raise ConfigError(f"keep probability must be in (0,1), got {self.keep_prob}")


@dataclass(frozen=True)
class GroundingConfig:
    method: str = "ceb"
    patch_size: int = 21
    erase_size: int = 12
    rise: RiseConfig = field(default_factory=RiseConfig)

    def __post_init__(self):
        if self.method not in METHOD_TAGS:
            raise ConfigError(
                f"unknown grounding method {self.method!r}; "
                f"choose from {sorted(METHOD_TAGS)}")
        if self.patch_size < 1:
            raise ConfigError(f"patch size must be >= 1, got {self.patch_size}")
        if not 0 < self.erase_size <= self.patch_size:
            raise ConfigError(
                f"erase size must be in 1..patch_size, got {self.erase_size}")

    @property
    def method_tag(self) -> str:
        return METHOD_TAGS[self.method]


@dataclass
class SaliencyMap:
    """Non-negative h x w score grid at image resolution."""

    grid: np.ndarray
    class_id: int
    method: str  # one of METHOD_TAGS values

    @property
    def is_degenerate(self) -> bool:
        return bool(self.grid.max() <= 0)


def _check_class(class_id: int, num_classes: int) -> None:
    if not 0 <= class_id < num_classes:
        raise ValueError(f"class id {class_id} out of range 0..{num_classes - 1}")


def _as_batch(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3:
        raise ShapeError(f"expected one (c,h,w) image, got shape {image.shape}")
    return image[None]


# ---------------------------------------------------------------------------
# Grad-CAM


def gradcam_grids(model: Model, x: np.ndarray, class_ids: np.ndarray) -> np.ndarray:
    """Batched Grad-CAM grids (B,H,W) at input resolution."""
    tr = model.forward_trace(x)
    bsz, n_cls = tr.logits.shape
    dlogits = np.zeros_like(tr.logits)
    dlogits[np.arange(bsz), class_ids] = 1
    d_act = model.backward(tr, dlogits, accumulate=False,
                           stop_block=model.grounding_index)
    acts = tr.pool_out[model.grounding_index]
    alpha = d_act.mean(axis=(2, 3))
    cam = np.einsum("bk,bkhw->bhw", alpha, acts, optimize=True)
    cam = np.maximum(cam, 0)
    size = x.shape[-1]
    return bilinear_resize(cam, size, size)


def grad_cam(model: Model, image: np.ndarray, class_id: int) -> SaliencyMap:
    """Gradient-weighted class activation map for one image."""
    _check_class(class_id, model.spec.num_classes)
    x = _as_batch(image).astype(model.dtype, copy=False)
    grid = gradcam_grids(model, x, np.asarray([class_id]))[0]
    return SaliencyMap(grid=grid, class_id=class_id, method="GradCAM")


# ---------------------------------------------------------------------------
# Excitation backprop


def _safe_ratio(p: np.ndarray, z: np.ndarray) -> np.ndarray:
    """p/z where z is meaningfully positive, else 0 (mass at dead units is dropped)."""
    eps = np.finfo(z.dtype).tiny * 1e4
    return np.where(z > eps, p / np.maximum(z, eps), 0)


def eb_fc_relevance(feats: np.ndarray, weights: np.ndarray,
                    prior: np.ndarray) -> np.ndarray:
    """One excitation step through a linear head.

    Each input activation receives prior mass in proportion to its positive
    excitatory contribution. The dual ("everything but this class") pass of
    cEB is the same step with negated weights.
    """
    w_pos = np.maximum(weights, 0)  # (C,F)
    z = feats @ w_pos.T  # (B,C)
    ratio = _safe_ratio(prior, z)
    return feats * (ratio @ w_pos)  # (B,F)


def _contrast(p: np.ndarray, p_dual: np.ndarray) -> np.ndarray:
    """Clamped difference of the two passes, renormalized to unit mass."""
    diff = np.maximum(p - p_dual, 0)
    total = diff.sum(axis=(1, 2, 3), keepdims=True)
    return _safe_ratio(diff, total)


def eb_conv_relevance(p: np.ndarray, a_in: np.ndarray,
                      weights: np.ndarray) -> np.ndarray:
    """One excitation step through a padded 3x3 conv (bias ignored)."""
    w_pos = np.maximum(weights, 0)
    zero_bias = np.zeros(w_pos.shape[0], dtype=w_pos.dtype)
    z = layers.conv2d_forward(a_in, w_pos, zero_bias, stride=1, padding=1)
    ratio = _safe_ratio(p, z)
    spread, _, _ = layers.conv2d_backward(ratio, a_in, w_pos, stride=1,
                                          padding=1, need_dw=False)
    return a_in * spread


def eb_grids(model: Model, x: np.ndarray, class_ids: np.ndarray,
             contrastive: bool, collect_sums: list | None = None) -> np.ndarray:
    """Batched EB/cEB grids (B,H,W) at input resolution.

    When collect_sums is a list, (layer name, per-image relevance sum) pairs
    are appended after every redistribution step, before the final channel
    collapse and upsample. Each sum is 1 for non-degenerate propagation.
    """
    tr = model.forward_trace(x)
    bsz, n_cls = tr.logits.shape
    prior = np.zeros_like(tr.logits)
    prior[np.arange(bsz), class_ids] = 1

    p_feat = eb_fc_relevance(tr.feats, model.fc.w, prior)
    if collect_sums is not None:
        collect_sums.append(("fc", p_feat.sum(axis=1, dtype=np.float64)))

    # global average pool: uniform positive weights, so relevance splits
    # proportionally to the spatial activations within each channel
    acts = tr.pool_out[-1]  # (B,K,h,w)
    chan_total = acts.sum(axis=(2, 3))
    p = acts * _safe_ratio(p_feat, chan_total)[:, :, None, None]
    if collect_sums is not None:
        collect_sums.append(("gap", p.sum(axis=(1, 2, 3), dtype=np.float64)))

    p_dual = None
    if contrastive:
        dual_feat = eb_fc_relevance(tr.feats, -model.fc.w, prior)
        p_dual = acts * _safe_ratio(dual_feat, chan_total)[:, :, None, None]

    stop = model.grounding_index
    top = len(model.blocks) - 1
    if contrastive and stop >= top:
        # grounding at the deepest block: channels never mix above it, so
        # the dual cancels nothing; contrast here keeps the modes uniform
        p = _contrast(p, p_dual)
    for i in range(top, stop, -1):
        # max-pool: relevance follows the pooling switch to the winner
        p = layers.maxpool_backward(p, tr.pool_idx[i], tr.a[i].shape, size=2)
        if collect_sums is not None:
            collect_sums.append((f"pool{i + 1}", p.sum(axis=(1, 2, 3), dtype=np.float64)))
        # ReLU is identity on relevance (activations are already non-negative)
        p = eb_conv_relevance(p, tr.conv_in[i], model.blocks[i].w)
        if collect_sums is not None:
            collect_sums.append((f"conv{i + 1}", p.sum(axis=(1, 2, 3), dtype=np.float64)))
        if contrastive and i == top:
            # head-positive and head-negative channels first overlap below
            # this conv, the highest point where subtraction can bite
            pd = layers.maxpool_backward(p_dual, tr.pool_idx[i],
                                         tr.a[i].shape, size=2)
            pd = eb_conv_relevance(pd, tr.conv_in[i], model.blocks[i].w)
            p = _contrast(p, pd)
            if collect_sums is not None:
                collect_sums.append(
                    (f"contrast{i + 1}", p.sum(axis=(1, 2, 3), dtype=np.float64)))

    grid = p.sum(axis=1)
    size = x.shape[-1]
    return bilinear_resize(grid, size, size)


def excitation_backprop(model: Model, image: np.ndarray, class_id: int,
                        contrastive: bool = True) -> SaliencyMap:
    """EB (or contrastive EB) saliency for one image."""
    _check_class(class_id, model.spec.num_classes)
    x = _as_batch(image).astype(model.dtype, copy=False)
    grid = eb_grids(model, x, np.asarray([class_id]), contrastive)[0]
    return SaliencyMap(grid=grid, class_id=class_id,
                       method="cEB" if contrastive else "EB")


def eb_layer_sums(model: Model, image: np.ndarray, class_id: int,
                  contrastive: bool = False) -> list[tuple[str, float]]:
    """Relevance sum after each propagated layer, for conservation checks."""
    _check_class(class_id, model.spec.num_classes)
    x = _as_batch(image).astype(model.dtype, copy=False)
    sums: list = []
    eb_grids(model, x, np.asarray([class_id]), contrastive, collect_sums=sums)
    return [(name, float(vals[0])) for name, vals in sums]


# ---------------------------------------------------------------------------
# RISE


def rise_masks(cfg: RiseConfig, size: int, dtype=np.float32) -> np.ndarray:
    """Generate the (N,size,size) soft mask stack for one seed.

    Each mask is a g x g Bernoulli(keep_prob) cell grid, bilinearly
    upsampled to (g+1) cells and cropped at a uniform random sub-cell
    shift, the standard smooth-mask construction.
    """
    rng = new_rng(cfg.seed)
    cells = (rng.random((cfg.n_masks, cfg.grid, cfg.grid)) < cfg.keep_prob)
    cell_px = math.ceil(size / cfg.grid)
    up = (cfg.grid + 1) * cell_px
    big = bilinear_resize(cells.astype(dtype), up, up)
    shifts = rng.integers(0, cell_px, size=(cfg.n_masks, 2))
    masks = np.empty((cfg.n_masks, size, size), dtype=dtype)
    for i in range(cfg.n_masks):
        sy, sx = shifts[i]
        masks[i] = big[i, sy:sy + size, sx:sx + size]
    return masks


def _mask_scores(blackbox, stack: np.ndarray) -> np.ndarray:
    if hasattr(blackbox, "predict_batch"):
        return blackbox.predict_batch(stack)
    return np.stack([np.asarray(blackbox(im), dtype=np.float64) for im in stack])


def rise(blackbox, image: np.ndarray, class_id: int, cfg: RiseConfig,
         masks: np.ndarray | None = None, batch: int = 256) -> SaliencyMap:
    """Black-box saliency: saliency = (1/(N p)) * sum_i score_i * mask_i.

    blackbox maps an image to a probability vector (a Model works directly).
    Precomputed masks from rise_masks may be passed to amortize mask
    construction across calls; they must match cfg and the image size.
    """
    if image.ndim != 3:
        raise ShapeError(f"expected one (c,h,w) image, got shape {image.shape}")
    size = image.shape[-1]
    if image.shape[-2] != size:
        raise ShapeError(f"RISE expects square images, got {image.shape}")
    if masks is None:
        masks = rise_masks(cfg, size, dtype=np.float32)

    acc = np.zeros((size, size), dtype=np.float64)
    img32 = image.astype(np.float32, copy=False)
    for start in range(0, cfg.n_masks, batch):
        chunk = masks[start:start + batch]
        stack = img32[None] * chunk[:, None]
        all_scores = _mask_scores(blackbox, stack)
        if start == 0:
            _check_class(class_id, all_scores.shape[-1])
        scores = all_scores[:, class_id]
        acc += np.einsum("m,mhw->hw", scores.astype(np.float64), chunk)
    grid = (acc / (cfg.n_masks * cfg.keep_prob)).astype(np.float32)
    return SaliencyMap(grid=grid, class_id=class_id, method="RISE")


# ---------------------------------------------------------------------------
# dispatch


def ground(model: Model, image: np.ndarray, class_id: int,
           cfg: GroundingConfig, masks: np.ndarray | None = None) -> SaliencyMap:
    """Produce a saliency map with the configured method."""
    if cfg.method == "gradcam":
        return grad_cam(model, image, class_id)
    if cfg.method == "eb":
        return excitation_backprop(model, image, class_id, contrastive=False)
    if cfg.method == "ceb":
        return excitation_backprop(model, image, class_id, contrastive=True)
    return rise(model, image, class_id, cfg.rise, masks=masks)


def ground_grids(model: Model, x: np.ndarray, class_ids: np.ndarray,
                 cfg: GroundingConfig, masks: np.ndarray | None = None) -> np.ndarray:
    """Batched dispatch returning raw (B,H,W) grids."""
    class_ids = np.asarray(class_ids)
    if cfg.method == "gradcam":
        return gradcam_grids(model, x, class_ids)
    if cfg.method in ("eb", "ceb"):
        return eb_grids(model, x, class_ids, contrastive=cfg.method == "ceb")
    if masks is None:
        masks = rise_masks(cfg.rise, x.shape[-1], dtype=np.float32)
    grids = [rise(model, img, int(cid), cfg.rise, masks=masks).grid
             for img, cid in zip(x, class_ids)]
    return np.stack(grids)


# ---------------------------------------------------------------------------
# peak / patch / erase geometry


def peak(smap: SaliencyMap) -> tuple[int, int]:
    """Coordinates of the maximum entry; ties break to smallest row, then column."""
    if smap.is_degenerate:
        raise NoEvidenceError(
            f"degenerate saliency map (all zero) for class {smap.class_id}")
    flat = int(np.argmax(smap.grid))
    r, c = divmod(flat, smap.grid.shape[1])
    return r, c


def _clamped_window(center: int, size: int, extent: int) -> int:
    start = center - size // 2
    return int(np.clip(start, 0, extent - size))


def extract_patch(image: np.ndarray, center: tuple[int, int],
                  patch_size: int) -> np.ndarray:
    """Square crop around center, shifted to stay fully inside the image."""
    if image.ndim != 3:
        raise ShapeError(f"expected one (c,h,w) image, got shape {image.shape}")
    _, h, w = image.shape
    if patch_size > h or patch_size > w:
        raise ShapeError(f"patch size {patch_size} exceeds image {h}x{w}")
    r0 = _clamped_window(center[0], patch_size, h)
    c0 = _clamped_window(center[1], patch_size, w)
    return image[:, r0:r0 + patch_size, c0:c0 + patch_size].copy()


def erase(image: np.ndarray, center: tuple[int, int],
          erase_size: int) -> np.ndarray:
    """Copy of the image with a black square over center (clamped inside)."""
    if image.ndim != 3:
        raise ShapeError(f"expected one (c,h,w) image, got shape {image.shape}")
    _, h, w = image.shape
    if erase_size > h or erase_size > w:
        raise ShapeError(f"erase size {erase_size} exceeds image {h}x{w}")
    out = image.copy()
    r0 = _clamped_window(center[0], erase_size, h)
    c0 = _clamped_window(center[1], erase_size, w)
    out[:, r0:r0 + erase_size, c0:c0 + erase_size] = 0
    return out


def erase_batch(images: np.ndarray, centers: np.ndarray, erase_size: int,
                active: np.ndarray | None = None) -> None:
    """In-place black squares on a (B,c,h,w) stack, one center per image."""
    _, _, h, w = images.shape
    for i in range(len(images)):
        if active is not None and not active[i]:
            continue
        r0 = _clamped_window(int(centers[i][0]), erase_size, h)
        c0 = _clamped_window(int(centers[i][1]), erase_size, w)
        images[i, :, r0:r0 + erase_size, c0:c0 + erase_size] = 0


def peak_grid(grid: np.ndarray) -> tuple[int, int] | None:
    """Batched-path peak: None for a degenerate (all-zero) grid."""
    if grid.max() <= 0:
        return None
    flat = int(np.argmax(grid))
    r, c = divmod(flat, grid.shape[1])
    return r, c
