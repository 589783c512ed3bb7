"""SGD training loop with the enlarge-then-crop augmentation scheme.

Images are bilinearly enlarged to a canvas 70/64 times the model input and
a random input-sized window is cropped each time a sample is drawn; at
evaluation time the center window is used instead. All randomness flows
from the config seed through stable stage labels, so a repeated run
produces a bit-identical model and metrics trace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .errors import ConfigError, TrainingDivergedError
from .network import Model, ModelSpec
from .util import bilinear_resize, derive_seed, new_rng

CANVAS_NUM = 70
CANVAS_DEN = 64


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    decay_factor: float = 0.1
    decay_interval: int = 2000
    iterations: int = 6000
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.decay_interval < 1:
            raise ConfigError(f"decay interval must be >= 1, got {self.decay_interval}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay factor must be in (0,1], got {self.decay_factor}")


def canvas_size(input_size: int) -> int:
    """Enlarged canvas side for the crop augmentation (70 for a 64 input)."""
    return max(input_size + 1, round(input_size * CANVAS_NUM / CANVAS_DEN))


def enlarge(images: np.ndarray, input_size: int) -> np.ndarray:
    """Resize (B,c,h,w) images up to the augmentation canvas."""
    side = canvas_size(input_size)
    return bilinear_resize(images, side, side)


def eval_view(images: np.ndarray, input_size: int) -> np.ndarray:
    """Deterministic test-time view: enlarge to canvas, crop the center window.

    Accepts (c,h,w) or (B,c,h,w) and preserves the leading shape.
    """
    single = images.ndim == 3
    batch = images[None] if single else images
    canvas = enlarge(batch, input_size)
    off = (canvas.shape[-1] - input_size) // 2
    out = canvas[:, :, off:off + input_size, off:off + input_size]
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def _random_crops(canvas: np.ndarray, input_size: int,
                  rng: np.random.Generator) -> np.ndarray:
    n = canvas.shape[0]
    span = canvas.shape[-1] - input_size + 1
    offs = rng.integers(0, span, size=(n, 2))
    out = np.empty(canvas.shape[:2] + (input_size, input_size), dtype=canvas.dtype)
    for i in range(n):
        oy, ox = offs[i]
        out[i] = canvas[i, :, oy:oy + input_size, ox:ox + input_size]
    return out


def _unpack(dataset) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(dataset, "images") and hasattr(dataset, "labels"):
        return dataset.images, dataset.labels
    images, labels = dataset
    return images, labels


def train(dataset, spec: ModelSpec, cfg: TrainConfig,
          dtype: np.dtype = np.float32, augment: bool = True,
          start: Model | None = None):
    """Train a model on (images, labels); returns (model, metrics trace).

    The trace maps iteration losses, per-epoch mean losses and the final
    learning rate; identical seeds reproduce it exactly. Passing start
    continues from a copy of an existing model (momentum carried over)
    instead of a fresh init; its spec must equal the given one.
    """
    images, labels = _unpack(dataset)
    if len(images) == 0:
        raise ConfigError("training set is empty")
    if (images.ndim != 4 or images.shape[1] != spec.in_channels
            or images.shape[2] != images.shape[3]):
        raise ConfigError(
            f"expected (B,{spec.in_channels},s,s) images, got {images.shape}")
    if not augment and images.shape[2] != spec.input_size:
        raise ConfigError(
            f"without augmentation images must be {spec.input_size} per side, "
            f"got {images.shape[2]}")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise ConfigError("label outside the spec class range")

    if start is None:
        model = Model.init(spec, seed=derive_seed(cfg.seed, "init"), dtype=dtype)
    else:
        if start.spec != spec:
            raise ConfigError("start model spec does not match the given spec")
        model = start.clone()
    n = len(images)
    batch = min(cfg.batch_size, n)
    images = images.astype(dtype, copy=False)
    canvas = enlarge(images, spec.input_size) if augment else images

    order_rng = new_rng(derive_seed(cfg.seed, "order"))
    crop_rng = new_rng(derive_seed(cfg.seed, "crop"))
    perm = order_rng.permutation(n)
    pos = 0

    trace = {"loss": [], "lr": [], "epoch_loss": []}
    epoch_losses: list[float] = []
    lr = cfg.lr
    for it in range(cfg.iterations):
        if pos + batch > n:
            if epoch_losses:
                trace["epoch_loss"].append(float(np.mean(epoch_losses)))
                epoch_losses = []
            perm = order_rng.permutation(n)
            pos = 0
        idx = perm[pos:pos + batch]
        pos += batch
        lr = cfg.lr * cfg.decay_factor ** (it // cfg.decay_interval)

        if augment:
            x = _random_crops(canvas[idx], spec.input_size, crop_rng)
        else:
            x = canvas[idx]
        tr = model.forward_trace(x)
        loss, dlogits = layers.cross_entropy(tr.logits, labels[idx])
        if not np.isfinite(loss):
            raise TrainingDivergedError(it, lr)
        model.backward(tr, dlogits, accumulate=True)
        layers.sgd_step(model.params(), lr, cfg.momentum)

        trace["loss"].append(loss)
        trace["lr"].append(lr)
        epoch_losses.append(loss)
    if epoch_losses:
        trace["epoch_loss"].append(float(np.mean(epoch_losses)))
    return model, trace


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
             batch: int = 256, view: bool = True) -> float:
    """Top-1 accuracy under the deterministic evaluation view."""
    labels = np.asarray(labels)
    correct = 0
    for start in range(0, len(images), batch):
        chunk = images[start:start + batch]
        if view:
            chunk = eval_view(chunk.astype(model.dtype, copy=False),
                              model.spec.input_size)
        probs = model.predict_batch(chunk)
        correct += int((probs.argmax(axis=1) == labels[start:start + batch]).sum())
    return correct / len(images)
