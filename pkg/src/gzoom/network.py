"""Network architectures: conv-block CNNs for whole images and for patches.

A model is a stack of conv blocks (conv3x3 pad 1 -> ReLU -> maxpool 2), a
global average pool and a fully connected head. One block is designated the
"grounding block": saliency methods read activations and gradients at its
output. The whole-image network and the patch-scoring network share this
plan and differ only in input size and class count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import ConfigError, ShapeError, UsageError
from .util import new_rng

KERNEL = 3
POOL = 2

CONV_CHANNELS = (16, 32, 64, 64)
IMAGE_INPUT = 64
PATCH_INPUT = 32
GROUNDING_BLOCK = 3


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: square input, per-block channels, head width."""

    input_size: int
    channels: tuple[int, ...] = CONV_CHANNELS
    num_classes: int = 10
    in_channels: int = 3
    grounding_block: int = GROUNDING_BLOCK  # 1-based conv block index

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.input_size < POOL ** len(self.channels):
            raise ConfigError(
                f"input size {self.input_size} too small for {len(self.channels)} pool stages")
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError(f"invalid channel plan {self.channels}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if not 1 <= self.grounding_block <= len(self.channels):
            raise ConfigError(
                f"grounding block {self.grounding_block} not in 1..{len(self.channels)}")

    def descriptor(self) -> str:
        ch = ",".join(str(c) for c in self.channels)
        return (f"conv-gap-fc;in={self.in_channels}x{self.input_size};"
                f"ch={ch};gb={self.grounding_block};nc={self.num_classes}")

    @classmethod
    def from_descriptor(cls, text: str) -> "ModelSpec":
        try:
            parts = dict(p.split("=", 1) for p in text.split(";")[1:])
            in_ch, size = parts["in"].split("x")
            return cls(
                input_size=int(size),
                channels=tuple(int(c) for c in parts["ch"].split(",")),
                num_classes=int(parts["nc"]),
                in_channels=int(in_ch),
                grounding_block=int(parts["gb"]),
            )
        except (KeyError, ValueError, ConfigError) as exc:
            raise ConfigError(f"unparseable architecture descriptor: {text!r}") from exc


def conventional_spec(num_classes: int = 10) -> ModelSpec:
    """Whole-image classifier spec (64x64x3 input)."""
    return ModelSpec(input_size=IMAGE_INPUT, num_classes=num_classes)


def evidence_spec(num_classes: int = 10) -> ModelSpec:
    """Patch classifier spec (32x32x3 input)."""
    return ModelSpec(input_size=PATCH_INPUT, num_classes=num_classes)


@dataclass
class Trace:
    """Per-layer values recorded by one forward pass, consumed by backward/EB."""

    x: np.ndarray
    conv_in: list[np.ndarray] = field(default_factory=list)
    z: list[np.ndarray] = field(default_factory=list)
    a: list[np.ndarray] = field(default_factory=list)
    pool_idx: list[np.ndarray] = field(default_factory=list)
    pool_out: list[np.ndarray] = field(default_factory=list)
    feats: np.ndarray | None = None
    logits: np.ndarray | None = None


class Model:
    """Conv-block CNN with explicit parameters and a trace-based backward."""

    def __init__(self, spec: ModelSpec, blocks: list[layers.LayerParams],
                 fc: layers.LayerParams):
        self.spec = spec
        self.blocks = blocks
        self.fc = fc

    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0,
             dtype: np.dtype = np.float32) -> "Model":
        """Seeded uniform(-b, b) init with b = sqrt(6/(fan_in+fan_out)); zero biases."""
        rng = new_rng(seed)
        blocks = []
        in_ch = spec.in_channels
        for out_ch in spec.channels:
            fan_in = in_ch * KERNEL * KERNEL
            fan_out = out_ch * KERNEL * KERNEL
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, (out_ch, in_ch, KERNEL, KERNEL)).astype(dtype)
            blocks.append(layers.LayerParams(w, np.zeros(out_ch, dtype=dtype)))
            in_ch = out_ch
        feat = spec.channels[-1]
        bound = np.sqrt(6.0 / (feat + spec.num_classes))
        fw = rng.uniform(-bound, bound, (spec.num_classes, feat)).astype(dtype)
        fc = layers.LayerParams(fw, np.zeros(spec.num_classes, dtype=dtype))
        return cls(spec, blocks, fc)

    def clone(self) -> "Model":
        """Independent deep copy, momentum buffers included."""
        def cp(p: layers.LayerParams) -> layers.LayerParams:
            q = layers.LayerParams(p.w.copy(), p.b.copy())
            q.mw[:] = p.mw
            q.mb[:] = p.mb
            return q
        return Model(self.spec, [cp(b) for b in self.blocks], cp(self.fc))

    # -- parameter access ---------------------------------------------------

    def params(self) -> list[layers.LayerParams]:
        return [*self.blocks, self.fc]

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, blk in enumerate(self.blocks, start=1):
            out.append((f"block{i}.w", blk.w))
            out.append((f"block{i}.b", blk.b))
        out.append(("fc.w", self.fc.w))
        out.append(("fc.b", self.fc.b))
        return out

    @property
    def dtype(self):
        return self.fc.w.dtype

    @property
    def grounding_index(self) -> int:
        """0-based index of the grounding block."""
        return self.spec.grounding_block - 1

    # -- forward ------------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.in_channels, s.input_size, s.input_size):
            raise ShapeError(
                f"input shape {x.shape} does not match model input "
                f"(n,{s.in_channels},{s.input_size},{s.input_size})")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Lean forward pass (B,c,h,w) -> logits (B,C), no caches kept."""
        self._check_input(x)
        cur = x.astype(self.dtype, copy=False)
        for blk in self.blocks:
            cur = layers.conv2d_forward(cur, blk.w, blk.b, stride=1, padding=1)
            cur = layers.relu_forward(cur)
            cur, _ = layers.maxpool_forward(cur, POOL)
        feats = layers.gap_forward(cur)
        return layers.linear_forward(feats, self.fc.w, self.fc.b)

    def forward_trace(self, x: np.ndarray) -> Trace:
        """Forward pass recording every intermediate needed by backward and EB."""
        self._check_input(x)
        cur = x.astype(self.dtype, copy=False)
        tr = Trace(x=cur)
        for blk in self.blocks:
            tr.conv_in.append(cur)
            z = layers.conv2d_forward(cur, blk.w, blk.b, stride=1, padding=1)
            a = layers.relu_forward(z)
            cur, idx = layers.maxpool_forward(a, POOL)
            tr.z.append(z)
            tr.a.append(a)
            tr.pool_idx.append(idx)
            tr.pool_out.append(cur)
        tr.feats = layers.gap_forward(cur)
        tr.logits = layers.linear_forward(tr.feats, self.fc.w, self.fc.b)
        return tr

    def forward_from_block(self, block_index: int, acts: np.ndarray) -> np.ndarray:
        """Run the stack from block block_index's pooled output (0-based) to logits."""
        cur = acts
        for blk in self.blocks[block_index + 1:]:
            cur = layers.conv2d_forward(cur, blk.w, blk.b, stride=1, padding=1)
            cur = layers.relu_forward(cur)
            cur, _ = layers.maxpool_forward(cur, POOL)
        feats = layers.gap_forward(cur)
        return layers.linear_forward(feats, self.fc.w, self.fc.b)

    # -- backward -----------------------------------------------------------

    def backward(self, tr: Trace, dlogits: np.ndarray,
                 accumulate: bool = True, stop_block: int | None = None) -> np.ndarray:
        """Backpropagate dlogits through the trace.

        With accumulate=True, parameter gradients are added into the layer
        accumulators (training). With stop_block=i (0-based), propagation
        stops after reaching block i's pooled output and returns the
        gradient there; otherwise returns the gradient w.r.t. the input.
        """
        if tr is None or tr.feats is None or tr.logits is None:
            raise UsageError("backward called before a completed forward pass")
        dfeats, dfw, dfb = layers.linear_backward(dlogits, tr.feats, self.fc.w)
        if accumulate:
            self.fc.dw += dfw
            self.fc.db += dfb
        grad = layers.gap_backward(dfeats, tr.pool_out[-1].shape)
        for i in range(len(self.blocks) - 1, -1, -1):
            if stop_block is not None and i == stop_block:
                return grad
            blk = self.blocks[i]
            da = layers.maxpool_backward(grad, tr.pool_idx[i], tr.a[i].shape, POOL)
            dz = layers.relu_backward(da, tr.z[i])
            dx, dw, db = layers.conv2d_backward(
                dz, tr.conv_in[i], blk.w, stride=1, padding=1,
                need_dx=(i > 0 or stop_block is None), need_dw=accumulate)
            if accumulate:
                blk.dw += dw
                blk.db += db
            grad = dx
        return grad

    # -- prediction ---------------------------------------------------------

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        """(B,c,h,w) -> (B,C) probability rows."""
        return layers.softmax(self.forward(images))

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Single image (c,h,w) -> probability vector over classes."""
        if image.ndim != 3:
            raise ShapeError(f"predict expects one (c,h,w) image, got {image.shape}")
        return self.predict_batch(image[None])[0]


def topk(probs: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest probabilities, ties broken by ascending index."""
    probs = np.asarray(probs)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError(f"topk expects a probability vector, got shape {probs.shape}")
    if not 1 <= k <= probs.size:
        raise ValueError(f"k={k} out of range 1..{probs.size}")
    order = np.argsort(-probs, kind="stable")
    return [int(i) for i in order[:k]]
