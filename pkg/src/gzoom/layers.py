"""Dense-tensor layer math with explicit forward and backward passes.

Tensors are plain numpy arrays in [batch, channel, height, width] layout
(row-major). float32 is the working precision; passing float64 arrays runs
the same code at 64-bit for verification. Each forward returns everything
its backward needs as explicit values, so inference over a shared parameter
set never mutates state and is safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LayerParams:
    """Weights and bias of one layer plus gradient and momentum buffers."""

    w: np.ndarray
    b: np.ndarray
    dw: np.ndarray = field(init=False)
    db: np.ndarray = field(init=False)
    mw: np.ndarray = field(init=False)
    mb: np.ndarray = field(init=False)

    def __post_init__(self):
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self.mw = np.zeros_like(self.w)
        self.mb = np.zeros_like(self.b)

    def zero_grad(self) -> None:
        self.dw.fill(0)
        self.db.fill(0)


def sgd_step(params: list[LayerParams], lr: float, momentum: float) -> None:
    """Momentum SGD update: buf = momentum*buf + grad; w -= lr*buf.

    Gradient accumulators are zeroed afterwards so the next backward pass
    starts clean.
    """
    for p in params:
        p.mw *= momentum
        p.mw += p.dw
        p.w -= lr * p.mw
        p.mb *= momentum
        p.mb += p.db
        p.b -= lr * p.mb
        p.zero_grad()


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            oh: int, ow: int) -> np.ndarray:
    """Unfold padded input (B,C,H,W) into columns (B, C*kh*kw, oh*ow)."""
    b, c, _, _ = xp.shape
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, oh, ow),
        strides=(s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
        writeable=False,
    )
    return view.reshape(b, c * kh * kw, oh * ow)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                   stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation of x (B,C,H,W) with kernels w (O,C,kh,kw) plus bias.

    Output spatial dims are floor((in + 2*padding - k)/stride) + 1.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, c, h, wd = x.shape
    oc, kc, kh, kw = w.shape
    if kc != c:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c}")
    if b.shape != (oc,):
        raise ShapeError(f"bias shape {b.shape} does not match {oc} output channels")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wd + 2 * padding}")

    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(wd, kw, stride, padding)
    xp = x if padding == 0 else np.pad(
        x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = np.matmul(w.reshape(oc, -1), cols)
    out += b[:, None]
    return out.reshape(bsz, oc, oh, ow)


def conv2d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray,
                    stride: int = 1, padding: int = 0,
                    need_dx: bool = True, need_dw: bool = True):
    """Gradients of conv2d_forward w.r.t. input, kernel and bias.

    Returns (dx, dw, db); entries the caller did not request are None.
    """
    bsz, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    _, _, oh, ow = dy.shape
    dyf = dy.reshape(bsz, oc, oh * ow)

    dw_out = db_out = dx = None
    if need_dw:
        xp = x if padding == 0 else np.pad(
            x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = _im2col(xp, kh, kw, stride, oh, ow)
        dw_out = np.einsum("bop,bkp->ok", dyf, cols, optimize=True).reshape(w.shape)
        db_out = dy.sum(axis=(0, 2, 3))
    if need_dx:
        dcols = np.matmul(w.reshape(oc, -1).T, dyf)
        dx = _col2im(dcols, (bsz, c, h, wd), kh, kw, stride, padding, oh, ow)
    return dx, dw_out, db_out


def _col2im(dcols: np.ndarray, x_shape, kh, kw, stride, padding, oh, ow) -> np.ndarray:
    """Scatter-add columns (B, C*kh*kw, oh*ow) back to an input-shaped array."""
    bsz, c, h, wd = x_shape
    dxp = np.zeros((bsz, c, h + 2 * padding, wd + 2 * padding), dtype=dcols.dtype)
    d6 = dcols.reshape(bsz, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += d6[:, :, i, j]
    if padding == 0:
        return dxp
    return dxp[:, :, padding:-padding, padding:-padding]


# ---------------------------------------------------------------------------
# elementwise / pooling


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def maxpool_forward(x: np.ndarray, size: int = 2):
    """Max pooling with window == stride == size.

    Returns (out, idx) where idx holds each window's argmax in row-major
    window order; ties resolve to the earliest element. Trailing rows and
    columns that do not fill a window are dropped (floor semantics).
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects 4-D input, got {x.shape}")
    bsz, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool window {size} larger than input {h}x{w}")
    xc = x[:, :, :oh * size, :ow * size]
    win = xc.reshape(bsz, c, oh, size, ow, size)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, oh, ow, size * size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dy: np.ndarray, idx: np.ndarray, x_shape, size: int = 2) -> np.ndarray:
    """Route gradient to each window's argmax position only."""
    bsz, c, h, w = x_shape
    oh, ow = h // size, w // size
    flat = np.zeros((bsz, c, oh, ow, size * size), dtype=dy.dtype)
    np.put_along_axis(flat, idx[..., None], dy[..., None], axis=-1)
    dxc = flat.reshape(bsz, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :, :oh * size, :ow * size] = dxc.reshape(bsz, c, oh * size, ow * size)
    return dx


def gap_forward(x: np.ndarray) -> np.ndarray:
    """Global average pool (B,C,H,W) -> (B,C)."""
    return x.mean(axis=(2, 3))


def gap_backward(dy: np.ndarray, x_shape) -> np.ndarray:
    bsz, c, h, w = x_shape
    scale = np.asarray(1.0 / (h * w), dtype=dy.dtype)
    return np.broadcast_to((dy * scale)[:, :, None, None], x_shape).copy()


# ---------------------------------------------------------------------------
# fully connected


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (B,F) times w (O,F) transposed, plus bias (O,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shapes incompatible: x {x.shape}, w {w.shape}")
    return x @ w.T + b


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# softmax / loss


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-shift; accepts a vector or a (B,C) matrix."""
    x = np.asarray(logits)
    if x.size == 0:
        raise ShapeError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains NaN or Inf")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy over a batch.

    Returns (loss, dlogits) where dlogits = (softmax - onehot) / batch.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy shapes: logits {logits.shape}, labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError("label outside class range")
    probs = softmax(logits)
    bsz = logits.shape[0]
    eps = np.finfo(probs.dtype).tiny
    loss = float(-np.log(probs[np.arange(bsz), labels] + eps).mean())
    dlogits = probs.copy()
    dlogits[np.arange(bsz), labels] -= 1
    dlogits /= bsz
    return loss, dlogits
