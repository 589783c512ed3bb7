"""Independent oracles the tests check library code against.

Everything here is deliberately written the slow, obvious way (explicit
loops, pure Python accumulation) so it shares no code path with the
implementations it verifies.
"""

from __future__ import annotations

import numpy as np


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f with respect to array x."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def conv2d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                 stride: int = 1, padding: int = 0) -> np.ndarray:
    """Quadruple-loop convolution (cross-correlation), the textbook way."""
    bs, cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    assert cin == cin2
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    out = np.zeros((bs, cout, oh, ow), dtype=np.float64)
    for n in range(bs):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                acc += float(x[n, c, i * stride + p, j * stride + q]) \
                                    * float(w[o, c, p, q])
                    out[n, o, i, j] = acc + float(b[o])
    return out


def maxpool_naive(x: np.ndarray, size: int = 2) -> np.ndarray:
    bs, c, h, w = x.shape
    oh, ow = h // size, w // size
    out = np.empty((bs, c, oh, ow), dtype=x.dtype)
    for n in range(bs):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[n, ch, i, j] = x[n, ch, i * size:(i + 1) * size,
                                         j * size:(j + 1) * size].max()
    return out


def refine_oracle(v0_row, evidence_rows, weights, k):
    """Straight-line scalar re-implementation of candidate re-ranking.

    v0_row: length-C posteriors. evidence_rows: list over levels of length-k
    rows (evidence posterior of each candidate at that level, None = skipped).
    Returns (candidates, tots, winner). Must match the engine bitwise.
    """
    order = sorted(range(len(v0_row)), key=lambda t: (-v0_row[t], t))
    cand = order[:k]
    tots = []
    for rank, t in enumerate(cand):
        tot = np.float64(weights[0]) * np.float64(v0_row[t])
        for level, row in enumerate(evidence_rows):
            v = row[rank]
            if v is not None:
                tot = tot + np.float64(weights[1 + level]) * np.float64(v)
        tots.append(float(tot))
    best = 0
    for rank in range(1, len(cand)):
        if tots[rank] > tots[best]:
            best = rank
    return cand, tots, cand[best]


def gradcam_alpha_fd(model, block_acts: np.ndarray, block_index: int,
                     class_id: int, eps: float = 1e-4) -> np.ndarray:
    """Channel weights by finite differences through forward_from_block.

    Perturbing one whole channel by +/-eps measures the summed gradient of
    the class logit over that channel; dividing by the cell count gives the
    spatial-mean gradient.
    """
    k = block_acts.shape[0]
    hw = block_acts.shape[1] * block_acts.shape[2]
    alpha = np.zeros(k, dtype=np.float64)
    for ch in range(k):
        up = block_acts.copy()
        up[ch] += eps
        down = block_acts.copy()
        down[ch] -= eps
        lp = model.forward_from_block(block_index, up[None])[0, class_id]
        lm = model.forward_from_block(block_index, down[None])[0, class_id]
        alpha[ch] = (lp - lm) / (2 * eps) / hw
    return alpha
