"""Top-k decision refinement with zoomed-in evidence.

The whole-image classifier proposes k candidate classes. For each candidate
the grounding method asks "where would the evidence for this class be",
the patch under the saliency peak is zoomed and scored by the evidence
classifier, the peak is erased, and the cycle repeats for the configured
number of levels. Whole-image and patch posteriors combine as a weighted
sum and the best-scoring candidate wins.

A candidate whose map degenerates at some level simply stops collecting
evidence there; the skip is recorded, never scored as zero weight shifted
elsewhere. Totals accumulate in float64 in a fixed order (whole-image term
first, then levels in order), so a scalar re-implementation must match
bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, ShapeError
from .grounding import (GroundingConfig, erase_batch, extract_patch,
                        ground_grids, peak_grid, rise_masks)
from .layers import softmax
from .training import eval_view


@dataclass(frozen=True)
class RefinementConfig:
    """k candidates, erasing depth, and mixing weights.

    weights[0] scales the whole-image posterior, weights[1 + l] the level-l
    evidence posterior, so len(weights) == levels + 2. Weights are
    non-negative, sum to 1, and evidence weights must not increase with
    level (earlier evidence is never outweighed by later, weaker evidence).
    """

    k: int = 3
    levels: int = 2
    weights: tuple = (0.4, 0.3, 0.2, 0.1)

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.levels < 0:
            raise ConfigError(f"levels must be >= 0, got {self.levels}")
        w = tuple(float(v) for v in self.weights)
        object.__setattr__(self, "weights", w)
        if len(w) != self.levels + 2:
            raise ConfigError(
                f"need {self.levels + 2} weights for levels={self.levels}, got {len(w)}")
        if any(v < 0 for v in w):
            raise ConfigError(f"weights must be non-negative: {w}")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ConfigError(f"weights must sum to 1, got {sum(w)!r}")
        ev = w[1:]
        if any(ev[i] < ev[i + 1] for i in range(len(ev) - 1)):
            raise ConfigError(f"evidence weights must be non-increasing: {ev}")


@dataclass
class RefinementTrace:
    """Everything one image's refinement looked at."""

    candidates: np.ndarray  # (k,) class ids, best first
    v0: np.ndarray  # (k,) whole-image posterior of each candidate
    evidence: np.ndarray  # (levels+1, k) patch posteriors, NaN where skipped
    tot: np.ndarray  # (k,) combined scores
    decision: int
    baseline: int
    skipped: list = field(default_factory=list)  # (level, candidate_rank)


def _probs(model, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Class posteriors; stubs may provide probs_batch directly."""
    if hasattr(model, "probs_batch"):
        return np.asarray(model.probs_batch(x))
    out = []
    for s in range(0, len(x), batch):
        out.append(softmax(model.forward(x[s:s + batch])))
    return np.concatenate(out)


def _topk_batch(probs: np.ndarray, k: int) -> np.ndarray:
    if k > probs.shape[1]:
        raise ConfigError(f"k={k} exceeds {probs.shape[1]} classes")
    return np.argsort(-probs, axis=1, kind="stable")[:, :k]


def _refine_chunk(conv_model, evidence_model, images: np.ndarray,
                  cfg: RefinementConfig, gcfg: GroundingConfig,
                  grounder, masks):
    """Refine a (B,c,h,w) chunk; returns preds, cand, v0, ev, tot, skipped."""
    B = len(images)
    k, L = cfg.k, cfg.levels
    v0 = _probs(conv_model, images)
    cand = _topk_batch(v0, k)
    cand_flat = cand.reshape(-1)

    work = np.repeat(images, k, axis=0)
    active = np.ones(B * k, dtype=bool)
    prev_peak = np.zeros((B * k, 2), dtype=np.int64)
    ev = np.full((L + 1, B, k), np.nan)
    skipped: list = []

    tot = cfg.weights[0] * v0[np.arange(B)[:, None], cand].astype(np.float64)

    ev_input = getattr(getattr(evidence_model, "spec", None), "input_size", None)
    for level in range(L + 1):
        if level > 0:
            erase_batch(work, prev_peak, gcfg.erase_size, active)
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        grids = grounder(conv_model, work[idx], cand_flat[idx], gcfg, masks=masks)
        survivors = []
        patches = []
        for j, s in enumerate(idx):
            pk = peak_grid(grids[j])
            if pk is None:
                active[s] = False
                skipped.append((level, int(s // k), int(s % k)))
                continue
            survivors.append(s)
            prev_peak[s] = pk
            patches.append(extract_patch(work[s], pk, gcfg.patch_size))
        if not survivors:
            continue
        stack = np.stack(patches)
        views = eval_view(stack, ev_input) if ev_input else stack
        probs_e = _probs(evidence_model, views)
        sv = np.asarray(survivors)
        v = probs_e[np.arange(len(sv)), cand_flat[sv]].astype(np.float64)
        tot[sv // k, sv % k] += cfg.weights[1 + level] * v
        ev[level, sv // k, sv % k] = v

    preds = cand[np.arange(B), np.argmax(tot, axis=1)]
    return preds, cand, v0, ev, tot, skipped


def refine(conv_model, evidence_model, image: np.ndarray,
           cfg: RefinementConfig, gcfg: GroundingConfig,
           grounder=None, masks=None) -> tuple[int, RefinementTrace]:
    """Refine one image (already at the classifier's input size)."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected one (c,h,w) image, got shape {image.shape}")
    if grounder is None:
        grounder = ground_grids
    preds, cand, v0, ev, tot, skipped = _refine_chunk(
        conv_model, evidence_model, image[None], cfg, gcfg, grounder, masks)
    trace = RefinementTrace(
        candidates=cand[0],
        v0=v0[0, cand[0]],
        evidence=ev[:, 0, :],
        tot=tot[0],
        decision=int(preds[0]),
        baseline=int(cand[0, 0]),
        skipped=[(lv, rank) for lv, b, rank in skipped],
    )
    return int(preds[0]), trace


@dataclass
class MetricsReport:
    count: int
    k: int
    levels: int
    weights: tuple
    baseline_top1: float
    baseline_topk: float
    refined_top1: float
    changed: dict
    per_class: dict
    skipped_levels: int

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "k": self.k,
            "levels": self.levels,
            "weights": list(self.weights),
            "baseline_top1": self.baseline_top1,
            "baseline_topk": self.baseline_topk,
            "refined_top1": self.refined_top1,
            "changed": dict(self.changed),
            "per_class": {str(c): dict(v) for c, v in self.per_class.items()},
            "skipped_levels": self.skipped_levels,
        }


def evaluate(conv_model, evidence_model, dataset: Dataset,
             cfg: RefinementConfig, gcfg: GroundingConfig,
             batch: int = 32, grounder=None) -> MetricsReport:
    """Refine a whole split and compare against the baseline decision."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if grounder is None:
        grounder = ground_grids
    input_size = conv_model.spec.input_size
    images = eval_view(dataset.images, input_size)
    labels = np.asarray(dataset.labels, dtype=np.int64)

    masks = None
    if gcfg.method == "rise":
        masks = rise_masks(gcfg.rise, input_size)

    n = len(images)
    refined = np.empty(n, dtype=np.int64)
    baseline = np.empty(n, dtype=np.int64)
    in_topk = np.zeros(n, dtype=bool)
    skipped_total = 0
    for s in range(0, n, batch):
        chunk = images[s:s + batch]
        preds, cand, v0, ev, tot, skipped = _refine_chunk(
            conv_model, evidence_model, chunk, cfg, gcfg, grounder, masks)
        refined[s:s + batch] = preds
        baseline[s:s + batch] = cand[:, 0]
        in_topk[s:s + batch] = (cand == labels[s:s + batch, None]).any(axis=1)
        skipped_total += len(skipped)

    base_right = baseline == labels
    ref_right = refined == labels
    changed = {
        "improved": int(np.sum(~base_right & ref_right)),
        "harmed": int(np.sum(base_right & ~ref_right)),
        "neutral": int(np.sum((baseline != refined) & ~base_right & ~ref_right)),
    }
    per_class: dict = {}
    for c in range(dataset.num_classes):
        m = labels == c
        if not m.any():
            continue
        per_class[c] = {
            "count": int(m.sum()),
            "baseline": float(base_right[m].mean()),
            "refined": float(ref_right[m].mean()),
        }
    return MetricsReport(
        count=n,
        k=cfg.k,
        levels=cfg.levels,
        weights=cfg.weights,
        baseline_top1=float(base_right.mean()),
        baseline_topk=float(in_topk.mean()),
        refined_top1=float(ref_right.mean()),
        changed=changed,
        per_class=per_class,
        skipped_levels=skipped_total,
    )
