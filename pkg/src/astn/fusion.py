"""Label fusion: DSC-weighted fusion against the initial segmentation, plus
majority vote and STAPLE baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .metrics import dsc

CLAMP = 1e-6


@dataclass(frozen=True)
class FusionWeights:
    v0: float
    v: tuple[float, ...]
    normalized: bool = True
    dsc: tuple[float, ...] = ()

    def as_array(self) -> np.ndarray:
        return np.array((self.v0,) + tuple(self.v))

    def total(self) -> float:
        return math.fsum((self.v0,) + tuple(self.v))


def astn_weights(seg_init, warped: Sequence, threshold: float = 0.5) -> FusionWeights:
    """Weight each warped label by its DSC against the initial segmentation.

    ``v0 = 1/(M+1)`` is the initial segmentation's own weight and each warped
    label gets ``D_a / (v0 + sum D)``. Those M+1 numbers do not sum to one in
    general, so they are rescaled to a convex combination.
    """
    warped = list(warped)
    if not warped:
        raise ValueError("need at least one warped label")
    seg_bin = np.asarray(seg_init) >= threshold
    d = tuple(float(dsc(np.asarray(w) >= threshold, seg_bin)) for w in warped)
    v0 = 1.0 / (len(warped) + 1)
    denom = v0 + math.fsum(d)
    raw = [v0] + [da / denom for da in d]
    s = math.fsum(raw)
    return FusionWeights(v0=raw[0] / s, v=tuple(x / s for x in raw[1:]), normalized=True, dsc=d)


def fuse_soft(seg_init, warped: Sequence, w: FusionWeights) -> np.ndarray:
    if not w.normalized or abs(w.total() - 1.0) > 1e-9:
        raise ValueError(f"fusion weights must be normalized (sum={w.total():.12g})")
    if any(x < 0 for x in (w.v0,) + tuple(w.v)):
        raise ValueError("fusion weights must be non-negative")
    if len(w.v) != len(warped):
        raise ValueError(f"{len(w.v)} weights for {len(warped)} warped labels")
    out = w.v0 * np.asarray(seg_init, dtype=np.float64)
    for va, wa in zip(w.v, warped):
        out = out + va * np.asarray(wa, dtype=np.float64)
    return out


def fuse(seg_init, warped: Sequence, w: FusionWeights, threshold: float = 0.5) -> np.ndarray:
    return (fuse_soft(seg_init, warped, w) >= threshold).astype(np.uint8)


def majority_vote(labels: Sequence) -> np.ndarray:
    """Strict majority; an exact tie goes to background."""
    stack = np.stack([np.asarray(l) > 0.5 for l in labels])
    if len(stack) == 0:
        raise ValueError("majority_vote needs at least one label")
    return (2 * stack.sum(axis=0) > len(stack)).astype(np.uint8)


@dataclass
class RaterModel:
    sensitivity: np.ndarray
    specificity: np.ndarray
    prior: np.ndarray
    posterior: np.ndarray
    iterations: int = 0
    log_likelihood: list[float] = field(default_factory=list)


def _staple_estep(D: np.ndarray, p: np.ndarray, q: np.ndarray, prior: np.ndarray):
    # D: [R, N] votes in {0,1}
    fg = np.where(D, p[:, None], 1 - p[:, None]).prod(axis=0)
    bg = np.where(D, 1 - q[:, None], q[:, None]).prod(axis=0)
    a = prior * fg
    b = (1 - prior) * bg
    return a / (a + b), a + b


def staple(labels: Sequence, tol: float = 1e-6, max_iter: int = 50, threshold: float = 0.5):
    """Binary STAPLE (EM over a latent true mask and per-rater sensitivity/specificity).

    The per-pixel prior is the mean vote, clamped to [0.05, 0.95], and stays
    fixed. Returns the thresholded posterior and the fitted rater model; the
    model's ``log_likelihood`` holds the observed-data log-likelihood at the
    start of every iteration.
    """
    labels = [np.asarray(l) > 0.5 for l in labels]
    if len(labels) < 2:
        raise ValueError("STAPLE needs at least two raters")
    shape = labels[0].shape
    D = np.stack([l.reshape(-1) for l in labels])
    R = len(labels)
    prior = np.clip(D.mean(axis=0), 0.05, 0.95)
    p = np.full(R, 0.99)
    q = np.full(R, 0.99)
    history: list[float] = []
    W = prior
    it = 0
    for it in range(1, max_iter + 1):
        W, evidence = _staple_estep(D, p, q, prior)
        history.append(float(np.log(evidence).sum()))
        # correctly rounded sums: the fit does not depend on summation order
        sw, sb = math.fsum(W), math.fsum(1 - W)
        p_new = np.array([math.fsum(d * W) for d in D]) / sw if sw > 0 else p.copy()
        q_new = np.array([math.fsum(~d * (1 - W)) for d in D]) / sb if sb > 0 else q.copy()
        p_new = np.clip(p_new, CLAMP, 1 - CLAMP)
        q_new = np.clip(q_new, CLAMP, 1 - CLAMP)
        delta = np.max(np.abs(p_new - p) + np.abs(q_new - q))
        p, q = p_new, q_new
        if delta < tol:
            break
    W, evidence = _staple_estep(D, p, q, prior)
    history.append(float(np.log(evidence).sum()))
    model = RaterModel(p, q, prior.reshape(shape), W.reshape(shape), it, history)
    return (W.reshape(shape) >= threshold).astype(np.uint8), model
