"""Overlap and boundary-distance metrics for binary masks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

METRICS = ("dsc", "iou", "hd", "assd")


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p) > 0.5
    q = np.asarray(q) > 0.5
    if p.shape != q.shape:
        raise ValueError(f"mask extents differ: {p.shape} vs {q.shape}")
    return p, q


def _counts(p, q) -> tuple[int, int, int]:
    p, q = _pair(p, q)
    tp = int(np.count_nonzero(p & q))
    fp = int(np.count_nonzero(p & ~q))
    fn = int(np.count_nonzero(~p & q))
    return tp, fp, fn


def dsc(p, q) -> float:
    tp, fp, fn = _counts(p, q)
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def iou(p, q) -> float:
    tp, fp, fn = _counts(p, q)
    if tp + fp + fn == 0:
        return 1.0
    return tp / (tp + fp + fn)


def boundary(mask) -> np.ndarray:
    """(row, col) of foreground pixels with a background 4-neighbour.

    Pixels on the image border count as touching background.
    """
    m = np.asarray(mask) > 0.5
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return np.argwhere(m & ~interior).astype(np.float64)


def _nearest(p, q) -> tuple[np.ndarray, np.ndarray]:
    p, q = _pair(p, q)
    bp, bq = boundary(p), boundary(q)
    if len(bp) == 0 or len(bq) == 0:
        raise ValueError("distance metrics are undefined for an empty mask")
    d = cdist(bp, bq)
    return d.min(axis=1), d.min(axis=0)


def hd(p, q) -> float:
    a, b = _nearest(p, q)
    return float(max(a.max(), b.max()))


def _mean(x: np.ndarray) -> float:
    # exactly rounded, so the result does not depend on summation order
    return math.fsum(x.tolist()) / len(x)


def assd(p, q) -> float:
    a, b = _nearest(p, q)
    return (_mean(a) + _mean(b)) / 2


def evaluate(pred, truth) -> dict[str, float | None]:
    """All four metrics; distances are ``None`` when either mask is empty."""
    row: dict[str, float | None] = {"dsc": dsc(pred, truth), "iou": iou(pred, truth)}
    try:
        a, b = _nearest(pred, truth)
    except ValueError:
        row["hd"] = row["assd"] = None
    else:
        row["hd"] = float(max(a.max(), b.max()))
        row["assd"] = (_mean(a) + _mean(b)) / 2
    return row


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, sample_id: str, pred, truth, **extra) -> dict:
        row = {"id": sample_id, **evaluate(pred, truth), **extra}
        self.rows.append(row)
        return row

    def aggregate(self) -> dict[str, dict]:
        out = {}
        for name in METRICS:
            vals = [r[name] for r in self.rows if r.get(name) is not None]
            undefined = len(self.rows) - len(vals)
            if vals:
                mean = math.fsum(vals) / len(vals)
                std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals))
            else:
                mean = std = None
            out[name] = {"mean": mean, "std": std, "undefined_count": undefined}
        return out

    def to_json(self) -> str:
        doc = {"meta": self.meta, "aggregate": self.aggregate(), "samples": self.rows}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def summary(self) -> str:
        agg = self.aggregate()
        parts = []
        for name in METRICS:
            a = agg[name]
            if a["mean"] is None:
                parts.append(f"{name.upper()} n/a")
            elif name in ("dsc", "iou"):
                parts.append(f"{name.upper()} {100 * a['mean']:.2f}±{100 * a['std']:.2f}")
            else:
                parts.append(f"{name.upper()} {a['mean']:.3f}±{a['std']:.3f}")
        return "  ".join(parts)
