"""Regional Correlation Score (RCS) and atlas assembly.

Each candidate label is cut into a ``u x v`` grid. Per region we measure the
share of the region covered by nodule (P) and the distance from the nodule
centroid to the region centre (D). Both are z-scored across the candidate
pool within the region, the score is ``z(P) - z(D)``, and the atlas keeps the
best-scoring candidate for every region.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class EmptyLabelError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    u: int
    v: int
    height: int
    width: int

    def __post_init__(self):
        if self.u < 1 or self.v < 1:
            raise ValueError(f"grid must have at least one region, got {self.u}x{self.v}")
        if self.u > self.height or self.v > self.width:
            raise ValueError(f"grid {self.u}x{self.v} is finer than the {self.height}x{self.width} image")

    @property
    def M(self) -> int:
        return self.u * self.v

    @staticmethod
    def _cuts(n: int, parts: int) -> list[int]:
        step = n // parts
        return [i * step for i in range(parts)] + [n]

    def bounds(self, m: int) -> tuple[int, int, int, int]:
        """(row0, row1, col0, col1), half-open; the last row/column of regions
        absorbs any remainder."""
        i, j = divmod(m, self.v)
        rc, cc = self._cuts(self.height, self.u), self._cuts(self.width, self.v)
        return rc[i], rc[i + 1], cc[j], cc[j + 1]

    def centroid(self, m: int) -> tuple[float, float]:
        r0, r1, c0, c1 = self.bounds(m)
        return (r0 + r1 - 1) / 2, (c0 + c1 - 1) / 2

    @classmethod
    def parse(cls, text: str, height: int, width: int) -> "GridSpec":
        try:
            u, v = (int(x) for x in text.lower().split("x"))
        except ValueError:
            raise ValueError(f"grid must look like UxV, got {text!r}") from None
        return cls(u, v, height, width)


@dataclass(frozen=True)
class RegionStats:
    proportion: float
    distance: float
    n_fg: int
    n_bg: int


def region_stats(label, grid: GridSpec) -> list[RegionStats]:
    lab = np.asarray(label) > 0.5
    if lab.shape != (grid.height, grid.width):
        raise ValueError(f"label shape {lab.shape} does not match grid {grid.height}x{grid.width}")
    fg = np.argwhere(lab)
    if len(fg) == 0:
        raise EmptyLabelError("empty label")
    cy, cx = fg.mean(axis=0)
    out = []
    for m in range(grid.M):
        r0, r1, c0, c1 = grid.bounds(m)
        n_fg = int(np.count_nonzero(lab[r0:r1, c0:c1]))
        n_bg = (r1 - r0) * (c1 - c0) - n_fg
        my, mx = grid.centroid(m)
        out.append(RegionStats(n_fg / (n_fg + n_bg), math.hypot(cx - mx, cy - my), n_fg, n_bg))
    return out


def _zscore(values: Sequence[float]) -> list[float]:
    # fsum keeps the result independent of candidate order
    n = len(values)
    mu = math.fsum(values) / n
    var = math.fsum((x - mu) ** 2 for x in values) / n
    sd = math.sqrt(var)
    if sd == 0 or sd < 1e-12 * max(1.0, abs(mu)):
        return [0.0] * n
    return [(x - mu) / sd for x in values]


@dataclass
class ScoreMatrix:
    ids: list[str]
    scores: dict[str, list[float]]
    excluded: set[str] = field(default_factory=set)

    def region(self, m: int) -> dict[str, float]:
        return {cid: self.scores[cid][m] for cid in self.ids}


def score(candidates: Sequence, grid: GridSpec, ids: Sequence[str] | None = None) -> ScoreMatrix:
    """RCS of every candidate label for every region.

    Candidates with an empty label are listed in ``excluded`` and not scored.
    """
    ids = [str(i) for i in (ids if ids is not None else range(len(candidates)))]
    if len(set(ids)) != len(ids):
        raise ValueError("candidate ids must be unique")
    stats: dict[str, list[RegionStats]] = {}
    excluded = set()
    for cid, lab in zip(ids, candidates):
        try:
            stats[cid] = region_stats(lab, grid)
        except EmptyLabelError:
            excluded.add(cid)
    usable = [cid for cid in ids if cid in stats]
    if len(usable) < 2:
        raise ValueError(f"RCS needs at least 2 candidates with a nodule, got {len(usable)}")
    scores = {cid: [0.0] * grid.M for cid in usable}
    for m in range(grid.M):
        zp = _zscore([stats[c][m].proportion for c in usable])
        zd = _zscore([stats[c][m].distance for c in usable])
        for c, a, b in zip(usable, zp, zd):
            scores[c][m] = a - b
    return ScoreMatrix(usable, scores, excluded)


@dataclass(frozen=True)
class AtlasElement:
    region: int
    source_id: str
    image: np.ndarray
    label: np.ndarray
    score: float | None = None
    image_path: str | None = None
    label_path: str | None = None


@dataclass
class Atlas:
    grid: GridSpec
    elements: list[AtlasElement]

    @property
    def M(self) -> int:
        return len(self.elements)

    def images(self) -> np.ndarray:
        return np.stack([e.image for e in self.elements])

    def labels(self) -> np.ndarray:
        return np.stack([e.label for e in self.elements])

    def source_ids(self) -> list[str]:
        return [e.source_id for e in self.elements]

    def to_json(self) -> str:
        doc = {
            "grid": {"u": self.grid.u, "v": self.grid.v},
            "elements": [
                {
                    "region": e.region,
                    "source_id": e.source_id,
                    "image_path": e.image_path,
                    "label_path": e.label_path,
                    "score": e.score,
                }
                for e in self.elements
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _argmax_lowest_id(region_scores: dict[str, float]) -> str:
    best = max(region_scores.values())
    return min(cid for cid, s in region_scores.items() if s == best)


def assemble(candidates: Sequence, grid: GridSpec) -> Atlas:
    """Pick the highest-RCS candidate per region (ties -> lowest id).

    ``candidates`` are objects with ``id``, ``image`` and ``label`` attributes
    (e.g. :class:`astn.phantoms.Sample`).
    """
    if not candidates:
        raise ValueError("no atlas candidates")
    ids = [c.id for c in candidates]
    by_id = {c.id: c for c in candidates}
    if grid.M == 1:
        usable = [c for c in candidates if np.any(np.asarray(c.label) > 0.5)]
        if not usable:
            raise ValueError("no usable candidate for region 0")
        if len(usable) == 1:
            c = usable[0]
            return Atlas(grid, [_element(0, c, 0.0)])
    sm = score([c.label for c in candidates], grid, ids)
    elements = []
    for m in range(grid.M):
        region_scores = sm.region(m)
        if not region_scores:
            raise ValueError(f"no usable candidate for region {m}")
        cid = _argmax_lowest_id(region_scores)
        elements.append(_element(m, by_id[cid], region_scores[cid]))
    return Atlas(grid, elements)


def _element(m: int, c, s: float | None) -> AtlasElement:
    return AtlasElement(
        region=m,
        source_id=c.id,
        image=np.asarray(c.image),
        label=(np.asarray(c.label) > 0.5).astype(np.uint8),
        score=s,
        image_path=getattr(c, "image_path", None),
        label_path=getattr(c, "label_path", None),
    )


def random_atlas(candidates: Sequence, grid: GridSpec, seed: int) -> Atlas:
    """Uniformly drawn atlas (no RCS), for the ablation."""
    usable = sorted((c for c in candidates if np.any(np.asarray(c.label) > 0.5)), key=lambda c: c.id)
    if len(usable) < grid.M:
        raise ValueError(f"need {grid.M} usable candidates, have {len(usable)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(usable), size=grid.M, replace=False)
    return Atlas(grid, [_element(m, usable[int(i)], None) for m, i in enumerate(picks)])


def write_atlas(atlas: Atlas, path) -> None:
    Path(path).write_text(atlas.to_json(), encoding="utf-8")


def read_atlas(path, loader) -> Atlas:
    """Load ``atlas.json``; ``loader(image_path, label_path)`` returns the
    (image, label) arrays. Relative paths resolve against the file's folder."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    elements = []
    shape = None
    for e in sorted(doc["elements"], key=lambda e: e["region"]):
        img_p = _resolve(path.parent, e["image_path"])
        lab_p = _resolve(path.parent, e["label_path"])
        img, lab = loader(img_p, lab_p)
        shape = img.shape
        elements.append(
            AtlasElement(e["region"], e["source_id"], img, lab, e.get("score"), e["image_path"], e["label_path"])
        )
    if shape is None:
        raise ValueError(f"{path}: atlas has no elements")
    grid = GridSpec(doc["grid"]["u"], doc["grid"]["v"], shape[0], shape[1])
    if [e.region for e in elements] != list(range(grid.M)):
        raise ValueError(f"{path}: expected exactly one element per region 0..{grid.M - 1}")
    return Atlas(grid, elements)


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q
