"""Synthetic ultrasound-like nodule phantoms and their on-disk formats.

Images are 8-bit binary PGM (P5), masks are PGM with values {0, 255}, and a
``manifest.json`` lists ``{id, image_path, label_path, domain, split}``
records with paths relative to the manifest's folder.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

MIN_SIZE = 16


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class DomainProfile:
    background_mean: float
    background_texture_scale: float
    nodule_contrast: float
    speckle_strength: float
    blur_radius: float
    gain_gamma: float

    def __post_init__(self):
        vals = asdict(self).values()
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("profile parameters must be finite")
        if not -0.3 <= self.nodule_contrast <= 0.3:
            raise ValueError("nodule_contrast must lie in [-0.3, 0.3]")
        if self.gain_gamma <= 0:
            raise ValueError("gain_gamma must be positive")


# Two "devices": B is brighter, noisier, blurrier and lower contrast than A.
PROFILES = {
    "a": DomainProfile(
        background_mean=0.45,
        background_texture_scale=0.07,
        nodule_contrast=-0.22,
        speckle_strength=0.30,
        blur_radius=0.8,
        gain_gamma=1.0,
    ),
    "b": DomainProfile(
        background_mean=0.52,
        background_texture_scale=0.09,
        nodule_contrast=-0.17,
        speckle_strength=0.38,
        blur_radius=1.1,
        gain_gamma=0.85,
    ),
}


@dataclass
class Sample:
    id: str
    image: np.ndarray
    label: np.ndarray
    domain: str
    split: str
    image_path: str | None = None
    label_path: str | None = None


def _ellipse(size: int, rng: np.random.Generator) -> np.ndarray:
    a, b = rng.uniform(0.08, 0.35, size=2) * size
    theta = rng.uniform(0, np.pi)
    # half extents of the rotated ellipse's bounding box keep it inside the frame
    hy = np.sqrt((a * np.sin(theta)) ** 2 + (b * np.cos(theta)) ** 2)
    hx = np.sqrt((a * np.cos(theta)) ** 2 + (b * np.sin(theta)) ** 2)
    cy = rng.uniform(hy, size - 1 - hy)
    cx = rng.uniform(hx, size - 1 - hx)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if not mask.any():
        mask[int(round(cy)), int(round(cx))] = True
    return mask


def _one(size: int, profile: DomainProfile, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    mask = _ellipse(size, rng)
    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16)
    texture /= texture.std() + 1e-12
    img = profile.background_mean + profile.background_texture_scale * texture
    # soft-edged nodule so the boundary is not a free giveaway
    img = img + profile.nodule_contrast * gaussian_filter(mask.astype(np.float64), sigma=1.0)
    speckle = rng.rayleigh(scale=np.sqrt(2 / np.pi), size=(size, size))  # unit mean
    img = img * (1 + profile.speckle_strength * (speckle - 1))
    if profile.blur_radius > 0:
        img = gaussian_filter(img, sigma=profile.blur_radius)
    img = np.clip(img, 0.0, 1.0) ** profile.gain_gamma
    # quantize now so in-memory samples equal their PGM round trip
    return np.rint(np.clip(img, 0.0, 1.0) * 255) / 255, mask.astype(np.uint8)


def generate(
    count: int,
    profile: DomainProfile,
    size: int = 64,
    seed: int = 0,
    domain: str = "a",
    split: str = "train",
) -> list[Sample]:
    """``count`` single-nodule phantoms; deterministic in all arguments."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if size < MIN_SIZE:
        raise ValueError(f"size must be >= {MIN_SIZE}, got {size}")
    children = np.random.SeedSequence(seed).spawn(count)
    out = []
    for i, ss in enumerate(children):
        img, lab = _one(size, profile, np.random.default_rng(ss))
        out.append(Sample(f"{domain}-{split}-{i:04d}", img, lab, domain, split))
    return out


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the corner-aligned convention: output corners
    sample input corners exactly."""
    img = np.asarray(img, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be positive")
    h, w = img.shape

    def axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def resize_label(label, out_h: int, out_w: int) -> np.ndarray:
    return (resize_bilinear(label, out_h, out_w) >= 0.5).astype(np.uint8)


# -- PGM -------------------------------------------------------------------------

def to_bytes8(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def write_pgm(path, img) -> None:
    data = to_bytes8(img)
    if data.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {data.shape}")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(data).tobytes())


def write_mask(path, label) -> None:
    write_pgm(path, (np.asarray(label) > 0.5).astype(np.uint8) * 255)


def _header_tokens(buf: bytes, n: int) -> tuple[list[tuple[bytes, int]], int]:
    toks, i = [], 0
    while len(toks) < n:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise FormatError(f"truncated PGM header at byte {start}")
        toks.append((buf[start:i], start))
    return toks, i + 1  # single whitespace byte ends the header


def read_pgm_bytes(path) -> np.ndarray:
    """Raw 8-bit pixel array of a P5 file."""
    buf = Path(path).read_bytes()
    toks, offset = _header_tokens(buf, 4)
    (magic, m_at), (w, w_at), (h, h_at), (maxval, v_at) = toks
    if magic != b"P5":
        raise FormatError(f"{path}: bad magic {magic!r} at byte {m_at}, expected b'P5'")
    try:
        width, height, mv = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: non-numeric header field near byte {w_at}") from None
    if width < 1 or height < 1:
        raise FormatError(f"{path}: invalid extent {width}x{height} at byte {w_at}")
    if not 1 <= mv <= 255:
        raise FormatError(f"{path}: unsupported maxval {mv} at byte {v_at}, only 8-bit data is accepted")
    body = buf[offset : offset + width * height]
    if len(body) != width * height:
        raise FormatError(f"{path}: expected {width * height} pixel bytes at byte {offset}, found {len(body)}")
    data = np.frombuffer(body, dtype=np.uint8).reshape(height, width)
    if mv != 255:
        data = np.rint(data.astype(np.float64) * (255 / mv)).astype(np.uint8)
    return data


def read_pgm(path) -> np.ndarray:
    return read_pgm_bytes(path).astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    return (read_pgm_bytes(path) >= 128).astype(np.uint8)


# -- manifest ----------------------------------------------------------------------

MANIFEST = "manifest.json"


def write_samples(samples: Iterable[Sample], out_dir) -> list[dict]:
    """Write PGMs for ``samples`` and merge their records into the manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        img_rel, lab_rel = f"images/{s.id}.pgm", f"labels/{s.id}.pgm"
        write_pgm(out_dir / img_rel, s.image)
        write_mask(out_dir / lab_rel, s.label)
        s.image_path, s.label_path = img_rel, lab_rel
        records.append(
            {"id": s.id, "image_path": img_rel, "label_path": lab_rel, "domain": s.domain, "split": s.split}
        )
    manifest = out_dir / MANIFEST
    existing = read_manifest_records(manifest) if manifest.exists() else []
    merged = {r["id"]: r for r in existing}
    merged.update({r["id"]: r for r in records})
    write_manifest(manifest, [merged[k] for k in sorted(merged)])
    return records


def write_manifest(path, records: Sequence[dict]) -> None:
    Path(path).write_text(json.dumps(list(records), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest_records(path) -> list[dict]:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise FormatError(f"{path}: manifest must be a JSON array")
    for i, r in enumerate(doc):
        sid = r.get("id", f"#{i}") if isinstance(r, dict) else f"#{i}"
        if not isinstance(r, dict):
            raise FormatError(f"{path}: record {sid} is not an object")
        for key in ("id", "image_path", "label_path", "domain", "split"):
            if not r.get(key):
                raise FormatError(f"{path}: sample {sid} is missing {key}")
    return doc


def read_manifest(path, domain: str | None = None, split: str | None = None) -> list[Sample]:
    """Load samples listed in a manifest (a file or a folder containing one)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    out = []
    for r in read_manifest_records(path):
        if domain is not None and r["domain"] != domain:
            continue
        if split is not None and r["split"] != split:
            continue
        img_p, lab_p = path.parent / r["image_path"], path.parent / r["label_path"]
        if not lab_p.exists():
            raise FormatError(f"{path}: label file for sample {r['id']} not found: {r['label_path']}")
        if not img_p.exists():
            raise FormatError(f"{path}: image file for sample {r['id']} not found: {r['image_path']}")
        out.append(
            Sample(r["id"], read_pgm(img_p), read_mask(lab_p), r["domain"], r["split"],
                   str(img_p.resolve()), str(lab_p.resolve()))
        )
    return out


def histogram_distance(a: Sequence[Sample], b: Sequence[Sample], bins: int = 32) -> float:
    """L1 distance between pooled intensity histograms of two sample sets."""
    edges = np.linspace(0, 1, bins + 1)
    ha, _ = np.histogram(np.concatenate([s.image.ravel() for s in a]), bins=edges)
    hb, _ = np.histogram(np.concatenate([s.image.ravel() for s in b]), bins=edges)
    return float(np.abs(ha / ha.sum() - hb / hb.sum()).sum())
