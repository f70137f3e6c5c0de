"""Compact U-Net style encoder/decoder with a flat latent bottleneck.

The encoder returns a length-N latent vector plus one skip map per level; the
decoder mirrors it back to a sigmoid mask. Parameters live in plain
``dict[str, Tensor]`` so the segmentation and registration heads can be
optimized, checkpointed and compared by name.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

Params = dict[str, Tensor]

MAGIC = b"ASTN1"


@dataclass(frozen=True)
class ArchConfig:
    size: int = 64
    channels: tuple[int, int, int] = (8, 16, 32)
    latent: int = 128
    squeeze: int = 8
    df_scale: float = 16.0

    def __post_init__(self):
        if len(self.channels) != 3:
            raise ValueError("channels must list three encoder widths")
        if self.size % 8:
            raise ValueError(f"image size must be divisible by 8, got {self.size}")

    @property
    def low(self) -> int:
        return self.size // 8

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class EncoderOutput:
    bottleneck: Tensor  # [B, N]
    skips: list[Tensor] = field(default_factory=list)  # [B, c_l, S/2^l, S/2^l]

    @property
    def batch(self) -> int:
        return self.bottleneck.shape[0]

    def select(self, rows) -> "EncoderOutput":
        return EncoderOutput(nd.take(self.bottleneck, rows), [nd.take(s, rows) for s in self.skips])


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _conv(params: Params, name: str, rng, c_in: int, c_out: int, k: int, dtype) -> None:
    params[f"{name}.w"] = _uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
    params[f"{name}.b"] = _zeros((c_out,), dtype)


def _decoder_params(params: Params, prefix: str, arch: ArchConfig, rng, in_vec: int, skip_mult: int,
                    out_ch: int, dtype) -> None:
    c1, c2, c3 = arch.channels
    low = arch.low
    params[f"{prefix}.fc.w"] = _uniform(rng, (in_vec, c3 * low * low), in_vec, dtype)
    params[f"{prefix}.fc.b"] = _zeros((c3 * low * low,), dtype)
    _conv(params, f"{prefix}.up3", rng, c3 + skip_mult * c3, c2, 3, dtype)
    _conv(params, f"{prefix}.up2", rng, c2 + skip_mult * c2, c1, 3, dtype)
    _conv(params, f"{prefix}.up1", rng, c1 + skip_mult * c1, c1, 3, dtype)
    _conv(params, f"{prefix}.out", rng, c1, out_ch, 1, dtype)


def init_seg_params(arch: ArchConfig, seed: int, dtype=np.float32) -> Params:
    rng = np.random.default_rng(seed)
    c1, c2, c3 = arch.channels
    p: Params = {}
    _conv(p, "enc.conv1", rng, 1, c1, 3, dtype)
    _conv(p, "enc.conv2", rng, c1, c2, 3, dtype)
    _conv(p, "enc.conv3", rng, c2, c3, 3, dtype)
    _conv(p, "enc.squeeze", rng, c3, arch.squeeze, 1, dtype)
    flat = arch.squeeze * arch.low * arch.low
    p["enc.fc.w"] = _uniform(rng, (flat, arch.latent), flat, dtype)
    p["enc.fc.b"] = _zeros((arch.latent,), dtype)
    _decoder_params(p, "dec", arch, rng, arch.latent, 1, 1, dtype)
    return p


def as_batch(img, arch: ArchConfig, dtype) -> Tensor:
    """[S,S], [B,S,S] or [B,1,S,S] array/Tensor -> [B,1,S,S] Tensor."""
    if isinstance(img, Tensor):
        x = img
    else:
        x = Tensor(np.asarray(img, dtype=dtype))
    if x.ndim == 2:
        x = nd.reshape(x, (1, 1) + x.shape)
    elif x.ndim == 3:
        x = nd.reshape(x, (x.shape[0], 1) + x.shape[1:])
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (arch.size, arch.size):
        raise ValueError(f"expected {arch.size}x{arch.size} grayscale input, got shape {x.shape}")
    return x


def encode(params: Params, arch: ArchConfig, img) -> EncoderOutput:
    x = as_batch(img, arch, params["enc.conv1.w"].dtype)
    skips = []
    h = x
    for level in (1, 2, 3):
        h = nd.relu(nd.conv2d(h, params[f"enc.conv{level}.w"], params[f"enc.conv{level}.b"], pad=1))
        skips.append(h)
        h = nd.pool_down(h)
    h = nd.relu(nd.conv2d(h, params["enc.squeeze.w"], params["enc.squeeze.b"]))
    h = nd.reshape(h, (h.shape[0], -1))
    z = nd.linear(h, params["enc.fc.w"], params["enc.fc.b"])
    return EncoderOutput(z, skips)


def run_decoder(params: Params, prefix: str, arch: ArchConfig, vec: Tensor, skips: list[Tensor]) -> Tensor:
    """Shared decoder body: latent vector -> pre-activation output map."""
    c3 = arch.channels[2]
    low = arch.low
    w = params[f"{prefix}.fc.w"]
    if vec.ndim != 2 or vec.shape[1] != w.shape[0]:
        raise ValueError(f"{prefix}: latent of shape {vec.shape} does not fit decoder input {w.shape[0]}")
    h = nd.relu(nd.linear(vec, w, params[f"{prefix}.fc.b"]))
    h = nd.reshape(h, (vec.shape[0], c3, low, low))
    for level, skip in zip((3, 2, 1), reversed(skips)):
        h = nd.upsample2x(h)
        h = nd.concat([h, skip], axis=1)
        h = nd.relu(nd.conv2d(h, params[f"{prefix}.up{level}.w"], params[f"{prefix}.up{level}.b"], pad=1))
    return nd.conv2d(h, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def decode(params: Params, arch: ArchConfig, feat: EncoderOutput) -> Tensor:
    """Initial segmentation, [B, 1, S, S] in (0, 1)."""
    if len(feat.skips) != 3:
        raise ValueError(f"decoder expects 3 skip maps, got {len(feat.skips)}")
    return nd.sigmoid(run_decoder(params, "dec", arch, feat.bottleneck, feat.skips))


def seg_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"segmentation extent mismatch: {pred.shape} vs {target.shape}")
    return nd.mse(pred, target)


def select(params: Params, prefixes: tuple[str, ...]) -> Params:
    return {k: v for k, v in params.items() if k.startswith(prefixes)}


def checksum(params: Mapping[str, Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


# -- checkpoint container ------------------------------------------------------------
# MAGIC, uint32 LE header length, UTF-8 JSON header, then raw little-endian
# tensors at the header's byte offsets (relative to the end of the header).

def save_tensors(path, tensors: Mapping[str, np.ndarray | Tensor], meta: Mapping) -> None:
    index = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        index[name] = {"shape": list(arr.shape), "offset": offset, "dtype": le.dtype.str}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an ASTN1 container (bad magic at byte 0)")
    (n,) = struct.unpack_from("<I", buf, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(buf[start : start + n].decode("utf-8"))
    base = start + n
    out = {}
    for name, info in header["tensors"].items():
        dt = np.dtype(info["dtype"])
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=base + info["offset"])
        out[name] = arr.reshape(info["shape"]).astype(dt.newbyteorder("="))
    return out, header["meta"]
