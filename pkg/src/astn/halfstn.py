"""Registration head: feature combination, displacement-field decoding,
differentiable warping and the registration losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor
from .segnet import ArchConfig, EncoderOutput, Params, _decoder_params, run_decoder


@dataclass
class CombinedFeature:
    """Row ``b * M + m`` pairs target ``b`` with atlas element ``m``."""

    rows: Tensor  # [B*M, 2N]
    skips: list[Tensor]  # [B*M, 2c, h, w] per level
    targets: int
    elements: int


def init_hs_params(arch: ArchConfig, seed: int, dtype=np.float32) -> Params:
    rng = np.random.default_rng(seed)
    p: Params = {}
    _decoder_params(p, "hs", arch, rng, 2 * arch.latent, 2, 2, dtype)
    # start from the identity transform
    p["hs.out.w"].data[...] = 0
    p["hs.out.b"].data[...] = 0
    return p


def combine(target: EncoderOutput, atlas: EncoderOutput | Sequence[EncoderOutput]) -> CombinedFeature:
    if not isinstance(atlas, EncoderOutput):
        atlas = list(atlas)
        if not atlas:
            raise ValueError("atlas feature list is empty")
        atlas = EncoderOutput(
            nd.concat([a.bottleneck for a in atlas], axis=0),
            [nd.concat([a.skips[i] for a in atlas], axis=0) for i in range(len(atlas[0].skips))],
        )
    B, M = target.batch, atlas.batch
    if target.bottleneck.shape[1] != atlas.bottleneck.shape[1] or len(target.skips) != len(atlas.skips):
        raise ValueError(
            f"feature dims differ: target {target.bottleneck.shape} vs atlas {atlas.bottleneck.shape}"
        )
    for ts, as_ in zip(target.skips, atlas.skips):
        if ts.shape[1:] != as_.shape[1:]:
            raise ValueError(f"skip shapes differ: {ts.shape} vs {as_.shape}")
    t_idx = np.repeat(np.arange(B), M)
    a_idx = np.tile(np.arange(M), B)
    rows = nd.concat([nd.take(target.bottleneck, t_idx), nd.take(atlas.bottleneck, a_idx)], axis=1)
    skips = [nd.concat([nd.take(ts, t_idx), nd.take(as_, a_idx)], axis=1) for ts, as_ in zip(target.skips, atlas.skips)]
    return CombinedFeature(rows, skips, B, M)


def predict_df(comb: CombinedFeature, params: Params, arch: ArchConfig) -> Tensor:
    """One (dy, dx) field per combined row, [B*M, 2, S, S], in pixels."""
    out = run_decoder(params, "hs", arch, comb.rows, comb.skips)
    return nd.scale(out, arch.df_scale)


def warp(label, df) -> Tensor:
    """Backward warp: ``out(p) = label(p + df(p))`` with zero outside the grid."""
    label = label if isinstance(label, Tensor) else Tensor(np.asarray(label, dtype=np.float64))
    df = df if isinstance(df, Tensor) else Tensor(np.asarray(df, dtype=label.dtype))
    squeeze = label.ndim == 2
    if squeeze:
        label = nd.reshape(label, (1,) + label.shape)
    if df.shape[-3] != 2 or df.shape[-2:] != label.shape[-2:]:
        raise ValueError(f"displacement field {df.shape} does not match label {label.shape}")
    H, W = label.shape[-2:]
    grid = nd.identity_grid(H, W, dtype=df.dtype)
    coords = df + Tensor(grid if df.ndim == 3 else grid[None])
    out = nd.grid_sample(label, coords)
    return nd.reshape(out, out.shape[1:]) if squeeze else out


def smoothness_loss(df) -> Tensor:
    """Diffusion regularizer: mean squared forward difference along y plus
    along x, each summed over the two field components and averaged over the
    pixels that have a neighbour in that direction."""
    df = df if isinstance(df, Tensor) else Tensor(np.asarray(df, dtype=np.float64))
    dy = df[..., 1:, :] - df[..., :-1, :]
    dx = df[..., :, 1:] - df[..., :, :-1]
    # mean over components as well, times 2 -> per-pixel sum over components
    terms = []
    if dy.size:
        terms.append(nd.scale(nd.mean(nd.square(dy)), 2.0))
    if dx.size:
        terms.append(nd.scale(nd.mean(nd.square(dx)), 2.0))
    if not terms:
        return Tensor(np.zeros((), dtype=df.dtype))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def reg_loss(warped, target, dfs, lam1: float) -> Tensor:
    """Mean similarity of warped labels to the target plus ``lam1`` times the
    mean smoothness of their fields.

    ``warped`` and ``dfs`` are either lists of per-element tensors or batched
    tensors ``[K, 1, S, S]`` / ``[K, 2, S, S]``; ``target`` matches one warped
    label or the whole batch.
    """
    if isinstance(warped, (list, tuple)) or isinstance(dfs, (list, tuple)):
        warped, dfs = list(warped), list(dfs)
        if len(warped) != len(dfs):
            raise ValueError(f"{len(warped)} warped labels but {len(dfs)} displacement fields")
        if not warped:
            raise ValueError("reg_loss needs at least one atlas element")
        sims = [nd.mse(w, target) for w in warped]
        smooth = [smoothness_loss(d) for d in dfs]
        sim = sims[0]
        for s in sims[1:]:
            sim = sim + s
        sm = smooth[0]
        for s in smooth[1:]:
            sm = sm + s
        k = 1.0 / len(warped)
        return nd.scale(sim, k) + nd.scale(sm, k * lam1)
    if warped.shape[0] != dfs.shape[0]:
        raise ValueError(f"{warped.shape[0]} warped labels but {dfs.shape[0]} displacement fields")
    return nd.mse(warped, target) + nd.scale(smoothness_loss(dfs), lam1)
