"""Two-phase training, inference and evaluation.

Phase 1 trains the segmentation network alone on the MSE to the target mask.
Phase 2 adds the registration head: every batch encodes targets and atlas
images with the shared encoder, warps the atlas labels by the predicted
fields and minimises ``L_reg + lam2 * L_sim`` with one backward pass.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import ndgrad as nd
from .atlasrcs import Atlas, GridSpec, assemble, random_atlas
from .config import TrainConfig
from .fusion import astn_weights, fuse, majority_vote, staple
from .halfstn import combine, init_hs_params, predict_df, reg_loss, warp
from .metrics import MetricsReport, dsc
from .ndgrad import Tensor
from .segnet import (
    EncoderOutput,
    Params,
    decode,
    encode,
    init_seg_params,
    load_tensors,
    save_tensors,
    seg_loss,
)

log = logging.getLogger(__name__)

FUSION_MODES = ("astn", "mv", "staple", "none", "initial")


class RMSprop:
    """RMSprop with one learning rate per parameter group.

    With ``warmup > 0`` the rate ramps linearly over the first ``warmup``
    steps. The accumulator starts at zero, so an unramped first step is
    ``lr / sqrt(1 - alpha)`` per weight, large enough to push a sigmoid
    output into saturation for good.
    """

    def __init__(self, groups: Mapping[str, tuple[Params, float]], alpha: float = 0.99, eps: float = 1e-8,
                 warmup: int = 0):
        self.groups = {g: (dict(p), lr) for g, (p, lr) in groups.items()}
        self.base_lr = {g: lr for g, (_, lr) in groups.items()}
        self.alpha = alpha
        self.eps = eps
        self.warmup = warmup
        self.steps = 0
        self.state: dict[str, np.ndarray] = {}
        for params, _ in self.groups.values():
            for name, t in params.items():
                self.state[name] = np.zeros_like(t.data)

    def set_epoch(self, epoch: int, step: int, gamma: float) -> None:
        for g, (params, _) in self.groups.items():
            self.groups[g] = (params, lr_at(self.base_lr[g], epoch, step, gamma))

    def lr(self, group: str) -> float:
        return self.groups[group][1]

    def step(self) -> None:
        a = self.alpha
        self.steps += 1
        ramp = min(1.0, self.steps / self.warmup) if self.warmup > 0 else 1.0
        for params, lr in self.groups.values():
            lr = lr * ramp
            for name, t in params.items():
                g = t.grad
                if g is None:
                    continue
                acc = self.state[name]
                acc *= a
                acc += (1 - a) * g * g
                t.data -= (lr * g / (np.sqrt(acc) + self.eps)).astype(t.dtype, copy=False)

    def zero_grad(self) -> None:
        for params, _ in self.groups.values():
            for t in params.values():
                t.grad = None


def lr_at(base: float, epoch: int, step: int, gamma: float) -> float:
    """Step decay: ``base * gamma ** (epoch // step)`` for 0-based epochs."""
    return base * gamma ** (epoch // step) if step > 0 else base


@dataclass
class Model:
    cfg: TrainConfig
    seg: Params
    hs: Params = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def arch(self):
        return self.cfg.arch

    def all_params(self) -> Params:
        return {**self.seg, **self.hs}

    def save(self, path) -> None:
        meta = {"arch": self.arch.to_dict(), "config": self.cfg.to_dict(), **self.meta}
        save_tensors(path, self.all_params(), meta)

    def copy(self) -> "Model":
        def dup(ps: Params) -> Params:
            return {k: Tensor(t.data.copy(), requires_grad=True) for k, t in ps.items()}

        return Model(self.cfg, dup(self.seg), dup(self.hs), dict(self.meta))

    @classmethod
    def load(cls, path, expect: TrainConfig | None = None) -> "Model":
        tensors, meta = load_tensors(path)
        cfg = TrainConfig.from_dict(meta["config"])
        if expect is not None and expect.arch != cfg.arch:
            raise ValueError(f"{path}: checkpoint architecture {cfg.arch} does not match {expect.arch}")
        seg = {k: Tensor(v, requires_grad=True) for k, v in tensors.items() if not k.startswith("hs.")}
        hs = {k: Tensor(v, requires_grad=True) for k, v in tensors.items() if k.startswith("hs.")}
        extra = {k: v for k, v in meta.items() if k not in ("arch", "config")}
        return cls(cfg, seg, hs, extra)


def new_model(cfg: TrainConfig) -> Model:
    dtype = np.dtype(cfg.dtype)
    return Model(cfg, init_seg_params(cfg.arch, cfg.seed, dtype), init_hs_params(cfg.arch, cfg.seed + 1, dtype))


def _stack(samples, dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.image for s in samples]).astype(dtype)[:, None]
    y = np.stack([s.label for s in samples]).astype(dtype)[:, None]
    return x, y


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i : i + batch]


EpochHook = Callable[[dict], None]


def train_phase1(data: Sequence, cfg: TrainConfig, model: Model | None = None,
                 on_epoch: EpochHook | None = None) -> tuple[Model, list[dict]]:
    """Segmentation-only training of encoder and decoder."""
    if not data:
        raise ValueError("training split is empty")
    model = model or new_model(cfg)
    dtype = np.dtype(cfg.dtype)
    X, Y = _stack(data, dtype)
    opt = RMSprop({"seg": (model.seg, cfg.lr_seg)}, cfg.rms_alpha, cfg.rms_eps, cfg.warmup_steps)
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    for epoch in range(cfg.seg_epochs):
        opt.set_epoch(epoch, cfg.lr_step, cfg.lr_gamma)
        losses, sizes = [], []
        for idx in _batches(len(X), cfg.batch_size, rng):
            opt.zero_grad()
            feat = encode(model.seg, model.arch, X[idx])
            loss = seg_loss(decode(model.seg, model.arch, feat), Y[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item())
            sizes.append(len(idx))
        row = {"phase": 1, "epoch": epoch, "lr": opt.lr("seg"), "loss": float(np.average(losses, weights=sizes))}
        history.append(row)
        log.info("phase1 epoch %d loss %.5f", epoch, row["loss"])
        if on_epoch:
            on_epoch(row)
    return model, history


@dataclass
class StepTerms:
    total: Tensor
    sim: Tensor | None
    reg: Tensor
    warped: Tensor
    dfs: Tensor
    seg_init: Tensor | None


def phase2_loss(model: Model, x, y, atlas_x, atlas_y, cfg: TrainConfig,
                atlas_feat: EncoderOutput | None = None) -> StepTerms:
    """Forward pass of one phase-2 batch; returns the joint loss and parts."""
    arch = model.arch
    B, M = x.shape[0], atlas_x.shape[0]
    if atlas_x.shape[1:] != x.shape[1:]:
        raise ValueError(f"atlas extent {atlas_x.shape[1:]} does not match images {x.shape[1:]}")
    if atlas_feat is None:
        feats = encode(model.seg, arch, np.concatenate([x, atlas_x]))
        tgt = feats.select(np.arange(B))
        atl = feats.select(np.arange(B, B + M))
    else:
        tgt, atl = encode(model.seg, arch, x), atlas_feat
    comb = combine(tgt, atl)
    dfs = predict_df(comb, model.hs, arch)
    labels = Tensor(np.tile(atlas_y, (B, 1, 1, 1)))
    warped = warp(labels, dfs)
    target = Tensor(np.repeat(y, M, axis=0))
    l_reg = reg_loss(warped, target, dfs, cfg.lam1)
    if cfg.seg_decoder:
        seg_init = decode(model.seg, arch, tgt)
        l_sim = seg_loss(seg_init, y)
        total = l_reg + nd.scale(l_sim, cfg.lam2)
    else:
        seg_init = l_sim = None
        total = l_reg
    return StepTerms(total, l_sim, l_reg, warped, dfs, seg_init)


def train_phase2(data: Sequence, atlas: Atlas, model: Model, cfg: TrainConfig,
                 on_epoch: EpochHook | None = None) -> tuple[Model, list[dict]]:
    """Joint training of encoder, decoder and registration head."""
    if not data:
        raise ValueError("training split is empty")
    dtype = np.dtype(cfg.dtype)
    if atlas.images().shape[1:] != (cfg.size, cfg.size):
        raise ValueError(f"atlas extent {atlas.images().shape[1:]} does not match size {cfg.size}")
    X, Y = _stack(data, dtype)
    AX = atlas.images().astype(dtype)[:, None]
    AY = atlas.labels().astype(dtype)[:, None]
    groups = {"seg": (model.seg, cfg.lr_seg_phase2), "hs": (model.hs, cfg.lr_reg)}
    opt = RMSprop(groups, cfg.rms_alpha, cfg.rms_eps, cfg.warmup_steps)
    rng = np.random.default_rng([cfg.seed, 2])
    history = []
    for epoch in range(cfg.reg_epochs):
        opt.set_epoch(epoch, cfg.lr_step, cfg.lr_gamma)
        acc = {"loss": [], "sim": [], "reg": [], "fused_dsc": [], "init_dsc": []}
        sizes = []
        cached = None
        for idx in _batches(len(X), cfg.batch_size, rng):
            opt.zero_grad()
            if cfg.cache_atlas and cached is None:
                cached = _detached(encode(model.seg, model.arch, AX))
            terms = phase2_loss(model, X[idx], Y[idx], AX, AY, cfg, cached)
            terms.total.backward()
            opt.step()
            sizes.append(len(idx))
            acc["loss"].append(terms.total.item())
            acc["reg"].append(terms.reg.item())
            acc["sim"].append(terms.sim.item() if terms.sim is not None else float("nan"))
            f, i = _batch_fusion_dsc(terms, Y[idx], atlas.M, cfg.threshold)
            acc["fused_dsc"].append(f)
            acc["init_dsc"].append(i)
        row = {"phase": 2, "epoch": epoch, "lr": opt.lr("hs")}
        row.update({k: float(np.average(v, weights=sizes)) for k, v in acc.items()})
        history.append(row)
        log.info("phase2 epoch %d loss %.5f reg %.5f fused %.3f", epoch, row["loss"], row["reg"], row["fused_dsc"])
        if on_epoch:
            on_epoch(row)
    return model, history


def _detached(feat: EncoderOutput) -> EncoderOutput:
    return EncoderOutput(feat.bottleneck.detach(), [s.detach() for s in feat.skips])


def _batch_fusion_dsc(terms: StepTerms, y: np.ndarray, M: int, thr: float) -> tuple[float, float]:
    warped = terms.warped.data[:, 0]
    B = y.shape[0]
    fused, init = [], []
    for b in range(B):
        w = list(warped[b * M : (b + 1) * M])
        if terms.seg_init is not None:
            s = terms.seg_init.data[b, 0]
            mask = fuse(s, w, astn_weights(s, w, thr), thr)
            init.append(dsc(s >= thr, y[b, 0]))
        else:
            mask = (np.mean(w, axis=0) >= thr).astype(np.uint8)
            init.append(float("nan"))
        fused.append(dsc(mask, y[b, 0]))
    return float(np.mean(fused)), float(np.mean(init))


# -- inference ---------------------------------------------------------------------

@dataclass
class Diagnostics:
    seg_initial: np.ndarray | None
    warped: np.ndarray  # [M, S, S]
    dfs: np.ndarray  # [M, 2, S, S]
    dsc: tuple[float, ...] = ()
    weights: tuple[float, ...] = ()
    warnings: list[str] = field(default_factory=list)


def atlas_features(model: Model, atlas: Atlas) -> EncoderOutput:
    return _detached(encode(model.seg, model.arch, atlas.images().astype(np.dtype(model.cfg.dtype))[:, None]))


def infer(img, atlas: Atlas, model: Model, cfg: TrainConfig | None = None,
          atlas_feat: EncoderOutput | None = None) -> tuple[np.ndarray, Diagnostics]:
    """Full forward chain for one image; returns the fused binary mask."""
    cfg = cfg or model.cfg
    arch = model.arch
    dtype = np.dtype(model.cfg.dtype)
    img = np.asarray(img, dtype=dtype)
    if img.shape != (arch.size, arch.size):
        raise ValueError(f"image extent {img.shape} does not match model size {arch.size}")
    warnings = []
    if all(not np.any(t.data) for t in model.hs.values()) or all(not np.any(t.data) for t in model.seg.values()):
        warnings.append("parameters are all zero; model looks untrained")
    if atlas_feat is None:
        atlas_feat = atlas_features(model, atlas)
    tgt = encode(model.seg, arch, img)
    comb = combine(tgt, atlas_feat)
    dfs = predict_df(comb, model.hs, arch)
    warped = warp(Tensor(atlas.labels().astype(dtype)[:, None]), dfs).data[:, 0]
    thr = cfg.threshold
    if model.cfg.seg_decoder:
        seg = decode(model.seg, arch, tgt).data[0, 0]
        w = astn_weights(seg, list(warped), thr)
        mask = fuse(seg, list(warped), w, thr)
        diag = Diagnostics(seg, warped, dfs.data, w.dsc, (w.v0,) + w.v, warnings)
    else:
        # no initial segmentation to weigh against: plain average of warped labels
        M = len(warped)
        mask = (np.mean(warped, axis=0) >= thr).astype(np.uint8)
        diag = Diagnostics(None, warped, dfs.data, (), (0.0,) + (1.0 / M,) * M, warnings)
    return mask, diag


def fused_mask(diag: Diagnostics, mode: str, threshold: float = 0.5) -> list[np.ndarray]:
    """Masks to score for ``mode``; ``none`` yields every warped label."""
    warped_bin = [(w >= threshold).astype(np.uint8) for w in diag.warped]
    if mode == "astn":
        if diag.seg_initial is None:
            return [(np.mean(diag.warped, axis=0) >= threshold).astype(np.uint8)]
        w = astn_weights(diag.seg_initial, list(diag.warped), threshold)
        return [fuse(diag.seg_initial, list(diag.warped), w, threshold)]
    if mode == "mv":
        return [majority_vote(warped_bin)]
    if mode == "staple":
        if len(warped_bin) < 2:
            return warped_bin
        return [staple(warped_bin)[0]]
    if mode == "none":
        return warped_bin
    if mode == "initial":
        if diag.seg_initial is None:
            raise ValueError("model has no segmentation decoder; 'initial' fusion is unavailable")
        return [(diag.seg_initial >= threshold).astype(np.uint8)]
    raise ValueError(f"unknown fusion mode {mode!r}; choose from {', '.join(FUSION_MODES)}")


def overlay(image, diag: Diagnostics, mask, label=None, threshold: float = 0.5) -> np.ndarray:
    """Panels side by side for inspection: image, Seg_initial, fused mask and,
    if given, the reference label; 1-pixel mid-grey separators."""
    panels = [np.clip(np.asarray(image, dtype=np.float64), 0, 1)]
    if diag.seg_initial is not None:
        panels.append((diag.seg_initial >= threshold).astype(np.float64))
    panels.append(np.asarray(mask, dtype=np.float64))
    if label is not None:
        panels.append(np.asarray(label, dtype=np.float64))
    sep = np.full((panels[0].shape[0], 1), 0.5)
    out = [panels[0]]
    for p in panels[1:]:
        out += [sep, p]
    return np.concatenate(out, axis=1)


def evaluate(samples: Sequence, atlas: Atlas, model: Model, modes: Sequence[str] = ("astn",),
             threshold: float | None = None, threads: int = 1,
             on_sample: Callable[[Any, Diagnostics], None] | None = None) -> dict[str, MetricsReport]:
    """Score each fusion mode over ``samples``.

    For ``none`` a sample's metrics are the mean over its warped labels.
    With ``threads > 1`` inference fans out over a thread pool; rows are
    still collected in sample order, so reports do not depend on it.
    """
    for mode in modes:
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}; choose from {', '.join(FUSION_MODES)}")
    thr = model.cfg.threshold if threshold is None else threshold
    reports = {m: MetricsReport(meta={"fusion": m, "count": len(samples)}) for m in modes}
    feat = atlas_features(model, atlas)

    def run(s):
        return infer(s.image, atlas, model, atlas_feat=feat)[1]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            diags = list(pool.map(run, samples))
    else:
        diags = [run(s) for s in samples]
    for s, diag in zip(samples, diags):
        if on_sample:
            on_sample(s, diag)
        for mode in modes:
            masks = fused_mask(diag, mode, thr)
            rep = reports[mode]
            if len(masks) == 1:
                rep.add(s.id, masks[0], s.label)
            else:
                tmp = MetricsReport()
                for k, m in enumerate(masks):
                    tmp.add(str(k), m, s.label)
                row = {"id": s.id}
                for name, agg in tmp.aggregate().items():
                    row[name] = agg["mean"]
                rep.rows.append(row)
    return reports


def training_dsc(samples: Sequence, model: Model) -> float:
    """Mean DSC of the initial segmentation over ``samples``."""
    dtype = np.dtype(model.cfg.dtype)
    scores = []
    for i in range(0, len(samples), 16):
        chunk = samples[i : i + 16]
        x = np.stack([s.image for s in chunk]).astype(dtype)[:, None]
        pred = decode(model.seg, model.arch, encode(model.seg, model.arch, x)).data[:, 0]
        scores += [dsc(p >= model.cfg.threshold, s.label) for p, s in zip(pred, chunk)]
    return float(np.mean(scores))


def fit(data: Sequence, atlas: Atlas, cfg: TrainConfig, model: Model | None = None,
        on_epoch: EpochHook | None = None) -> tuple[Model, list[dict]]:
    """Both training phases. Without a segmentation decoder there is nothing
    for phase 1 to fit, so it is skipped and phase 2 trains on ``L_reg`` alone."""
    model = model or new_model(cfg)
    model.cfg = cfg
    history: list[dict] = []
    if cfg.seg_decoder:
        model, h1 = train_phase1(data, cfg, model, on_epoch)
        history += h1
    model, h2 = train_phase2(data, atlas, model, cfg, on_epoch)
    return model, history + h2


ABLATION_VARIANTS = ("full", "random_atlas", "no_seg_decoder")


def ablation(train: Sequence, tests: Mapping[str, Sequence], cfg: TrainConfig, seeds: Sequence[int],
             threads: int = 1, on_run: Callable[[dict], None] | None = None) -> dict:
    """Full model against the random-atlas and no-decoder variants, per seed.

    Phase 1 does not see the atlas, so the full and random-atlas runs of a
    seed share one phase-1 model. Returns per-seed rows and per-variant means
    of the fused DSC (plus the initial DSC for the full model).
    """
    grid = GridSpec.parse(cfg.grid, cfg.size, cfg.size)
    rcs = assemble(train, grid)
    rows = []
    for seed in seeds:
        c = cfg.with_overrides(seed=seed)
        base, _ = train_phase1(train, c)
        train_dsc = training_dsc(train, base)
        plans = {
            "full": (base.copy(), rcs, c),
            "random_atlas": (base.copy(), random_atlas(train, grid, seed), c),
            "no_seg_decoder": (None, rcs, c.with_overrides(seg_decoder=False)),
        }
        for variant, (model, atlas, vc) in plans.items():
            model = model or new_model(vc)
            model.cfg = vc
            model, _ = train_phase2(train, atlas, model, vc)
            modes = ("astn", "initial") if vc.seg_decoder else ("astn",)
            row = {"seed": seed, "variant": variant, "train_dsc": train_dsc, "atlas": atlas.source_ids()}
            for name, samples in tests.items():
                reps = evaluate(samples, atlas, model, modes, threads=threads)
                for mode, rep in reps.items():
                    row[f"{name}.{mode}"] = rep.aggregate()["dsc"]["mean"]
            rows.append(row)
            log.info("ablation seed %d %s %s", seed, variant, row)
            if on_run:
                on_run(row)
    means: dict[str, dict[str, float]] = {}
    for variant in ABLATION_VARIANTS:
        sel = [r for r in rows if r["variant"] == variant]
        keys = sorted(k for k in sel[0] if "." in k)
        means[variant] = {k: float(np.mean([r[k] for r in sel])) for k in keys}
        means[variant]["train_dsc"] = float(np.mean([r["train_dsc"] for r in sel]))
    return {"seeds": list(seeds), "runs": rows, "means": means}
