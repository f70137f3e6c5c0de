"""Command-line entry point: ``astn gen|atlas|train|eval|segment|ablate``.

Exit codes: 0 success, 1 invalid input, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import pipeline as P
from .atlasrcs import GridSpec, assemble, random_atlas, read_atlas, write_atlas
from .config import TrainConfig, load_config
from .phantoms import PROFILES, generate, read_manifest, read_mask, read_pgm, write_mask, write_pgm, write_samples
from .segnet import save_tensors

log = logging.getLogger("astn")


class InputError(Exception):
    """Invalid user input (exit code 1)."""


def _echo_config(cfg: TrainConfig, origin: str) -> None:
    sys.stderr.write(f"# resolved config ({origin})\n{cfg.dumps()}")


def _load_atlas(path):
    return read_atlas(path, lambda img, lab: (read_pgm(img), read_mask(lab)))


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("seed", "seg_epochs", "reg_epochs"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "no_seg_decoder", False):
        overrides["seg_decoder"] = False
    return cfg.with_overrides(**overrides)


# -- subcommands -----------------------------------------------------------------------

def cmd_gen(args) -> int:
    samples = generate(args.count, PROFILES[args.domain], args.size, args.seed, args.domain, args.split)
    write_samples(samples, args.out)
    print(f"wrote {len(samples)} {args.domain}/{args.split} samples to {args.out}")
    return 0


def cmd_atlas(args) -> int:
    cands = read_manifest(args.data, domain=args.domain, split=args.split)
    if not cands:
        raise InputError(f"{args.data}: no candidates with domain={args.domain} split={args.split}")
    h, w = cands[0].image.shape
    grid = GridSpec.parse(args.grid, h, w)
    atlas = random_atlas(cands, grid, args.seed) if args.random else assemble(cands, grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    base = out.parent.resolve()
    for i, e in enumerate(atlas.elements):
        atlas.elements[i] = type(e)(
            e.region, e.source_id, e.image, e.label, e.score,
            os.path.relpath(e.image_path, base), os.path.relpath(e.label_path, base),
        )
    write_atlas(atlas, out)
    print(f"atlas with {atlas.M} elements: {' '.join(atlas.source_ids())}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    _echo_config(cfg, "train")
    data = read_manifest(args.data, domain=args.domain, split="train")
    if not data:
        raise InputError(f"{args.data}: training split is empty")
    atlas = _load_atlas(args.atlas)
    model = None
    if args.resume:
        model = P.Model.load(args.resume, expect=cfg)
    csv_path = Path(args.loss_csv) if args.loss_csv else Path(str(args.out) + ".loss.csv")
    cols = ["phase", "epoch", "lr", "loss", "sim", "reg", "fused_dsc", "init_dsc"]
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=cols, restval="", lineterminator="\n")
        writer.writeheader()

        def on_epoch(row):
            writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
            f.flush()
            if not args.quiet:
                print(" ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))

        model, _ = P.fit(data, atlas, cfg, model, on_epoch)
    model.meta = {"atlas": atlas.source_ids(), "version": __version__}
    model.save(args.out)
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    _echo_config(model.cfg, f"checkpoint {args.ckpt}")
    samples = read_manifest(args.data, domain=args.domain, split=args.split)
    if not samples:
        raise InputError(f"{args.data}: no samples with domain={args.domain} split={args.split}")
    atlas = _load_atlas(args.atlas)
    on_sample = None
    if args.overlays:
        odir = Path(args.overlays)
        odir.mkdir(parents=True, exist_ok=True)
        thr = model.cfg.threshold

        def on_sample(s, diag):
            masks = P.fused_mask(diag, args.fusion, thr)
            mask = masks[0] if len(masks) == 1 else (np.mean(masks, axis=0) >= 0.5)
            write_pgm(odir / f"{s.id}.pgm", P.overlay(s.image, diag, mask, s.label, thr))

    rep = P.evaluate(samples, atlas, model, (args.fusion,), threads=args.threads,
                     on_sample=on_sample)[args.fusion]
    rep.meta.update(
        {"config": model.cfg.to_dict(), "atlas": atlas.source_ids(), "domain": args.domain, "split": args.split}
    )
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    rep.write(args.report)
    print(f"{args.fusion}: {rep.summary()}  (n={len(samples)})")
    return 0


def cmd_segment(args) -> int:
    model = _load_model(args.ckpt)
    _echo_config(model.cfg, f"checkpoint {args.ckpt}")
    atlas = _load_atlas(args.atlas)
    img = read_pgm(args.image)
    _, diag = P.infer(img, atlas, model)
    mask = P.fused_mask(diag, args.fusion, model.cfg.threshold)
    if len(mask) != 1:
        raise InputError(f"fusion {args.fusion!r} does not produce a single mask")
    for w in diag.warnings:
        log.warning(w)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_mask(args.out, mask[0])
    if args.dump_warped:
        d = Path(args.dump_warped)
        d.mkdir(parents=True, exist_ok=True)
        for m, w in enumerate(diag.warped):
            write_pgm(d / f"warped_{m}.pgm", np.clip(w, 0, 1))
        if diag.seg_initial is not None:
            write_pgm(d / "seg_initial.pgm", np.clip(diag.seg_initial, 0, 1))
        write_pgm(d / "overlay.pgm", P.overlay(img, diag, mask[0], threshold=model.cfg.threshold))
        meta = {"atlas": atlas.source_ids(), "dsc": list(diag.dsc), "weights": list(diag.weights),
                "layout": "dfs[m] = (dy, dx) in pixels"}
        save_tensors(d / "dfs.astn", {"dfs": diag.dfs}, meta)
    print(f"wrote {args.out}" + (f" (diagnostics in {args.dump_warped})" if args.dump_warped else ""))
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    _echo_config(cfg, "ablate")
    train = read_manifest(args.data, domain=args.train_domain, split="train")
    if not train:
        raise InputError(f"{args.data}: training split is empty")
    tests = {}
    for dom in args.test_domains.split(","):
        s = read_manifest(args.data, domain=dom, split="test")
        if not s:
            raise InputError(f"{args.data}: no test samples for domain {dom}")
        tests[dom] = s
    seeds = [int(x) for x in args.seeds.split(",")]
    result = P.ablation(train, tests, cfg, seeds, threads=args.threads,
                        on_run=None if args.quiet else lambda r: print(json.dumps(r, sort_keys=True)))
    result["config"] = cfg.to_dict()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for variant, vals in result["means"].items():
        print(variant, " ".join(f"{k}={v:.4f}" for k, v in vals.items()))
    return 0


def _load_model(path) -> P.Model:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return P.Model.load(path)


# -- parser ----------------------------------------------------------------------------

def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--seg-epochs", dest="seg_epochs", type=int)
    p.add_argument("--reg-epochs", dest="reg_epochs", type=int)
    p.add_argument("--no-seg-decoder", action="store_true", help="ablation: train without the segmentation decoder")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="astn", description="Atlas-guided nodule segmentation with label fusion.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    ap.add_argument("-q", "--quiet", action="store_true", help="no per-epoch or per-run output")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic phantoms")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=_positive, required=True)
    g.add_argument("--domain", choices=sorted(PROFILES), default="a")
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    a = sub.add_parser("atlas", help="assemble an atlas by regional correlation score")
    a.add_argument("--data", required=True)
    a.add_argument("--grid", default="2x2", help="UxV region grid (default 2x2)")
    a.add_argument("--out", required=True)
    a.add_argument("--random", action="store_true", help="draw elements uniformly instead of by score")
    a.add_argument("--seed", type=int, default=0, help="seed for --random")
    a.add_argument("--domain", default="a")
    a.add_argument("--split", default="train")
    a.set_defaults(func=cmd_atlas)

    t = sub.add_parser("train", help="run both training phases")
    t.add_argument("--data", required=True)
    t.add_argument("--atlas", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--domain", default="a")
    t.add_argument("--resume", help="start from this checkpoint (architecture must match)")
    t.add_argument("--loss-csv", dest="loss_csv", help="per-epoch loss CSV (default OUT.loss.csv)")
    _add_train_overrides(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a data split")
    e.add_argument("--data", required=True)
    e.add_argument("--atlas", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--fusion", choices=P.FUSION_MODES, default="astn")
    e.add_argument("--report", required=True)
    e.add_argument("--domain", default=None)
    e.add_argument("--split", default="test")
    e.add_argument("--threads", type=_positive, default=1)
    e.add_argument("--overlays", metavar="DIR", help="write image|initial|fused|label panels per sample")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("segment", help="segment one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--atlas", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fusion", choices=P.FUSION_MODES, default="astn")
    s.add_argument("--dump-warped", dest="dump_warped", metavar="DIR")
    s.set_defaults(func=cmd_segment)

    b = sub.add_parser("ablate", help="full model vs random atlas vs no segmentation decoder")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--seeds", default="0,1,2")
    b.add_argument("--train-domain", dest="train_domain", default="a")
    b.add_argument("--test-domains", dest="test_domains", default="a,b")
    b.add_argument("--threads", type=_positive, default=1)
    _add_train_overrides(b)
    b.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InputError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"astn {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"astn {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
