"""Command-line entry point: audits, toy training, inference and evaluation.

Exit codes: 0 success, 1 numeric or acceptance failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, ParseError
from .eval3d import EvalConfig, confidence_histogram, evaluate, histogram_csv
from .kitti_io import CLASS_NAMES, read_label_dir, with_score
from .nn import make_rng

logger = logging.getLogger("monoasrh")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def load_config_file(path: str | Path) -> dict:
    """JSON object, or flat ``key = value`` lines (``#`` starts a comment)."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return data
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    return parse_overrides([ln for ln in lines if ln])


def toy_config(args, extra: dict | None = None):
    from .train import ToyConfig

    values = {}
    if args.config:
        values.update(load_config_file(args.config))
    values.update(extra or {})
    values.update(parse_overrides(args.set))
    if args.seed is not None:
        values["seed"] = args.seed
    return ToyConfig().updated(values)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gradcheck(args) -> int:
    from .audit import run_audit, select

    if not select(args.filter) and not args.broken_fixture:
        print(f"no gradient case matches {args.filter!r}", file=sys.stderr)
        return EXIT_USAGE
    ok = True
    for report in run_audit(args.filter, args.seeds, include_broken=args.broken_fixture):
        print(report.line(), flush=True)
        ok &= report.passed
    return EXIT_OK if ok else EXIT_FAIL


def reparam_rows(seeds: int, inputs: int, channels: int, calls: int, size: int = 16) -> list[dict]:
    """Per seed: max |collapsed - multi-branch| over ``inputs`` random inputs, and timings."""
    from .ehfam import FusionBlock

    rows = []
    for seed in range(seeds):
        rng = make_rng(seed)
        with T.precision(np.float64):
            block = FusionBlock(channels, rng)
            block.randomize_norms(rng)
            block.eval()
            kernel, bias = block.reparameterize()
            dev = 0.0
            for _ in range(inputs):
                x = T.Tensor(rng.normal(size=(1, channels, size, size)))
                a = block(x).data
                b = FusionBlock.forward_collapsed(x, kernel, bias).data
                dev = max(dev, float(np.max(np.abs(a - b))))
        x = T.Tensor(rng.normal(size=(1, channels, size, size)))
        k32, b32 = kernel.astype(np.float32), bias.astype(np.float32)
        t0 = time.perf_counter()
        for _ in range(calls):
            block(x)
        t_multi = time.perf_counter() - t0
        t0 = time.perf_counter()
        for _ in range(calls):
            FusionBlock.forward_collapsed(x, k32, b32)
        t_coll = time.perf_counter() - t0
        rows.append({"seed": seed, "max_abs_dev": dev, "multi_branch_s": t_multi, "collapsed_s": t_coll})
    return rows


def cmd_reparam_check(args) -> int:
    rows = reparam_rows(args.seeds, args.inputs, args.channels, args.calls)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["seed"], lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.3e}" if isinstance(v, float) else v) for k, v in r.items()})
    print(buf.getvalue(), end="")
    if args.out:
        (_out_dir(args, ".") / "reparam.csv").write_text(buf.getvalue(), encoding="utf-8")
    return EXIT_OK if all(r["max_abs_dev"] <= 1e-5 for r in rows) else EXIT_FAIL


def cmd_toy_train(args) -> int:
    from .train import Divergence, make_scenes, predict_scenes, train, write_scene_files

    cfg = toy_config(args)
    out = _out_dir(args, "toy_run")
    (out / "config.json").write_text(json.dumps(cfg_dict(cfg), indent=2) + "\n", encoding="utf-8")
    try:
        model, history = train(cfg, out)
    except Divergence as exc:
        print(f"diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    T.save_snapshot(out / "weights.bin", model.state_dict())
    scenes = make_scenes(cfg)
    write_scene_files(scenes, out, predict_scenes(model, scenes))
    first = float(np.mean([h["total"] for h in history[:10]]))
    print(json.dumps({"steps": len(history), "initial_mean10": first, "final": history[-1]["total"], "out": str(out)}))
    return EXIT_OK


def cfg_dict(cfg) -> dict:
    import dataclasses

    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}


def cmd_infer(args) -> int:
    from .model import ToyDetector
    from .train import make_scenes, predict_scenes, write_scene_files

    weights = Path(args.weights)
    if not weights.is_file():
        raise UsageError(f"weights file {weights} not found")
    extra = {}
    sidecar = weights.parent / "config.json"
    if not args.config and sidecar.is_file():
        extra = load_config_file(sidecar)
    if args.n_scenes is not None:
        extra["n_scenes"] = args.n_scenes
    cfg = toy_config(args, extra)
    model = ToyDetector(cfg.detector())
    try:
        model.load_state_dict(T.load_snapshot(weights))
    except (KeyError, DimensionError, ValueError) as exc:
        raise ConfigError(f"weights do not fit the configured model: {exc}") from exc
    model.eval()
    scenes = make_scenes(cfg)
    preds = predict_scenes(model, scenes)
    out = _out_dir(args, "infer_out")
    write_scene_files(scenes, out, preds)
    print("scene,detections")
    for i, p in enumerate(preds):
        print(f"{i:06d},{len(p)}")
    return EXIT_OK


def load_frames(gt_dir: Path, det_dir: Path):
    for d in (gt_dir, det_dir):
        if not d.is_dir():
            raise UsageError(f"{d} is not a directory")
    gts = read_label_dir(gt_dir)
    dets = read_label_dir(det_dir)
    orphans = sorted(set(dets) - set(gts))
    if orphans:
        raise UsageError(f"detections without ground truth: {', '.join(orphans[:5])}")
    # label files replayed as detections carry no score: treat as certain
    return [([r if r.score is not None else with_score(r, 1.0) for r in dets.get(k, [])], gts[k]) for k in sorted(gts)]


def cmd_eval(args) -> int:
    classes = tuple(c.strip() for c in args.classes.split(",") if c.strip())
    unknown = [c for c in classes if c not in CLASS_NAMES]
    if unknown:
        raise UsageError(f"unknown classes {unknown}; expected a subset of {CLASS_NAMES}")
    frames = load_frames(Path(args.gt_dir), Path(args.det_dir))
    report = evaluate(frames, classes, EvalConfig(metric=args.metric, workers=args.workers))
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        out = _out_dir(args, ".")
        (out / "report.json").write_text(text + "\n", encoding="utf-8")
        (out / "histogram.csv").write_text(histogram_csv(confidence_histogram(frames)), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 42)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--config", default=None, help="JSON or key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="monoasrh", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    p.add_argument("--filter", default="*", help="glob over case names, e.g. 'loss.*'")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--broken-fixture", action="store_true", help="append a case with a wrong backward")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("reparam-check", parents=[common], help="collapsed vs multi-branch fusion block")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--inputs", type=int, default=20)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--calls", type=int, default=100)
    p.set_defaults(func=cmd_reparam_check)

    p = sub.add_parser("toy-train", parents=[common], help="train the toy detector on synthetic scenes")
    p.set_defaults(func=cmd_toy_train)

    p = sub.add_parser("infer", parents=[common], help="render scenes and write KITTI result files")
    p.add_argument("--weights", required=True)
    p.add_argument("--n-scenes", type=int, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="AP|R40 evaluation of KITTI result files")
    p.add_argument("gt_dir")
    p.add_argument("det_dir")
    p.add_argument("--classes", default="Car,Pedestrian,Cyclist")
    p.add_argument("--metric", choices=("3d", "bev"), default="3d")
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
