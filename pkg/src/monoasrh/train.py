"""Synthetic-scene toy training and inference drivers used by the CLI."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, NonFiniteError
from .kitti_io import write_calib, write_label_file, write_result_file
from .losses import LossWeightsConfig, total_loss
from .model import DetectorConfig, ToyDetector, build_targets, forward_train, loss_targets, synth_scene
from .nn import Adam, make_rng

logger = logging.getLogger(__name__)


@dataclass
class ToyConfig:
    """Flat key/value configuration for toy training and inference."""

    seed: int = 42
    steps: int = 600
    batch: int = 4
    n_scenes: int = 20
    objects_per_scene: int = 3
    lr: float = 1e-3
    weight_decay: float = 1e-5
    # ×0.1 drops; late, since 600 steps is far short of convergence
    lr_milestones: tuple[float, float] = (0.75, 0.92)
    height: int = 128
    width: int = 384
    channels: int = 64
    head_channels: int = 8  # hidden width of each 2D head
    heads: int = 8
    value_dim: int = 128
    top_k: int = 50
    score_threshold: float = 0.2
    scg_lambda: float = 0.01
    scg_threshold: float = 0.9

    def detector(self) -> DetectorConfig:
        return DetectorConfig(
            height=self.height,
            width=self.width,
            channels=self.channels,
            top_k=self.top_k,
            score_threshold=self.score_threshold,
            seed=self.seed,
            heads=self.heads,
            value_dim=self.value_dim,
            head_channels=self.head_channels,
        )

    def losses(self) -> LossWeightsConfig:
        return LossWeightsConfig(scg_lambda=self.scg_lambda, scg_threshold=self.scg_threshold, top_k=self.top_k)

    def updated(self, overrides: dict) -> "ToyConfig":
        fields = {f.name: f for f in dataclasses.fields(self)}
        values = {}
        for key, raw in overrides.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(self, key)
            try:
                if isinstance(current, tuple):
                    seq = raw if isinstance(raw, (list, tuple)) else str(raw).strip("()[]").split(",")
                    values[key] = tuple(type(current[0])(v) for v in seq)
                elif isinstance(current, bool):
                    values[key] = str(raw).lower() in ("1", "true", "yes")
                else:
                    values[key] = type(current)(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return dataclasses.replace(self, **values)


def scene_seed(seed: int, index: int) -> int:
    return seed * 10007 + index


def make_scenes(cfg: ToyConfig, n: int | None = None):
    n = cfg.n_scenes if n is None else n
    return [synth_scene(scene_seed(cfg.seed, i), cfg.objects_per_scene, cfg.height, cfg.width) for i in range(n)]


class Divergence(RuntimeError):
    def __init__(self, step: int, cause: str):
        self.step = step
        super().__init__(f"training diverged at step {step}: {cause}")


def learning_rate(cfg: ToyConfig, step: int) -> float:
    lr = cfg.lr
    for frac in cfg.lr_milestones:
        if step >= int(frac * cfg.steps):
            lr *= 0.1
    return lr


def train(cfg: ToyConfig, out_dir: Path | None = None, log_every: int = 50) -> tuple[ToyDetector, list[dict]]:
    """Train the toy detector; returns the model and the per-step loss records."""
    scenes = make_scenes(cfg)
    model = ToyDetector(cfg.detector())
    model.train()
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    loss_cfg = cfg.losses()
    order_rng = make_rng(cfg.seed + 1)
    per_epoch = max(1, len(scenes) // cfg.batch)
    history: list[dict] = []
    log_fh = open(out_dir / "steps.jsonl", "w", encoding="utf-8") if out_dir else None
    perm = None
    t0 = time.perf_counter()
    try:
        for step in range(cfg.steps):
            if step % per_epoch == 0:
                perm = order_rng.permutation(len(scenes))
            pick = perm[(step % per_epoch) * cfg.batch : (step % per_epoch + 1) * cfg.batch]
            images = np.stack([scenes[i][0] for i in pick])
            targets = build_targets([scenes[i][1] for i in pick], [scenes[i][2] for i in pick], model.cfg)
            try:
                preds = forward_train(model, images, targets)
                loss, report = total_loss(preds, loss_targets(targets), loss_cfg, step)
            except NonFiniteError as exc:
                raise Divergence(step, str(exc)) from exc
            if not math.isfinite(report.total):
                raise Divergence(step, "non-finite loss")
            model.zero_grad()
            loss.backward()
            opt.lr = learning_rate(cfg, step)
            opt.step()
            record = json.loads(report.to_json())
            history.append(record)
            if log_fh:
                log_fh.write(report.to_json() + "\n")
            if log_every and step % log_every == 0:
                logger.info("step %d total %.4f (%.1fs)", step, report.total, time.perf_counter() - t0)
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return model, history


def write_scene_files(scenes, out_dir: Path, predictions=None) -> None:
    """Write label_2/, calib/ and optionally pred/ files, one per scene."""
    (out_dir / "label_2").mkdir(parents=True, exist_ok=True)
    (out_dir / "calib").mkdir(parents=True, exist_ok=True)
    if predictions is not None:
        (out_dir / "pred").mkdir(parents=True, exist_ok=True)
    for i, (_, labels, calib) in enumerate(scenes):
        name = f"{i:06d}.txt"
        (out_dir / "label_2" / name).write_text(write_label_file(labels), encoding="utf-8")
        (out_dir / "calib" / name).write_text(write_calib(calib), encoding="utf-8")
        if predictions is not None:
            (out_dir / "pred" / name).write_text(write_result_file(predictions[i]), encoding="utf-8")


def predict_scenes(model: ToyDetector, scenes) -> list[list]:
    model.eval()
    return [model.predict(image, calib) for image, _, calib in scenes]
