"""Identical-view pretraining, cycle-correspondence training and the ablation grid."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .augmentation import augment, in_bounds
from .config import TrainConfig
from .data import DatasetManifest, ImageStore, sample_keypoints, sample_pair_indices
from .losses import (
    KeypointBatch,
    NoValidKeypointsError,
    combined_loss,
    cycle_loss,
    identical_view_loss,
)
from .model import DescriptorNet, load_checkpoint, read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "loss", "cycle_loss", "identical_loss", "mean_X", "kept_fraction"]


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class PairSample:
    index_a: int
    index_b: int
    image_a: torch.Tensor  # normalized, augmented I_A
    image_b: torch.Tensor
    image_hat: torch.Tensor  # normalized, augmented copy of I_A
    keypoints: KeypointBatch  # full-resolution (row, col)


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    mode: str = "ccl"
    skipped_pairs: int = 0
    epoch_losses: list[float] = field(default_factory=list)

    def to_dict(self):
        return dict(self.__dict__)


def step_seed(seed: int, step: int, item: int = 0) -> int:
    return int(np.random.SeedSequence([seed, step, item]).generate_state(1)[0])


def prepare_pair(store, config: TrainConfig, seed: int) -> PairSample:
    """Sample (I_A, I_B), augment I_A twice and I_B once, and transport keypoints A -> augmented A."""
    seeds = np.random.SeedSequence(seed).generate_state(5)
    ia, ib = sample_pair_indices(len(store), int(seeds[0]))
    raw_a, raw_b = store[ia], store[ib]
    dims = tuple(raw_a.shape[-2:])
    view_a = augment(raw_a, config.augment, int(seeds[1]))
    view_hat = augment(raw_a, config.augment, int(seeds[2]))
    view_b = augment(raw_b, config.augment, int(seeds[3]))
    pts, _ = sample_keypoints(dims, config.loss.num_keypoints, int(seeds[4]))
    to_orig = view_a.warp.inverse()
    orig = to_orig.apply_points(pts)
    target = view_hat.warp.apply_points(orig)
    valid = in_bounds(orig, dims) & in_bounds(target, dims)
    kps = KeypointBatch(torch.from_numpy(pts.astype(np.float64)), torch.from_numpy(target), torch.from_numpy(valid))
    return PairSample(ia, ib, view_a.image, view_b.image, view_hat.image, kps)


def to_field_coords(kps: KeypointBatch, stride: int, h: int, w: int) -> KeypointBatch:
    """Full-resolution keypoints -> low-res grid units.

    Both use the half-pixel aligned map ``(p + 0.5) / s - 0.5`` under which
    low-res cell centers coincide with upsampled descriptor positions.
    """
    src = (kps.source + 0.5) / stride - 0.5
    tgt = (kps.target + 0.5) / stride - 0.5
    tgt = torch.stack([tgt[:, 0].clamp(0, h - 1), tgt[:, 1].clamp(0, w - 1)], dim=1)
    return KeypointBatch(src, tgt, kps.valid)


class Trainer:
    """Owns a model and its optimizer; runs pretraining or CCL epochs."""

    def __init__(self, config: TrainConfig, manifest: DatasetManifest | None = None, store=None,
                 out_dir=None, model: DescriptorNet | None = None):
        self.config = config
        self.store = store if store is not None else ImageStore(manifest, config.image_size)
        if len(self.store) < 2:
            raise ValueError("need at least two training images")
        self.out_dir = Path(out_dir) if out_dir else None
        torch.manual_seed(config.seed)
        self.model = model if model is not None else DescriptorNet(config.model)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=config.learning_rate, weight_decay=config.optimizer.weight_decay
        )
        self.state = TrainState()
        self.history: list[dict] = []
        self.workers = int(os.environ.get("CCL_NUM_WORKERS", "1") or 1)

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.model, {
            "optimizer": self.optimizer.state_dict(),
            "train_state": self.state.to_dict(),
            "train_config": self.config.to_dict(),
        })

    def load_weights(self, path) -> None:
        """Initialize model weights only (e.g. from the pretraining checkpoint)."""
        config, payload = read_checkpoint(path)
        if config != self.config.model:
            raise ValueError(f"checkpoint model config {config} does not match {self.config.model}")
        self.model.load_state_dict(payload["model"])

    def resume(self, path) -> None:
        model, payload = load_checkpoint(path)
        self.model.load_state_dict(model.state_dict())
        self.optimizer.load_state_dict(payload["optimizer"])
        self.state = TrainState(**payload["train_state"])

    # -- training ------------------------------------------------------------

    def _batch(self, step: int) -> list[PairSample]:
        seed = self.config.seed
        return [prepare_pair(self.store, self.config, step_seed(seed, step, b)) for b in range(self.config.batch_size)]

    def _batches(self, start: int, stop: int):
        if self.workers <= 1:
            for step in range(start, stop):
                yield step, self._batch(step)
            return
        with ThreadPoolExecutor(self.workers) as pool:
            lookahead = 2 * self.workers
            pending = {}
            for step in range(start, min(stop, start + lookahead)):
                pending[step] = pool.submit(self._batch, step)
            for step in range(start, stop):
                nxt = step + lookahead
                if nxt < stop:
                    pending[nxt] = pool.submit(self._batch, nxt)
                yield step, pending.pop(step).result()

    def _autocast(self):
        if self.config.precision == "reduced":
            return torch.autocast("cpu", dtype=torch.bfloat16)
        return contextlib.nullcontext()

    def train_step(self, step: int, batch: list[PairSample], mode: str) -> dict:
        cfg = self.config
        B = len(batch)
        images = torch.stack([p.image_a for p in batch] + [p.image_b for p in batch] + [p.image_hat for p in batch])
        self.model.train()
        with self._autocast():
            fields = self.model(images).float()
        h, w = fields.shape[-2:]
        pair_losses, cyc, ident, xs, kept = [], [], [], [], []
        for i, p in enumerate(batch):
            kps = to_field_coords(p.keypoints, cfg.model.stride, h, w)
            f_a, f_b, f_hat = fields[i], fields[B + i], fields[2 * B + i]
            try:
                if mode == "pretrain":
                    li = identical_view_loss(f_a, f_hat, kps, cfg.loss)
                    pair_losses.append(li)
                    ident.append(float(li.detach()))
                    kept.append(1.0)
                else:
                    res = cycle_loss(f_a, f_b, f_hat, kps, cfg.loss)
                    lam = cfg.loss.lambda_identical
                    li = identical_view_loss(f_a, f_hat, kps, cfg.loss) if lam > 0 else torch.zeros(())
                    pair_losses.append(combined_loss(res, li, lam))
                    cyc.append(float(res.loss.detach()))
                    ident.append(float(li.detach()))
                    xs.append(res.mean_summed_variance)
                    kept.append(res.kept_fraction)
            except NoValidKeypointsError:
                self.state.skipped_pairs += 1

        row = {"step": step, "loss": float("nan"), "cycle_loss": _mean(cyc), "identical_loss": _mean(ident),
               "mean_X": _mean(xs), "kept_fraction": _mean(kept)}
        if not pair_losses:
            return row
        loss = torch.stack(pair_losses).mean()
        if not torch.isfinite(loss):
            self._dump_failure(step, batch, float(loss.detach()))
            raise NonFiniteLossError(f"non-finite loss {float(loss.detach())} at step {step}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.optimizer.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.optimizer.grad_clip)
        self.optimizer.step()
        row["loss"] = float(loss.detach())
        return row

    def _dump_failure(self, step, batch, value):
        info = {"seed": self.config.seed, "step": step, "loss": value,
                "pairs": [[p.index_a, p.index_b] for p in batch],
                "pair_seeds": [step_seed(self.config.seed, step, b) for b in range(len(batch))]}
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "nonfinite_dump.json").write_text(json.dumps(info, indent=1))
        log.error("non-finite loss: %s", info)

    def run(self, mode: str, epochs: int, eval_fn: Callable | None = None,
            checkpoint_prefix: str | None = None) -> list[float]:
        """Train ``epochs`` more epochs; returns the mean logged loss of each epoch."""
        if mode not in ("pretrain", "ccl"):
            raise ValueError(mode)
        if self.state.mode != mode:
            self.state = TrainState(mode=mode)
        prefix = checkpoint_prefix or mode
        metrics_path = self.out_dir / f"{prefix}_metrics.csv" if self.out_dir else None
        if metrics_path and not metrics_path.exists():
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with open(metrics_path, "w", newline="") as f:
                csv.writer(f).writerow(METRICS_HEADER)
        if self.out_dir and epochs == 0:
            self.save(self.out_dir / f"{prefix}_last.ckpt")
        means = []
        for _ in range(epochs):
            start = self.state.global_step
            stop = start + self.config.batches_per_epoch
            rows = []
            for step, batch in self._batches(start, stop):
                row = self.train_step(step, batch, mode)
                rows.append(row)
                self.state.global_step = step + 1
            self.history.extend(rows)
            self.state.epoch += 1
            losses = [r["loss"] for r in rows if math.isfinite(r["loss"])]
            means.append(float(np.mean(losses)) if losses else float("nan"))
            self.state.epoch_losses.append(means[-1])
            log.info("%s epoch %d: mean loss %.4f", mode, self.state.epoch, means[-1])
            if metrics_path:
                with open(metrics_path, "a", newline="") as f:
                    w = csv.writer(f)
                    for r in rows:
                        w.writerow([r["step"]] + [_fmt(r[k]) for k in METRICS_HEADER[1:]])
            if self.out_dir:
                self.save(self.out_dir / f"{prefix}_epoch{self.state.epoch:03d}.ckpt")
                self.save(self.out_dir / f"{prefix}_last.ckpt")
            if eval_fn is not None:
                eval_fn(self, self.state.epoch)
        return means


def _mean(xs) -> float:
    xs = [x for x in xs if math.isfinite(x)]
    return float(np.mean(xs)) if xs else float("nan")


def _fmt(x: float) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.8g}"


def pretrain_identical(config: TrainConfig, data, out_dir=None, epochs: int | None = None) -> Trainer:
    """Identical-view pretraining; ``data`` is a manifest or an indexable image store."""
    trainer = _trainer(config, data, out_dir)
    trainer.run("pretrain", config.pretrain_epochs if epochs is None else epochs)
    return trainer


def train_ccl(config: TrainConfig, data, out_dir=None, epochs: int | None = None, eval_fn=None) -> Trainer:
    if config.init_checkpoint is None and not config.from_scratch:
        raise ValueError("train_ccl needs init_checkpoint or from_scratch=True")
    trainer = _trainer(config, data, out_dir)
    if config.init_checkpoint is not None:
        trainer.load_weights(config.init_checkpoint)
    trainer.run("ccl", config.epochs if epochs is None else epochs, eval_fn=eval_fn)
    return trainer


def _trainer(config, data, out_dir) -> Trainer:
    if isinstance(data, DatasetManifest):
        return Trainer(config, manifest=data, out_dir=out_dir)
    return Trainer(config, store=data, out_dir=out_dir)


# --- ablation --------------------------------------------------------------------


def run_ablation_grid(config: TrainConfig, data, evaluate_fn: Callable[[DescriptorNet], dict],
                      q_values=(0.35, 0.65, 1.0), scaling_values=(True, False), seeds=None,
                      out_dir=None) -> list[dict]:
    """Train one CCL model per (q, scaling, seed) cell and evaluate it.

    Pretraining (which does not depend on q or scaling) is run once per
    seed and shared by the cells.  A failing cell is recorded as NaN.
    """
    out_dir = Path(out_dir) if out_dir else None
    seeds = [config.seed] if seeds is None else list(seeds)
    rows = []
    for seed in seeds:
        base = config.with_overrides({"seed": seed})
        init = config.init_checkpoint
        if init is None and base.pretrain_epochs > 0:
            pre_dir = (out_dir / f"pretrain_seed{seed}") if out_dir else None
            trainer = pretrain_identical(base, data, pre_dir)
            init = _stash(trainer, pre_dir, seed)
        for q in q_values:
            for scaling in scaling_values:
                cell = base.with_overrides({"loss.quantile_keep": q, "loss.variance_scaling": scaling,
                                            "init_checkpoint": init, "from_scratch": init is None})
                row = {"seed": seed, "q": q, "variance_scaling": scaling}
                try:
                    trainer = train_ccl(cell, data)
                    row.update(evaluate_fn(trainer.model))
                except Exception as e:  # one failing cell must not stop the grid
                    log.exception("ablation cell %s failed", row)
                    row.update({"auc": float("nan"), "error": repr(e)})
                rows.append(row)
    if out_dir:
        write_ablation(rows, out_dir)
    return rows


def _stash(trainer: Trainer, pre_dir, seed) -> str:
    if pre_dir is not None:
        path = Path(pre_dir) / "pretrain_last.ckpt"
        trainer.save(path)
        return str(path)
    import tempfile

    path = Path(tempfile.mkdtemp(prefix=f"ccl_pre{seed}_")) / "pretrain.ckpt"
    trainer.save(path)
    return str(path)


def write_ablation(rows: list[dict], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    path = out_dir / "ablation.csv"
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    _plot_ablation(rows, out_dir)
    return path


def _plot_ablation(rows, out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for scaling in sorted({r["variance_scaling"] for r in rows}):
        sub = [r for r in rows if r["variance_scaling"] == scaling]
        qs = sorted({r["q"] for r in sub})
        auc = [np.nanmean([r.get("auc", np.nan) for r in sub if r["q"] == q]) for q in qs]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(qs, auc, "o-")
        ax.set_xlabel("quantile q")
        ax.set_ylabel("AUC PCK@[1..50]")
        ax.set_title(f"variance scaling {'on' if scaling else 'off'}")
        fig.tight_layout()
        fig.savefig(out_dir / f"ablation_scaling_{'on' if scaling else 'off'}.png")
        plt.close(fig)
