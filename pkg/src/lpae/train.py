"""Adam training loop, loss logging and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import arrayfile
from .data import Dataset, ZCAStats, batches, num_batches
from .errors import CheckpointError, NonFiniteError, TrainingDiverged
from .model import (ArchitectureSpec, build_model, forward_dcae, forward_lpae, init_weights,
                    parse_arch)
from .pyramid import pyramids

__all__ = [
    "TrainConfig", "AdamState", "TrainLog", "Checkpoint", "init_weights", "adam_step",
    "train", "train_step", "fresh_model", "resume_training", "Progress",
    "save_checkpoint", "load_checkpoint", "write_log_csv", "read_log_csv",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 50
    learning_rate: float = 1e-3
    init_std: float = 0.02
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    use_bn: bool = True

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "init_std", "epochs", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.use_bn and self.batch_size < 2:
            raise ValueError("batch norm needs a batch size of at least 2")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, state: AdamState, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """One bias-corrected Adam update of every tensor in ``params`` from its ``.grad``."""
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        grads[name] = g
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.data.dtype)


@dataclass
class TrainLog:
    """Per-step losses; ``rows`` hold ``(step, epoch, total, loss_0, ..., loss_n)``."""

    n_levels: int
    rows: list = field(default_factory=list)
    diverged: bool = False

    @property
    def header(self):
        return ["step", "epoch", "loss_total"] + [f"loss_{k}" for k in range(self.n_levels)]

    def epoch_means(self, column: int = 2) -> dict:
        sums, counts = {}, {}
        for row in self.rows:
            e = row[1]
            sums[e] = sums.get(e, 0.0) + row[column]
            counts[e] = counts.get(e, 0) + 1
        return {e: sums[e] / counts[e] for e in sums}

    def convergence(self, ratio: float = 0.5) -> dict:
        """Compare the first and last epoch mean losses.

        A run is flagged as converged when it never produced a non-finite loss
        and its last-epoch mean is below ``ratio`` times its first-epoch mean.
        With a single epoch, the first and last tenth of the steps stand in.
        """
        totals = [r[2] for r in self.rows]
        means = self.epoch_means()
        if len(means) >= 2:
            first, last = means[min(means)], means[max(means)]
        elif totals:
            w = max(1, len(totals) // 10)
            first, last = float(np.mean(totals[:w])), float(np.mean(totals[-w:]))
        else:
            first = last = float("nan")
        finite = all(math.isfinite(t) for t in totals) and not self.diverged
        converged = bool(finite and totals and last < ratio * first)
        return {"converged": converged, "diverged": self.diverged, "first_loss": first,
                "last_loss": last, "ratio": last / first if first else float("nan"),
                "threshold": ratio, "steps": len(totals)}


def write_log_csv(path, train_log: TrainLog):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(train_log.header)
        for row in train_log.rows:
            w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])


def read_log_csv(path) -> TrainLog:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        train_log = TrainLog(len(header) - 3)
        for rec in reader:
            train_log.rows.append((int(rec[0]), int(rec[1])) + tuple(float(v) for v in rec[2:]))
    return train_log


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Progress:
    """Where training stands: ``epoch`` (0-based) and batches already done within it."""

    step: int = 0
    epoch: int = 0
    batch: int = 0


@dataclass
class Checkpoint:
    model: object
    adam: AdamState
    progress: Progress
    config: TrainConfig | None = None
    zca: ZCAStats | None = None
    meta: dict = field(default_factory=dict)

    def save(self, path):
        extra = {k: v for k, v in self.meta.items() if k not in ("model", "config")}
        save_checkpoint(path, self.model, self.adam, self.progress, self.config, self.zca, extra)


def _checkpoint_arrays(model, adam: AdamState, progress: Progress, config, zca, extra_meta):
    meta = {"model": model.describe(), "config": None if config is None else asdict(config)}
    meta.update(extra_meta or {})
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, t in model.named_parameters().items():
        arrays[f"param/{name}"] = t.data
    for name, arr in model.named_buffers().items():
        arrays[f"buffer/{name}"] = arr
    for name in model.named_parameters():
        if name in adam.m:
            arrays[f"adam.m/{name}"] = adam.m[name]
            arrays[f"adam.v/{name}"] = adam.v[name]
    arrays["adam.t"] = np.array([adam.t], dtype=np.int64)
    seed = 0 if config is None else config.seed
    arrays["progress"] = np.array([progress.step, progress.epoch, progress.batch, seed], dtype=np.int64)
    if zca is not None:
        arrays.update(zca.to_arrays())
    return arrays


def save_checkpoint(path, model, adam: AdamState | None = None, progress: Progress | None = None,
                    config: TrainConfig | None = None, zca: ZCAStats | None = None,
                    extra_meta: dict | None = None):
    arrays = _checkpoint_arrays(model, adam or AdamState(), progress or Progress(), config, zca,
                                extra_meta)
    arrayfile.write_arrays(path, arrays, model.arch_hash())


def load_checkpoint(path, model=None) -> Checkpoint:
    """Restore a checkpoint, building the model from its stored architecture unless one is given.

    A supplied ``model`` must have the same architecture hash as the file.
    """
    arch_hash, arrays = arrayfile.read_arrays(path)
    if "meta" not in arrays:
        raise CheckpointError(f"{path}: missing metadata")
    meta = json.loads(arrays["meta"].tobytes().decode())
    if model is None:
        desc = meta["model"]
        spec: ArchitectureSpec = parse_arch(desc["arch"])
        model = build_model(spec, desc["image_size"], use_bn=desc["use_bn"])
    if model.arch_hash() != arch_hash:
        raise CheckpointError(f"{path}: architecture hash does not match the target model")
    params = model.named_parameters()
    for name, t in params.items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if arrays[key].shape != t.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {arrays[key].shape}")
        t.data = arrays[key].copy()
        t.grad = None
    try:
        model.load_buffers({k[len("buffer/"):]: v for k, v in arrays.items() if k.startswith("buffer/")})
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing running statistics {exc}") from exc
    adam = AdamState(t=int(arrays["adam.t"][0]))
    for name in params:
        if f"adam.m/{name}" in arrays:
            adam.m[name] = arrays[f"adam.m/{name}"].copy()
            adam.v[name] = arrays[f"adam.v/{name}"].copy()
    step, epoch, batch, _seed = (int(v) for v in arrays["progress"])
    config = TrainConfig(**meta["config"]) if meta.get("config") else None
    return Checkpoint(model, adam, Progress(step, epoch, batch), config,
                      ZCAStats.from_arrays(arrays), meta)


# ---------------------------------------------------------------------------
# training loop

def _snapshot(model):
    return ({k: t.data for k, t in model.named_parameters().items()},
            {k: v.copy() for k, v in model.named_buffers().items()})


def _restore(model, snap):
    params, buffers = snap
    for k, t in model.named_parameters().items():
        t.data = params[k]
    model.load_buffers(buffers)


def train_step(model, images: np.ndarray, adam: AdamState, config: TrainConfig) -> list:
    """Forward, backward and one Adam update; returns ``[total, loss_0, ...]``."""
    model.zero_grad()
    if model.kind == "lpae":
        lap, gauss = pyramids(images, len(model.levels))
        out = forward_lpae(model, lap, gauss, training=True)
        losses = [out.loss.item()] + [lk.item() for lk in out.loss_k]
    else:
        out = forward_dcae(model, images, training=True)
        losses = [out.loss.item(), out.loss.item()]
    if not all(math.isfinite(v) for v in losses):
        raise NonFiniteError("non-finite loss")
    out.loss.backward()
    adam_step(model.named_parameters(), adam, config.learning_rate, config.beta1,
              config.beta2, config.eps)
    return losses


def train(model, dataset: Dataset, config: TrainConfig, callbacks=(), checkpoint_path=None,
          resume: Checkpoint | None = None, zca: ZCAStats | None = None,
          max_steps: int | None = None, log_path=None) -> TrainLog:
    """Mini-batch Adam over ``dataset`` (already whitened) for ``config.epochs`` epochs.

    Each epoch visits a permutation fixed by ``(config.seed, epoch)`` and drops
    the last short batch.  ``callbacks`` receive each logged row.  Passing
    ``resume`` continues from that checkpoint's optimiser state and position;
    ``max_steps`` stops early (after writing the checkpoint), which is how an
    interrupted run is simulated.

    On a non-finite loss or gradient, the last finite state is written to
    ``checkpoint_path`` and :class:`TrainingDiverged` is raised.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if config.batch_size > len(dataset):
        raise ValueError(f"batch size {config.batch_size} exceeds dataset size {len(dataset)}")
    n_levels = len(model.levels)
    train_log = TrainLog(n_levels)
    adam = resume.adam if resume is not None else AdamState()
    progress = Progress(**asdict(resume.progress)) if resume is not None else Progress()
    per_epoch = num_batches(len(dataset), config.batch_size)
    dtype = model.levels[0].encoder[0].w.dtype
    images_all = dataset.images.astype(dtype, copy=False)
    data = dataset.with_images(images_all)

    def save(prog):
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, adam, prog, config, zca)

    steps_run = 0
    while progress.epoch < config.epochs:
        for images, _ in batches(data, config.batch_size, config.seed, progress.epoch, progress.batch):
            if max_steps is not None and steps_run >= max_steps:
                save(progress)
                return train_log
            snap = _snapshot(model)
            adam_snap = (dict((k, v.copy()) for k, v in adam.m.items()),
                         dict((k, v.copy()) for k, v in adam.v.items()), adam.t)
            try:
                losses = train_step(model, images, adam, config)
            except NonFiniteError as exc:
                _restore(model, snap)
                adam.m, adam.v, adam.t = adam_snap
                train_log.diverged = True
                save(progress)
                if log_path is not None:
                    write_log_csv(log_path, train_log)
                raise TrainingDiverged(f"training diverged at step {progress.step + 1}: {exc}",
                                       train_log, checkpoint_path) from exc
            progress.step += 1
            progress.batch += 1
            row = (progress.step, progress.epoch + 1, *losses[:1], *losses[1:1 + n_levels])
            train_log.rows.append(row)
            steps_run += 1
            for cb in callbacks:
                cb(row)
        if progress.batch >= per_epoch:
            log.info("epoch %d mean loss %.6g", progress.epoch + 1,
                     train_log.epoch_means().get(progress.epoch + 1, float("nan")))
            progress.epoch += 1
            progress.batch = 0
    save(progress)
    if log_path is not None:
        write_log_csv(log_path, train_log)
    return train_log


def fresh_model(spec: ArchitectureSpec, image_size: int, config: TrainConfig):
    """Model initialised as the training setup prescribes (seeded N(0, init_std))."""
    model = build_model(spec, image_size, seed=config.seed, use_bn=config.use_bn,
                        init_std=config.init_std)
    return model


def resume_training(path, dataset: Dataset, **kwargs) -> TrainLog:
    ckpt = load_checkpoint(path)
    if ckpt.config is None:
        raise CheckpointError(f"{path} holds no training configuration")
    return train(ckpt.model, dataset, ckpt.config, resume=ckpt, checkpoint_path=Path(path),
                 zca=ckpt.zca, **kwargs)
