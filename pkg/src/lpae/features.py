"""Pooled encoder features, the softmax linear probe, and the level / dimensionality ablations."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arrayfile
from .data import Dataset
from .errors import DegenerateInputError, ShapeError
from .model import encode_dcae, encode_lpae
from .pyramid import pyramids
from .tensor import Tensor, grid_max_pool, grid_shape, linear, no_grad, softmax_cross_entropy
from .train import AdamState, adam_step

COLUMN_FIELDS = ("level", "layer", "channel", "cell")


@dataclass
class FeatureMatrix:
    """Rows are samples; ``column_map[i]`` is the (level, layer, channel, cell) behind column i."""

    values: np.ndarray
    column_map: np.ndarray
    values_per_map: int

    @property
    def shape(self):
        return self.values.shape

    def select_levels(self, levels) -> "FeatureMatrix":
        mask = np.isin(self.column_map[:, 0], list(levels))
        return FeatureMatrix(self.values[:, mask], self.column_map[mask], self.values_per_map)

    def save(self, path):
        """Arrays in the checkpoint container plus a ``.columns.csv`` sidecar."""
        path = Path(path)
        arrayfile.write_arrays(path, {"features": self.values,
                                      "column_map": self.column_map.astype(np.int64),
                                      "values_per_map": np.array([self.values_per_map], np.int64)})
        with open(path.with_suffix(".columns.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("col",) + COLUMN_FIELDS)
            for i, row in enumerate(self.column_map):
                w.writerow((i, *row.tolist()))

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        _, arrays = arrayfile.read_arrays(path)
        return cls(arrays["features"], arrays["column_map"].astype(np.int32),
                   int(arrays["values_per_map"][0]))


def _encoder_activations(model, images, training=False):
    if model.kind == "lpae":
        lap, _ = pyramids(images, len(model.levels))
        _, acts = encode_lpae(model, lap, training)
    else:
        _, acts = encode_dcae(model, images, training)
    return acts


def extract_features(model, images, values_per_map: int = 16, include_levels=None,
                     batch_size: int = 50) -> FeatureMatrix:
    """Grid max-pool every encoder layer's (post BN, post ReLU) maps and concatenate.

    The model runs in eval mode, so BN uses its running statistics.  ``images``
    must already be whitened the way the model was trained.
    """
    if isinstance(images, Dataset):
        images = images.images
    grid = grid_shape(values_per_map)
    levels = sorted(range(len(model.levels)) if include_levels is None else include_levels)
    bad = [k for k in levels if not 0 <= k < len(model.levels)]
    if bad:
        raise ValueError(f"levels {bad} do not exist in a {len(model.levels)}-level model")
    dtype = model.levels[0].encoder[0].w.dtype
    chunks = []
    columns = None
    with no_grad():
        for start in range(0, len(images), batch_size):
            batch = np.asarray(images[start:start + batch_size], dtype=dtype)
            acts = _encoder_activations(model, batch)
            pieces, cmap = [], []
            for k in levels:
                for j, a in enumerate(acts[k]):
                    try:
                        pooled = grid_max_pool(Tensor(a.data), grid).data
                    except DegenerateInputError as exc:
                        raise DegenerateInputError(
                            f"{model.levels[k].encoder[j].name}: {exc}") from None
                    pieces.append(pooled)
                    if columns is None:
                        ch, cells = a.shape[1], grid[0] * grid[1]
                        c_idx, q_idx = np.divmod(np.arange(ch * cells), cells)
                        cmap.append(np.stack([np.full_like(c_idx, k), np.full_like(c_idx, j),
                                              c_idx, q_idx], axis=1))
            chunks.append(np.concatenate(pieces, axis=1))
            if columns is None:
                columns = np.concatenate(cmap).astype(np.int32)
    return FeatureMatrix(np.concatenate(chunks), columns, values_per_map)


def pixel_features(images) -> FeatureMatrix:
    """Raw (whitened) pixels as a feature matrix, for the pixel baseline."""
    if isinstance(images, Dataset):
        images = images.images
    flat = np.asarray(images, dtype=np.float32).reshape(len(images), -1)
    cmap = np.zeros((flat.shape[1], 4), dtype=np.int32)
    cmap[:, 3] = np.arange(flat.shape[1])
    return FeatureMatrix(flat, cmap, 1)


# ---------------------------------------------------------------------------
# linear probe

@dataclass
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 50
    learning_rate: float = 1e-3
    seed: int = 0
    standardize: bool = False


@dataclass
class ProbeModel:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    epoch_losses: list = field(default_factory=list)

    @property
    def n_classes(self):
        return self.weight.shape[1]

    def logits(self, features):
        x = (np.asarray(features, dtype=np.float32) - self.mean) / self.scale
        return x @ self.weight + self.bias

    def predict(self, features):
        return self.logits(_values(features)).argmax(axis=1)


def _values(features):
    return features.values if isinstance(features, FeatureMatrix) else np.asarray(features)


def train_probe(features, labels, config: ProbeConfig = ProbeConfig(),
                n_classes: int | None = None) -> ProbeModel:
    """Unregularised softmax regression fitted with Adam."""
    x = np.asarray(_values(features), dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"{len(y)} labels for feature matrix of shape {x.shape}")
    classes = int(y.max()) + 1 if n_classes is None else n_classes
    if config.standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        live = scale[scale > 0]
        # near-constant columns would blow up on unseen data
        floor = 0.01 * float(np.median(live)) if live.size else 1.0
        scale = np.maximum(scale, floor)
    else:
        mean = np.zeros(x.shape[1], np.float32)
        scale = np.ones(x.shape[1], np.float32)
    xs = ((x - mean) / scale).astype(np.float32)
    w = Tensor(np.zeros((x.shape[1], classes), np.float32), requires_grad=True)
    b = Tensor(np.zeros(classes, np.float32), requires_grad=True)
    params = {"weight": w, "bias": b}
    adam = AdamState()
    rng = np.random.default_rng(config.seed)
    epoch_losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(xs))
        total = 0.0
        for start in range(0, len(xs), config.batch_size):
            idx = order[start:start + config.batch_size]
            w.grad = b.grad = None
            loss = softmax_cross_entropy(linear(Tensor(xs[idx]), w, b), y[idx])
            loss.backward()
            adam_step(params, adam, config.learning_rate)
            total += loss.item() * len(idx)
        epoch_losses.append(total / len(xs))
    return ProbeModel(w.data, b.data, mean.astype(np.float32), scale.astype(np.float32), epoch_losses)


def evaluate(probe: ProbeModel, features, labels) -> float:
    """Fraction of correctly classified rows."""
    x = _values(features)
    if x.shape[1] != probe.weight.shape[0]:
        raise ShapeError(f"probe expects {probe.weight.shape[0]} features, got {x.shape[1]}")
    return float((probe.predict(x) == np.asarray(labels)).mean())


def repeated_probe(train_x, train_y, test_x, test_y, repeats: int = 6,
                   config: ProbeConfig = ProbeConfig()) -> list:
    """Test accuracies of ``repeats`` probes trained with seeds ``config.seed + r``."""
    classes = int(max(np.max(train_y), np.max(test_y))) + 1
    accs = []
    for r in range(repeats):
        cfg = ProbeConfig(config.epochs, config.batch_size, config.learning_rate,
                          config.seed + r, config.standardize)
        probe = train_probe(train_x, train_y, cfg, n_classes=classes)
        accs.append(evaluate(probe, test_x, test_y))
    return accs


# ---------------------------------------------------------------------------
# ablation reports

@dataclass
class ReportRow:
    label: str
    levels: tuple
    values_per_map: int
    n_columns: int
    accuracies: list

    @property
    def mean(self):
        return float(np.mean(self.accuracies))

    @property
    def std(self):
        return float(np.std(self.accuracies))


@dataclass
class Report:
    kind: str
    model: str
    rows: list = field(default_factory=list)


def evaluate_features(train_fm: FeatureMatrix, train_y, test_fm: FeatureMatrix, test_y,
                      repeats=6, config=ProbeConfig(), label="whole set", levels=()) -> ReportRow:
    accs = repeated_probe(train_fm.values, train_y, test_fm.values, test_y, repeats, config)
    return ReportRow(label, tuple(levels), train_fm.values_per_map, train_fm.values.shape[1], accs)


def level_subsets(n_levels: int) -> list:
    """``(label, levels)`` for each level alone, each leave-one-out set, and the whole set."""
    all_levels = tuple(range(n_levels))
    subsets = [(f"level {k}", (k,)) for k in all_levels]
    subsets += [(f"C_level {k}", tuple(j for j in all_levels if j != k)) for k in all_levels]
    subsets.append(("whole set", all_levels))
    return subsets


def level_ablation(model, train: Dataset, test: Dataset, values_per_map=16, repeats=6,
                   config=ProbeConfig(), model_name="") -> Report:
    """Probe accuracy for every level subset: 2n + 1 rows for n levels."""
    train_fm = extract_features(model, train, values_per_map)
    test_fm = extract_features(model, test, values_per_map)
    report = Report("level", model_name)
    for label, levels in level_subsets(len(model.levels)):
        report.rows.append(evaluate_features(train_fm.select_levels(levels), train.labels,
                                             test_fm.select_levels(levels), test.labels,
                                             repeats, config, label, levels))
    return report


def dim_ablation(model, train: Dataset, test: Dataset, values_list=(4, 9, 16, 24), repeats=6,
                 config=ProbeConfig(), model_name="") -> Report:
    """Probe accuracy for each values-per-map setting."""
    report = Report("dim", model_name)
    levels = tuple(range(len(model.levels)))
    for v in values_list:
        train_fm = extract_features(model, train, v)
        test_fm = extract_features(model, test, v)
        report.rows.append(evaluate_features(train_fm, train.labels, test_fm, test.labels,
                                             repeats, config, f"{v}/", levels))
    return report


def write_report(report: Report, path) -> list:
    """Write the report as CSV and return the written paths.

    Every report gets a long CSV (one row per setting with each repeat's
    accuracy).  Dimensionality reports additionally get a wide
    ``<stem>_table.csv`` with one column per values-per-map setting.
    """
    path = Path(path)
    repeats = max((len(r.accuracies) for r in report.rows), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "subset", "levels", "values_per_map", "n_columns", "mean", "std"]
                   + [f"acc_{i + 1}" for i in range(repeats)])
        for r in report.rows:
            w.writerow([report.model, r.label, " ".join(map(str, r.levels)), r.values_per_map,
                        r.n_columns, f"{r.mean:.6f}", f"{r.std:.6f}"]
                       + [f"{a:.6f}" for a in r.accuracies])
    written = [path]
    if report.kind == "dim":
        table = path.with_name(path.stem + "_table.csv")
        with open(table, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model"] + [r.label for r in report.rows])
            w.writerow([report.model] + [f"{100 * r.mean:.1f}±{100 * r.std:.1f}" for r in report.rows])
        written.append(table)
    return written
