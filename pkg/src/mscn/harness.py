"""Training, evaluation, perturbation sweeps and cross-resolution experiments.

Also holds the pointwise reference model used for relative robustness
comparisons: a per-point MLP with global max pooling that optionally
normalizes its input to the unit sphere.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import (CLASS_NAMES, CloudSet, DatasetManifest, GeometryError, Placement,
                       PointCloud, Transform, decimate_channels, generate_primitive,
                       load_dataset, random_downsample, save_manifest, save_xyz)
from .layers import MSCN, NetworkConfig, as_points, head_mlp

log = logging.getLogger(__name__)

CSV_HEADER = ["scenario", "transform", "param", "accuracy", "per_class_json", "latency_ms", "seed"]
EVAL_SEED = 0


# --------------------------------------------------------------------------
# toy benchmark

@dataclass
class ToySpec:
    n_train_per_class: int = 300
    n_test_per_class: int = 150
    n_points: int = 1024
    occlusion_min: float = 0.3
    occlusion_max: float = 0.5
    num_classes: int = 3
    placement: Optional[Placement] = field(default_factory=Placement)


def make_toy_split(spec: ToySpec, seed: int, split: str) -> list[PointCloud]:
    """Deterministic list of labelled clouds; ``split`` is "train" or "test"."""
    n = spec.n_train_per_class if split == "train" else spec.n_test_per_class
    split_id = {"train": 0, "test": 1}[split]
    rng = np.random.default_rng([seed, split_id, 7])
    clouds = []
    for i in range(n):
        for c in range(spec.num_classes):
            occ = float(rng.uniform(spec.occlusion_min, spec.occlusion_max))
            inst_seed = int(np.random.SeedSequence([seed, split_id, c, i]).generate_state(1)[0])
            cloud = generate_primitive(c, spec.n_points, inst_seed, occ, spec.placement)
            cloud.meta["split"] = split
            clouds.append(cloud)
    return clouds


def write_toy_benchmark(out_dir, spec: ToySpec, seed: int) -> dict:
    """Write train/test ``.xyz`` files and ``manifest.json`` per split; returns manifest paths."""
    out_dir = Path(out_dir)
    paths = {}
    params = asdict(spec)
    for split in ("train", "test"):
        d = out_dir / split
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, cloud in enumerate(make_toy_split(spec, seed, split)):
            name = f"{CLASS_NAMES[cloud.label]}_{i:05d}.xyz"
            save_xyz(d / name, cloud)
            entries.append((name, int(cloud.label)))
        manifest = DatasetManifest(entries, list(CLASS_NAMES[:spec.num_classes]), seed, params)
        save_manifest(d / "manifest.json", manifest)
        paths[split] = d / "manifest.json"
    return paths


def sparse_copy(clouds, r=4.0, seed=EVAL_SEED):
    """Random-downsampled copies (e.g. 1024 -> 256 points)."""
    return [random_downsample(c, r, seed * 1_000_003 + i) for i, c in enumerate(clouds)]


def decimated_copy(clouds, total_channels=64, keep_every=2):
    return [decimate_channels(c, total_channels, keep_every) for c in clouds]


# --------------------------------------------------------------------------
# reference pointwise model

def normalize_unit_sphere(points: torch.Tensor) -> torch.Tensor:
    centered = points - points.mean(dim=1, keepdim=True)
    radius = centered.norm(dim=-1).max(dim=1).values.clamp_min(1e-12)
    return centered / radius[:, None, None]


class PointwiseNet(nn.Module):
    """Per-point MLP 3 -> 64 -> 128 -> 1024, global max pool, classification head."""

    def __init__(self, num_classes=3, normalize=True, dropout=0.5, widths=(64, 128, 1024),
                 head=(512, 256)):
        super().__init__()
        self.config = {"num_classes": num_classes, "normalize": normalize, "dropout": dropout,
                       "widths": list(widths), "head": list(head)}
        self.normalize = normalize
        layers, prev = [], 3
        for w in widths:
            layers += [nn.Linear(prev, w), nn.BatchNorm1d(w), nn.ReLU()]
            prev = w
        self.point_mlp = nn.Sequential(*layers)
        self.head = head_mlp([prev] + list(head), num_classes, dropout)

    def features(self, points, seed=0, ids=None, nbr=None):
        p = as_points(points)
        if self.normalize:
            p = normalize_unit_sphere(p)
        x = p.to(self.head[0].weight.dtype)
        B, N, _ = x.shape
        h = x.reshape(B * N, 3)
        for mod in self.point_mlp:
            h = mod(h)
        return h.view(B, N, -1).max(dim=1).values

    def forward(self, points, seed=0, ids=None, nbr=None):
        return self.head(self.features(points))


# --------------------------------------------------------------------------
# training

@dataclass
class ExperimentConfig:
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    epochs: int = 10
    batch_size: int = 16
    lr: float = 4e-4
    seed: int = 0
    rotations: list = field(default_factory=lambda: list(range(0, 101, 10)))
    shifts: list = field(default_factory=lambda: list(range(0, 101, 10)))
    scales: list = field(default_factory=lambda: [float(s) for s in np.logspace(-2, 2, 9)])
    resolutions: list = field(default_factory=lambda: [
        {"name": "dense", "kind": "identity"},
        {"name": "sparse", "kind": "downsample", "r": 4.0},
        {"name": "decimated", "kind": "decimate", "total_channels": 64, "keep_every": 2}])

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalization)")
        for name in ("rotations", "shifts", "scales", "resolutions"):
            if not getattr(self, name):
                raise ValueError(f"{name} grid must be non-empty")
        self.network.validate()

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["network"] = self.network.to_json()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "network" in doc:
            doc["network"] = NetworkConfig.from_json(doc["network"])
        cfg = cls(**doc)
        cfg.validate()
        return cfg


def check_labels(data: CloudSet, num_classes: int):
    bad = (data.labels < 0) | (data.labels >= num_classes)
    if bad.any():
        raise ValueError(f"dataset has labels outside 0..{num_classes - 1}")


def fit(model: nn.Module, data: CloudSet, epochs: int, batch_size: int = 16, lr: float = 4e-4,
        seed: int = 0, on_epoch: Optional[Callable] = None) -> list[dict]:
    """Cross-entropy training with Adam; returns per-epoch loss/accuracy rows."""
    check_labels(data, model.head[-1].out_features)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 11])
    uses_nbr = isinstance(model, MSCN)
    history = []
    step = 0
    for epoch in range(epochs):
        model.train()
        total, correct, loss_sum = 0, 0, 0.0
        for idx in data.batches(batch_size, rng):
            if len(idx) < 2:
                continue
            nbr = data.neighbors[idx] if uses_nbr else None
            logits = model(data.points[idx], seed=seed * 1_000_003 + step, nbr=nbr)
            loss = F.cross_entropy(logits, data.labels[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            loss_sum += loss.item() * len(idx)
            correct += int((logits.argmax(-1) == data.labels[idx]).sum())
            total += len(idx)
        row = {"epoch": epoch + 1, "loss": loss_sum / total, "train_accuracy": correct / total}
        history.append(row)
        log.info("epoch %d loss %.4f acc %.3f", row["epoch"], row["loss"], row["train_accuracy"])
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return history


def train_source(train: Sequence[PointCloud], config: ExperimentConfig,
                 on_epoch: Optional[Callable] = None):
    """Plain classifier training with cross-entropy; returns (model, history)."""
    torch.manual_seed(config.seed)
    model = MSCN(config.network)
    data = CloudSet(train, config.network.M)
    history = fit(model, data, config.epochs, config.batch_size, config.lr, config.seed, on_epoch)
    return model, history


def baseline_pointwise(train: Sequence[PointCloud], config: ExperimentConfig,
                       normalize: bool = True, on_epoch: Optional[Callable] = None):
    torch.manual_seed(config.seed)
    model = PointwiseNet(config.network.num_classes, normalize=normalize,
                         dropout=config.network.dropout)
    data = CloudSet(train, config.network.M)
    history = fit(model, data, config.epochs, config.batch_size, config.lr, config.seed, on_epoch)
    return model, history


# --------------------------------------------------------------------------
# evaluation

@dataclass
class MetricsRow:
    scenario: str
    transform: str
    param: float
    accuracy: float
    per_class: dict
    latency_ms: float
    epoch: Optional[int] = None
    seed: int = EVAL_SEED
    predictions: list = field(default_factory=list, repr=False)
    labels: list = field(default_factory=list, repr=False)

    def csv_row(self) -> list:
        return [self.scenario, self.transform, repr(float(self.param)), repr(self.accuracy),
                json.dumps(self.per_class, sort_keys=True), f"{self.latency_ms:.4f}", self.seed]


def predict(model: nn.Module, clouds: Sequence[PointCloud], seed: int = EVAL_SEED,
            batch_size: int = 64) -> np.ndarray:
    """Class predictions; equal-size clouds are batched in their original order."""
    model.eval()
    preds = np.empty(len(clouds), dtype=np.int64)
    by_size: dict = {}
    for i, c in enumerate(clouds):
        by_size.setdefault(len(c), []).append(i)
    with torch.no_grad():
        for size in sorted(by_size):
            members = by_size[size]
            for j in range(0, len(members), batch_size):
                chunk = members[j:j + batch_size]
                pts = torch.from_numpy(np.stack([clouds[i].points for i in chunk]))
                out = model(pts, seed=seed)
                preds[chunk] = out.argmax(-1).numpy()
    return preds


def time_single(model: nn.Module, clouds: Sequence[PointCloud], seed: int = EVAL_SEED,
                n: int = 20, warmup: int = 10) -> float:
    """Mean single-cloud forward latency in ms, after ``warmup`` untimed calls."""
    model.eval()
    sample = list(clouds[:max(1, min(n, len(clouds)))])
    with torch.no_grad():
        for i in range(warmup):
            model(sample[i % len(sample)].points, seed=seed)
        t0 = time.perf_counter()
        for c in sample:
            model(c.points, seed=seed)
    return (time.perf_counter() - t0) * 1000.0 / len(sample)


def accuracy_row(scenario, transform_desc, param, preds, labels, latency_ms, seed, num_classes,
                 epoch=None) -> MetricsRow:
    preds, labels = np.asarray(preds), np.asarray(labels)
    correct = int((preds == labels).sum())
    per_class = {}
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            per_class[str(c)] = int((preds[mask] == c).sum()) / int(mask.sum())
    return MetricsRow(scenario, transform_desc, float(param), correct / len(labels), per_class,
                      latency_ms, epoch, seed, preds.tolist(), labels.tolist())


def evaluate(model: nn.Module, clouds: Sequence[PointCloud], transform: Optional[Transform] = None,
             seed: int = EVAL_SEED, scenario: str = "eval", param: float = 0.0,
             timing: bool = True, num_classes: Optional[int] = None) -> MetricsRow:
    transform = transform or Transform()
    moved = [transform(c, i) for i, c in enumerate(clouds)]
    preds = predict(model, moved, seed)
    latency = time_single(model, moved, seed) if timing else float("nan")
    labels = [c.label for c in clouds]
    num_classes = num_classes or model.head[-1].out_features
    return accuracy_row(scenario, transform.describe(), param, preds, labels, latency, seed,
                        num_classes)


SWEEP_KINDS = {"rotation": "rotate_z", "shift": "shift_random", "scale": "scale"}


def perturbation_sweep(model: nn.Module, clouds: Sequence[PointCloud], kind: str,
                       grid: Sequence[float], out_csv=None, seed: int = EVAL_SEED,
                       scenario: Optional[str] = None, timing: bool = False) -> list[MetricsRow]:
    """Accuracy at every grid value of one perturbation family, sorted by value."""
    if not grid:
        raise ValueError("empty sweep grid")
    transform_kind = SWEEP_KINDS[kind]
    rows = []
    for value in sorted(float(v) for v in grid):
        t = Transform(transform_kind, value, seed)
        rows.append(evaluate(model, clouds, t, seed, scenario or kind, value, timing=timing))
    if out_csv is not None:
        write_csv(out_csv, rows)
    return rows


def write_csv(path, rows: Sequence[MetricsRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.csv_row())


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def plot_sweeps(csv_paths: dict, out_png) -> None:
    """Line plot of accuracy vs. grid value, one line per labelled CSV."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, path in csv_paths.items():
        rows = read_csv(path)
        ax.plot([float(r["param"]) for r in rows], [float(r["accuracy"]) for r in rows],
                marker="o", label=label)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def resolution_set(clouds, spec: dict, seed: int = EVAL_SEED):
    kind = spec.get("kind", "identity")
    if kind == "identity":
        return list(clouds)
    if kind == "downsample":
        return sparse_copy(clouds, spec["r"], seed)
    if kind == "decimate":
        return decimated_copy(clouds, spec["total_channels"], spec["keep_every"])
    raise GeometryError(f"unknown resolution kind {kind!r}")


def cross_resolution_eval(models: dict, test_sets: dict, seed: int = EVAL_SEED):
    """Evaluate each model on every test set.

    ``models`` maps the name of the density a model was trained at to the
    model; ``test_sets`` maps density names to clouds. Returns the metric
    rows and ``drop[train][test] = acc(train, train) - acc(train, test)``; the
    reference cell is the same-density one, falling back to the first test set
    when a model's training density is not among the test sets.
    """
    rows, acc = [], {}
    for train_name, model in models.items():
        acc[train_name] = {}
        for test_name, clouds in test_sets.items():
            row = evaluate(model, clouds, seed=seed, scenario=f"{train_name}->{test_name}",
                           timing=False)
            row.transform = f"resolution({test_name})"
            rows.append(row)
            acc[train_name][test_name] = row.accuracy
    drop = {}
    first = next(iter(test_sets))
    for train_name, cells in acc.items():
        ref = cells.get(train_name, cells[first])
        drop[train_name] = {t: ref - a for t, a in cells.items()}
    return rows, drop


def load_split(manifest_path) -> list[PointCloud]:
    return load_dataset(manifest_path)
