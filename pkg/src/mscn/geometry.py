"""Point-cloud data model, neighborhoods, sampling, perturbations and file I/O.

Coordinates are kept in float64 on the geometry path. All randomness goes
through an explicit integer seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

CLASS_NAMES = ("car", "truck", "pedestrian")

# Directions shorter than this carry no directional evidence (cosine taken as 0).
DEGENERATE_NORM = 1e-12


class GeometryError(ValueError):
    """Raised when a cloud violates a neighborhood or sampling precondition."""


@dataclass
class PointCloud:
    points: np.ndarray
    features: Optional[np.ndarray] = None
    label: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise GeometryError(f"points must be N x 3, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("invalid coordinates: non-finite values")
        if self.features is not None:
            self.features = np.asarray(self.features)
            if self.features.shape[0] != self.points.shape[0]:
                raise GeometryError("features row count must equal number of points")

    def __len__(self):
        return self.points.shape[0]

    def replace(self, points=None, index=None, **meta) -> "PointCloud":
        """Copy with new points (or a row subset), same label, merged meta."""
        feats = self.features
        if index is not None:
            points = self.points[index]
            feats = None if feats is None else feats[index]
        new_meta = dict(self.meta)
        new_meta.update(meta)
        return PointCloud(points, None if feats is None else feats.copy(),
                          self.label, new_meta)


@dataclass
class ReceptiveField:
    center_index: int
    neighbor_indices: np.ndarray
    directions: np.ndarray
    distances: np.ndarray


# --------------------------------------------------------------------------
# neighborhoods

def _check_knn_input(points, M):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise GeometryError(f"points must be N x 3, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise GeometryError("invalid coordinates")
    if M < 1:
        raise GeometryError("M must be >= 1")
    if points.shape[0] <= M:
        raise GeometryError(
            f"insufficient points: N={points.shape[0]} needs at least M+1={M + 1}")
    return points


def knn_indices(points, M: int) -> np.ndarray:
    """Indices (N, M) of the M nearest other points, ties to the smaller index."""
    points = _check_knn_input(points, M)
    diff = points[:, None, :] - points[None, :, :]
    d2 = (diff ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :M]


def knn(points, M: int) -> list[ReceptiveField]:
    points = _check_knn_input(points, M)
    idx = knn_indices(points, M)
    fields = []
    for n in range(points.shape[0]):
        d = points[idx[n]] - points[n]
        fields.append(ReceptiveField(n, idx[n], d, np.linalg.norm(d, axis=1)))
    return fields


def knn_batch(points: torch.Tensor, M: int, n_candidates: int = 4) -> torch.Tensor:
    """Batched kNN on a (B, N, 3) tensor, returning (B, N, M) long indices.

    Same contract as :func:`knn_indices`: the center is excluded and distance
    ties go to the smaller index. Candidates come from a matmul distance plus
    topk and are re-ranked on exact squared differences; rows whose tie run
    reaches the candidate boundary are re-solved with a full stable sort.
    """
    with torch.no_grad():
        p = points.detach().to(torch.float64)
        B, N, _ = p.shape
        if N <= M:
            raise GeometryError(f"insufficient points: N={N} needs at least M+1={M + 1}")
        if not torch.isfinite(p).all():
            raise GeometryError("invalid coordinates")
        p = p - p.mean(dim=1, keepdim=True)
        sq = (p * p).sum(-1)
        approx = sq[:, :, None] + sq[:, None, :] - 2.0 * p @ p.transpose(1, 2)
        eye = torch.eye(N, dtype=torch.bool)
        approx.masked_fill_(eye, float("inf"))
        k = min(N - 1, M + n_candidates)
        cand = approx.topk(k, dim=-1, largest=False).indices
        cand, _ = cand.sort(dim=-1)
        bidx = torch.arange(B)[:, None, None]
        exact = ((p[bidx, cand] - p[:, :, None, :]) ** 2).sum(-1)
        order = torch.sort(exact, dim=-1, stable=True).indices
        exact_sorted = exact.gather(-1, order)
        out = cand.gather(-1, order)[..., :M]
        if k < N - 1:
            # Any point outside the candidate set at the same distance as the
            # M-th pick could win the index tie-break.
            risky = exact_sorted[..., M - 1] >= exact_sorted[..., k - 1]
            if risky.any():
                for b, n in risky.nonzero().tolist():
                    d = ((p[b] - p[b, n]) ** 2).sum(-1)
                    d[n] = float("inf")
                    out[b, n] = torch.sort(d, stable=True).indices[:M]
        return out


# --------------------------------------------------------------------------
# sampling

def downsample_count(n: int, r: float) -> int:
    if r <= 1:
        raise GeometryError("sampling rate r must be > 1")
    return int(math.floor(n / r))


def downsample_indices(n: int, r: float, seed: int, ids: Optional[np.ndarray] = None,
                       min_points: int = 1) -> np.ndarray:
    """Uniform selection of floor(n / r) rows without replacement.

    Every identity gets a random key from ``seed``; the rows with the smallest
    keys are kept in key order. ``ids`` (default ``arange(n)``) ties keys to
    point identity rather than row position, so a permuted cloud passed with
    its permutation as ``ids`` selects the same points in the same order.
    """
    n_out = downsample_count(n, r)
    if n_out < min_points:
        raise GeometryError(
            f"insufficient points after sampling: {n_out} < {min_points}")
    keys = np.random.default_rng(seed).random(n)
    if ids is not None:
        keys = keys[np.asarray(ids)]
    return np.argsort(keys, kind="stable")[:n_out]


def random_downsample(cloud: PointCloud, r: float, rng_seed: int, M: int = 3,
                      ids: Optional[np.ndarray] = None) -> PointCloud:
    idx = downsample_indices(len(cloud), r, rng_seed, ids=ids, min_points=M + 1)
    return cloud.replace(index=idx, downsample_rate=r, downsample_seed=rng_seed)


def farthest_point_indices(points, n_out: int, start: int = 0) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    chosen = np.empty(n_out, dtype=np.int64)
    chosen[0] = start
    dist = ((points - points[start]) ** 2).sum(-1)
    for i in range(1, n_out):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, ((points - points[chosen[i]]) ** 2).sum(-1))
    return chosen


# --------------------------------------------------------------------------
# perturbations

def rotation_z(theta_deg: float) -> np.ndarray:
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_ball(radius: float, rng: np.random.Generator) -> np.ndarray:
    if radius == 0:
        return np.zeros(3)
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    return v * radius * rng.random() ** (1.0 / 3.0)


def rotate_z(cloud: PointCloud, theta_deg: float) -> PointCloud:
    return cloud.replace(cloud.points @ rotation_z(theta_deg).T)


def translate(cloud: PointCloud, v) -> PointCloud:
    return cloud.replace(cloud.points + np.asarray(v, dtype=np.float64))


def shift_random(cloud: PointCloud, dmax: float, seed: int) -> PointCloud:
    if dmax < 0:
        raise GeometryError("dmax must be >= 0")
    return translate(cloud, sample_ball(dmax, np.random.default_rng(seed)))


def scale(cloud: PointCloud, s: float) -> PointCloud:
    if not s > 0:
        raise GeometryError("invalid scale: s must be > 0")
    return cloud.replace(cloud.points * s)


@dataclass(frozen=True)
class Transform:
    """Serializable perturbation: kind in {identity, rotate_z, translate, shift_random, scale}."""

    kind: str = "identity"
    value: Union[float, tuple] = 0.0
    seed: int = 0

    def __call__(self, cloud: PointCloud, index: int = 0) -> PointCloud:
        if self.kind == "identity":
            return cloud
        if self.kind == "rotate_z":
            return rotate_z(cloud, float(self.value))
        if self.kind == "translate":
            return translate(cloud, self.value)
        if self.kind == "shift_random":
            # one rigid shift per cloud, reproducible from (seed, index)
            return shift_random(cloud, float(self.value), self.seed * 1_000_003 + index)
        if self.kind == "scale":
            return scale(cloud, float(self.value))
        raise GeometryError(f"unknown transform kind {self.kind!r}")

    def describe(self) -> str:
        return self.kind if self.kind == "identity" else f"{self.kind}({self.value})"


def transform(cloud: PointCloud, kind: str, value=0.0, seed: int = 0) -> PointCloud:
    return Transform(kind, value, seed)(cloud)


def elevation(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    r = np.linalg.norm(points, axis=1)
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > 0, np.arcsin(np.clip(points[:, 2] / safe, -1.0, 1.0)), 0.0)


def decimate_channels(cloud: PointCloud, total_channels: int, keep_every: int,
                      fov: Optional[tuple] = None) -> PointCloud:
    """Drop scan lines: bin points by elevation, keep bins with index % keep_every == 0.

    ``fov`` is the (low, high) elevation range in radians covered by the
    ``total_channels`` bins; by default the cloud's own elevation extent.
    """
    if total_channels < 2:
        raise GeometryError("total_channels must be >= 2")
    if keep_every < 1:
        raise GeometryError("keep_every must be >= 1")
    if keep_every == 1:
        return cloud.replace(cloud.points.copy(), channels=total_channels)
    elev = elevation(cloud.points)
    lo, hi = (elev.min(), elev.max()) if fov is None else fov
    width = (hi - lo) / total_channels
    if width <= 0:
        bins = np.zeros(len(elev), dtype=np.int64)
    else:
        bins = np.clip(np.floor((elev - lo) / width), 0, total_channels - 1).astype(np.int64)
    keep = np.nonzero(bins % keep_every == 0)[0]
    if keep.size == 0:
        raise GeometryError("decimation removed all points")
    return cloud.replace(index=keep, channels=total_channels // keep_every)


# --------------------------------------------------------------------------
# synthetic primitives

@dataclass(frozen=True)
class Placement:
    """Sensor-frame placement: sensor at the origin, ground at z = -sensor_height."""

    range_min: float = 8.0
    range_max: float = 20.0
    azimuth_min: float = -45.0
    azimuth_max: float = 45.0
    sensor_height: float = 1.7


def _sample_box_surface(rng, n, lengths, offset):
    L, W, H = lengths
    areas = np.array([W * H, W * H, L * H, L * H, L * W, L * W])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.random((n, 3)) * np.array([L, W, H])
    axis = face // 2
    side = face % 2
    u[np.arange(n), axis] = side * np.array([L, W, H])[axis]
    return u - np.array([L / 2, W / 2, 0.0]) + offset


def _sample_capsule_surface(rng, n, radius, cyl_height):
    a_cyl = 2 * math.pi * radius * cyl_height
    a_cap = 4 * math.pi * radius ** 2
    on_cyl = rng.random(n) < a_cyl / (a_cyl + a_cap)
    out = np.empty((n, 3))
    k = int(on_cyl.sum())
    phi = rng.random(k) * 2 * math.pi
    out[on_cyl] = np.stack([radius * np.cos(phi), radius * np.sin(phi),
                            radius + rng.random(k) * cyl_height], axis=1)
    m = n - k
    v = rng.normal(size=(m, 3))
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * radius
    v[:, 2] += np.where(v[:, 2] >= 0, radius + cyl_height, radius)
    out[~on_cyl] = v
    return out


def _primitive_surface(class_id, rng, n):
    if class_id == 0:
        dims = (rng.uniform(3.8, 4.8), rng.uniform(1.6, 2.0), rng.uniform(1.3, 1.7))
        return _sample_box_surface(rng, n, dims, np.zeros(3))
    if class_id == 1:
        W = rng.uniform(2.2, 2.6)
        cargo = (rng.uniform(5.0, 7.0), W, rng.uniform(2.6, 3.4))
        cab = (rng.uniform(1.6, 2.2), W, rng.uniform(2.0, 2.6))
        total = cargo[0] + cab[0]
        a_cargo = 2 * (cargo[0] * cargo[1] + cargo[0] * cargo[2] + cargo[1] * cargo[2])
        a_cab = 2 * (cab[0] * cab[1] + cab[0] * cab[2] + cab[1] * cab[2])
        n_cargo = int(rng.binomial(n, a_cargo / (a_cargo + a_cab)))
        p1 = _sample_box_surface(rng, n_cargo, cargo, np.array([cargo[0] / 2 - total / 2, 0, 0]))
        p2 = _sample_box_surface(rng, n - n_cargo, cab,
                                 np.array([total / 2 - cab[0] / 2, 0, 0]))
        return np.concatenate([p1, p2])
    if class_id == 2:
        return _sample_capsule_surface(rng, n, rng.uniform(0.25, 0.4), rng.uniform(1.0, 1.4))
    raise GeometryError(f"unknown class id {class_id}")


def generate_primitive(class_id: int, n_points: int, seed: int, occlusion_frac: float = 0.0,
                       placement: Optional[Placement] = None) -> PointCloud:
    """Sample a car-, truck- or pedestrian-like surface with random size and yaw.

    ``n_points / (1 - occlusion_frac)`` points are drawn and the farthest ones
    from a viewpoint are dropped, leaving exactly ``n_points``. Without a
    placement the object sits at the origin and the viewpoint is random; with
    one, the object is put in a sensor frame and seen from the origin.
    """
    if n_points < 32:
        raise GeometryError("n_points must be >= 32")
    if not 0 <= occlusion_frac < 1:
        raise GeometryError("occlusion_frac must be in [0, 1)")
    rng = np.random.default_rng([seed, class_id])
    n_total = int(math.ceil(n_points / (1.0 - occlusion_frac)))
    pts = _primitive_surface(class_id, rng, n_total)
    pts = pts @ rotation_z(rng.uniform(0.0, 360.0)).T
    if placement is None:
        v = rng.normal(size=3)
        v[2] = abs(v[2])
        viewpoint = v / np.linalg.norm(v) * 15.0
    else:
        rho = rng.uniform(placement.range_min, placement.range_max)
        az = math.radians(rng.uniform(placement.azimuth_min, placement.azimuth_max))
        pts = pts + np.array([rho * math.cos(az), rho * math.sin(az), -placement.sensor_height])
        viewpoint = np.zeros(3)
    if n_total > n_points:
        d = ((pts - viewpoint) ** 2).sum(-1)
        keep = np.sort(np.argsort(d, kind="stable")[:n_points])
        pts = pts[keep]
    return PointCloud(pts, label=class_id,
                      meta={"source": "primitive", "seed": seed, "class": CLASS_NAMES[class_id],
                            "occlusion_frac": occlusion_frac})


# --------------------------------------------------------------------------
# file I/O

def save_xyz(path, cloud: PointCloud) -> None:
    path = Path(path)
    lines = [f"{x!r} {y!r} {z!r}" for x, y, z in cloud.points.tolist()]
    path.write_text("\n".join(lines) + "\n")


def load_xyz(path, label: Optional[int] = None, min_points: int = 1) -> PointCloud:
    path = Path(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            try:
                if len(parts) != 3:
                    raise ValueError
                rows.append([float(v) for v in parts])
            except ValueError:
                raise GeometryError(f"{path}:{lineno}: malformed line {line!r}") from None
    if len(rows) < min_points:
        raise GeometryError(f"insufficient points in {path}: {len(rows)}")
    return PointCloud(np.array(rows), label=label, meta={"source": str(path)})


@dataclass
class DatasetManifest:
    entries: list
    class_names: list = field(default_factory=lambda: list(CLASS_NAMES))
    seed: int = 0
    generator_params: dict = field(default_factory=dict)

    def validate(self, root=None, check_paths: bool = True) -> None:
        for path, cid in self.entries:
            if not (isinstance(cid, int) and 0 <= cid < len(self.class_names)):
                raise GeometryError(f"unknown class id {cid!r} for {path}")
            if check_paths:
                p = Path(path) if root is None else Path(root) / path
                if not p.exists():
                    raise GeometryError(f"missing file {p}")

    def to_json(self) -> dict:
        return {"entries": [[str(p), int(c)] for p, c in self.entries],
                "class_names": list(self.class_names), "seed": self.seed,
                "generator_params": self.generator_params}


def save_manifest(path, manifest: DatasetManifest) -> None:
    manifest.validate(check_paths=False)
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True))


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    try:
        m = DatasetManifest([(p, c) for p, c in doc["entries"]], list(doc["class_names"]),
                            int(doc.get("seed", 0)), dict(doc.get("generator_params", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise GeometryError(f"malformed manifest {path}: {exc}") from None
    m.validate(root=path.parent, check_paths=check_paths)
    return m


def load_dataset(manifest_path) -> list[PointCloud]:
    manifest_path = Path(manifest_path)
    m = load_manifest(manifest_path)
    return [load_xyz(manifest_path.parent / p, label=c) for p, c in m.entries]


def stack_points(clouds: Sequence[PointCloud]) -> np.ndarray:
    n = {len(c) for c in clouds}
    if len(n) != 1:
        raise GeometryError(f"clouds have different sizes {sorted(n)}")
    return np.stack([c.points for c in clouds])


class CloudSet:
    """Equal-size clouds stacked as a float64 (K, N, 3) tensor with labels.

    First-layer neighbor indices are computed once on demand, since input
    points do not move during training.
    """

    def __init__(self, clouds: Sequence[PointCloud], M: int = 3):
        if not clouds:
            raise GeometryError("empty dataset")
        self.clouds = list(clouds)
        self.points = torch.from_numpy(stack_points(self.clouds))
        self.labels = torch.tensor([int(c.label) for c in self.clouds], dtype=torch.long)
        self.M = M
        self._nbr = None

    def __len__(self):
        return len(self.clouds)

    @property
    def neighbors(self) -> torch.Tensor:
        if self._nbr is None:
            self._nbr = torch.cat([knn_batch(self.points[i:i + 64], self.M)
                                   for i in range(0, len(self), 64)])
        return self._nbr

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(order), batch_size):
            yield torch.from_numpy(order[i:i + batch_size])
