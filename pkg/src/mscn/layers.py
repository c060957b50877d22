"""Structural convolution / aggregation layers and the assembled classifier.

Shapes follow the batched convention ``(B, N, ...)``. Point coordinates stay
float64 so that relative vectors ``p_m - p_n`` are computed before any cast
to the model dtype; this keeps the network translation invariant to float
precision even for clouds far from the origin.

The scalar functions :func:`sim`, :func:`conv_dir` and :func:`conv_dist` are
the per-receptive-field reference forms; :class:`SCL` evaluates the same
quantities for every point and output channel at once.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__
from .geometry import DEGENERATE_NORM, ReceptiveField, downsample_indices, knn_batch

LEAKY_SLOPE = 0.2


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# reference kernels

@dataclass
class DirKernel:
    center_weight: np.ndarray       # (D_in,)
    branch_weights: np.ndarray      # (S, D_in)
    branch_directions: np.ndarray   # (S, 3)

    def __post_init__(self):
        if np.any(np.linalg.norm(self.branch_directions, axis=1) == 0):
            raise ValueError("branch directions must be non-zero")


@dataclass
class DistKernel:
    center_weight: float
    branch_weights: np.ndarray      # (S,)


def sim(F_pm, w_s, d_mn, b_s) -> float:
    """Feature/weight inner product scaled by the cosine between d_mn and b_s."""
    F_pm, w_s = np.asarray(F_pm, float), np.asarray(w_s, float)
    d_mn, b_s = np.asarray(d_mn, float), np.asarray(b_s, float)
    if F_pm.shape != w_s.shape:
        raise ValueError(f"dim mismatch {F_pm.shape} vs {w_s.shape}")
    nd = np.linalg.norm(d_mn)
    if nd < DEGENERATE_NORM:
        return 0.0
    nb = max(np.linalg.norm(b_s), DEGENERATE_NORM)
    return float(F_pm @ w_s) * float(d_mn @ b_s) / (nd * nb)


def conv_dir(field: ReceptiveField, F_center, F_neighbors, k: DirKernel) -> float:
    """Center inner product plus, per branch, the max signed sim over neighbors."""
    F_center = np.asarray(F_center, float)
    F_neighbors = np.asarray(F_neighbors, float)
    if F_center.shape != k.center_weight.shape or F_neighbors.shape[1:] != k.center_weight.shape:
        raise ValueError("dim mismatch between features and kernel")
    if len(field.neighbor_indices) < 1:
        raise ValueError("receptive field has no neighbors")
    out = float(F_center @ k.center_weight)
    for w_s, b_s in zip(k.branch_weights, k.branch_directions):
        out += max(sim(F_neighbors[j], w_s, field.directions[j], b_s)
                   for j in range(len(field.neighbor_indices)))
    return out


def conv_dist(field: ReceptiveField, k: DistKernel) -> float:
    """Branch weights times the farthest-neighbor distance (no center bias)."""
    if len(field.distances) < 1:
        raise ValueError("receptive field has no neighbors")
    return float(np.sum(k.branch_weights) * np.max(field.distances))


# --------------------------------------------------------------------------
# batched layers

def gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """x (B, N, ...) indexed by idx (B, ...) along dim 1."""
    b = torch.arange(x.shape[0]).view(-1, *([1] * (idx.dim() - 1)))
    return x[b, idx]


class Neighborhood:
    """Receptive fields of one point set: neighbor indices and relative geometry.

    Directions are formed in float64 and then cast to the model dtype.
    Degenerate directions (duplicate points) get a zero unit vector so their
    cosine factor is 0.
    """

    def __init__(self, points, nbr, dtype=torch.float32):
        self.points, self.nbr = points, nbr
        p = points.to(torch.float64)
        d = gather_rows(p, nbr) - p[:, :, None, :]
        dist = d.norm(dim=-1)
        ok = dist >= DEGENERATE_NORM
        safe = torch.where(ok, dist, torch.ones_like(dist))
        unit = torch.where(ok[..., None], d / safe[..., None], torch.zeros_like(d))
        self.directions = d.to(dtype)
        self.unit = unit.to(dtype)
        self.distances = dist.to(dtype)
        self.max_distance = self.distances.max(dim=2).values

    @classmethod
    def build(cls, points, M, dtype=torch.float32, nbr=None):
        return cls(points, knn_batch(points, M) if nbr is None else nbr, dtype)


class SCL(nn.Module):
    """Structural convolution layer SCL(d_in, d_out) with S branches per kernel.

    input_mode applies to a first layer only: ``"relative"`` uses the constant
    (1, 1, 1) as center feature and ``p_m - p_n`` as neighbor features;
    ``"absolute"`` uses raw coordinates for both. ``None`` means features come
    from the previous layer.
    """

    def __init__(self, d_in, d_out, S=1, input_mode=None):
        super().__init__()
        if input_mode is not None and d_in != 3:
            raise ConfigError("a coordinate-input layer needs d_in = 3")
        self.d_in, self.d_out, self.S, self.input_mode = d_in, d_out, S, input_mode
        std = 1.0 / math.sqrt(d_in)
        self.dir_center = nn.Parameter(torch.randn(d_out, d_in) * std)
        self.dir_branch = nn.Parameter(torch.randn(d_out, S, d_in) * std)
        b = torch.randn(d_out, S, 3)
        self.dir_vec = nn.Parameter(b / b.norm(dim=-1, keepdim=True))
        self.dist_center = nn.Parameter(torch.zeros(d_out))
        self.dist_branch = nn.Parameter(torch.randn(d_out, S) / math.sqrt(S))
        self.mlp = nn.Linear(2 * d_out, d_out)
        self.bn = nn.BatchNorm1d(d_out)

    def extra_repr(self):
        return f"{self.d_in}, {self.d_out}, S={self.S}, input_mode={self.input_mode}"

    def dir_kernel(self, c: int) -> DirKernel:
        g = lambda t: t.detach().double().cpu().numpy()
        return DirKernel(g(self.dir_center[c]), g(self.dir_branch[c]), g(self.dir_vec[c]))

    def dist_kernel(self, c: int) -> DistKernel:
        return DistKernel(self.dist_center[c].item(),
                          self.dist_branch[c].detach().double().cpu().numpy())

    def structural_conv(self, hood: Neighborhood, feats):
        """Pre-MLP outputs: (conv_dir, conv_dist + center bias), each (B, N, d_out)."""
        B, N, M = hood.nbr.shape
        CS = self.d_out * self.S
        b = self.dir_vec.reshape(CS, 3)
        b = b / b.norm(dim=-1, keepdim=True).clamp_min(DEGENERATE_NORM)
        cos = hood.unit @ b.t()                                   # (B, N, M, CS)
        w = self.dir_branch.reshape(CS, self.d_in)
        if self.input_mode == "relative":
            center = self.dir_center.sum(-1).expand(B, N, self.d_out)
            proj = hood.directions @ w.t()
        else:
            if self.input_mode == "absolute":
                feats = hood.points.to(self.dir_center.dtype)
            if feats is None or feats.shape[-1] != self.d_in:
                got = None if feats is None else feats.shape[-1]
                raise ValueError(f"SCL expects {self.d_in} input features, got {got}")
            center = feats @ self.dir_center.t()
            proj = gather_rows(feats @ w.t(), hood.nbr)
        branch = (proj * cos).max(dim=2).values.view(B, N, self.d_out, self.S).sum(-1)
        c_dir = center + branch
        c_dist = hood.max_distance[..., None] * self.dist_branch.sum(-1) + self.dist_center
        return c_dir, c_dist

    def forward(self, hood: Neighborhood, feats):
        c_dir, c_dist = self.structural_conv(hood, feats)
        h = self.mlp(torch.cat([c_dir, c_dist], dim=-1))
        B, N, D = h.shape
        h = F.leaky_relu(self.bn(h.reshape(B * N, D)).view(B, N, D), LEAKY_SLOPE)
        if not torch.isfinite(h).all():
            raise FloatingPointError(f"numeric overflow in SCL({self.d_in}, {self.d_out})")
        return h


def local_view_aggregation(points, feats, nbr, r, seeds, ids=None, M=3):
    """Receptive-field channel max followed by random downsampling by r.

    seeds holds one integer per batch element; ids optionally holds per-cloud
    point identities (see :func:`geometry.downsample_indices`).
    """
    pooled = torch.maximum(feats, gather_rows(feats, nbr).max(dim=2).values)
    B, N = feats.shape[:2]
    sel = np.stack([downsample_indices(N, r, int(seeds[b]),
                                       None if ids is None else ids[b], min_points=M + 1)
                    for b in range(B)])
    sel = torch.from_numpy(sel)
    return gather_rows(points, sel), gather_rows(pooled, sel)


def global_view_aggregation(feats):
    return feats.max(dim=1).values


class SAL(nn.Module):
    """Structural aggregation layer: local pooling + downsampling, inner SCL, global concat."""

    def __init__(self, d_in, d_mid, r=4.0, S=1, M=3):
        super().__init__()
        self.r, self.M = r, M
        self.scl = SCL(d_in, d_mid, S)

    @property
    def d_out(self):
        return 2 * self.scl.d_out

    def extra_repr(self):
        return f"r={self.r}, out={self.d_out}"

    def forward(self, hood: Neighborhood, feats, seeds, ids=None):
        """Returns the downsampled neighborhood and (B, N / r, 2 * d_mid) features."""
        pts, pooled = local_view_aggregation(hood.points, feats, hood.nbr, self.r, seeds, ids,
                                             self.M)
        hood_out = Neighborhood.build(pts, self.M, hood.directions.dtype)
        h = self.scl(hood_out, pooled)
        g = global_view_aggregation(h)
        return hood_out, torch.cat([h, g[:, None, :].expand_as(h)], dim=-1)


# --------------------------------------------------------------------------
# network

@dataclass
class NetworkConfig:
    """Layer stack as ``["scl", d_in, d_out]`` / ``["sal", d_in, d_mid, r]`` entries."""

    layers: list = field(default_factory=lambda: [
        ["scl", 3, 32], ["scl", 32, 64], ["sal", 64, 128, 4.0], ["sal", 256, 512, 4.0]])
    M: int = 3
    S: int = 1
    head: list = field(default_factory=lambda: [512, 256])
    num_classes: int = 3
    dropout: float = 0.5
    input_mode: str = "relative"
    feature_dim: int = 1024

    def validate(self) -> None:
        if not self.layers or self.layers[0][0] != "scl":
            raise ConfigError("the stack must start with an SCL")
        if self.input_mode not in ("relative", "absolute"):
            raise ConfigError(f"unknown input_mode {self.input_mode!r}")
        if self.M < 1 or self.S < 1 or self.num_classes < 2:
            raise ConfigError("M, S must be >= 1 and num_classes >= 2")
        width = 3
        for entry in self.layers:
            kind = entry[0]
            if kind not in ("scl", "sal") or len(entry) != (3 if kind == "scl" else 4):
                raise ConfigError(f"bad layer entry {entry!r}")
            if entry[1] != width:
                raise ConfigError(f"layer {entry!r} expects {entry[1]} inputs, previous gives {width}")
            width = entry[2] if kind == "scl" else 2 * entry[2]
            if kind == "sal" and not entry[3] > 1:
                raise ConfigError("sampling rate r must be > 1")
        if width != self.feature_dim:
            raise ConfigError(f"final feature width {width} != {self.feature_dim}")

    def min_points(self) -> int:
        """Smallest input size that satisfies every layer's N >= M + 1."""
        n = self.M + 1
        for entry in reversed(self.layers):
            if entry[0] == "sal":
                n = int(math.ceil(n * entry[3]))
                while math.floor(n / entry[3]) < self.M + 1:
                    n += 1
        return max(n, self.M + 1)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "NetworkConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown network keys {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg


def scl_only_config(**kw) -> NetworkConfig:
    return NetworkConfig(layers=[["scl", 3, 32], ["scl", 32, 64], ["scl", 64, 128],
                                 ["scl", 128, 256], ["scl", 256, 1024]], **kw)


def layer_seeds(seed: int, layer: int, batch: int) -> list[int]:
    ss = np.random.SeedSequence([int(seed), int(layer)])
    return [int(s) for s in ss.generate_state(batch, dtype=np.uint32)]


def head_mlp(widths: Sequence[int], num_classes: int, dropout: float) -> nn.Sequential:
    mods = []
    for a, b in zip(widths[:-1], widths[1:]):
        mods += [nn.Linear(a, b), nn.BatchNorm1d(b), nn.LeakyReLU(LEAKY_SLOPE), nn.Dropout(dropout)]
    mods.append(nn.Linear(widths[-1], num_classes))
    return nn.Sequential(*mods)


def as_points(x) -> torch.Tensor:
    """Accept a PointCloud, an (N, 3) or (B, N, 3) array/tensor; return float64 (B, N, 3)."""
    if hasattr(x, "points") and not isinstance(x, torch.Tensor):
        x = x.points
    if not isinstance(x, torch.Tensor):
        x = torch.from_numpy(np.asarray(x, dtype=np.float64))
    if x.dim() == 2:
        x = x[None]
    return x if x.dtype == torch.float64 else x.to(torch.float64)


class MSCN(nn.Module):
    """Feature extractor (SCL/SAL stack + global max pool) and classification head."""

    def __init__(self, config: Optional[NetworkConfig] = None):
        super().__init__()
        config = config or NetworkConfig()
        config.validate()
        self.config = config
        blocks = []
        for i, entry in enumerate(config.layers):
            if entry[0] == "scl":
                blocks.append(SCL(entry[1], entry[2], config.S,
                                  input_mode=config.input_mode if i == 0 else None))
            else:
                blocks.append(SAL(entry[1], entry[2], entry[3], config.S, config.M))
        self.blocks = nn.ModuleList(blocks)
        self.head = head_mlp([config.feature_dim] + list(config.head), config.num_classes,
                             config.dropout)

    def encoder_layers(self, n=2) -> list[SCL]:
        enc = list(self.blocks[:n])
        if not all(isinstance(b, SCL) for b in enc):
            raise ConfigError(f"the first {n} layers must be SCLs to build an encoder")
        return enc

    def point_features(self, points, seed=0, ids=None, nbr=None):
        """Run the layer stack; returns the last neighborhood and per-point features.

        ``seed`` drives SAL downsampling. ``nbr`` optionally supplies
        precomputed first-layer neighbor indices.
        """
        points = as_points(points)
        hood = Neighborhood.build(points, self.config.M, self.head[0].weight.dtype, nbr)
        feats = None
        sal_count = 0
        for block in self.blocks:
            if isinstance(block, SCL):
                feats = block(hood, feats)
            else:
                seeds = layer_seeds(seed, sal_count, points.shape[0])
                hood, feats = block(hood, feats, seeds, ids if sal_count == 0 else None)
                sal_count += 1
        return hood, feats

    def features(self, points, seed=0, ids=None, nbr=None):
        return global_view_aggregation(self.point_features(points, seed, ids, nbr)[1])

    def forward(self, points, seed=0, ids=None, nbr=None):
        return self.head(self.features(points, seed, ids, nbr))


def mscn_forward(model: MSCN, cloud, seed: int = 0, ids=None) -> torch.Tensor:
    """Logits (C,) for one cloud in eval mode."""
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            ids = None if ids is None else [np.asarray(ids)]
            return model(cloud, seed=seed, ids=ids)[0]
    finally:
        model.train(was)


# --------------------------------------------------------------------------
# checkpoints

_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


def _encode_tensor(name: str, t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().contiguous().numpy()
    dt = arr.dtype.newbyteorder("<")
    header = [name, arr.dtype.name, str(arr.ndim)] + [str(s) for s in arr.shape]
    return b"".join(h.encode() + b"\0" for h in header) + arr.astype(dt, copy=False).tobytes()


def _decode_tensor(blob: bytes):
    parts, pos = [], 0
    for _ in range(3):
        end = blob.index(b"\0", pos)
        parts.append(blob[pos:end].decode())
        pos = end + 1
    name, dtype, rank = parts[0], np.dtype(parts[1]).newbyteorder("<"), int(parts[2])
    shape = []
    for _ in range(rank):
        end = blob.index(b"\0", pos)
        shape.append(int(blob[pos:end]))
        pos = end + 1
    arr = np.frombuffer(blob, dtype=dtype, offset=pos).reshape(shape)
    return name, torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))


def save_tensors(directory, tensors: dict, meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, (name, t) in enumerate(tensors.items()):
        fname = f"{i:04d}_{_SAFE.sub('_', name)}.bin"
        (directory / fname).write_bytes(_encode_tensor(name, t))
        names.append(fname)
    meta = dict(meta, version=__version__, tensors=names)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_tensors(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    meta = json.loads(meta_path.read_text())
    tensors = {}
    for fname in meta["tensors"]:
        name, t = _decode_tensor((directory / fname).read_bytes())
        tensors[name] = t
    return tensors, meta


def save_checkpoint(directory, model: nn.Module, meta: Optional[dict] = None) -> None:
    meta = dict(meta or {})
    if isinstance(model, MSCN):
        meta.setdefault("model", "mscn")
        meta["config"] = model.config.to_json()
    elif isinstance(getattr(model, "config", None), dict):
        meta.setdefault("model", "pointwise")
        meta["config"] = model.config
    save_tensors(directory, model.state_dict(), meta)


def load_checkpoint(directory, model: Optional[nn.Module] = None):
    tensors, meta = load_tensors(directory)
    if model is None:
        kind = meta.get("model", "mscn")
        if kind == "mscn":
            model = MSCN(NetworkConfig.from_json(meta["config"]))
        else:
            from .harness import PointwiseNet
            model = PointwiseNet(**meta["config"])
    model.load_state_dict(tensors)
    model.eval()
    return model, meta


def tensor_hash(tensors) -> str:
    h = hashlib.sha256()
    items = tensors.items() if isinstance(tensors, dict) else tensors
    for name, t in items:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
