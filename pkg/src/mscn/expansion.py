"""Progressive unseen-domain expansion.

Each cycle trains a noise-conditioned generator ``G_k`` (frozen SCL encoder,
3D AdaIN, point-offset decoder) adversarially against the classifier's
contrastive embedding, snapshots one generated counterpart per source cloud
as a new domain pool, then trains the classifier on source plus all pools
with cross-entropy and InfoNCE.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import CLASS_NAMES, CloudSet, DatasetManifest, PointCloud, save_manifest, save_xyz
from .layers import (LEAKY_SLOPE, MSCN, SCL, Neighborhood, as_points, save_checkpoint,
                     save_tensors, tensor_hash)

log = logging.getLogger(__name__)

ADAIN_EPS = 1e-6


class DivergenceError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# generator parts

def adain3d(z: torch.Tensor, n: torch.Tensor, L1: nn.Module, L2: nn.Module,
            eps: float = ADAIN_EPS) -> torch.Tensor:
    """Per-cloud, per-channel standardization of z (B, N, D) re-styled by L1(n), L2(n)."""
    mu = z.mean(dim=1, keepdim=True)
    sigma = (z.var(dim=1, unbiased=False, keepdim=True) + eps).sqrt()
    return L1(n)[:, None, :] * (z - mu) / sigma + L2(n)[:, None, :]


class AdaIN3D(nn.Module):
    def __init__(self, d_noise=64, d_z=64):
        super().__init__()
        self.L1 = nn.Linear(d_noise, d_z)
        self.L2 = nn.Linear(d_noise, d_z)
        for lin, bias in ((self.L1, 1.0), (self.L2, 0.0)):
            nn.init.zeros_(lin.weight)
            nn.init.constant_(lin.bias, bias)

    def forward(self, z, n):
        return adain3d(z, n, self.L1, self.L2)


class FrozenEncoder(nn.Module):
    """A stack of pretrained SCLs whose weights and batch statistics never change."""

    def __init__(self, layers: Sequence[SCL], M: int = 3):
        super().__init__()
        self.layers = nn.ModuleList(copy.deepcopy(list(layers)))
        self.M = M
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode=True):
        return self

    @property
    def d_out(self):
        return self.layers[-1].d_out

    def forward(self, points):
        points = as_points(points)
        hood = Neighborhood.build(points, self.M, self.layers[0].dir_center.dtype)
        h = None
        for layer in self.layers:
            h = layer(hood, h)
        return h

    def digest(self) -> str:
        return tensor_hash(self.state_dict())


def point_mlp(d_in, hidden=64, d_out=3):
    mlp = nn.Sequential(nn.Linear(d_in, hidden), nn.LeakyReLU(LEAKY_SLOPE), nn.Linear(hidden, d_out))
    nn.init.zeros_(mlp[-1].weight)
    nn.init.zeros_(mlp[-1].bias)
    return mlp


class Generator(nn.Module):
    """x' = x + decoder(AdaIN(encoder(x), n)); same N, order and label as x."""

    def __init__(self, encoder: FrozenEncoder, d_noise=64, hidden=64):
        super().__init__()
        self.encoder = encoder
        self.d_noise = d_noise
        self.adain = AdaIN3D(d_noise, encoder.d_out)
        self.decoder = point_mlp(encoder.d_out, hidden)

    def trainable(self):
        return list(self.adain.parameters()) + list(self.decoder.parameters())

    def noise(self, batch, generator: Optional[torch.Generator] = None):
        return torch.randn(batch, self.d_noise, generator=generator,
                           dtype=self.decoder[0].weight.dtype)

    def forward(self, points, n, z=None):
        points = as_points(points)
        if z is None:
            z = self.encoder(points)
        offsets = self.decoder(self.adain(z, n))
        return points + offsets.to(points.dtype)


def generator_forward(G: Generator, cloud: PointCloud, n: torch.Tensor) -> PointCloud:
    with torch.no_grad():
        out = G(cloud.points, n.reshape(1, -1))[0].numpy()
    return cloud.replace(out, source="generated")


class Reconstructor(nn.Module):
    """Maps a generated cloud back toward its source: x_rec = x' + mlp(encoder(x'))."""

    def __init__(self, encoder: FrozenEncoder, hidden=64):
        super().__init__()
        self.encoder = encoder
        self.decoder = point_mlp(encoder.d_out, hidden)

    def trainable(self):
        return list(self.decoder.parameters())

    def forward(self, points):
        points = as_points(points)
        return points + self.decoder(self.encoder(points)).to(points.dtype)


class ProjectionHead(nn.Module):
    def __init__(self, d_in=1024, hidden=256, d_out=128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, d_out))

    def forward(self, feats):
        return F.normalize(self.net(feats), dim=-1)


# --------------------------------------------------------------------------
# losses

def loss_ce(logits, labels):
    if not torch.isfinite(logits).all():
        raise DivergenceError("non-finite logits")
    return F.cross_entropy(logits, labels)


def nce_terms(z: torch.Tensor, z_pos: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Per-anchor InfoNCE terms over the 2N embeddings [z; z_pos].

    Anchor i's positive is its counterpart; the denominator runs over all
    other 2N - 1 embeddings, the positive included.
    """
    allz = torch.cat([z, z_pos], dim=0)
    n2 = allz.shape[0]
    half = n2 // 2
    s = allz @ allz.t() / temperature
    s = s.masked_fill(torch.eye(n2, dtype=torch.bool), float("-inf"))
    pos = (torch.arange(n2) + half) % n2
    return torch.logsumexp(s, dim=1) - s[torch.arange(n2), pos]


def loss_nce(z, z_pos, temperature=1.0):
    return nce_terms(z, z_pos, temperature).mean()


def loss_nce_star(z, z_pos, temperature=1.0):
    return (1.0 + nce_terms(z, z_pos, temperature)).sum()


def loss_src(logits, labels, z, z_pos, temperature=1.0):
    return loss_ce(logits, labels) + loss_nce(z, z_pos, temperature)


def loss_recon(x, x_rec):
    """Mean over points (and clouds) of the squared point-wise distance."""
    x, x_rec = as_points(x), as_points(x_rec)
    return ((x - x_rec) ** 2).sum(-1).mean()


def loss_gen_ce(G: Generator, model: MSCN, x, y, n):
    return loss_ce(model(G(x, n)), y)


def loss_div(G: Generator, x, n1, n2):
    return loss_recon(G(x, n1), G(x, n2))


def loss_unseen(recon, gen_ce, adv, div, div_margin: float = 1.0):
    """Generator objective: diversity enters with a negative sign, clipped at the margin."""
    if isinstance(div, torch.Tensor):
        div_term = torch.clamp(div, max=div_margin)
    else:
        div_term = min(div, div_margin)
    return recon + gen_ce + adv - div_term


# --------------------------------------------------------------------------
# training

@dataclass
class ExpansionConfig:
    cycles: int = 20
    epochs_per_cycle: int = 15
    gen_epochs: int = 1
    batch_size: int = 16          # 2N: N source clouds + N generated counterparts
    lr: float = 4e-4
    gen_lr: float = 4e-4
    d_noise: int = 64
    div_margin: float = 1.0
    temperature: float = 1.0
    seed: int = 0

    def validate(self):
        if self.cycles < 0 or self.epochs_per_cycle < 1 or self.gen_epochs < 0:
            raise ValueError("cycles >= 0, epochs_per_cycle >= 1, gen_epochs >= 0 required")
        if self.batch_size < 4 or self.batch_size % 2:
            raise ValueError("batch_size must be an even number >= 4")


@dataclass
class DomainPool:
    points: torch.Tensor          # (K, N, 3) float64, row i generated from source cloud i
    labels: torch.Tensor
    cycle: int


@dataclass
class ExpansionState:
    generators: list = field(default_factory=list)
    pools: list = field(default_factory=list)
    cycle: int = 0
    epoch: int = 0
    encoder_hash: str = ""
    cycle_hashes: list = field(default_factory=list)
    pool_sizes: list = field(default_factory=list)
    history: list = field(default_factory=list)


def counterpart_batch(source: CloudSet, pools: Sequence[DomainPool], idx: torch.Tensor,
                      rng: np.random.Generator):
    """N source clouds then their generated counterparts from uniformly drawn pools.

    Returns (points (2N, P, 3), labels (2N,), pool index per counterpart).
    """
    which = rng.integers(0, len(pools), size=len(idx))
    gen = torch.stack([pools[j].points[i] for j, i in zip(which.tolist(), idx.tolist())])
    pts = torch.cat([source.points[idx], gen])
    labels = torch.cat([source.labels[idx], torch.stack(
        [pools[j].labels[i] for j, i in zip(which.tolist(), idx.tolist())])])
    return pts, labels, which


def _finite(*losses):
    for v in losses:
        if not torch.isfinite(v):
            raise DivergenceError(f"non-finite loss {float(v)}")


def adversarial_step(G: Generator, R: Reconstructor, model: MSCN, proj: ProjectionHead,
                     x: torch.Tensor, y: torch.Tensor, opt_g, opt_m, cfg: ExpansionConfig,
                     noise: torch.Generator, seed: int = 0):
    """One alternation: generator (+ reconstructor) step, then classifier/projection step.

    The generator step runs the classifier in eval mode so its batch
    statistics are untouched; the optimizers hold disjoint parameter sets.
    Returns (generator loss, model loss, parts).
    """
    B = x.shape[0]
    model.eval()
    z = G.encoder(x)
    n1, n2 = G.noise(B, noise), G.noise(B, noise)
    x1 = G(x, n1, z=z)
    x2 = G(x, n2, z=z)
    recon = loss_recon(x, R(x1))
    feats_src = model.features(x, seed=seed)
    feats_gen = model.features(x1, seed=seed)
    gen_ce = loss_ce(model.head(feats_gen), y)
    adv = -loss_nce_star(proj(feats_src), proj(feats_gen), cfg.temperature)
    div = loss_recon(x1, x2)
    g_loss = loss_unseen(recon, gen_ce, adv, div, cfg.div_margin)
    _finite(g_loss)
    opt_g.zero_grad()
    g_loss.backward()
    opt_g.step()

    model.train()
    with torch.no_grad():
        x_new = G(x, G.noise(B, noise), z=z)
    feats = model.features(torch.cat([x, x_new]), seed=seed + 1)
    m_nce = loss_nce(proj(feats[:B]), proj(feats[B:]), cfg.temperature)
    m_ce = loss_ce(model.head(feats[B:]), y)
    m_loss = m_nce + m_ce
    _finite(m_loss)
    opt_m.zero_grad()
    m_loss.backward()
    opt_m.step()
    parts = {"recon": recon.item(), "gen_ce": gen_ce.item(), "adv": adv.item(),
             "div": div.item(), "model_nce": m_nce.item(), "model_gen_ce": m_ce.item()}
    return g_loss.item(), m_loss.item(), parts


def snapshot_pool(G: Generator, source: CloudSet, cycle: int, noise: torch.Generator,
                  batch: int = 32) -> DomainPool:
    out = []
    with torch.no_grad():
        for i in range(0, len(source), batch):
            x = source.points[i:i + batch]
            out.append(G(x, G.noise(x.shape[0], noise)))
    return DomainPool(torch.cat(out), source.labels.clone(), cycle)


def train_epoch_src(model, proj, source: CloudSet, pools, opt_m, cfg: ExpansionConfig,
                    rng: np.random.Generator, seed: int, on_batch: Optional[Callable] = None):
    model.train()
    half = cfg.batch_size // 2
    total, n = 0.0, 0
    for b, idx in enumerate(source.batches(half, rng)):
        if len(idx) < 2:
            continue
        if pools:
            pts, labels, which = counterpart_batch(source, pools, idx, rng)
            if on_batch is not None:
                on_batch(idx, which, labels)
            feats = model.features(pts, seed=seed + b)
            loss = loss_src(model.head(feats), labels, proj(feats[:len(idx)]),
                            proj(feats[len(idx):]), cfg.temperature)
        else:
            feats = model.features(source.points[idx], seed=seed + b, nbr=source.neighbors[idx])
            loss = loss_ce(model.head(feats), source.labels[idx])
        _finite(loss)
        opt_m.zero_grad()
        loss.backward()
        opt_m.step()
        total += loss.item()
        n += 1
    return total / max(n, 1)


def progressive_train(model: MSCN, source: Sequence[PointCloud], cfg: ExpansionConfig,
                      on_epoch: Optional[Callable] = None, on_batch: Optional[Callable] = None,
                      dump_dir=None):
    """Expand ``model`` (a pretrained classifier) over ``cfg.cycles`` generated domains.

    Returns (model, projection head, ExpansionState). ``on_epoch`` receives one
    dict per classifier epoch; ``on_batch`` sees (source idx, pool idx, labels)
    of every mixed batch.
    """
    cfg.validate()
    if model is None:
        raise ValueError("progressive training needs a pretrained classifier")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 23])
    noise = torch.Generator().manual_seed(cfg.seed + 1)
    data = CloudSet(source, model.config.M)
    encoder = FrozenEncoder(model.encoder_layers(2), model.config.M)
    proj = ProjectionHead(model.config.feature_dim)
    opt_m = torch.optim.Adam(list(model.parameters()) + list(proj.parameters()), lr=cfg.lr)
    state = ExpansionState(encoder_hash=encoder.digest())
    step_seed = cfg.seed * 1_000_003

    def record(row):
        state.history.append(row)
        if on_epoch is not None:
            on_epoch(row)

    try:
        if cfg.cycles == 0:
            for _ in range(cfg.epochs_per_cycle):
                loss = train_epoch_src(model, proj, data, [], opt_m, cfg, rng, step_seed)
                step_seed += 10_007
                state.epoch += 1
                record({"cycle": 0, "epoch": state.epoch, "phase": "model", "loss": loss})
        for k in range(1, cfg.cycles + 1):
            G = Generator(encoder, cfg.d_noise)
            R = Reconstructor(encoder)
            opt_g = torch.optim.Adam(G.trainable() + R.trainable(), lr=cfg.gen_lr)
            for _ in range(cfg.gen_epochs):
                g_sum, m_sum, nb = 0.0, 0.0, 0
                for idx in data.batches(cfg.batch_size, rng):
                    if len(idx) < 2:
                        continue
                    g, m, _ = adversarial_step(G, R, model, proj, data.points[idx],
                                               data.labels[idx], opt_g, opt_m, cfg, noise,
                                               step_seed)
                    step_seed += 2
                    g_sum, m_sum, nb = g_sum + g, m_sum + m, nb + 1
                record({"cycle": k, "epoch": state.epoch, "phase": "generator",
                        "loss": g_sum / max(nb, 1), "model_loss": m_sum / max(nb, 1)})
            state.cycle_hashes.append(encoder.digest())
            if state.cycle_hashes[-1] != state.encoder_hash:
                raise RuntimeError("generator encoder weights changed during expansion")
            for p in G.parameters():
                p.requires_grad_(False)
            pool = snapshot_pool(G, data, k, noise)
            state.generators.append(G)
            state.pools.append(pool)
            state.pool_sizes.append(len(pool.labels))
            state.cycle = k
            for _ in range(cfg.epochs_per_cycle):
                loss = train_epoch_src(model, proj, data, state.pools, opt_m, cfg, rng,
                                       step_seed, on_batch)
                step_seed += 10_007
                state.epoch += 1
                record({"cycle": k, "epoch": state.epoch, "phase": "model", "loss": loss})
            log.info("cycle %d done, %d epochs so far", k, state.epoch)
    except DivergenceError:
        if dump_dir is not None:
            save_expansion(dump_dir, model, proj, state)
        raise
    model.eval()
    return model, proj, state


def save_expansion(directory, model: MSCN, proj: ProjectionHead, state: ExpansionState,
                   write_pools: bool = True) -> None:
    """Checkpoint dirs for model, projection and generators, plus ``expansion.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(directory / "model", model)
    save_tensors(directory / "projection", proj.state_dict(), {"model": "projection"})
    pools = []
    for k, (G, pool) in enumerate(zip(state.generators, state.pools), start=1):
        trainable = {n: t for n, t in G.state_dict().items() if not n.startswith("encoder.")}
        save_tensors(directory / "generators" / f"g{k:02d}", trainable, {"model": "generator"})
        entry = {"cycle": pool.cycle, "size": len(pool.labels)}
        if write_pools:
            pdir = directory / "pools" / f"s{k:02d}"
            pdir.mkdir(parents=True, exist_ok=True)
            entries = []
            for i, (pts, lab) in enumerate(zip(pool.points, pool.labels)):
                name = f"{i:05d}.xyz"
                save_xyz(pdir / name, PointCloud(pts.numpy(), label=int(lab)))
                entries.append((name, int(lab)))
            save_manifest(pdir / "manifest.json",
                          DatasetManifest(entries, list(CLASS_NAMES), k, {"cycle": k}))
            entry["manifest"] = str(Path("pools") / f"s{k:02d}" / "manifest.json")
        pools.append(entry)
    if state.history:
        keys = sorted({k for row in state.history for k in row})
        with (directory / "loss_curves.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(state.history)
    doc = {"cycle": state.cycle, "epochs": state.epoch, "encoder_hash": state.encoder_hash,
           "cycle_hashes": state.cycle_hashes,
           "pool_sizes": state.pool_sizes, "pools": pools, "loss_curves": "loss_curves.csv"}
    (directory / "expansion.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
