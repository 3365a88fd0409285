"""Instance-dependent trigger generator and its four-term training objective."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import RunConfig, derive_seed, torch_generator
from .pool import CandidatePool
from .surrogate import TargetReferenceSets, snapshot_digest
from .transport import GroundMetric, emd_batch

NORM_TOL = 1e-4
LOSS_NAMES = ("contrast", "soft", "l2", "lpips")


class TriggerGenerator(nn.Module):
    """Small encoder-decoder with skip connections.

    The output passes through ``epsilon_max * tanh`` so that every
    perturbation satisfies the amplitude bound by construction. With
    ``zero_head`` the final convolution starts at zero, i.e. the untrained
    generator is the identity attack. With ``positional`` two coordinate
    planes are appended to the input, so that the trigger can anchor to
    image locations instead of being purely translation-equivariant.
    """

    arch = "unet"

    def __init__(self, channels: int, image_size, width: int = 16, epsilon_max: float = 8 / 255,
                 zero_head: bool = True, positional: bool = True):
        super().__init__()
        self.config = dict(channels=channels, image_size=list(image_size), width=width,
                           epsilon_max=epsilon_max, zero_head=zero_head, positional=positional)
        self.epsilon_max = float(epsilon_max)
        self.positional = positional
        w = width
        self.stem = nn.Sequential(nn.Conv2d(channels + 2 * positional, w, 3, padding=1), nn.LeakyReLU(0.2))
        self.down = nn.ModuleList([
            nn.Sequential(nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)),
            nn.Sequential(nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)),
            nn.Sequential(nn.Conv2d(4 * w, 4 * w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)),
        ])
        self.up = nn.ModuleList([
            nn.Sequential(nn.Conv2d(8 * w, 4 * w, 3, padding=1), nn.LeakyReLU(0.2)),
            nn.Sequential(nn.Conv2d(6 * w, 2 * w, 3, padding=1), nn.LeakyReLU(0.2)),
            nn.Sequential(nn.Conv2d(3 * w, w, 3, padding=1), nn.LeakyReLU(0.2)),
        ])
        self.out = nn.Conv2d(w, channels, 3, padding=1)
        if zero_head:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = 2 * x - 1
        if self.positional:
            n, _, rows, cols = x.shape
            yy = torch.linspace(-1, 1, rows, dtype=x.dtype).view(1, 1, rows, 1).expand(n, 1, rows, cols)
            xx = torch.linspace(-1, 1, cols, dtype=x.dtype).view(1, 1, 1, cols).expand(n, 1, rows, cols)
            h = torch.cat([h, yy, xx], dim=1)
        h = self.stem(h)
        skips = [h]
        for block in self.down:
            h = block(h)
            skips.append(h)
        skips.pop()
        for block in self.up:
            s = skips.pop()
            h = F.interpolate(h, size=s.shape[-2:], mode="nearest")
            h = block(torch.cat([h, s], dim=1))
        return self.epsilon_max * torch.tanh(self.out(h))


def build_generator(channels: int, image_size, seed: int, width: int = 16, epsilon_max: float = 8 / 255,
                    zero_head: bool = True, positional: bool = True) -> TriggerGenerator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        g = TriggerGenerator(channels, image_size, width=width, epsilon_max=epsilon_max, zero_head=zero_head,
                             positional=positional)
    g.seed = seed
    return g


def apply_trigger(g: nn.Module, x) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (delta, clamp(x + delta, 0, 1)) for one image or a batch."""
    t = x if isinstance(x, torch.Tensor) else torch.from_numpy(np.array(x, dtype=np.float32))
    single = t.ndim == 3
    if single:
        t = t[None]
    expected = (g.config["channels"], *g.config["image_size"])
    if tuple(t.shape[1:]) != expected:
        raise ValueError(f"input shape {tuple(t.shape[1:])} does not match generator input {expected}")
    delta = g(t)
    x_atk = torch.clamp(t + delta, 0.0, 1.0)
    if single:
        return delta[0], x_atk[0]
    return delta, x_atk


def trigger_images(g: nn.Module, images: np.ndarray, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Numpy convenience wrapper over ``apply_trigger`` without gradients."""
    deltas, atks = [], []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            d, a = apply_trigger(g, images[i:i + batch])
            deltas.append(d.numpy())
            atks.append(a.numpy())
    return np.concatenate(deltas).astype(np.float32), np.concatenate(atks).astype(np.float32)


# --------------------------------------------------------------------------
# losses


def _check_unit(z: torch.Tensor, name: str) -> None:
    norms = z.detach().norm(dim=-1)
    if torch.any((norms - 1).abs() > NORM_TOL):
        raise ValueError(f"{name} embeddings must be normalized to unit norm")


def contrastive_loss(atk: torch.Tensor, positives: torch.Tensor, clean: torch.Tensor, temperature: float) -> torch.Tensor:
    """InfoNCE with the target positive in the numerator and clean negatives only below.

    Because the positive is absent from the denominator the value can be negative.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if atk.ndim != 2 or atk.shape != positives.shape or atk.shape[1] != clean.shape[1] or len(clean) == 0:
        raise ValueError("embedding batches have inconsistent shapes")
    for z, name in ((atk, "poisoned"), (positives, "positive"), (clean, "clean")):
        _check_unit(z, name)
    pos = (atk * positives).sum(dim=1) / temperature
    neg = atk @ clean.T / temperature
    return (torch.logsumexp(neg, dim=1) - pos).mean()


def soft_label_loss(p: torch.Tensor, q, metric: GroundMetric) -> torch.Tensor:
    return emd_batch(p, q, metric).mean()


def l2_loss(perturbations: torch.Tensor) -> torch.Tensor:
    if perturbations.shape[0] == 0:
        raise ValueError("empty perturbation batch")
    return perturbations.flatten(1).pow(2).sum(dim=1).mean()


def normalize_channels(a: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    # vector_norm has a zero subgradient at the origin; a plain sqrt would give NaN there
    return a / (torch.linalg.vector_norm(a, dim=1, keepdim=True) + eps)


@dataclass
class PerceptualNetwork:
    """Layered feature map with nonnegative per-channel weights.

    ``layers`` maps a batch to a list of (B, C_l, H_l, W_l) activations.
    """

    layers: Callable[[torch.Tensor], Sequence[torch.Tensor]]
    weights: list[torch.Tensor]
    source: str = "custom"

    def __post_init__(self):
        self.weights = [torch.as_tensor(w) for w in self.weights]
        if any(torch.any(w < 0) for w in self.weights):
            raise ValueError("channel weights must be nonnegative")

    @classmethod
    def from_surrogate(cls, model: nn.Module) -> "PerceptualNetwork":
        with torch.no_grad():
            probe = torch.zeros(1, model.config["channels"], *model.config["image_size"],
                                dtype=next(model.parameters()).dtype)
            widths = [a.shape[1] for a in model.block_outputs(probe)]
        return cls(model.block_outputs, [torch.ones(c) for c in widths], source=f"surrogate:{model.arch}")


def lpips_loss(net: PerceptualNetwork, x: torch.Tensor, x_atk: torch.Tensor) -> torch.Tensor:
    if x.shape != x_atk.shape:
        raise ValueError("image batches differ in shape")
    if x.ndim == 3:
        x, x_atk = x[None], x_atk[None]
    total = x.new_zeros(x.shape[0])
    for a, b, w in zip(net.layers(x), net.layers(x_atk), net.weights):
        if a.ndim == 2:
            a, b = a[:, :, None, None], b[:, :, None, None]
        diff = w.to(a.dtype)[None, :, None, None] * (normalize_channels(a) - normalize_channels(b))
        total = total + diff.pow(2).sum(dim=1).mean(dim=(1, 2))
    return total.mean()


@dataclass(frozen=True)
class LossBreakdown:
    contrast: float
    soft: float
    l2: float
    lpips: float
    total: float
    weights: tuple[float, float, float, float]


def total_loss(components: Sequence[float], weights: Sequence[float]) -> LossBreakdown:
    if len(components) != 4 or len(weights) != 4:
        raise ValueError("expected four components and four weights")
    if min(weights) < 0:
        raise ValueError("loss weights must be nonnegative")
    c = [float(v) for v in components]
    w = tuple(float(v) for v in weights)
    total = w[0] * c[0] + w[1] * c[1] + w[2] * c[2] + w[3] * c[3]
    return LossBreakdown(*c, total, w)


# --------------------------------------------------------------------------
# training


@dataclass
class AttackResult:
    generator: TriggerGenerator
    log: list[LossBreakdown] = field(default_factory=list)
    surrogate_digest: str = ""

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", *LOSS_NAMES, "total"])
            for e, row in enumerate(self.log, start=1):
                w.writerow([e, *(repr(getattr(row, k)) for k in (*LOSS_NAMES, "total"))])


def attack_losses(g: nn.Module, m: nn.Module, net: PerceptualNetwork, x: torch.Tensor,
                  positives: torch.Tensor, targets: np.ndarray, metric: GroundMetric,
                  temperature: float, weights: Sequence[float]) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Weighted objective and its four components for one minibatch.

    Terms whose weight is zero are still evaluated (they are logged) but
    kept out of the graph.
    """
    delta, x_atk = apply_trigger(g, x)
    feats = m.features(x_atk)
    with torch.no_grad():
        z_clean = F.normalize(m.features(x), dim=1)
    parts = [
        contrastive_loss(F.normalize(feats, dim=1), F.normalize(positives, dim=1), z_clean, temperature),
        soft_label_loss(F.softmax(m.head(feats), dim=1), targets, metric),
        l2_loss(delta),
        lpips_loss(net, x, x_atk),
    ]
    total = sum(w * p for w, p in zip(weights, parts) if w != 0) if any(weights) else parts[0] * 0
    return total, parts


def train_attack_model(pool: CandidatePool, refs: TargetReferenceSets, m: nn.Module, net: PerceptualNetwork,
                       config: RunConfig, metric: GroundMetric | None = None) -> AttackResult:
    """Fit g_theta on the candidate pool with the surrogate frozen."""
    if len(pool) == 0 or len(refs) == 0:
        raise ValueError("candidate pool and reference sets must be nonempty")
    images = torch.from_numpy(np.array(pool.members.images))
    c, h, w = images.shape[1:]
    metric = metric or GroundMetric.zero_one(m.config["num_classes"])
    seed = derive_seed(config.seed, "attack")
    g = build_generator(c, (h, w), seed, width=config.generator_width, epsilon_max=config.epsilon_max)
    digest = snapshot_digest(m)
    result = AttackResult(g, [], digest)
    if config.attack_epochs == 0:
        return result

    m.eval()
    frozen = [p.requires_grad for p in m.parameters()]
    for p in m.parameters():
        p.requires_grad_(False)
    dtype = next(m.parameters()).dtype
    g.to(dtype)
    images = images.to(dtype)
    ref_z = torch.from_numpy(np.array(refs.embeddings)).to(dtype)
    ref_q = np.asarray(refs.soft_labels, dtype=np.float64)
    weights = config.loss_weights
    opt = torch.optim.Adam(g.parameters(), lr=config.attack_lr)
    order_gen = torch_generator(derive_seed(seed, "order"))
    sample_gen = torch_generator(derive_seed(seed, "refs"))
    n = len(images)
    try:
        g.train()
        for _ in range(config.attack_epochs):
            perm = torch.randperm(n, generator=order_gen)
            sums = np.zeros(4)
            for start in range(0, n, config.attack_batch):
                idx = perm[start:start + config.attack_batch]
                pick = torch.randint(len(refs), (len(idx),), generator=sample_gen)
                total, parts = attack_losses(g, m, net, images[idx], ref_z[pick], ref_q[pick.numpy()],
                                             metric, config.temperature, weights)
                opt.zero_grad()
                total.backward()
                opt.step()
                sums += np.array([p.item() for p in parts]) * len(idx)
            result.log.append(total_loss(sums / n, weights))
    finally:
        g.eval()
        for p, flag in zip(m.parameters(), frozen):
            p.requires_grad_(flag)
    if snapshot_digest(m) != digest:
        raise RuntimeError("surrogate parameters changed during attack training")
    return result
