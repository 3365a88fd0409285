"""Distribution-matching condensation, clean and with a poisoned target class."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attack import trigger_images
from .core import LabeledDataset, RunConfig, derive_seed, fraction_count, torch_generator, write_packed, read_packed
from .pool import CandidatePool
from .surrogate import build_model
from .transport import mean_embedding_gap


@dataclass(frozen=True)
class TriggerSet:
    images: np.ndarray
    deltas: np.ndarray
    source_ids: np.ndarray
    source_class: int
    source_class_size: int
    kappa1: float

    def __len__(self) -> int:
        return len(self.source_ids)


@dataclass(frozen=True)
class MixedDataset:
    data: LabeledDataset
    poisoned_ids: np.ndarray
    clean_count: int


@dataclass
class CondensedSet:
    images: np.ndarray
    labels: np.ndarray
    ipc: int
    class_count: int
    manifest: dict = field(default_factory=dict)

    def class_images(self, c: int) -> np.ndarray:
        return self.images[self.labels == c]

    def as_dataset(self, name: str = "condensed") -> LabeledDataset:
        return LabeledDataset(self.images, self.labels, np.arange(len(self.labels)), self.class_count, name)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_packed(self.as_dataset(), directory / "condensed.idrp")
        (directory / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "CondensedSet":
        directory = Path(directory)
        d = read_packed(directory / "condensed.idrp")
        manifest = json.loads((directory / "manifest.json").read_text())
        return cls(np.array(d.images), np.array(d.labels), manifest["ipc"], d.class_count, manifest)


# --------------------------------------------------------------------------
# poisoned inputs


def build_trigger_set(g, pool: CandidatePool, source_class_size: int | None = None,
                      kappa1: float | None = None) -> TriggerSet:
    if len(pool) == 0:
        raise ValueError("candidate pool is empty")
    deltas, atk = trigger_images(g, pool.members.images)
    return TriggerSet(atk, deltas, pool.members.ids.copy(), pool.source_class,
                      source_class_size if source_class_size is not None else len(pool),
                      kappa1 if kappa1 is not None else 1.0)


def poison_quota(t: TriggerSet, rho: float) -> int:
    return fraction_count(rho * t.kappa1, t.source_class_size)


def build_mixed_dataset(clean_tau: LabeledDataset, t: TriggerSet, rho: float, seed: int) -> MixedDataset:
    """Clean target-class samples plus a seeded uniform draw of triggered samples relabelled as the target."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    if len(clean_tau) == 0:
        raise ValueError("clean target-class slice is empty")
    labels = np.unique(clean_tau.labels)
    if labels.size != 1:
        raise ValueError("clean slice must carry a single label")
    target = int(labels[0])
    quota = poison_quota(t, rho)
    if quota > len(t):
        raise ValueError(f"poison quota {quota} exceeds the {len(t)} triggered samples")
    if quota > len(clean_tau):
        raise ValueError(f"poison quota {quota} exceeds the {len(clean_tau)} clean target samples")
    rng = np.random.default_rng(derive_seed(seed, "mix"))
    pick = np.sort(rng.choice(len(t), size=quota, replace=False))
    poisoned = LabeledDataset(t.images[pick], np.full(quota, target), t.source_ids[pick],
                              clean_tau.class_count, "poisoned")
    data = LabeledDataset(
        np.concatenate([clean_tau.images, poisoned.images]),
        np.concatenate([clean_tau.labels, poisoned.labels]),
        np.concatenate([clean_tau.ids, poisoned.ids]),
        clean_tau.class_count, f"mixed[{target}]",
    )
    return MixedDataset(data, poisoned.ids.copy(), len(clean_tau))


# --------------------------------------------------------------------------
# distribution matching


def augment_batch(x: torch.Tensor, shift: tuple[int, int], flip: bool, pad: int = 2) -> torch.Tensor:
    """Translate by ``shift`` inside a zero pad of ``pad`` pixels, then optionally mirror."""
    h, w = x.shape[-2:]
    dy, dx = shift
    out = F.pad(x, (pad, pad, pad, pad))[..., pad + dy:pad + dy + h, pad + dx:pad + dx + w]
    return out.flip(-1) if flip else out


def random_augment(x: torch.Tensor, gen: torch.Generator, pad: int = 2) -> torch.Tensor:
    """Independent crop/flip per sample; used for downstream training."""
    shifts = torch.randint(-pad, pad + 1, (len(x), 2), generator=gen)
    flips = torch.rand(len(x), generator=gen) < 0.5
    return torch.stack([augment_batch(xi, tuple(s.tolist()), bool(f), pad) for xi, s, f in zip(x, shifts, flips)])


def condense_class(images: np.ndarray, ipc: int, config: RunConfig, seed: int) -> tuple[np.ndarray, list[float]]:
    """Synthesize ``ipc`` images whose mean embedding matches that of ``images``
    under freshly drawn random encoders.

    Returns the synthetic images and the per-iteration matching objective.
    """
    n = len(images)
    if n == 0:
        raise ValueError("cannot condense an empty class")
    if ipc < 1:
        raise ValueError("ipc must be at least 1")
    if ipc > n:
        raise ValueError(f"ipc {ipc} exceeds the {n} real samples available for initialization")
    gen = torch_generator(seed)
    real = torch.from_numpy(np.array(images, dtype=np.float32))
    init = torch.randperm(n, generator=gen)[:ipc]
    syn = real[init].clone().requires_grad_(True)
    iterations = config.condense_iterations
    trace: list[float] = []
    if iterations == 0:
        return syn.detach().numpy(), trace

    c, h, w = real.shape[1:]
    opt = torch.optim.SGD([syn], lr=config.condense_lr, momentum=0.5)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 0.5 * (1 + math.cos(math.pi * k / iterations)))
    batch = min(config.batch_real, n)
    for k in range(iterations):
        enc = build_model(config.arch, c, 2, (h, w), derive_seed(seed, "encoder", k),
                          width=config.net_width, depth=config.net_depth, activation=config.activation)
        for p in enc.parameters():
            p.requires_grad_(False)
        idx = torch.randperm(n, generator=gen)[:batch]
        if config.augment == "crop_flip":
            shift = tuple(torch.randint(-2, 3, (2,), generator=gen).tolist())
            flip = bool(torch.rand(1, generator=gen).item() < 0.5)
            aug = lambda x: augment_batch(x, shift, flip)
        else:
            aug = lambda x: x
        with torch.no_grad():
            real_feat = enc.features(aug(real[idx]))
        loss = mean_embedding_gap(real_feat, enc.features(aug(syn)))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        with torch.no_grad():
            syn.clamp_(0.0, 1.0)
        trace.append(loss.item())
    return syn.detach().numpy(), trace


def class_seed(base_seed: int, c: int) -> int:
    return derive_seed(base_seed, "condense", c)


def _assemble(parts: dict[int, tuple[np.ndarray, list[float]]], config: RunConfig, class_count: int,
              extra: dict) -> CondensedSet:
    images = np.concatenate([parts[c][0] for c in range(class_count)])
    labels = np.repeat(np.arange(class_count), config.ipc)
    manifest = {
        "base_seed": config.seed,
        "class_seeds": {str(c): class_seed(config.seed, c) for c in range(class_count)},
        "ipc": config.ipc,
        "iterations": config.condense_iterations,
        "condense_lr": config.condense_lr,
        "augment": config.augment,
        "regularizer_weight": 0.0,
        "objective_trace": {str(c): parts[c][1] for c in range(class_count)},
        **extra,
    }
    return CondensedSet(images.astype(np.float32), labels, config.ipc, class_count, manifest)


def condense_clean(d: LabeledDataset, config: RunConfig) -> CondensedSet:
    parts = {}
    for c in range(d.class_count):
        parts[c] = condense_class(d.class_slice(c).images, config.ipc, config, class_seed(config.seed, c))
    return _assemble(parts, config, d.class_count, {"poisoned": False, "poisoned_ids": []})


def condense_malicious(d: LabeledDataset, target: int, mixed: MixedDataset, config: RunConfig,
                       reuse: CondensedSet | None = None) -> CondensedSet:
    """Clean condensation for every non-target class, mixed data for the target.

    ``reuse`` may supply an already condensed clean set with the same base
    seed and settings; its non-target classes are taken verbatim.
    """
    if reuse is not None and (reuse.manifest.get("base_seed") != config.seed or reuse.ipc != config.ipc
                              or reuse.manifest.get("iterations") != config.condense_iterations):
        raise ValueError("reused condensed set was produced with different settings")
    parts = {}
    for c in range(d.class_count):
        if c == target:
            parts[c] = condense_class(mixed.data.images, config.ipc, config, class_seed(config.seed, c))
        elif reuse is not None:
            parts[c] = (reuse.class_images(c).copy(), reuse.manifest["objective_trace"][str(c)])
        else:
            parts[c] = condense_class(d.class_slice(c).images, config.ipc, config, class_seed(config.seed, c))
    return _assemble(parts, config, d.class_count, {
        "poisoned": True,
        "target_class": target,
        "poisoned_ids": [int(i) for i in mixed.poisoned_ids],
        "mixed_size": len(mixed.data),
    })
