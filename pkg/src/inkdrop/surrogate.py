"""Surrogate classifier f = h(phi(x)) and the target-class reference sets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import LabeledDataset, RunConfig, fraction_count, torch_generator, derive_seed

_ACTIVATIONS = {"relu": nn.ReLU, "softplus": nn.Softplus, "gelu": nn.GELU, "tanh": nn.Tanh}


class ConvNet(nn.Module):
    """Conv-norm-activation-pool blocks followed by a linear head.

    ``features`` is the penultimate representation phi, ``head`` the linear
    classifier h; ``forward`` returns the logits of h(phi(x)).
    """

    arch = "convnet"

    def __init__(self, channels: int, num_classes: int, image_size: tuple[int, int],
                 width: int = 16, depth: int = 3, activation: str = "relu"):
        super().__init__()
        self.config = dict(channels=channels, num_classes=num_classes, image_size=list(image_size),
                           width=width, depth=depth, activation=activation)
        blocks = []
        c, (h, w) = channels, image_size
        for _ in range(depth):
            blocks.append(nn.Sequential(
                nn.Conv2d(c, width, kernel_size=3, padding=1),
                nn.GroupNorm(width, width, affine=True),
                _ACTIVATIONS[activation](),
                nn.AvgPool2d(2),
            ))
            c, h, w = width, h // 2, w // 2
        if h < 1 or w < 1:
            raise ValueError(f"image {image_size} too small for depth {depth}")
        self.blocks = nn.ModuleList(blocks)
        self.feature_dim = c * h * w
        self.head = nn.Linear(self.feature_dim, num_classes)

    def block_outputs(self, x: torch.Tensor) -> list[torch.Tensor]:
        outs = []
        for b in self.blocks:
            x = b(x)
            outs.append(x)
        return outs

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for b in self.blocks:
            x = b(x)
        return x.flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class LinearProbe(nn.Module):
    """phi = flatten, h = linear; used for hand-checkable tests."""

    arch = "linear"

    def __init__(self, channels: int, num_classes: int, image_size: tuple[int, int], **_):
        super().__init__()
        self.config = dict(channels=channels, num_classes=num_classes, image_size=list(image_size))
        self.feature_dim = channels * image_size[0] * image_size[1]
        self.head = nn.Linear(self.feature_dim, num_classes)

    def block_outputs(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [x]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return x.flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


ARCHITECTURES = {"convnet": ConvNet, "linear": LinearProbe}


def build_model(arch: str, channels: int, num_classes: int, image_size, seed: int,
                width: int = 16, depth: int = 3, activation: str = "relu") -> nn.Module:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ARCHITECTURES[arch](channels, num_classes, tuple(image_size),
                                    width=width, depth=depth, activation=activation)
    model.seed = seed
    return model


def model_for(config: RunConfig, d: LabeledDataset, seed: int, arch: str | None = None) -> nn.Module:
    c, h, w = d.image_shape
    return build_model(arch or config.arch, c, d.class_count, (h, w), seed,
                       width=config.net_width, depth=config.net_depth, activation=config.activation)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: nn.Module
    train_accuracy: float
    losses: list[float] = field(default_factory=list)


def fit_classifier(model: nn.Module, images: torch.Tensor, labels: torch.Tensor, *, epochs: int, lr: float,
                   batch_size: int, seed: int, momentum: float = 0.9, weight_decay: float = 5e-4,
                   augment=None) -> list[float]:
    """SGD with momentum and a step schedule that halves the rate twice."""
    if epochs == 0:
        return []
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    milestones = sorted({max(1, epochs // 2), max(1, (3 * epochs) // 4)})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=0.5)
    gen = torch_generator(seed)
    n = images.shape[0]
    losses = []
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            xb = images[idx]
            if augment is not None:
                xb = augment(xb, gen)
            loss = F.cross_entropy(model(xb), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * idx.numel()
        sched.step()
        losses.append(total / n)
    model.eval()
    return losses


def train_surrogate(train: LabeledDataset, config: RunConfig) -> TrainResult:
    if len(train) == 0:
        raise ValueError("training set is empty")
    missing = np.flatnonzero(train.class_counts() == 0)
    if missing.size:
        raise ValueError(f"classes absent from training set: {missing.tolist()}")
    seed = derive_seed(config.seed, "surrogate")
    model = model_for(config, train, seed)
    losses = fit_classifier(
        model, train.tensor(), torch.from_numpy(train.labels.copy()),
        epochs=config.surrogate_epochs, lr=config.surrogate_lr, batch_size=config.batch_size,
        seed=derive_seed(seed, "order"), momentum=config.momentum, weight_decay=config.weight_decay,
    )
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    acc = float((predict_labels(model, train.images) == train.labels).mean())
    return TrainResult(model, acc, losses)


# --------------------------------------------------------------------------
# queries


def _as_batch(model: nn.Module, x) -> tuple[torch.Tensor, bool]:
    t = x if isinstance(x, torch.Tensor) else torch.from_numpy(np.array(x))
    single = t.ndim == 3
    if single:
        t = t[None]
    expected = (model.config["channels"], *model.config["image_size"])
    if tuple(t.shape[1:]) != expected:
        raise ValueError(f"input shape {tuple(t.shape[1:])} does not match model input {expected}")
    dtype = next(model.parameters()).dtype
    return t.to(dtype), single


def predict_distribution(m: nn.Module, x, batch: int = 512) -> np.ndarray:
    """Softmax of h(phi(x)) for one image (C,H,W) or a batch (N,C,H,W)."""
    t, single = _as_batch(m, x)
    with torch.no_grad():
        out = torch.cat([F.softmax(m.head(m.features(t[i:i + batch])), dim=1) for i in range(0, len(t), batch)])
    out = out.double().numpy()
    return out[0] if single else out


def extract_features(m: nn.Module, x, batch: int = 512) -> np.ndarray:
    t, single = _as_batch(m, x)
    with torch.no_grad():
        out = torch.cat([m.features(t[i:i + batch]) for i in range(0, len(t), batch)])
    out = out.double().numpy()
    return out[0] if single else out


def classify_features(m: nn.Module, z) -> np.ndarray:
    """h applied to precomputed features."""
    dtype = next(m.parameters()).dtype
    with torch.no_grad():
        return F.softmax(m.head(torch.as_tensor(np.asarray(z)).to(dtype)), dim=-1).double().numpy()


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=-1)


def predict_labels(m: nn.Module, x) -> np.ndarray:
    return argmax_lowest(predict_distribution(m, x))


# --------------------------------------------------------------------------
# target-class reference sets


@dataclass(frozen=True)
class TruePositiveSet:
    members: LabeledDataset
    target_class: int


@dataclass(frozen=True)
class TopConfidenceSet:
    members: LabeledDataset
    confidences: np.ndarray
    kappa2: float


@dataclass(frozen=True)
class TargetReferenceSets:
    embeddings: np.ndarray
    soft_labels: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def true_positive_set(m: nn.Module, d: LabeledDataset, target: int) -> TruePositiveSet:
    if not 0 <= target < d.class_count:
        raise ValueError(f"target class {target} out of range")
    cls = d.class_slice(target)
    if len(cls) == 0:
        return TruePositiveSet(cls, target)
    keep = np.flatnonzero(predict_labels(m, cls.images) == target)
    return TruePositiveSet(cls.subset(keep), target)


def rank_by_confidence(confidences: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Order by confidence descending, ties by sample id ascending."""
    return np.lexsort((ids, -np.asarray(confidences)))


def top_confidence_set(tp: TruePositiveSet, m: nn.Module, kappa2: float) -> TopConfidenceSet:
    if len(tp.members) == 0:
        raise ValueError("true-positive set is empty")
    if not 0.0 < kappa2 <= 1.0:
        raise ValueError("kappa2 must lie in (0, 1]")
    conf = predict_distribution(m, tp.members.images)[:, tp.target_class]
    order = rank_by_confidence(conf, tp.members.ids)[: fraction_count(kappa2, len(tp.members))]
    return TopConfidenceSet(tp.members.subset(order), conf[order], kappa2)


def build_reference_sets(m: nn.Module, top: TopConfidenceSet) -> TargetReferenceSets:
    if len(top.members) == 0:
        raise ValueError("top-confidence set is empty")
    images = top.members.images
    return TargetReferenceSets(extract_features(m, images), predict_distribution(m, images), top.members.ids.copy())


# --------------------------------------------------------------------------
# snapshots


def parameter_blob(m: nn.Module) -> bytes:
    return b"".join(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
                    for t in m.state_dict().values())


def snapshot_digest(m: nn.Module) -> str:
    return hashlib.sha256(parameter_blob(m)).hexdigest()


def save_model(m: nn.Module, directory: str | Path, extra: dict | None = None) -> str:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = parameter_blob(m)
    manifest = {"arch": m.arch, "seed": getattr(m, "seed", None), **m.config,
                "n_params": len(blob) // 4, **(extra or {})}
    (directory / "params.f32").write_bytes(blob)
    (directory / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return hashlib.sha256(blob).hexdigest()


def load_model(directory: str | Path, registry: dict | None = None) -> nn.Module:
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text())
    registry = registry or ARCHITECTURES
    cfg = {k: manifest[k] for k in manifest if k not in ("arch", "seed", "n_params")}
    cls = registry[manifest["arch"]]
    args = {k: v for k, v in cfg.items() if k in cls.__init__.__code__.co_varnames}
    with torch.random.fork_rng(devices=[]):
        model = cls(**args)
    raw = np.frombuffer((directory / "params.f32").read_bytes(), dtype="<f4")
    state = model.state_dict()
    total = sum(t.numel() for t in state.values())
    if raw.size != total or raw.size != manifest["n_params"]:
        raise ValueError(f"parameter blob has {raw.size} values, model expects {total}")
    offset = 0
    for k, t in state.items():
        n = t.numel()
        state[k] = torch.from_numpy(raw[offset:offset + n].copy()).reshape(t.shape).to(t.dtype)
        offset += n
    model.load_state_dict(state)
    model.seed = manifest.get("seed")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
