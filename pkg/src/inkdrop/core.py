"""Shared data model, run configuration, seeding and dataset ingestion."""

from __future__ import annotations

import configparser
import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch

PACKED_MAGIC = b"IDRP"
_HEADER = struct.Struct("<4s5I")
IMAGE_SUFFIXES = {".png", ".bmp", ".jpg", ".jpeg", ".gif", ".tif", ".tiff", ".pgm", ".ppm"}


class DatasetError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def check_image(x: np.ndarray) -> np.ndarray:
    """Validate one image as a (channels, height, width) array in [0, 1]."""
    x = np.asarray(x)
    if x.ndim != 3 or min(x.shape) < 1:
        raise DatasetError(f"expected a (C, H, W) image, got shape {x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise DatasetError("pixel values must lie in [0, 1]")
    return x


class LabeledSample(NamedTuple):
    image: np.ndarray
    label: int
    id: int


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """An ordered, immutable set of labelled images.

    ``images`` is a float32 array of shape (N, C, H, W) with values in [0, 1];
    ``ids`` are unique integers that survive subsetting and splitting.
    """

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got {images.shape}")
        n = images.shape[0]
        if labels.shape != (n,) or ids.shape != (n,):
            raise DatasetError("images, labels and ids must have the same length")
        if self.class_count < 1:
            raise DatasetError("class_count must be positive")
        if n and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DatasetError("label out of range")
        if len(np.unique(ids)) != n:
            raise DatasetError("sample ids must be unique")
        if n and (not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0):
            raise DatasetError("pixel values must lie in [0, 1]")
        for arr in (images, labels, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.images[i], int(self.labels[i]), int(self.ids[i]))

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index: Sequence[int] | np.ndarray, name: str | None = None) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(
            self.images[index], self.labels[index], self.ids[index], self.class_count, name or self.name
        )

    def class_slice(self, c: int) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.labels == c), name=f"{self.name}[class={c}]")

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.images.copy())


def concat_datasets(parts: Sequence[LabeledDataset], name: str) -> LabeledDataset:
    return LabeledDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.ids for p in parts]),
        max(p.class_count for p in parts),
        name,
    )


def normalize_simplex(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a nonempty vector")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError("entries must be finite and nonnegative")
    total = v.sum()
    if total <= 0:
        raise ValueError("cannot normalize an all-zero vector")
    return v / total


def derive_seed(base: int, *tags: int | str) -> int:
    """Deterministic child seed for a (base, tag, ...) path."""
    words = [int(base) & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            words.extend(t.encode())
        else:
            words.append(int(t) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint32)[0])


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def fraction_count(fraction: float, n: int) -> int:
    """Size rule for fractional selections: never empty when n > 0."""
    return max(1, int(np.floor(fraction * n + 1e-9)))


# --------------------------------------------------------------------------
# ingestion and persistence


def load_dataset(path: str | Path, format: str = "directory-of-images", name: str | None = None) -> LabeledDataset:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing path: {path}")
    if format == "directory-of-images":
        return _load_directory(path, name or path.name)
    if format == "packed-binary":
        return read_packed(path, name=name)
    raise DatasetError(f"unknown dataset format {format!r}")


def _load_directory(root: Path, name: str) -> LabeledDataset:
    from PIL import Image

    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    for p in class_dirs:
        if not p.name.isdigit():
            raise DatasetError(f"class directory names must be integers, got {p.name!r}")
    class_dirs.sort(key=lambda p: int(p.name))

    images, labels = [], []
    for p in class_dirs:
        for f in sorted(p.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(f) as im:
                    im.load()
                    if im.mode not in ("L", "RGB"):
                        im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except OSError as exc:
                raise DatasetError(f"malformed image {f}: {exc}") from exc
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            images.append(arr)
            labels.append(int(p.name))
    if not images:
        raise DatasetError("no samples found")
    if len({a.shape for a in images}) != 1:
        raise DatasetError("images in a dataset must share one shape")
    class_count = max(labels) + 1
    return LabeledDataset(np.stack(images), np.array(labels), np.arange(len(images)), class_count, name)


def write_packed(d: LabeledDataset, path: str | Path) -> None:
    c, h, w = d.image_shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PACKED_MAGIC, d.class_count, len(d), c, h, w))
        fh.write(d.images.astype("<f4").tobytes())
        fh.write(d.labels.astype("<u4").tobytes())


def read_packed(path: str | Path, name: str | None = None) -> LabeledDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError("malformed file: truncated header")
    magic, class_count, n, c, h, w = _HEADER.unpack_from(raw)
    if magic != PACKED_MAGIC:
        raise DatasetError("malformed file: bad magic")
    n_pix = n * c * h * w
    expected = _HEADER.size + 4 * n_pix + 4 * n
    if len(raw) != expected:
        raise DatasetError(f"malformed file: expected {expected} bytes, found {len(raw)}")
    if n == 0:
        raise DatasetError("no samples found")
    images = np.frombuffer(raw, dtype="<f4", count=n_pix, offset=_HEADER.size).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=_HEADER.size + 4 * n_pix).astype(np.int64)
    if labels.max() >= class_count:
        raise DatasetError("label out of range")
    return LabeledDataset(images.astype(np.float32), labels, np.arange(n), class_count, name or path.stem)


def split_dataset(d: LabeledDataset, train_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified train/test split; each class keeps at least one sample per side."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    train_idx, test_idx = [], []
    for c in range(d.class_count):
        idx = np.flatnonzero(d.labels == c)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise DatasetError(f"class {c} has fewer than 2 samples and cannot be stratified")
        idx = rng.permutation(idx)
        k = min(max(int(round(train_fraction * idx.size)), 1), idx.size - 1)
        train_idx.append(idx[:k])
        test_idx.append(idx[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return d.subset(train_idx, f"{d.name}/train"), d.subset(test_idx, f"{d.name}/test")


# --------------------------------------------------------------------------
# configuration

_SECTIONS = {
    "experiment": ("name", "seed", "target_class", "dataset", "dataset_format", "n_per_class", "train_fraction"),
    "model": ("arch", "net_width", "net_depth", "activation", "downstream_arch"),
    "surrogate": ("surrogate_epochs", "surrogate_lr", "batch_size", "momentum", "weight_decay"),
    "pool": ("kappa1", "kappa2", "lam"),
    "attack": (
        "lambda1", "lambda2", "lambda3", "lambda4", "temperature", "epsilon_max",
        "attack_epochs", "attack_lr", "attack_batch", "generator_width",
    ),
    "condense": ("rho", "ipc", "condense_iterations", "condense_lr", "batch_real", "augment"),
    "downstream": ("downstream_epochs", "downstream_lr", "downstream_batch"),
}


@dataclass(frozen=True)
class RunConfig:
    """All knobs of one experiment; every stage reads only the fields it needs."""

    name: str = "inkdrop"
    seed: int = 0
    target_class: int = 0
    dataset: str = "shapes"
    dataset_format: str = "synthetic"
    n_per_class: int = 400
    train_fraction: float = 0.8

    arch: str = "convnet"
    net_width: int = 16
    net_depth: int = 3
    activation: str = "relu"
    downstream_arch: str = "convnet"

    surrogate_epochs: int = 10
    surrogate_lr: float = 0.01
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4

    kappa1: float = 1.0
    kappa2: float = 0.5
    lam: float = 1.0

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    lambda4: float = 0.5
    temperature: float = 0.1
    epsilon_max: float = 8 / 255
    attack_epochs: int = 100
    attack_lr: float = 1e-3
    attack_batch: int = 64
    generator_width: int = 16

    rho: float = 1.0
    ipc: int = 10
    condense_iterations: int = 500
    condense_lr: float = 0.1
    batch_real: int = 64
    augment: str = "crop_flip"

    downstream_epochs: int = 300
    downstream_lr: float = 0.1
    downstream_batch: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self, class_count: int | None = None) -> None:
        if class_count is not None and not 0 <= self.target_class < class_count:
            raise ConfigError(f"target_class {self.target_class} out of range for {class_count} classes")
        for key in ("kappa1", "kappa2", "rho"):
            v = getattr(self, key)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{key} must lie in (0, 1], got {v}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.ipc < 1:
            raise ConfigError("ipc must be at least 1")
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.epsilon_max <= 0:
            raise ConfigError("epsilon_max must be positive")
        for key in ("surrogate_epochs", "attack_epochs", "condense_iterations", "downstream_epochs"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be nonnegative")
        if self.augment not in ("none", "crop_flip"):
            raise ConfigError(f"unknown augmentation {self.augment!r}")

    @property
    def loss_weights(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def subset(self, keys: Sequence[str]) -> dict:
        return {k: getattr(self, k) for k in keys}

    def to_ini(self) -> str:
        lines = []
        for section, keys in _SECTIONS.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {getattr(self, k)!r}" if isinstance(getattr(self, k), float)
                         else f"{k} = {getattr(self, k)}" for k in keys)
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = _coerce(key, raw, types[key])
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_ini(path.read_text())


def _coerce(key: str, raw: str, typ: str):
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            if "/" in raw:
                num, den = raw.split("/")
                return float(num) / float(den)
            return float(raw)
        return raw.strip().strip('"').strip("'")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
