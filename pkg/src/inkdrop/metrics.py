"""Downstream training and the evaluation axes: CTA, ASR, PSNR, SSIM, IS / IS-dagger."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from skimage.metrics import structural_similarity

from .attack import trigger_images
from .condense import CondensedSet, random_augment
from .core import LabeledDataset, RunConfig, derive_seed
from .pool import kl_divergence
from .surrogate import build_model, fit_classifier, predict_distribution, predict_labels

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
IS_DAGGER_OFFSET = 1e-3
IS_DAGGER_SCALE = math.exp(-4)
REPORT_FORMAT = "inkdrop-report/1"
PER_SAMPLE_HEADER = "# inkdrop-per-sample/1"


def train_downstream(s: CondensedSet, arch: str, config: RunConfig, seed: int | None = None) -> nn.Module:
    """Supervised training on the synthetic images only."""
    if len(s.labels) == 0:
        raise ValueError("condensed set is empty")
    seed = derive_seed(config.seed, "downstream") if seed is None else seed
    c, h, w = s.images.shape[1:]
    model = build_model(arch, c, s.class_count, (h, w), seed,
                        width=config.net_width, depth=config.net_depth, activation=config.activation)
    augment = random_augment if config.augment == "crop_flip" else None
    fit_classifier(model, torch.from_numpy(np.array(s.images)), torch.from_numpy(np.array(s.labels)),
                   epochs=config.downstream_epochs, lr=config.downstream_lr, batch_size=config.downstream_batch,
                   seed=derive_seed(seed, "order"), momentum=config.momentum, weight_decay=config.weight_decay,
                   augment=augment)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def attack_success_rate(psi: nn.Module, source_images: np.ndarray, g, target: int) -> float:
    if len(source_images) == 0:
        raise ValueError("no triggered test inputs")
    _, atk = trigger_images(g, source_images)
    return float(np.mean(predict_labels(psi, atk) == target))


def clean_test_accuracy(psi: nn.Module, test: LabeledDataset) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict_labels(psi, test.images) == test.labels))


def psnr(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("images differ in shape")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim(x, y) -> float:
    """Gaussian-window SSIM (11 taps, sigma 1.5, K1=0.01, K2=0.03, data range 1), channel-averaged."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("images differ in shape")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    vals = [structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=SSIM_SIGMA,
                                  use_sample_covariance=False, K1=0.01, K2=0.03)
            for a, b in zip(x, y)]
    return float(np.mean(vals))


def is_dagger(is_value: float) -> float:
    return (IS_DAGGER_OFFSET - is_value) * IS_DAGGER_SCALE


def inception_style_score(classifier: nn.Module, triggered: np.ndarray) -> tuple[float, float]:
    """Mean KL between each prediction and the marginal prediction, and its stealth transform."""
    if len(triggered) == 0:
        raise ValueError("empty triggered set")
    preds = predict_distribution(classifier, triggered)
    if preds.ndim == 1:
        preds = preds[None]
    return distribution_score(preds)


def distribution_score(preds: np.ndarray) -> tuple[float, float]:
    marginal = preds.mean(axis=0)
    score = float(np.mean(kl_divergence(preds, marginal)))
    return score, is_dagger(score)


@dataclass
class EvaluationReport:
    cta: float
    asr: float
    psnr: float
    ssim: float
    is_score: float
    is_dagger: float
    n_clean: int
    n_poison: int
    target_class: int
    source_class: int
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"format": REPORT_FORMAT, **asdict(self)}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        raw = json.loads(text)
        raw.pop("format", None)
        return cls(**raw)


def evaluate(psi: nn.Module, test: LabeledDataset, g, target: int, source: int,
             is_model: nn.Module | None = None) -> tuple[EvaluationReport, list[dict]]:
    """Score a downstream model; returns the summary and one row per test sample."""
    if len(test) == 0:
        raise ValueError("empty test set")
    predicted = predict_labels(psi, test.images)
    src = np.flatnonzero(test.labels == source)
    if src.size == 0:
        raise ValueError(f"test set has no samples of source class {source}")
    clean_src = test.images[src]
    _, atk = trigger_images(g, clean_src)
    trig_pred = predict_labels(psi, atk)
    psnrs = np.array([psnr(a, b) for a, b in zip(clean_src, atk)])
    ssims = np.array([ssim(a, b) for a, b in zip(clean_src, atk)])
    is_score, is_dag = inception_style_score(is_model if is_model is not None else psi, atk)

    rows = []
    src_pos = {int(i): k for k, i in enumerate(src)}
    for i in range(len(test)):
        row = {"id": int(test.ids[i]), "label": int(test.labels[i]), "predicted": int(predicted[i]),
               "triggered_predicted": "", "psnr": "", "ssim": ""}
        if i in src_pos:
            k = src_pos[i]
            row.update(triggered_predicted=int(trig_pred[k]), psnr=float(psnrs[k]), ssim=float(ssims[k]))
        rows.append(row)

    report = EvaluationReport(
        cta=float(np.mean(predicted == test.labels)),
        asr=float(np.mean(trig_pred == target)),
        psnr=float(psnrs.mean()),
        ssim=float(ssims.mean()),
        is_score=is_score,
        is_dagger=is_dag,
        n_clean=len(test),
        n_poison=int(src.size),
        target_class=target,
        source_class=source,
        notes={"asr_population": "held-out test samples of the source class",
               "psnr_cap_db": PSNR_CAP,
               "is_classifier": getattr(is_model if is_model is not None else psi, "arch", "unknown")},
    )
    return report, rows


PER_SAMPLE_COLUMNS = ("id", "label", "predicted", "triggered_predicted", "psnr", "ssim")


def write_per_sample(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(PER_SAMPLE_HEADER + "\n")
        w = csv.DictWriter(fh, fieldnames=PER_SAMPLE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_per_sample(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != PER_SAMPLE_HEADER:
            raise ValueError(f"unsupported per-sample format {first!r}")
        return list(csv.DictReader(fh))


def summarize_per_sample(rows: list[dict], target: int) -> dict:
    """Recompute CTA, ASR and mean PSNR/SSIM from per-sample rows."""
    cta = np.mean([int(r["predicted"]) == int(r["label"]) for r in rows])
    trig = [r for r in rows if r["triggered_predicted"] not in ("", None)]
    return {
        "cta": float(cta),
        "asr": float(np.mean([int(r["triggered_predicted"]) == target for r in trig])),
        "psnr": float(np.mean([float(r["psnr"]) for r in trig])),
        "ssim": float(np.mean([float(r["ssim"]) for r in trig])),
        "n_clean": len(rows),
        "n_poison": len(trig),
    }
