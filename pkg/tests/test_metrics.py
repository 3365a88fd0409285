import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from inkdrop.attack import build_generator
from inkdrop.condense import CondensedSet
from inkdrop.core import LabeledDataset, RunConfig
from inkdrop.metrics import (
    IS_DAGGER_SCALE,
    EvaluationReport,
    attack_success_rate,
    clean_test_accuracy,
    distribution_score,
    evaluate,
    is_dagger,
    psnr,
    read_per_sample,
    ssim,
    summarize_per_sample,
    train_downstream,
    write_per_sample,
)
from inkdrop.surrogate import snapshot_digest
from oracles import reference_ssim


class Constant(torch.nn.Module):
    arch = "constant"

    def __init__(self, label, classes=3, shape=(1, 12, 12)):
        super().__init__()
        self.config = {"channels": shape[0], "image_size": list(shape[1:]), "num_classes": classes}
        self.label = label
        self.classes = classes
        self.dummy = torch.nn.Parameter(torch.zeros(1), requires_grad=False)

    def features(self, x):
        return x.flatten(1)

    def head(self, z):
        out = torch.full((len(z), self.classes), -10.0)
        out[:, self.label] = 10.0
        return out


class Lookup(torch.nn.Module):
    """Predicts a stored label per image, indexed by the first pixel times 1000."""

    arch = "lookup"

    def __init__(self, labels, classes, shape=(1, 2, 2)):
        super().__init__()
        self.config = {"channels": shape[0], "image_size": list(shape[1:]), "num_classes": classes}
        self.labels = torch.as_tensor(labels)
        self.classes = classes
        self.dummy = torch.nn.Parameter(torch.zeros(1), requires_grad=False)

    def features(self, x):
        return x.flatten(1)

    def head(self, z):
        idx = (z[:, 0].double() * 1000).round().long()
        return F.one_hot(self.labels[idx], self.classes).float() * 20 - 10


def _indexed_images(n, shape=(1, 2, 2)):
    return (np.arange(n, dtype=np.float64)[:, None, None, None] / 1000 * np.ones((n, *shape))).astype(np.float32)


def test_asr_counts_hits():
    predictions = [1, 1, 0, 1, 1, 2, 1, 1, 0, 1]
    g = build_generator(1, (2, 2), seed=0)
    assert attack_success_rate(Lookup(predictions, 3), _indexed_images(10), g, 1) == pytest.approx(0.7)


def test_random_classifier_cta_near_chance():
    n, classes = 1000, 10
    rng = np.random.default_rng(6)
    psi = Lookup(rng.integers(0, classes, n), classes)
    test = LabeledDataset(_indexed_images(n), np.arange(n) % classes, np.arange(n), classes)
    # four binomial standard deviations around 1/C
    assert abs(clean_test_accuracy(psi, test) - 0.1) <= 4 * math.sqrt(0.1 * 0.9 / n)


def test_psnr_closed_forms():
    x = np.full((1, 12, 12), 0.5)
    assert psnr(x, x + 1 / 255) == pytest.approx(20 * math.log10(255), abs=1e-6)
    assert psnr(x, x + 1 / 255) == pytest.approx(48.1308, abs=1e-4)
    assert psnr(x, x + 0.5 / 255) - psnr(x, x + 1 / 255) == pytest.approx(20 * math.log10(2), abs=1e-9)
    assert psnr(x, x) == 100.0
    assert psnr(np.zeros(4), np.ones(4)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


def test_ssim_identity_and_noise():
    rng = np.random.default_rng(0)
    x = rng.random((1, 28, 28))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-6)
    assert ssim(x, np.clip(x + rng.normal(0, 1e-4, x.shape), 0, 1)) >= 0.999
    with pytest.raises(ValueError):
        ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


def test_ssim_of_inverted_checkerboard_is_negative():
    yy, xx = np.mgrid[0:16, 0:16]
    x = ((yy // 2 + xx // 2) % 2).astype(float)
    assert ssim(x, 1 - x) < 0
    assert ssim(x, 1 - x) == pytest.approx(reference_ssim(x, 1 - x), abs=1e-6)


def test_ssim_matches_reference_formula():
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.random((16, 20))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        assert ssim(x, y) == pytest.approx(reference_ssim(x, y), abs=1e-6)


def test_is_examples():
    same = np.tile([0.2, 0.3, 0.5], (5, 1))
    assert distribution_score(same)[0] == pytest.approx(0.0, abs=1e-12)
    assert distribution_score(np.array([[1.0, 0.0], [0.0, 1.0]]))[0] == pytest.approx(math.log(2), abs=1e-9)
    onehot = np.eye(4)
    assert distribution_score(onehot)[0] == pytest.approx(math.log(4), abs=1e-9)
    assert distribution_score(np.array([[0.5, 0.5], [0.6, 0.4]]))[0] > 0


def test_is_dagger_affine():
    for v in (0.0, 1e-3, 0.7, 2.3):
        assert is_dagger(v) == pytest.approx((1e-3 - v) * math.exp(-4), abs=1e-15)
    assert IS_DAGGER_SCALE == math.exp(-4)
    assert is_dagger(1e-3) == 0.0


def test_asr_constant_models():
    g = build_generator(1, (12, 12), seed=0)
    x = np.random.default_rng(0).random((6, 1, 12, 12)).astype(np.float32)
    assert attack_success_rate(Constant(2), x, g, 2) == 1.0
    assert attack_success_rate(Constant(1), x, g, 2) == 0.0
    with pytest.raises(ValueError):
        attack_success_rate(Constant(1), x[:0], g, 2)


def _test_set(n=9, classes=3):
    rng = np.random.default_rng(0)
    return LabeledDataset(rng.random((n, 1, 12, 12)), np.arange(n) % classes, np.arange(n) + 50, classes)


def test_evaluate_rows_and_summary(tmp_path):
    test = _test_set()
    g = build_generator(1, (12, 12), seed=0)
    report, rows = evaluate(Constant(1), test, g, target=1, source=2)
    assert report.cta == pytest.approx(1 / 3)
    assert report.asr == 1.0
    assert report.psnr == 100.0
    assert report.n_clean == 9 and report.n_poison == 3
    write_per_sample(tmp_path / "s.csv", rows)
    back = read_per_sample(tmp_path / "s.csv")
    summary = summarize_per_sample(back, target=1)
    assert summary["cta"] == report.cta and summary["asr"] == report.asr
    assert summary["n_poison"] == report.n_poison
    again = EvaluationReport.from_json(report.to_json())
    assert again == report


def test_cta_example():
    test = _test_set()
    assert clean_test_accuracy(Constant(0), test) == pytest.approx(1 / 3)


def test_downstream_training_beats_chance():
    rng = np.random.default_rng(0)
    centers = rng.random((3, 1, 12, 12))
    imgs = np.clip(np.repeat(centers, 5, axis=0) + rng.normal(0, 0.05, (15, 1, 12, 12)), 0, 1)
    s = CondensedSet(imgs.astype(np.float32), np.repeat(np.arange(3), 5), 5, 3)
    labels = np.arange(30) % 3
    test = LabeledDataset(np.clip(centers[labels] + rng.normal(0, 0.05, (30, 1, 12, 12)), 0, 1), labels,
                          np.arange(30), 3)
    cfg = RunConfig(downstream_epochs=30, downstream_batch=8, net_width=8, net_depth=2, augment="none")
    psi = train_downstream(s, "convnet", cfg, seed=1)
    assert clean_test_accuracy(psi, test) > 1 / 3
    again = train_downstream(s, "convnet", cfg, seed=1)
    assert snapshot_digest(psi) == snapshot_digest(again)
    untrained = train_downstream(s, "convnet", cfg.replace(downstream_epochs=0), seed=1)
    assert snapshot_digest(untrained) != snapshot_digest(psi)
