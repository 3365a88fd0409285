import numpy as np
import pytest
import torch

from inkdrop.core import LabeledDataset
from inkdrop.surrogate import build_model, fit_classifier

torch.set_num_threads(1)


def toy_dataset(n: int = 200, classes: int = 4, seed: int = 0) -> LabeledDataset:
    """Gaussian blobs drawn as 1x6x6 images; classes overlap a little."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, (classes, 1, 6, 6))
    labels = np.arange(n) % classes
    images = np.clip(centers[labels] + rng.normal(0, 0.18, (n, 1, 6, 6)), 0, 1)
    ids = rng.permutation(n) + 1000
    return LabeledDataset(images, labels, ids, classes, "toy")


def frozen_linear(d: LabeledDataset, epochs: int = 15, seed: int = 0):
    m = build_model("linear", 1, d.class_count, d.image_shape[1:], seed)
    fit_classifier(m, d.tensor(), torch.from_numpy(d.labels.copy()), epochs=epochs, lr=0.5,
                   batch_size=32, seed=seed, weight_decay=0.0)
    for p in m.parameters():
        p.requires_grad_(False)
    return m


@pytest.fixture(scope="session")
def toy():
    d = toy_dataset()
    return d, frozen_linear(d)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.SUMMARY:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.SUMMARY):
            terminalreporter.write_line(line)
