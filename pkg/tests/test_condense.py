import numpy as np
import pytest
import torch

from inkdrop.attack import build_generator
from inkdrop.condense import (
    CondensedSet,
    augment_batch,
    build_mixed_dataset,
    build_trigger_set,
    condense_class,
    condense_clean,
    condense_malicious,
    poison_quota,
)
from inkdrop.core import LabeledDataset, RunConfig
from inkdrop.pool import CandidatePool
from inkdrop.transport import mean_embedding_gap
from inkdrop.surrogate import build_model

SMALL = RunConfig(ipc=2, condense_iterations=5, batch_real=8, net_width=4, net_depth=2, seed=3)


def _data(n_per_class=6, classes=3, size=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    return LabeledDataset(rng.random((len(labels), 1, size, size)), labels, np.arange(len(labels)) + 7, classes)


def _pool(d, source, size=None):
    cls = d.class_slice(source)
    if size is not None:
        cls = cls.subset(np.arange(size))
    return CandidatePool(source, cls, np.linspace(1, 0, len(cls)))


def test_zero_generator_trigger_set_is_pool():
    d = _data()
    pool = _pool(d, 1)
    t = build_trigger_set(build_generator(1, (8, 8), seed=0), pool)
    assert t.images.tobytes() == pool.members.images.tobytes()
    assert np.array_equal(t.source_ids, pool.members.ids)
    assert len(t) == len(pool)


def test_trigger_set_is_reproducible():
    d = _data()
    g = build_generator(1, (8, 8), seed=4, zero_head=False)
    a = build_trigger_set(g, _pool(d, 2))
    b = build_trigger_set(g, _pool(d, 2))
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.source_ids, b.source_ids)


def test_quota_arithmetic():
    d = LabeledDataset(np.zeros((100, 1, 2, 2)), np.zeros(100, dtype=int), np.arange(100), 2)
    pool = CandidatePool(0, d.subset(np.arange(10)), np.zeros(10))
    g = build_generator(1, (2, 2), seed=0)
    t = build_trigger_set(g, pool, source_class_size=100, kappa1=0.1)
    assert poison_quota(t, 0.5) == 5


def test_mixed_dataset_sizes_and_membership():
    d = _data(n_per_class=10)
    t = build_trigger_set(build_generator(1, (8, 8), seed=0), _pool(d, 1), 10, 1.0)
    a = build_mixed_dataset(d.class_slice(0), t, 0.5, seed=1)
    b = build_mixed_dataset(d.class_slice(0), t, 0.5, seed=2)
    assert len(a.data) == len(b.data) == 15
    assert set(a.data.labels.tolist()) == {0}
    assert set(a.poisoned_ids) <= set(t.source_ids.tolist())
    assert set(a.poisoned_ids.tolist()) != set(b.poisoned_ids.tolist())
    full = build_mixed_dataset(d.class_slice(0), t, 1.0, seed=1)
    assert sorted(full.poisoned_ids.tolist()) == sorted(t.source_ids.tolist())
    with pytest.raises(ValueError):
        build_mixed_dataset(d.class_slice(0), t, 0.0, seed=1)


def test_quota_exceeding_trigger_set():
    d = _data(n_per_class=10)
    t = build_trigger_set(build_generator(1, (8, 8), seed=0), _pool(d, 1, size=3), 10, 1.0)
    with pytest.raises(ValueError, match="exceeds"):
        build_mixed_dataset(d.class_slice(0), t, 1.0, seed=0)


def test_augment_batch():
    x = torch.arange(16.0).reshape(1, 1, 4, 4)
    assert torch.equal(augment_batch(x, (0, 0), False), x)
    shifted = augment_batch(x, (1, 0), False)
    assert torch.equal(shifted[0, 0, :3], x[0, 0, 1:])
    assert torch.all(shifted[0, 0, 3] == 0)
    assert torch.equal(augment_batch(x, (0, 0), True), x.flip(-1))


def test_condense_zero_iterations_returns_real_members():
    d = _data()
    imgs, trace = condense_class(d.class_slice(0).images, 2, SMALL.replace(condense_iterations=0), seed=5)
    assert trace == []
    real = {r.tobytes() for r in d.class_slice(0).images}
    assert all(s.tobytes() in real for s in imgs)


def test_condense_errors():
    d = _data()
    with pytest.raises(ValueError):
        condense_class(d.class_slice(0).images[:0], 1, SMALL, 0)
    with pytest.raises(ValueError):
        condense_class(d.class_slice(0).images, 0, SMALL, 0)
    with pytest.raises(ValueError):
        condense_class(d.class_slice(0).images, 7, SMALL, 0)


def test_condense_output_range_and_determinism():
    d = _data()
    cfg = SMALL.replace(condense_iterations=10, condense_lr=5.0)
    a, ta = condense_class(d.class_slice(1).images, 3, cfg, seed=9)
    b, tb = condense_class(d.class_slice(1).images, 3, cfg, seed=9)
    assert a.tobytes() == b.tobytes() and ta == tb
    assert a.min() >= 0 and a.max() <= 1 and a.shape == (3, 1, 8, 8)
    assert len(ta) == 10


def test_condense_reduces_gap():
    rng = np.random.default_rng(0)
    imgs = np.clip(0.7 + rng.normal(0, 0.1, (40, 1, 8, 8)), 0, 1)
    start = np.clip(0.2 + rng.normal(0, 0.1, (40, 1, 8, 8)), 0, 1)
    imgs = np.concatenate([imgs, start[:2]])
    cfg = SMALL.replace(condense_iterations=60, condense_lr=1.0, augment="none", batch_real=42)
    syn, trace = condense_class(imgs, 2, cfg, seed=0)
    k = len(trace) // 10
    assert np.mean(trace[-k:]) <= np.mean(trace[:k])
    enc = build_model("convnet", 1, 2, (8, 8), 123, width=4, depth=2)
    with torch.no_grad():
        real_f = enc.features(torch.from_numpy(imgs.astype(np.float32)))
        init, _ = condense_class(imgs, 2, cfg.replace(condense_iterations=0), seed=0)
        before = mean_embedding_gap(real_f.numpy(), enc.features(torch.from_numpy(init)).numpy())
        after = mean_embedding_gap(real_f.numpy(), enc.features(torch.from_numpy(syn)).numpy())
    assert after < before


def test_malicious_isolates_non_target_classes(tmp_path):
    d = _data()
    t = build_trigger_set(build_generator(1, (8, 8), seed=0, zero_head=False), _pool(d, 1), 6, 1.0)
    mixed = build_mixed_dataset(d.class_slice(0), t, 1.0, seed=SMALL.seed)
    clean = condense_clean(d, SMALL)
    mal = condense_malicious(d, 0, mixed, SMALL)
    reused = condense_malicious(d, 0, mixed, SMALL, reuse=clean)
    for c in (1, 2):
        assert clean.class_images(c).tobytes() == mal.class_images(c).tobytes()
    assert reused.images.tobytes() == mal.images.tobytes()
    assert clean.class_images(0).tobytes() != mal.class_images(0).tobytes()
    assert mal.manifest["poisoned_ids"] == sorted(mixed.poisoned_ids.tolist())
    assert len(mal.images) == 3 * SMALL.ipc
    with pytest.raises(ValueError):
        condense_malicious(d, 0, mixed, SMALL.replace(seed=4), reuse=clean)

    mal.save(tmp_path / "s")
    back = CondensedSet.load(tmp_path / "s")
    assert back.images.tobytes() == mal.images.tobytes()
    assert back.manifest == mal.manifest


def test_objective_falls_over_five_hundred_iterations():
    rng = np.random.default_rng(5)
    centers = rng.uniform(0.2, 0.8, (2, 1, 8, 8))
    blobs = np.clip(np.concatenate([centers[0] + rng.normal(0, 0.1, (30, 1, 8, 8)),
                                    centers[1] + rng.normal(0, 0.1, (30, 1, 8, 8))]), 0, 1)
    _, trace = condense_class(blobs, 2, SMALL.replace(condense_iterations=500, condense_lr=1.0, batch_real=60), 1)
    assert len(trace) == 500
    assert trace[-1] <= trace[0]
    assert np.mean(trace[-50:]) <= np.mean(trace[:50])
