import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from inkdrop.core import (
    ConfigError,
    DatasetError,
    LabeledDataset,
    RunConfig,
    derive_seed,
    load_dataset,
    normalize_simplex,
    read_packed,
    split_dataset,
    write_packed,
)
from inkdrop.shapes import make_shapes_dataset


def _write_images(root, per_class):
    rng = np.random.default_rng(0)
    for c, n in enumerate(per_class):
        (root / str(c)).mkdir(parents=True)
        for i in range(n):
            arr = rng.integers(0, 256, (6, 5), dtype=np.uint8)
            Image.fromarray(arr, mode="L").save(root / str(c) / f"img{i:02d}.png")


def test_empty_directory_has_no_samples(tmp_path):
    with pytest.raises(DatasetError, match="no samples found"):
        load_dataset(tmp_path)


def test_missing_path(tmp_path):
    with pytest.raises(DatasetError, match="missing path"):
        load_dataset(tmp_path / "nope")


def test_directory_counts_and_scaling(tmp_path):
    _write_images(tmp_path, [4, 6])
    d = load_dataset(tmp_path)
    assert d.class_count == 2
    assert len(d) == 10
    assert d.image_shape == (1, 6, 5)
    assert d.images.min() >= 0 and d.images.max() <= 1
    assert list(d.class_counts()) == [4, 6]


def test_directory_loads_are_identical(tmp_path):
    _write_images(tmp_path, [3, 3])
    a, b = load_dataset(tmp_path), load_dataset(tmp_path)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.ids, b.ids) and np.array_equal(a.labels, b.labels)


def test_packed_round_trip_is_bit_identical(tmp_path):
    d = make_shapes_dataset(3, seed=4)
    write_packed(d, tmp_path / "d.idrp")
    e = load_dataset(tmp_path / "d.idrp", format="packed-binary")
    assert e.images.tobytes() == d.images.tobytes()
    assert np.array_equal(e.labels, d.labels)
    assert e.class_count == d.class_count


def test_packed_header_layout(tmp_path):
    d = make_shapes_dataset(1)
    write_packed(d, tmp_path / "d.idrp")
    raw = (tmp_path / "d.idrp").read_bytes()
    assert raw[:4] == b"IDRP"
    header = np.frombuffer(raw[4:24], dtype="<u4")
    assert header.tolist() == [10, 10, 1, 28, 28]
    assert len(raw) == 24 + 4 * 10 * 28 * 28 + 4 * 10


@pytest.mark.parametrize("mutate", ["magic", "truncate", "label"])
def test_malformed_packed_files(tmp_path, mutate):
    d = make_shapes_dataset(1)
    path = tmp_path / "d.idrp"
    write_packed(d, path)
    raw = bytearray(path.read_bytes())
    if mutate == "magic":
        raw[:4] = b"XXXX"
    elif mutate == "truncate":
        raw = raw[:-3]
    else:
        raw[-4:] = np.array([99], dtype="<u4").tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetError):
        read_packed(path)


def test_label_out_of_range_rejected():
    with pytest.raises(DatasetError, match="label out of range"):
        LabeledDataset(np.zeros((2, 1, 2, 2)), [0, 3], [0, 1], 2)


def test_dataset_is_read_only():
    d = make_shapes_dataset(1)
    with pytest.raises(ValueError):
        d.images[0, 0, 0, 0] = 0.5


def test_split_counts():
    d = make_shapes_dataset(10)
    tr, te = split_dataset(d, 0.8, seed=0)
    assert list(tr.class_counts()) == [8] * 10
    assert list(te.class_counts()) == [2] * 10
    assert set(tr.ids).isdisjoint(te.ids)
    assert set(tr.ids) | set(te.ids) == set(d.ids)


def test_split_deterministic_and_seed_dependent():
    d = make_shapes_dataset(10)
    a, _ = split_dataset(d, 0.8, seed=1)
    b, _ = split_dataset(d, 0.8, seed=1)
    c, _ = split_dataset(d, 0.8, seed=2)
    assert np.array_equal(a.ids, b.ids)
    assert len(a) == len(c)
    assert set(a.ids) != set(c.ids)


def test_split_rejects_singleton_class():
    d = LabeledDataset(np.zeros((3, 1, 2, 2)), [0, 0, 1], [0, 1, 2], 2)
    with pytest.raises(DatasetError, match="fewer than 2"):
        split_dataset(d, 0.5, 0)


@given(st.lists(st.integers(2, 12), min_size=1, max_size=4), st.floats(0.05, 0.95), st.integers(0, 100))
@settings(max_examples=30, deadline=None)
def test_split_preserves_class_counts(counts, fraction, seed):
    labels = np.repeat(np.arange(len(counts)), counts)
    d = LabeledDataset(np.zeros((len(labels), 1, 1, 1)), labels, np.arange(len(labels)), len(counts))
    tr, te = split_dataset(d, fraction, seed)
    assert np.array_equal(tr.class_counts() + te.class_counts(), d.class_counts())


@pytest.mark.parametrize("v, expected", [([2, 2], [0.5, 0.5]), ([1, 0, 0], [1, 0, 0]), ([3, 1], [0.75, 0.25])])
def test_normalize_simplex(v, expected):
    assert np.allclose(normalize_simplex(v), expected, atol=1e-15)


def test_normalize_simplex_rejects_zero():
    with pytest.raises(ValueError):
        normalize_simplex([0, 0])


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=20).filter(lambda v: sum(v) > 1e-3))
def test_normalize_simplex_idempotent(v):
    once = normalize_simplex(v)
    assert np.allclose(normalize_simplex(once), once, rtol=0, atol=1e-12)
    assert abs(once.sum() - 1) < 1e-9


def test_config_round_trip_and_validation():
    cfg = RunConfig(seed=7, lambda3=0.25, epsilon_max=4 / 255)
    assert RunConfig.from_ini(cfg.to_ini()) == cfg
    assert RunConfig.from_ini("[attack]\nepsilon_max = 8/255\n").epsilon_max == pytest.approx(8 / 255)
    with pytest.raises(ConfigError):
        RunConfig(kappa1=0.0)
    with pytest.raises(ConfigError):
        RunConfig.from_ini("[attack]\nbogus = 1\n")
    with pytest.raises(ConfigError):
        RunConfig(target_class=12).validate(class_count=10)


def test_derive_seed_is_stable():
    assert derive_seed(3, "a", 1) == derive_seed(3, "a", 1)
    assert derive_seed(3, "a", 1) != derive_seed(3, "a", 2)


def test_shapes_corpus_reproducible():
    a, b = make_shapes_dataset(2, seed=5), make_shapes_dataset(2, seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.class_count == 10 and a.image_shape == (1, 28, 28)
