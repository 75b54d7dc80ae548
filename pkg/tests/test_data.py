import csv
import itertools

import numpy as np
import pytest

from igbaselines import data
from igbaselines.errors import FormatError


def test_toy_minimal_config_label_and_mask():
    ds, mask = data.toy_generate(data.ToySpec(features=2, relevant=1, classes=2, count=500, seed=0))
    np.testing.assert_array_equal(mask.mask, [1.0, 0.0])
    np.testing.assert_array_equal(ds.y, ds.x[:, 0].astype(int))


def test_toy_label_formula_by_hand():
    assert data.toy_label([1, 1, 0], relevant=2, classes=2) == 0
    assert data.toy_label([1, 0, 1], relevant=2, classes=2) == 1


def test_toy_relevant_features_flip_label_irrelevant_never():
    # exhaustive enumeration over all v^f feature combinations
    f, k, c, v = 3, 2, 2, 2
    for combo in itertools.product(range(v), repeat=f):
        base_label = data.toy_label(combo, k, c)
        for j in range(f):
            flips_changed = []
            for new in range(v):
                if new == combo[j]:
                    continue
                flipped = list(combo)
                flipped[j] = new
                flips_changed.append(data.toy_label(flipped, k, c) != base_label)
            if j >= k:
                assert not any(flips_changed)
    # every relevant feature changes the label for at least one configuration
    for j in range(k):
        changed = False
        for combo in itertools.product(range(v), repeat=f):
            flipped = list(combo)
            flipped[j] = (combo[j] + 1) % v
            if data.toy_label(flipped, k, c) != data.toy_label(combo, k, c):
                changed = True
        assert changed


def test_toy_spec_rejects_unrealizable_classes():
    with pytest.raises(ValueError):
        data.ToySpec(features=3, relevant=1, classes=3, domain=2)


def test_toy_spec_validation():
    with pytest.raises(ValueError):
        data.ToySpec(features=2, relevant=0, classes=2)
    with pytest.raises(ValueError):
        data.ToySpec(features=2, relevant=3, classes=2)
    with pytest.raises(ValueError):
        data.ToySpec(features=2, relevant=1, classes=1)


def test_toy_split_disjoint_and_covering():
    ds, _ = data.toy_generate(data.ToySpec(features=2, relevant=1, classes=2, count=1000, seed=5))
    merged = np.sort(np.concatenate([ds.train_idx, ds.test_idx]))
    np.testing.assert_array_equal(merged, np.arange(1000))
    assert len(ds.train_idx) == 800 and len(ds.test_idx) == 200


def test_toy_paper_scale():
    ds, _ = data.toy_generate(data.ToySpec(features=4, relevant=2, classes=2, count=10_000, seed=0))
    assert len(ds.x) == 10_000
    assert len(ds.train_idx) == 8000


def test_idx_image_round_trip(tmp_path):
    path = tmp_path / "imgs.idx"
    images = np.arange(8, dtype=np.float64).reshape(2, 2, 2)
    data.save_idx_images(path, images)
    # header: magic 0x00000803, dims 2x2x2, then 8 pixel bytes
    raw = path.read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert len(raw) == 16 + 8
    loaded = data.load_idx_images(path)
    np.testing.assert_array_equal(loaded, images)


def test_idx_labels_round_trip(tmp_path):
    path = tmp_path / "labels.idx"
    data.save_idx_labels(path, [0, 1, 2])
    raw = path.read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x01"
    np.testing.assert_array_equal(data.load_idx_labels(path), [0, 1, 2])


def test_idx_full_test_set_file_size(tmp_path):
    # oracle: published file layout, 16 + 10000*28*28 = 7840016 bytes
    path = tmp_path / "t10k.idx"
    rng = np.random.default_rng(0)
    data.save_idx_images(path, rng.integers(0, 256, size=(10_000, 28, 28)))
    assert path.stat().st_size == 7_840_016
    images = data.load_idx_images(path)
    assert images.shape == (10_000, 28, 28)
    assert images.min() >= 0.0 and images.max() <= 255.0


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(b"\x00\x00\x08\x05" + b"\x00" * 12)
    with pytest.raises(FormatError, match="magic"):
        data.load_idx_images(path)


def test_idx_truncated(tmp_path):
    path = tmp_path / "short.idx"
    good = tmp_path / "good.idx"
    data.save_idx_images(good, np.zeros((2, 2, 2)))
    path.write_bytes(good.read_bytes()[:-3])
    with pytest.raises(FormatError, match="truncated"):
        data.load_idx_images(path)


def test_idx_count_mismatch(tmp_path):
    data.save_idx_images(tmp_path / "i.idx", np.zeros((3, 2, 2)))
    data.save_idx_labels(tmp_path / "l.idx", [0, 1])
    with pytest.raises(FormatError, match="mismatch"):
        data.load_idx_dataset(tmp_path / "i.idx", tmp_path / "l.idx")


def _pixel_dataset(values):
    x = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    n = len(x)
    return data.LabeledDataset(
        x=x, y=np.zeros(n), value_range=(0.0, 255.0),
        train_idx=np.arange(n), test_idx=np.arange(0),
    )


def test_normalize_endpoint_mapping():
    ds = _pixel_dataset([0.0, 255.0, 127.5])
    out = data.normalize(ds, (-0.42, 2.82))
    assert out.x[0, 0] == pytest.approx(-0.42)
    assert out.x[1, 0] == pytest.approx(2.82)
    assert out.x[2, 0] == pytest.approx(1.2)
    assert out.value_range == (-0.42, 2.82)


def test_normalize_identity_range():
    ds = _pixel_dataset([3.0, 200.0])
    out = data.normalize(ds, (0.0, 255.0))
    np.testing.assert_allclose(out.x, ds.x, rtol=0, atol=1e-14)


def test_normalize_round_trip():
    rng = np.random.default_rng(1)
    ds = _pixel_dataset(rng.uniform(0, 255, size=50))
    back = data.denormalize(data.normalize(ds, (-0.42, 2.82)))
    np.testing.assert_allclose(back.x, ds.x, atol=1e-12)
    assert back.value_range[0] == pytest.approx(0.0, abs=1e-12)
    assert back.value_range[1] == pytest.approx(255.0, abs=1e-12)


def test_normalize_degenerate_source_range():
    ds = _pixel_dataset([1.0])
    ds.value_range = (5.0, 5.0)
    with pytest.raises(ValueError):
        data.normalize(ds, (0.0, 1.0))


def test_dataset_csv_export(tmp_path):
    ds, _ = data.toy_generate(data.ToySpec(features=3, relevant=1, classes=2, count=10, seed=0))
    path = tmp_path / "toy.csv"
    data.dataset_to_csv(ds, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["f0", "f1", "f2", "label"]
    assert len(rows) == 11
    np.testing.assert_array_equal(
        [float(v) for v in rows[1][:3]], ds.x[0]
    )
    assert int(rows[1][3]) == ds.y[0]


def test_digits_dataset_shape_and_range():
    ds = data.digits_dataset(seed=0)
    assert ds.x.shape[1:] == (1, 8, 8)
    assert ds.value_range == (-0.42, 2.82)
    assert ds.x.min() >= -0.42 - 1e-12 and ds.x.max() <= 2.82 + 1e-12
    assert ds.y.max() == 9
    assert len(ds.test_idx) >= 500
