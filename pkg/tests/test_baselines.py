import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from igbaselines import baselines, nn
from igbaselines.data import ToySpec, toy_generate
from igbaselines.errors import DimensionError


@pytest.fixture(scope="module")
def toy_net():
    ds, _ = toy_generate(ToySpec(features=3, relevant=2, classes=2, count=3000, seed=1))
    net = nn.fc_network((3,), [16], 2, seed=1)
    trained, report = nn.train(net, ds, nn.TrainConfig(epochs=40, seed=1))
    assert report.test_accuracy == 1.0
    return trained, ds


def test_entropy_uniform_pair():
    assert baselines.entropy([0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-12)


def test_entropy_one_hot():
    assert baselines.entropy([1.0, 0.0, 0.0]) == 0.0


def test_entropy_direct_summation_oracle():
    # frozen from -sum(p * ln p) computed by direct summation
    assert baselines.entropy([0.7, 0.2, 0.1]) == pytest.approx(0.8018185525433372, abs=1e-12)


def test_entropy_rejects_bad_input():
    with pytest.raises(ValueError):
        baselines.entropy([0.9, 0.2])
    with pytest.raises(ValueError):
        baselines.entropy([1.1, -0.1])


@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=8))
@settings(max_examples=50, deadline=None)
def test_entropy_bounded_by_log_n(weights):
    p = np.asarray(weights) / np.sum(weights)
    h = baselines.entropy(p, tol=1e-6)
    assert -1e-9 <= h <= np.log(len(p)) + 1e-9


def test_logits_entropy_zero_weight_net():
    net = nn.Network([nn.Dense(np.zeros((4, 3)), np.zeros(4))], (3,), 4)
    assert baselines.logits_entropy(net, np.ones(3)) == pytest.approx(np.log(4), abs=1e-12)


def test_logits_entropy_equal_logit_crossing():
    net = nn.Network([nn.Dense([[1.0], [-1.0]], [0.0, 0.0])], (1,), 2)
    assert baselines.logits_entropy(net, np.zeros(1)) == pytest.approx(np.log(2), abs=1e-12)


def test_logits_entropy_matches_hand_composition(toy_net):
    net, _ = toy_net
    x = np.array([0.3, 0.7, 0.1])
    expected = baselines.entropy(nn.softmax(nn.forward(net, x)))
    assert baselines.logits_entropy(net, x) == pytest.approx(expected, abs=1e-12)


def test_entropy_curve_bounded(toy_net):
    net, ds = toy_net
    curve = baselines.entropy_curve(net, ds.value_range, 100)
    assert np.all(curve.entropies <= np.log(2) + 1e-12)
    assert np.all(curve.entropies >= 0.0)


def test_max_entropy_uniform_zero_net_tie_breaks_to_smallest():
    net = nn.Network([nn.Dense(np.zeros((3, 2)), np.zeros(3))], (2,), 3)
    u, spec = baselines.max_entropy_uniform(net, (0.0, 1.0), grid_n=11)
    assert u == pytest.approx(0.0, abs=1e-9)
    assert spec.achieved_entropy == pytest.approx(np.log(3), abs=1e-12)


def test_max_entropy_uniform_closed_form_crossing():
    # logits (w1 u + b1, w2 u + b2) tie exactly at u = (b2 - b1) / (w1 - w2)
    w1, b1, w2, b2 = 2.0, -1.0, -1.0, 0.5
    net = nn.Network([nn.Dense([[w1], [w2]], [b1, b2])], (1,), 2)
    expected = (b2 - b1) / (w1 - w2)
    u, spec = baselines.max_entropy_uniform(net, (0.0, 1.0), grid_n=101)
    assert u == pytest.approx(expected, abs=1e-6)
    assert spec.achieved_entropy == pytest.approx(np.log(2), abs=1e-9)


def test_max_entropy_uniform_matches_curve_argmax(toy_net):
    net, ds = toy_net
    u, _ = baselines.max_entropy_uniform(net, ds.value_range, grid_n=200)
    curve = baselines.entropy_curve(net, ds.value_range, 200)
    cell = (ds.value_range[1] - ds.value_range[0]) / 199
    assert abs(u - curve.argmax_input) <= cell


def test_max_entropy_full_fixed_point_at_maximizer():
    # entropy of a 2-class linear model is maximized where logits tie; start there
    net = nn.Network([nn.Dense([[1.0], [-1.0]], [0.0, 0.0])], (1,), 2)
    spec = baselines.max_entropy_full(net, x0=np.zeros(1), steps=50, value_range=(-1.0, 1.0))
    assert spec.values[0] == pytest.approx(0.0, abs=1e-12)
    assert spec.achieved_entropy == pytest.approx(np.log(2), abs=1e-12)


def test_max_entropy_full_dominates_uniform_and_start(toy_net):
    net, ds = toy_net
    u, uspec = baselines.max_entropy_uniform(net, ds.value_range)
    x0 = np.full(net.input_shape, 0.25)
    h0 = baselines.logits_entropy(net, x0)
    full = baselines.max_entropy_full(net, x0=x0, steps=300, value_range=ds.value_range)
    assert full.achieved_entropy >= h0 - 1e-12
    assert full.achieved_entropy >= uspec.achieved_entropy - 1e-6


def test_max_entropy_full_beats_random_search(toy_net):
    net, ds = toy_net
    full = baselines.max_entropy_full(net, steps=500, value_range=ds.value_range)
    rng = np.random.default_rng(0)
    probes = rng.uniform(ds.value_range[0], ds.value_range[1], size=(10_000, 3))
    best_probe = baselines.logits_entropy_batch(net, probes).max()
    assert full.achieved_entropy >= best_probe - 1e-6


def test_max_entropy_full_records_trajectory(toy_net):
    net, ds = toy_net
    full = baselines.max_entropy_full(net, steps=20, value_range=ds.value_range)
    assert full.entropy_history is not None
    assert len(full.entropy_history) == 21


def test_certified_max_entropy_dominates_probes(toy_net):
    net, ds = toy_net
    spec = baselines.certified_max_entropy(net, ds.value_range, steps=300, probes=2000, seed=3)
    rng = np.random.default_rng(99)
    probes = rng.uniform(ds.value_range[0], ds.value_range[1], size=(5000, 3))
    assert baselines.logits_entropy_batch(net, probes).max() <= spec.achieved_entropy + 1e-3


def test_build_baseline_constant_kinds(toy_net):
    net, ds = toy_net
    x = np.array([0.0, 1.0, 0.25])
    for kind, expected in [
        ("zero", np.zeros(3)),
        ("black", np.full(3, 0.0)),
        ("white", np.full(3, 1.0)),
        ("avg_instance", np.full(3, x.mean())),
    ]:
        spec = baselines.build_baseline(kind, net=net, x=x, value_range=ds.value_range)
        np.testing.assert_allclose(spec.values, expected, atol=1e-15)


def test_build_baseline_black_on_image_is_instance_min():
    x = np.linspace(-0.42, 2.82, 16).reshape(4, 4)
    spec = baselines.build_baseline("black", x=x, value_range=(-0.42, 2.82))
    np.testing.assert_allclose(spec.values, np.full((4, 4), x.min()))


def test_xdist_farthest_endpoint():
    x = np.array([0.9, 0.1])
    spec = baselines.build_baseline("xdist", x=x, value_range=(0.0, 1.0))
    np.testing.assert_array_equal(spec.values, [0.0, 1.0])


def test_train_avg_full_sample_equals_exact_mean(toy_net):
    net, ds = toy_net
    spec = baselines.build_baseline("train_avg", net=net, train_data=ds, value_range=ds.value_range)
    np.testing.assert_allclose(spec.values, ds.train_x.mean(axis=0), atol=1e-12)


def test_noise_baselines_seeded_and_in_range(toy_net):
    net, ds = toy_net
    for kind in ("uniform_noise", "gaussian_noise"):
        a = baselines.build_baseline(kind, net=net, seed=7, value_range=ds.value_range)
        b = baselines.build_baseline(kind, net=net, seed=7, value_range=ds.value_range)
        np.testing.assert_array_equal(a.values, b.values)
        assert a.values.min() >= ds.value_range[0]
        assert a.values.max() <= ds.value_range[1]


def test_blur_requires_image_shape(toy_net):
    net, ds = toy_net
    with pytest.raises(DimensionError):
        baselines.build_baseline("blur", x=np.zeros(3), value_range=ds.value_range)


def test_blur_on_image_preserves_constant():
    x = np.full((6, 6), 1.5)
    spec = baselines.build_baseline("blur", x=x, value_range=(0.0, 2.0))
    np.testing.assert_allclose(spec.values, x, atol=1e-12)


def test_unknown_kind_rejected(toy_net):
    net, ds = toy_net
    with pytest.raises(ValueError):
        baselines.build_baseline("mystery", net=net, value_range=ds.value_range)


def test_input_independence_flags():
    assert baselines.BaselineSpec("zero", np.zeros(2)).input_independent
    assert baselines.BaselineSpec("maxent_full", np.zeros(2)).input_independent
    assert not baselines.BaselineSpec("xdist", np.zeros(2)).input_independent
    assert not baselines.BaselineSpec("blur", np.zeros(2)).input_independent


def test_all_kinds_clipped_into_range(toy_net):
    net, ds = toy_net
    x = np.array([0.0, 1.0, 1.0])
    lo, hi = ds.value_range
    for kind in baselines.BASELINE_KINDS:
        if kind == "blur":
            continue  # needs image-shaped input, covered separately
        spec = baselines.build_baseline(
            kind, net=net, x=x, train_data=ds, seed=0, value_range=ds.value_range
        )
        assert spec.values.min() >= lo - 1e-12, kind
        assert spec.values.max() <= hi + 1e-12, kind


def test_export_baseline_sidecar(tmp_path, toy_net):
    net, ds = toy_net
    _, spec = baselines.max_entropy_uniform(net, ds.value_range)
    baselines.export_baseline(spec, str(tmp_path / "b"), net=net)
    import json

    values = np.load(tmp_path / "b.npy")
    np.testing.assert_array_equal(values, spec.values)
    sidecar = json.loads((tmp_path / "b.json").read_text())
    assert sidecar["kind"] == "maxent_uniform"
    assert sidecar["achieved_entropy"] == pytest.approx(spec.achieved_entropy)
