"""Gradient-based explainers producing signed per-feature attribution maps.

All explainers are pure functions of (network, input, seed). Integrated
gradients accepts any materialized baseline and approximates the path integral
with a midpoint Riemann sum. Attribution targets the raw class logit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import BaselineSpec
from .errors import DimensionError, NumericError
from .nn import (
    forward,
    input_gradient,
    input_gradient_batch,
    guided_input_gradient,
)

__all__ = [
    "AttributionMap",
    "HybridWeights",
    "integrated_gradients",
    "vanilla_gradient",
    "gradient_x_input",
    "smoothgrad",
    "guided_backprop",
    "guided_backprop_sg",
    "random_saliency",
    "hybrid_explain",
    "compute_hybrid_weights",
    "normalize_map",
    "export_attribution",
    "METHODS",
]


@dataclass
class AttributionMap:
    """Signed attribution tensor for one explained instance and class."""

    values: np.ndarray
    class_explained: int
    method_tag: str
    baseline_tag: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NumericError("non-finite attribution values", 0)


def _baseline_values(baseline):
    if isinstance(baseline, BaselineSpec):
        return baseline.values, baseline.kind
    return np.asarray(baseline, dtype=np.float64), None


def integrated_gradients(net, x, baseline, class_index, steps=100):
    """Midpoint-rule path integral of the class-logit gradient from baseline to x."""
    if steps < 1:
        raise ValueError("need steps >= 1")
    x = np.asarray(x, dtype=np.float64)
    bx, tag = _baseline_values(baseline)
    if bx.shape != x.shape:
        raise DimensionError(f"baseline shape {bx.shape} != input shape {x.shape}")
    alphas = (np.arange(steps) + 0.5) / steps
    diff = x - bx
    points = bx[None] + alphas.reshape((-1,) + (1,) * x.ndim) * diff[None]
    grads = input_gradient_batch(net, points, class_index)
    values = diff * grads.mean(axis=0)
    return AttributionMap(values, class_index, "ig", baseline_tag=tag)


def vanilla_gradient(net, x, class_index):
    """Raw class-logit gradient at x."""
    return AttributionMap(input_gradient(net, x, class_index), class_index, "vanilla")


def gradient_x_input(net, x, class_index):
    """Elementwise input times class-logit gradient."""
    x = np.asarray(x, dtype=np.float64)
    values = x * input_gradient(net, x, class_index)
    return AttributionMap(values, class_index, "gradient_x_input")


def _smooth_average(net, x, class_index, n, sigma, seed, guided):
    if n < 1:
        raise ValueError("need n >= 1")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=(n,) + x.shape) * sigma
    if guided:
        total = np.zeros_like(x)
        for i in range(n):
            total += guided_input_gradient(net, x + noise[i], class_index)
        return total / n
    grads = input_gradient_batch(net, x[None] + noise, class_index)
    return grads.mean(axis=0)


def _resolve_sigma(noise_sigma, value_range, noise_frac):
    if noise_sigma is not None:
        return float(noise_sigma)
    if value_range is None:
        raise ValueError("need noise_sigma or value_range to scale the noise")
    return noise_frac * (float(value_range[1]) - float(value_range[0]))


def smoothgrad(
    net, x, class_index, n=50, noise_sigma=None, value_range=None, noise_frac=0.1, seed=0
):
    """Mean vanilla gradient over seeded Gaussian perturbations of x.

    The noise scale is ``noise_sigma`` if given, else ``noise_frac`` of the
    value-range width.
    """
    sigma = _resolve_sigma(noise_sigma, value_range, noise_frac)
    values = _smooth_average(net, x, class_index, n, sigma, seed, guided=False)
    return AttributionMap(values, class_index, "smoothgrad")


def guided_backprop(net, x, class_index):
    """Guided backpropagation: ReLUs also gate negative incoming gradient."""
    return AttributionMap(guided_input_gradient(net, x, class_index), class_index, "guided")


def guided_backprop_sg(
    net, x, class_index, n=50, noise_sigma=None, value_range=None, noise_frac=0.1, seed=0
):
    """Guided backpropagation averaged under the SmoothGrad perturbation scheme."""
    sigma = _resolve_sigma(noise_sigma, value_range, noise_frac)
    values = _smooth_average(net, x, class_index, n, sigma, seed, guided=True)
    return AttributionMap(values, class_index, "guided_sg")


def random_saliency(shape, class_index=0, seed=0):
    """Seeded standard-normal saliency map; comparison reference only."""
    rng = np.random.default_rng(seed)
    return AttributionMap(rng.normal(size=shape), class_index, "random")


def normalize_map(values):
    """Scale a map to unit max-absolute-value; zero maps stay zero."""
    peak = np.max(np.abs(values))
    return values / peak if peak > 0 else np.array(values, copy=True)


@dataclass
class HybridWeights:
    """Nonnegative per-method vote weights summing to 1."""

    methods: tuple
    weights: np.ndarray
    uniform_fallback: bool = False

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.methods) != len(self.weights):
            raise ValueError("one weight per method required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")


# Registry of baseline-free explainers available to the hybrid vote.
# Integrated gradients joins via a closure carrying its baseline.
METHODS = {
    "vanilla": vanilla_gradient,
    "gradient_x_input": gradient_x_input,
    "smoothgrad": smoothgrad,
    "guided": guided_backprop,
    "guided_sg": guided_backprop_sg,
}


def _run_method(net, x, class_index, method, **kwargs):
    if callable(method):
        return method(net, x, class_index)
    fn = METHODS.get(method)
    if fn is None:
        raise ValueError(f"unknown method {method!r}")
    if method in ("smoothgrad", "guided_sg"):
        return fn(net, x, class_index, **kwargs)
    return fn(net, x, class_index)


def hybrid_explain(net, x, class_index, methods, weights: HybridWeights, **kwargs):
    """Weighted vote over explainers, each map scaled to unit max-abs first."""
    if not methods:
        raise ValueError("empty method list")
    if len(methods) != len(weights.weights):
        raise ValueError("weights length must match method list")
    total = None
    for method, w in zip(methods, weights.weights):
        attr = _run_method(net, x, class_index, method, **kwargs)
        contribution = w * normalize_map(attr.values)
        total = contribution if total is None else total + contribution
    return AttributionMap(total, class_index, "hybrid")


def compute_hybrid_weights(
    net,
    dataset,
    methods,
    sample_size=50,
    seed=0,
    value_range=None,
    maxent=None,
    p="all-positive",
):
    """Vote weights from mean entropy-ablation scores on a seeded test sample.

    Scores are clipped at zero before normalization; if every method scores
    non-positive the weights fall back to uniform and the result is flagged.
    """
    from .evaluation import entropy_ablation
    from .baselines import certified_max_entropy

    if value_range is None:
        value_range = dataset.value_range
    rng = np.random.default_rng(seed)
    pool = dataset.test_x
    take = min(sample_size, len(pool))
    xs = pool[rng.choice(len(pool), size=take, replace=False)]
    if maxent is None:
        maxent = certified_max_entropy(net, value_range, seed=seed)

    means = []
    for method in methods:
        scores = []
        for x in xs:
            cls = int(np.argmax(forward(net, x)))
            attr = _run_method(net, x, cls, method, value_range=value_range, seed=seed)
            outcome = entropy_ablation(net, x, attr, p=p, baseline=maxent)
            scores.append(outcome.score)
        means.append(np.mean(scores))
    means = np.clip(np.asarray(means), 0.0, None)
    if means.sum() <= 0:
        n = len(methods)
        return HybridWeights(tuple(methods), np.full(n, 1.0 / n), uniform_fallback=True)
    return HybridWeights(tuple(methods), means / means.sum())


def export_attribution(attr: AttributionMap, path_prefix, seed=None):
    """Raw .npy dump of the map plus a JSON sidecar with its provenance."""
    import json

    np.save(f"{path_prefix}.npy", attr.values)
    sidecar = {
        "method_tag": attr.method_tag,
        "baseline_tag": attr.baseline_tag,
        "class_explained": attr.class_explained,
        "shape": list(attr.values.shape),
        "seed": seed,
    }
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
