"""Baseline construction for path-integrated attributions.

Covers the constant references (zero, black, white, instance average, farthest
in-range value), data-derived references (training average, blur, noise), and
the maximum-entropy references found by scalar search or projected gradient
ascent on the entropy of softmaxed logits. Every materialized baseline is
clipped into the dataset value range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionError, NumericError
from .nn import backprop_output_gradient, forward, forward_batch, softmax

__all__ = [
    "BASELINE_KINDS",
    "BaselineSpec",
    "EntropyCurve",
    "entropy",
    "logits_entropy",
    "logits_entropy_batch",
    "entropy_input_gradient_batch",
    "entropy_curve",
    "max_entropy_uniform",
    "max_entropy_full",
    "certified_max_entropy",
    "build_baseline",
    "export_baseline",
]

BASELINE_KINDS = (
    "zero",
    "black",
    "white",
    "avg_instance",
    "xdist",
    "train_avg",
    "blur",
    "uniform_noise",
    "gaussian_noise",
    "maxent_uniform",
    "maxent_full",
)

# Kinds whose materialized tensor never reads the explained instance.
INPUT_INDEPENDENT_KINDS = frozenset(
    {"zero", "train_avg", "uniform_noise", "gaussian_noise", "maxent_uniform", "maxent_full"}
)


@dataclass
class BaselineSpec:
    """One materialized baseline plus the provenance needed to rebuild it."""

    kind: str
    values: np.ndarray
    params: dict = field(default_factory=dict)
    seed: int | None = None
    achieved_entropy: float | None = None
    entropy_history: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def input_independent(self):
        return self.kind in INPUT_INDEPENDENT_KINDS


def entropy(p, tol=1e-9):
    """Shannon entropy in nats of a probability vector; 0*log(0) counts as 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -tol):
        raise ValueError("probabilities must be nonnegative")
    if abs(p.sum() - 1.0) > tol:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    p = np.clip(p, 0.0, None)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def logits_entropy(net, x):
    """Entropy of the softmaxed logits at a single input."""
    return entropy(softmax(forward(net, x)))


def logits_entropy_batch(net, xs):
    p = softmax(forward_batch(net, xs))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def entropy_input_gradient_batch(net, xs):
    """Gradient of logits entropy w.r.t. each input in the batch."""
    logits = forward_batch(net, xs)
    p = softmax(logits)
    logp = np.log(np.maximum(p, 1e-300))
    h = -(p * logp).sum(axis=1)
    gy = -p * (logp + h[:, None])
    _, gx = backprop_output_gradient(net, xs, gy)
    return gx, h


@dataclass
class EntropyCurve:
    """Entropy of softmaxed logits at constant inputs u * ones over a range."""

    inputs: np.ndarray
    entropies: np.ndarray
    value_range: tuple

    @property
    def argmax_input(self):
        return float(self.inputs[int(np.argmax(self.entropies))])


def _constant_batch(net, us):
    shape = (len(us),) + net.input_shape
    return np.broadcast_to(
        np.asarray(us).reshape((-1,) + (1,) * len(net.input_shape)), shape
    ).copy()


def entropy_curve(net, value_range, n_samples=200):
    """Sample logits entropy at equally spaced constant inputs."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    us = np.linspace(value_range[0], value_range[1], n_samples)
    hs = logits_entropy_batch(net, _constant_batch(net, us))
    return EntropyCurve(inputs=us, entropies=hs, value_range=tuple(value_range))


def _entropy_at_constant(net, u):
    return logits_entropy_batch(net, _constant_batch(net, [u]))[0]


def max_entropy_uniform(net, value_range, grid_n=512, refine_iters=60):
    """Scalar u maximizing logits entropy at the constant input u * ones.

    Dense grid scan, then golden-section refinement around the best cell.
    Ties break toward the smallest u.
    """
    if grid_n < 3:
        raise ValueError("need grid_n >= 3")
    lo, hi = float(value_range[0]), float(value_range[1])
    curve = entropy_curve(net, (lo, hi), grid_n)
    best = int(np.argmax(curve.entropies))
    a = curve.inputs[max(best - 1, 0)]
    b = curve.inputs[min(best + 1, grid_n - 1)]

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _entropy_at_constant(net, c)
    fd = _entropy_at_constant(net, d)
    for _ in range(refine_iters):
        if fc >= fd:  # >= keeps the left (smaller-u) candidate on ties
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _entropy_at_constant(net, c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _entropy_at_constant(net, d)
    u_star = float(c if fc >= fd else d)
    spec = BaselineSpec(
        kind="maxent_uniform",
        values=np.full(net.input_shape, u_star),
        params={"value_range": [lo, hi], "grid_n": grid_n, "refine_iters": refine_iters, "u": u_star},
        achieved_entropy=float(_entropy_at_constant(net, u_star)),
    )
    return u_star, spec


def _ascent_batch(net, x0s, steps, lr, value_range):
    """Projected gradient ascent on logits entropy for a batch of starts.

    Returns (best inputs, best entropies, entropy history of the running
    iterates, shape (steps + 1, n)). Keeps the best iterate, not the last.
    """
    lo, hi = float(value_range[0]), float(value_range[1])
    xs = np.clip(np.asarray(x0s, dtype=np.float64), lo, hi)
    best_x = xs.copy()
    gx, h = entropy_input_gradient_batch(net, xs)
    best_h = h.copy()
    history = [h.copy()]
    for step in range(steps):
        if not np.all(np.isfinite(gx)):
            raise NumericError("non-finite entropy gradient", step)
        xs = np.clip(xs + lr * gx, lo, hi)
        gx, h = entropy_input_gradient_batch(net, xs)
        history.append(h.copy())
        improved = h > best_h
        best_x[improved] = xs[improved]
        best_h[improved] = h[improved]
    return best_x, best_h, np.asarray(history)


def max_entropy_full(net, x0=None, steps=1000, lr=None, value_range=(0.0, 1.0)):
    """Unconstrained-shape maximum-entropy baseline via projected gradient ascent.

    Starts at ``x0`` (default: range-midpoint constant tensor), clips every
    iterate into the value range, and returns the best iterate seen along with
    its entropy trajectory.
    """
    if steps < 1:
        raise ValueError("need steps >= 1")
    lo, hi = float(value_range[0]), float(value_range[1])
    if lr is None:
        lr = 0.05 * (hi - lo)
    if x0 is None:
        x0 = np.full(net.input_shape, (lo + hi) / 2.0)
    best_x, best_h, history = _ascent_batch(net, np.asarray(x0)[None], steps, lr, (lo, hi))
    return BaselineSpec(
        kind="maxent_full",
        values=best_x[0],
        params={"value_range": [lo, hi], "steps": steps, "lr": lr},
        achieved_entropy=float(best_h[0]),
        entropy_history=history[:, 0],
    )


def certified_max_entropy(
    net,
    value_range,
    steps=1000,
    lr=None,
    extra_starts=4,
    probes=0,
    probe_xs=None,
    seed=0,
    tol=1e-3,
):
    """Maximum-entropy baseline certified against random probes and warm starts.

    Runs ascent from the midpoint plus ``extra_starts`` seeded random starts,
    then checks ``probes`` random inputs and any caller-supplied ``probe_xs``.
    Whenever a probe beats the current best by more than ``tol``, ascent is
    warm-started from the violator. The result's entropy dominates every probe.
    """
    lo, hi = float(value_range[0]), float(value_range[1])
    if lr is None:
        lr = 0.05 * (hi - lo)
    rng = np.random.default_rng(seed)
    starts = [np.full(net.input_shape, (lo + hi) / 2.0)]
    for _ in range(extra_starts):
        starts.append(rng.uniform(lo, hi, size=net.input_shape))
    best_x, best_h, _ = _ascent_batch(net, np.asarray(starts), steps, lr, (lo, hi))
    top = int(np.argmax(best_h))
    x_star, h_star = best_x[top], float(best_h[top])

    candidates = []
    if probes > 0:
        candidates.append(rng.uniform(lo, hi, size=(probes,) + net.input_shape))
    if probe_xs is not None and len(probe_xs):
        candidates.append(np.clip(np.asarray(probe_xs, dtype=np.float64), lo, hi))
    for block in candidates:
        hs = logits_entropy_batch(net, block)
        worst = int(np.argmax(hs))
        if hs[worst] > h_star + tol:
            wx, wh, _ = _ascent_batch(net, block[worst][None], steps, lr, (lo, hi))
            if wh[0] > h_star:
                x_star, h_star = wx[0], float(wh[0])
    return BaselineSpec(
        kind="maxent_full",
        values=x_star,
        params={
            "value_range": [lo, hi],
            "steps": steps,
            "lr": lr,
            "extra_starts": extra_starts,
            "probes": probes,
            "certified_tol": tol,
        },
        seed=seed,
        achieved_entropy=h_star,
    )


def _gaussian_kernel2d(size, sigma):
    r = (size - 1) / 2.0
    ax = np.arange(size) - r
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return k / k.sum()


def _blur(x, size, sigma):
    if x.ndim < 2:
        raise DimensionError("blur baseline needs an image-shaped input")
    kernel = _gaussian_kernel2d(size, sigma)
    out = np.empty_like(x)
    if x.ndim == 2:
        return ndimage.convolve(x, kernel, mode="reflect")
    for c in range(x.shape[0]):
        out[c] = ndimage.convolve(x[c], kernel, mode="reflect")
    return out


def build_baseline(
    kind,
    net=None,
    x=None,
    train_data=None,
    params=None,
    seed=0,
    value_range=None,
):
    """Materialize one baseline of the catalogue; values are clipped into range."""
    params = dict(params or {})
    if value_range is None and train_data is not None:
        value_range = train_data.value_range
    if value_range is None:
        raise ValueError("value_range required (directly or via train_data)")
    lo, hi = float(value_range[0]), float(value_range[1])
    x = None if x is None else np.asarray(x, dtype=np.float64)

    def shape():
        if x is not None:
            return x.shape
        if net is not None:
            return net.input_shape
        raise ValueError(f"{kind} baseline needs an instance or a network for its shape")

    if kind == "zero":
        values = np.zeros(shape())
    elif kind == "black":
        values = np.full(x.shape, x.min())
    elif kind == "white":
        values = np.full(x.shape, x.max())
    elif kind == "avg_instance":
        values = np.full(x.shape, x.mean())
    elif kind == "xdist":
        values = np.where(x > (lo + hi) / 2.0, lo, hi)
    elif kind == "train_avg":
        if train_data is None:
            raise ValueError("train_avg baseline needs train_data")
        pool = train_data.train_x
        n = int(params.get("sample_size", len(pool)))
        if n < len(pool):
            rng = np.random.default_rng(seed)
            pool = pool[rng.choice(len(pool), size=n, replace=False)]
        values = pool.mean(axis=0)
    elif kind == "blur":
        values = _blur(x, int(params.get("kernel_size", 5)), float(params.get("sigma", 2.0)))
    elif kind == "uniform_noise":
        rng = np.random.default_rng(seed)
        values = rng.uniform(lo, hi, size=shape())
    elif kind == "gaussian_noise":
        rng = np.random.default_rng(seed)
        mu = float(params.get("mu", (lo + hi) / 2.0))
        sigma = float(params.get("sigma", (hi - lo) / 4.0))
        values = rng.normal(mu, sigma, size=shape())
        params.update({"mu": mu, "sigma": sigma})
    elif kind == "maxent_uniform":
        _, spec = max_entropy_uniform(
            net,
            (lo, hi),
            grid_n=int(params.get("grid_n", 512)),
            refine_iters=int(params.get("refine_iters", 60)),
        )
        return spec
    elif kind == "maxent_full":
        return max_entropy_full(
            net,
            x0=params.get("x0"),
            steps=int(params.get("steps", 1000)),
            lr=params.get("lr"),
            value_range=(lo, hi),
        )
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")

    return BaselineSpec(
        kind=kind,
        values=np.clip(values, lo, hi),
        params={**params, "value_range": [lo, hi]},
        seed=seed,
    )


def export_baseline(spec: BaselineSpec, path_prefix, net=None):
    """Write a baseline as a raw .npy dump plus a JSON provenance sidecar."""
    np.save(f"{path_prefix}.npy", spec.values)
    achieved = spec.achieved_entropy
    if achieved is None and net is not None:
        achieved = logits_entropy(net, spec.values)
    sidecar = {
        "kind": spec.kind,
        "params": spec.params,
        "seed": spec.seed,
        "achieved_entropy": achieved,
        "shape": list(spec.values.shape),
    }
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
