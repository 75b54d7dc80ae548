"""Experiment harnesses: attribution-quality losses, scalar baseline sweeps,
classic and entropy-conserving ablation tests, the non-conservation
demonstration, and the linear-transformation invariance check.

Every harness is a pure computation over an immutable network; the matrix
runner can fan instances out over threads while keeping deterministic output
ordering.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .attribution import (
    AttributionMap,
    integrated_gradients,
    random_saliency,
    _run_method,
)
from .baselines import (
    BaselineSpec,
    build_baseline,
    certified_max_entropy,
    entropy_curve,
    logits_entropy,
    logits_entropy_batch,
    entropy_input_gradient_batch,
)
from .data import GroundTruthMask
from .errors import DimensionError, NumericError
from .nn import (
    Conv2D,
    Dense,
    Flatten,
    backprop_output_gradient,
    forward,
    forward_batch,
    input_gradient,
    softmax,
)

__all__ = [
    "AblationConfig",
    "AblationOutcome",
    "AblationReport",
    "ShiftSpec",
    "SweepCurve",
    "HistogramReport",
    "InvarianceReport",
    "TrajectoryReport",
    "kl_loss",
    "spearman_loss",
    "baseline_sweep",
    "min_loss_histogram",
    "classic_ablation",
    "entropy_ablation",
    "nonconservation_demo",
    "shift_tensor",
    "reparameterize",
    "linear_transform_test",
    "run_matrix",
    "write_curve_csv",
    "write_report_csv",
    "write_summary_csv",
]


# --- losses ---------------------------------------------------------------

def kl_loss(attr, mask, eps=1e-8):
    """KL(q || p) between the normalized mask q and normalized |attribution| p."""
    a = np.abs(_values(attr)).ravel()
    m = np.asarray(mask.mask if isinstance(mask, GroundTruthMask) else mask, dtype=np.float64).ravel()
    if a.shape != m.shape:
        raise DimensionError(f"attribution size {a.shape} != mask size {m.shape}")
    if m.sum() <= 0:
        raise ValueError("all-zero mask")
    p = (a + eps) / (a + eps).sum()
    q = m / m.sum()
    nz = q > 0
    return float(np.sum(q[nz] * np.log(q[nz] / p[nz])))


def spearman_loss(a, b):
    """1 - Spearman rank correlation (average ranks on ties).

    A constant map has no rank ordering; that degenerate case is defined as
    loss 1 so sweeps stay total.
    """
    av = _values(a).ravel()
    bv = _values(b).ravel()
    if av.shape != bv.shape:
        raise DimensionError("maps must have equal size")
    if np.ptp(av) == 0 or np.ptp(bv) == 0:
        return 1.0
    rho = stats.spearmanr(av, bv).statistic
    if not np.isfinite(rho):
        return 1.0
    return float(1.0 - rho)


def _values(obj):
    if isinstance(obj, AttributionMap):
        return obj.values
    if isinstance(obj, GroundTruthMask):
        return obj.mask
    return np.asarray(obj, dtype=np.float64)


# --- scalar baseline sweeps ----------------------------------------------

@dataclass
class SweepCurve:
    inputs: np.ndarray
    losses: np.ndarray
    loss_kind: str

    @property
    def argmin_input(self):
        return float(self.inputs[int(np.argmin(self.losses))])


def _sweep_loss(attr, reference, loss):
    if loss == "kl":
        return kl_loss(attr, _values(reference))
    if loss == "spearman":
        return spearman_loss(attr, _values(reference))
    raise ValueError(f"unknown loss {loss!r}")


def baseline_sweep(
    net, x, reference, value_range, grid_n=200, loss="kl", steps=100, class_index=None
):
    """Loss of IG explanations against a reference, for every constant baseline
    u * ones on a scalar grid over the value range."""
    x = np.asarray(x, dtype=np.float64)
    if class_index is None:
        class_index = int(np.argmax(forward(net, x)))
    us = np.linspace(float(value_range[0]), float(value_range[1]), grid_n)
    losses = np.empty(grid_n)
    for i, u in enumerate(us):
        attr = integrated_gradients(net, x, np.full(x.shape, u), class_index, steps=steps)
        losses[i] = _sweep_loss(attr, reference, loss)
    return SweepCurve(inputs=us, losses=losses, loss_kind=loss)


@dataclass
class HistogramReport:
    bin_edges: np.ndarray
    counts: np.ndarray
    mode_center: float
    entropy_argmax: float
    argmins: np.ndarray


def min_loss_histogram(
    net, instances, reference_fn, value_range, grid_n=200, bins=50, loss="spearman", steps=100
):
    """Histogram of per-instance argmin constant baselines, with the entropy
    curve's argmax reported alongside for comparison."""
    argmins = []
    for x in instances:
        reference = reference_fn(x)
        curve = baseline_sweep(net, x, reference, value_range, grid_n, loss, steps)
        argmins.append(curve.argmin_input)
    argmins = np.asarray(argmins)
    counts, edges = np.histogram(argmins, bins=bins, range=(value_range[0], value_range[1]))
    mode = int(np.argmax(counts))
    hcurve = entropy_curve(net, value_range, grid_n)
    return HistogramReport(
        bin_edges=edges,
        counts=counts,
        mode_center=float((edges[mode] + edges[mode + 1]) / 2.0),
        entropy_argmax=hcurve.argmax_input,
        argmins=argmins,
    )


# --- ablation tests -------------------------------------------------------

@dataclass
class AblationConfig:
    """Classic-test configuration: what replaces ablated features and what is
    monitored. The entropy test fixes its substitute and is configured by ``p``
    alone."""

    substitute_kind: str = "zero"
    target: str = "logit"
    positive_fraction: object = "all-positive"
    substitute_tensor: np.ndarray | None = None
    blur_kernel: int = 5
    blur_sigma: float = 2.0

    def __post_init__(self):
        if self.target not in ("logit", "softmax"):
            raise ValueError("classic ablation target must be 'logit' or 'softmax'")
        if self.substitute_kind not in ("zero", "instance-min", "sign-flip", "blur", "fixed"):
            raise ValueError(f"unknown substitute kind {self.substitute_kind!r}")
        _check_fraction(self.positive_fraction)
        if self.substitute_kind == "fixed" and self.substitute_tensor is None:
            raise ValueError("fixed substitute needs substitute_tensor")


def _check_fraction(p):
    if p == "all-positive":
        return
    if not (isinstance(p, (int, float)) and 0 < p <= 1):
        raise ValueError("positive_fraction must be in (0, 1] or 'all-positive'")


@dataclass
class AblationOutcome:
    score: float
    ablated_count: int
    degenerate: bool = False


def _ablation_coords(attr_values, p):
    """Flat indices of the top-p positively attributed coordinates, by
    descending attribution."""
    flat = attr_values.ravel()
    positive = np.flatnonzero(flat > 0)
    if len(positive) == 0:
        return positive
    order = positive[np.argsort(-flat[positive], kind="stable")]
    if p == "all-positive":
        return order
    take = max(1, int(math.ceil(p * len(order))))
    return order[:take]


def _ablate(x, coords, substitute):
    flat = np.array(x, copy=True).ravel()
    flat[coords] = np.asarray(substitute).ravel()[coords]
    return flat.reshape(x.shape)


def _classic_target(net, x, class_index, target):
    logits = forward(net, x)
    if target == "logit":
        return float(logits[class_index])
    return float(softmax(logits)[class_index])


def classic_ablation(net, x, attr, cfg: AblationConfig):
    """Drop in the monitored prediction score after replacing the top-p
    positively attributed coordinates with the configured substitute."""
    x = np.asarray(x, dtype=np.float64)
    values = _values(attr)
    coords = _ablation_coords(values, cfg.positive_fraction)
    class_index = int(np.argmax(forward(net, x)))
    if len(coords) == 0:
        return AblationOutcome(score=0.0, ablated_count=0, degenerate=True)

    if cfg.substitute_kind == "zero":
        substitute = np.zeros_like(x)
    elif cfg.substitute_kind == "instance-min":
        substitute = np.full(x.shape, x.min())
    elif cfg.substitute_kind == "sign-flip":
        substitute = -x
    elif cfg.substitute_kind == "blur":
        from .baselines import _blur

        substitute = _blur(x, cfg.blur_kernel, cfg.blur_sigma)
    else:
        substitute = np.asarray(cfg.substitute_tensor, dtype=np.float64)
        if substitute.shape != x.shape:
            raise DimensionError("fixed substitute must match the input shape")

    ablated = _ablate(x, coords, substitute)
    before = _classic_target(net, x, class_index, cfg.target)
    after = _classic_target(net, ablated, class_index, cfg.target)
    return AblationOutcome(score=before - after, ablated_count=len(coords))


def entropy_ablation(net, x, attr, p="all-positive", baseline=None, value_range=None):
    """Entropy rise after replacing top-p positively attributed coordinates
    with the maximum-entropy baseline's coordinates.

    Score = H(softmax(logits(ablated))) - H(softmax(logits(x))); bounded by
    +-ln(class_count) and conserving by construction of the baseline.
    """
    _check_fraction(p)
    x = np.asarray(x, dtype=np.float64)
    if baseline is None:
        if value_range is None:
            raise ValueError("need a maxent baseline or a value_range to build one")
        baseline = certified_max_entropy(net, value_range)
    bx = baseline.values if isinstance(baseline, BaselineSpec) else np.asarray(baseline)
    coords = _ablation_coords(_values(attr), p)
    if len(coords) == 0:
        return AblationOutcome(score=0.0, ablated_count=0, degenerate=True)
    ablated = _ablate(x, coords, bx)
    score = logits_entropy(net, ablated) - logits_entropy(net, x)
    return AblationOutcome(score=float(score), ablated_count=len(coords))


def entropy_ablation_auc(net, x, attr, baseline, fractions=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)):
    """Fraction-sweep alternative: mean entropy-ablation score over a p grid."""
    scores = [entropy_ablation(net, x, attr, p=p, baseline=baseline).score for p in fractions]
    return AblationOutcome(score=float(np.mean(scores)), ablated_count=len(fractions))


# --- non-conservation demonstration ---------------------------------------

@dataclass
class TrajectoryReport:
    """Projected-descent record for one surveillance target.

    ``residues`` maps each substitute name to monitored(substitute) minus the
    extremum found (for entropy, extremum minus monitored): a positive residue
    means the substitute is not conservative under that target.
    """

    target: str
    trajectory: np.ndarray
    final_x: np.ndarray
    extremum: float
    markers: dict = field(default_factory=dict)
    residues: dict = field(default_factory=dict)


def _monitor(net, x, target, class_index):
    if target == "logit":
        return float(forward(net, x)[class_index])
    if target == "softmax":
        return float(softmax(forward(net, x))[class_index])
    if target == "entropy":
        return logits_entropy(net, x)
    raise ValueError(f"unknown target {target!r}")


def nonconservation_demo(
    net,
    target,
    value_range,
    substitutes,
    class_index=0,
    steps=1000,
    lr=None,
    x0=None,
):
    """Optimize the surveillance target inside the value range and annotate the
    substitutes' values on the trajectory.

    Minimizes the class logit or softmax probability; for the ``entropy``
    target (information is inverse entropy) the entropy is maximized instead.
    """
    lo, hi = float(value_range[0]), float(value_range[1])
    if lr is None:
        lr = 0.01 * (hi - lo)
    if x0 is None:
        x0 = np.full(net.input_shape, (lo + hi) / 2.0)
    x = np.clip(np.asarray(x0, dtype=np.float64), lo, hi)

    maximize = target == "entropy"
    trajectory = [_monitor(net, x, target, class_index)]
    for step in range(steps):
        if target == "entropy":
            g, _ = entropy_input_gradient_batch(net, x[None])
            g = g[0]
        else:
            if target == "logit":
                g = input_gradient(net, x, class_index)
            else:
                logits = forward(net, x)
                p = softmax(logits)
                gy = p[class_index] * (np.eye(len(p))[class_index] - p)
                _, gx = backprop_output_gradient(net, x[None], gy[None])
                g = gx[0]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for target {target}", step)
        x = np.clip(x + lr * g if maximize else x - lr * g, lo, hi)
        trajectory.append(_monitor(net, x, target, class_index))

    trajectory = np.asarray(trajectory)
    extremum = float(trajectory.max() if maximize else trajectory.min())
    markers, residues = {}, {}
    for name, sub in substitutes.items():
        sx = sub.values if isinstance(sub, BaselineSpec) else np.asarray(sub, dtype=np.float64)
        value = _monitor(net, sx, target, class_index)
        markers[name] = value
        residues[name] = (extremum - value) if maximize else (value - extremum)
    return TrajectoryReport(
        target=target,
        trajectory=trajectory,
        final_x=x,
        extremum=extremum,
        markers=markers,
        residues=residues,
    )


# --- linear-transformation invariance -------------------------------------

@dataclass
class ShiftSpec:
    """Input offset: 'uniform' shifts every coordinate by the amplitude;
    'cross' shifts only a plus-shaped mask through the image center."""

    shape: str
    amplitude: float

    def __post_init__(self):
        if self.shape not in ("uniform", "cross"):
            raise ValueError("shift shape must be 'uniform' or 'cross'")


def shift_tensor(spec: ShiftSpec, input_shape):
    """Materialize the shift for a given input shape."""
    input_shape = tuple(input_shape)
    if spec.shape == "uniform":
        return np.full(input_shape, spec.amplitude)
    if len(input_shape) < 2:
        raise DimensionError("cross shift needs an image-shaped input")
    h, w = input_shape[-2], input_shape[-1]
    mask = np.zeros(input_shape)
    mid_h, mid_w = h // 2, w // 2
    mask[..., mid_h - (1 - h % 2) : mid_h + 1, :] = spec.amplitude
    mask[..., :, mid_w - (1 - w % 2) : mid_w + 1] = spec.amplitude
    return mask


def reparameterize(net, shift):
    """Exact twin of ``net`` expecting inputs shifted by ``shift``.

    Compensates the first parametric layer's bias so that
    forward(twin, x + shift) == forward(net, x) bit-for-bit up to float
    associativity. Dense first layers (after an optional flatten) support any
    shift; conv first layers support uniform shifts only.
    """
    shift = np.asarray(shift, dtype=np.float64)
    if shift.shape != net.input_shape:
        raise DimensionError(f"shift shape {shift.shape} != input shape {net.input_shape}")
    twin = net.clone()
    for layer in twin.layers:
        if isinstance(layer, Flatten):
            continue
        if isinstance(layer, Dense):
            layer.bias -= layer.weight @ shift.ravel()
            return twin.freeze()
        if isinstance(layer, Conv2D):
            flat = shift.ravel()
            if np.ptp(flat) != 0:
                raise DimensionError(
                    "conv first layer admits bias compensation only for uniform shifts"
                )
            layer.bias -= flat[0] * layer.kernels.sum(axis=(1, 2, 3))
            return twin.freeze()
        raise DimensionError("first parametric layer must be dense or conv")
    raise DimensionError("network has no parametric layer")


@dataclass
class InvarianceReport:
    shift_shape: str
    amplitude: float
    baseline_policy: str
    logit_max_diff: float
    attribution_max_diff: float
    invariant: bool


def linear_transform_test(
    net,
    xs,
    shift: ShiftSpec,
    baseline_policy="shift-with-input",
    baseline_value=0.0,
    steps=100,
    tolerance=1e-6,
):
    """Compare IG explanations before and after an exact input/bias shift.

    ``baseline_policy`` 'shift-with-input' moves the constant baseline along
    the constant axis by the shift amplitude (uniform baselines stay uniform);
    'hold' keeps the original baseline.
    """
    if baseline_policy not in ("hold", "shift-with-input"):
        raise ValueError(f"unknown baseline policy {baseline_policy!r}")
    xs = np.asarray(xs, dtype=np.float64)
    offset = shift_tensor(shift, net.input_shape)
    twin = reparameterize(net, offset)

    logit_diff = 0.0
    attr_diff = 0.0
    for x in xs:
        x_shifted = x + offset
        logit_diff = max(
            logit_diff, float(np.max(np.abs(forward(net, x) - forward(twin, x_shifted))))
        )
        cls = int(np.argmax(forward(net, x)))
        base = np.full(net.input_shape, baseline_value)
        base_twin = base + shift.amplitude if baseline_policy == "shift-with-input" else base
        a = integrated_gradients(net, x, base, cls, steps=steps)
        b = integrated_gradients(twin, x_shifted, base_twin, cls, steps=steps)
        attr_diff = max(attr_diff, float(np.max(np.abs(a.values - b.values))))
    return InvarianceReport(
        shift_shape=shift.shape,
        amplitude=shift.amplitude,
        baseline_policy=baseline_policy,
        logit_max_diff=logit_diff,
        attribution_max_diff=attr_diff,
        invariant=attr_diff < tolerance,
    )


# --- matrix evaluation ----------------------------------------------------

@dataclass
class AblationReport:
    """Per-instance ablation scores for one (method, baseline) cell."""

    scores: np.ndarray
    method_tag: str
    baseline_tag: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)

    @property
    def mean(self):
        return float(np.mean(self.scores))

    @property
    def median(self):
        return float(np.median(self.scores))

    @property
    def variance(self):
        return float(np.var(self.scores))


def _cell_attribution(net, x, cls, method, baseline_spec, value_range, steps, seed):
    if method == "ig":
        return integrated_gradients(net, x, baseline_spec, cls, steps=steps)
    if method == "random":
        return random_saliency(x.shape, cls, seed=seed)
    return _run_method(net, x, cls, method, value_range=value_range, seed=seed)


def run_matrix(
    net,
    xs,
    methods,
    baseline_kinds,
    value_range,
    train_data=None,
    p="all-positive",
    steps=100,
    seed=0,
    maxent=None,
    jobs=1,
):
    """Entropy-ablation evaluation over a method x baseline grid.

    'ig' is crossed with every baseline kind; baseline-free methods (vanilla,
    smoothgrad, guided, random, ...) contribute one cell each with baseline
    tag '-'. Returns {(method_tag, baseline_tag): AblationReport} in
    deterministic order; per-instance failures are recorded as NaN scores.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if maxent is None:
        maxent = certified_max_entropy(net, value_range, probe_xs=xs, seed=seed)

    cells = []
    for method in methods:
        if method == "ig":
            for kind in baseline_kinds:
                cells.append((method, kind))
        else:
            cells.append((method, "-"))

    classes = forward_batch(net, xs).argmax(axis=1)
    base_entropy = logits_entropy_batch(net, xs)

    def instance_score(args):
        i, method, kind = args
        x, cls = xs[i], int(classes[i])
        if method == "ig":
            if kind in ("maxent_full",):
                spec = maxent
            else:
                spec = build_baseline(
                    kind, net=net, x=x, train_data=train_data,
                    seed=seed + i, value_range=value_range,
                )
            attr = _cell_attribution(net, x, cls, method, spec, value_range, steps, seed + i)
        else:
            attr = _cell_attribution(net, x, cls, method, None, value_range, steps, seed + i)
        coords = _ablation_coords(attr.values, p)
        if len(coords) == 0:
            return 0.0
        ablated = _ablate(x, coords, maxent.values)
        return float(logits_entropy(net, ablated) - base_entropy[i])

    reports = {}
    for method, kind in cells:
        tasks = [(i, method, kind) for i in range(len(xs))]
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                scores = list(pool.map(lambda t: _safe(instance_score, t), tasks))
        else:
            scores = [_safe(instance_score, t) for t in tasks]
        reports[(method, kind)] = AblationReport(
            scores=np.asarray(scores), method_tag=method, baseline_tag=kind
        )
    return reports


def _safe(fn, args):
    try:
        return fn(args)
    except Exception:
        return float("nan")


# --- CSV emitters ---------------------------------------------------------

def write_curve_csv(path, xs, ys, header=("x", "y")):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for a, b in zip(xs, ys):
            writer.writerow([repr(float(a)), repr(float(b))])


def write_report_csv(report: AblationReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance", "score", "method", "baseline"])
        for i, s in enumerate(report.scores):
            writer.writerow([i, repr(float(s)), report.method_tag, report.baseline_tag])


def write_summary_csv(reports, path):
    """One row per cell: method, baseline, mean, median, variance."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "baseline", "mean", "median", "variance"])
        for (method, kind), report in reports.items():
            writer.writerow(
                [method, kind, repr(report.mean), repr(report.median), repr(report.variance)]
            )
