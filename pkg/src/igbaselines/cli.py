"""Command-line experiment runner.

Every subcommand reads an optional JSON config file (``--config``), applies
``--set key=value`` overrides on top (flags win), resolves defaults, archives
the resolved config next to its outputs, and emits plain CSV/JSON. Re-running
an archived config reproduces outputs byte-for-byte.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import attribution, baselines, data, evaluation, nn
from .errors import DimensionError, FormatError, NumericError, TrainingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULT_SEED = 1234
OUTPUT_ROOT_ENV = "IGBASELINES_OUT"


class ConfigError(ValueError):
    pass


def _parse_literal(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(config, key, value):
    parts = key.split(".")
    node = config
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override through non-object key {part!r}")
    node[parts[-1]] = _parse_literal(value)


def _resolve_config(args):
    config = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        config = json.loads(path.read_text())
        if not isinstance(config, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _apply_override(config, key, value)
    if args.seed is not None:
        config["seed"] = args.seed
    config.setdefault("seed", DEFAULT_SEED)
    if args.out is not None:
        config["out"] = args.out
    if "out" not in config:
        root = os.environ.get(OUTPUT_ROOT_ENV, ".")
        config["out"] = str(Path(root) / "igbaselines-out")
    return config


def _outdir(config):
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _archive(config, outdir):
    (outdir / "resolved_config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n"
    )


def _dataset(config):
    spec = config.get("dataset")
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("config needs dataset.kind (toy | digits | idx)")
    kind = spec["kind"]
    seed = int(spec.get("seed", config["seed"]))
    if kind == "toy":
        toy = data.ToySpec(
            features=int(spec.get("features", 4)),
            relevant=int(spec.get("relevant", 2)),
            classes=int(spec.get("classes", 2)),
            domain=int(spec.get("domain", 2)),
            count=int(spec.get("count", 10_000)),
            seed=seed,
        )
        return data.toy_generate(toy)
    if kind == "digits":
        ds = data.digits_dataset(
            test_fraction=float(spec.get("test_fraction", 0.4)),
            seed=seed,
            target_range=tuple(spec.get("target_range", (-0.42, 2.82))),
            flat=bool(spec.get("flat", False)),
        )
        return ds, None
    if kind == "idx":
        if "images" not in spec or "labels" not in spec:
            raise ConfigError("idx dataset needs 'images' and 'labels' paths")
        ds = data.load_idx_dataset(
            spec["images"],
            spec["labels"],
            test_fraction=float(spec.get("test_fraction", 0.2)),
            seed=seed,
        )
        if "target_range" in spec:
            ds = data.normalize(ds, tuple(spec["target_range"]))
        return ds, None
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _fresh_model(config, ds):
    spec = config.get("model", {})
    kind = spec.get("kind", "fc")
    seed = int(spec.get("seed", config["seed"]))
    input_shape = ds.x.shape[1:]
    classes = int(ds.y.max()) + 1
    if kind == "fc":
        hidden = spec.get("hidden", [32])
        return nn.fc_network(input_shape, hidden, classes, seed=seed)
    if kind == "conv":
        return nn.conv_network(
            input_shape,
            classes,
            seed=seed,
            filters=int(spec.get("filters", 8)),
            kernel=int(spec.get("kernel", 3)),
            hidden=int(spec.get("hidden", 32)),
        )
    raise ConfigError(f"unknown model kind {kind!r}")


def _load_model(config):
    spec = config.get("model", {})
    path = spec.get("path")
    if not path:
        raise ConfigError("config needs model.path (a saved model file)")
    if not Path(path).exists():
        raise ConfigError(f"model file not found: {path}")
    return nn.load_network(path)


def _train_config(config):
    spec = config.get("train", {})
    return nn.TrainConfig(
        epochs=int(spec.get("epochs", 30)),
        batch_size=int(spec.get("batch_size", 64)),
        learning_rate=float(spec.get("learning_rate", 0.05)),
        seed=int(spec.get("seed", config["seed"])),
        optimizer=spec.get("optimizer", "sgd"),
    )


def _pick_instances(config, ds, default_count=1):
    spec = config.get("evaluator", {})
    count = int(spec.get("instances", default_count))
    rng = np.random.default_rng(int(spec.get("sample_seed", config["seed"])))
    pool = ds.test_x if len(ds.test_idx) else ds.x
    idx = rng.choice(len(pool), size=min(count, len(pool)), replace=False)
    return pool[np.sort(idx)]


# --- subcommands ----------------------------------------------------------

def cmd_train(config):
    outdir = _outdir(config)
    ds, _ = _dataset(config)
    net = _fresh_model(config, ds)
    trained, report = nn.train(net, ds, _train_config(config))
    model_path = outdir / "model.npz"
    nn.save_network(trained, model_path)
    summary = {
        "train_accuracy": report.train_accuracy,
        "test_accuracy": report.test_accuracy,
        "final_loss": report.final_loss,
        "model": str(model_path),
    }
    (outdir / "accuracy.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _archive(config, outdir)
    print(f"train accuracy {report.train_accuracy:.4f}  test accuracy {report.test_accuracy:.4f}")
    print(f"model written to {model_path}")
    return EXIT_OK


def cmd_baseline(config):
    outdir = _outdir(config)
    ds, _ = _dataset(config)
    net = _load_model(config)
    kinds = config.get("baselines", list(baselines.BASELINE_KINDS))
    x = _pick_instances(config, ds, default_count=1)[0]
    rows = []
    for kind in kinds:
        spec = baselines.build_baseline(
            kind, net=net, x=x, train_data=ds, seed=config["seed"], value_range=ds.value_range
        )
        baselines.export_baseline(spec, str(outdir / f"baseline_{kind}"), net=net)
        rows.append((kind, baselines.logits_entropy(net, spec.values)))
    with open(outdir / "baseline_entropy.csv", "w", newline="") as fh:
        fh.write("kind,entropy\n")
        for kind, h in rows:
            fh.write(f"{kind},{h!r}\n")
    _archive(config, outdir)
    for kind, h in rows:
        print(f"{kind:16s} entropy {h:.6f}")
    return EXIT_OK


def cmd_sweep(config):
    outdir = _outdir(config)
    ds, mask = _dataset(config)
    net = _load_model(config)
    spec = config.get("sweep", {})
    grid_n = int(spec.get("grid_n", 200))
    steps = int(spec.get("steps", 100))
    loss = spec.get("loss", "kl" if mask is not None else "spearman")

    curve = baselines.entropy_curve(net, ds.value_range, grid_n)
    evaluation.write_curve_csv(
        outdir / "entropy_curve.csv", curve.inputs, curve.entropies, ("input", "entropy")
    )

    if mask is not None:
        reference_fn = lambda x: mask
    else:
        methods = config.get("methods", ["vanilla", "gradient_x_input", "guided"])
        weights = attribution.compute_hybrid_weights(
            net, ds, methods, seed=config["seed"], value_range=ds.value_range
        )
        def reference_fn(x):
            cls = int(np.argmax(nn.forward(net, x)))
            return attribution.hybrid_explain(
                net, x, cls, methods, weights, value_range=ds.value_range, seed=config["seed"]
            )

    xs = _pick_instances(config, ds, default_count=1)
    first = baseline_curve = evaluation.baseline_sweep(
        net, xs[0], reference_fn(xs[0]), ds.value_range, grid_n, loss, steps
    )
    evaluation.write_curve_csv(
        outdir / "loss_curve.csv", baseline_curve.inputs, baseline_curve.losses, ("baseline", "loss")
    )
    markers = {
        "loss_argmin": first.argmin_input,
        "entropy_argmax": curve.argmax_input,
    }
    if len(xs) > 1:
        hist = evaluation.min_loss_histogram(
            net, xs, reference_fn, ds.value_range, grid_n, loss=loss, steps=steps
        )
        centers = (hist.bin_edges[:-1] + hist.bin_edges[1:]) / 2.0
        evaluation.write_curve_csv(
            outdir / "argmin_histogram.csv", centers, hist.counts, ("bin_center", "count")
        )
        markers["histogram_mode"] = hist.mode_center
    (outdir / "markers.json").write_text(json.dumps(markers, indent=2, sort_keys=True) + "\n")
    _archive(config, outdir)
    print(f"loss argmin {markers['loss_argmin']!r}  entropy argmax {markers['entropy_argmax']!r}")
    return EXIT_OK


def cmd_invariance(config):
    outdir = _outdir(config)
    ds, _ = _dataset(config)
    net = _load_model(config)
    amplitude = float(config.get("shift_amplitude", 0.5))
    xs = _pick_instances(config, ds, default_count=5)
    rows = []
    for shape in ("uniform", "cross"):
        for policy in ("shift-with-input", "hold"):
            try:
                report = evaluation.linear_transform_test(
                    net, xs, evaluation.ShiftSpec(shape, amplitude), policy
                )
            except DimensionError as exc:
                rows.append((shape, policy, "", "", f"unsupported: {exc}"))
                continue
            rows.append(
                (
                    shape,
                    policy,
                    repr(report.logit_max_diff),
                    repr(report.attribution_max_diff),
                    "pass" if report.invariant else "fail",
                )
            )
    with open(outdir / "invariance.csv", "w", newline="") as fh:
        fh.write("shift,baseline_policy,logit_max_diff,attribution_max_diff,invariant\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    _archive(config, outdir)
    for row in rows:
        print("  ".join(str(v) for v in row))
    return EXIT_OK


def cmd_evaluate(config):
    outdir = _outdir(config)
    ds, _ = _dataset(config)
    net = _load_model(config)
    spec = config.get("evaluator", {})
    methods = config.get("methods", ["random", "vanilla", "ig"])
    kinds = config.get("baselines", ["zero", "maxent_uniform", "maxent_full"])
    xs = _pick_instances(config, ds, default_count=int(spec.get("instances", 50)))
    reports = evaluation.run_matrix(
        net,
        xs,
        methods,
        kinds,
        ds.value_range,
        train_data=ds,
        p=spec.get("p", "all-positive"),
        steps=int(spec.get("steps", 100)),
        seed=config["seed"],
        jobs=int(config.get("jobs", 1)),
    )
    for (method, kind), report in reports.items():
        evaluation.write_report_csv(report, outdir / f"cell_{method}_{kind}.csv")
    evaluation.write_summary_csv(reports, outdir / "summary.csv")
    _archive(config, outdir)
    for (method, kind), report in reports.items():
        print(f"{method:16s} {kind:16s} mean {report.mean:+.4f} median {report.median:+.4f}")
    return EXIT_OK


def cmd_nonconservation(config):
    outdir = _outdir(config)
    ds, _ = _dataset(config)
    net = _load_model(config)
    spec = config.get("nonconservation", {})
    steps = int(spec.get("steps", 1000))
    xs = _pick_instances(config, ds, default_count=1)
    x = xs[0]
    class_index = int(np.argmax(nn.forward(net, x)))
    maxent = baselines.certified_max_entropy(net, ds.value_range, seed=config["seed"])
    substitutes = {
        "zero": np.clip(np.zeros(net.input_shape), *ds.value_range),
        "instance_min": np.full(net.input_shape, float(x.min())),
        "sign_flip": np.clip(-x, *ds.value_range),
        "maxent": maxent,
    }
    results = {}
    for target in ("logit", "softmax", "entropy"):
        report = evaluation.nonconservation_demo(
            net, target, ds.value_range, substitutes, class_index=class_index, steps=steps
        )
        evaluation.write_curve_csv(
            outdir / f"trajectory_{target}.csv",
            np.arange(len(report.trajectory)),
            report.trajectory,
            ("step", target),
        )
        results[target] = {
            "extremum": report.extremum,
            "markers": report.markers,
            "residues": report.residues,
        }
    (outdir / "residues.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    _archive(config, outdir)
    for target, row in results.items():
        worst = max(row["residues"].values())
        print(f"{target:8s} extremum {row['extremum']:+.4f}  worst residue {worst:+.4f}")
    return EXIT_OK


def cmd_explain(config):
    outdir = _outdir(config)
    ds, _ = _dataset(config)
    net = _load_model(config)
    method = config.get("method", "ig")
    x = _pick_instances(config, ds, default_count=1)[0]
    cls = int(np.argmax(nn.forward(net, x)))
    if method == "ig":
        kind = config.get("baseline", "maxent_uniform")
        spec = baselines.build_baseline(
            kind, net=net, x=x, train_data=ds, seed=config["seed"], value_range=ds.value_range
        )
        attr = attribution.integrated_gradients(
            net, x, spec, cls, steps=int(config.get("steps", 100))
        )
    elif method == "random":
        attr = attribution.random_saliency(x.shape, cls, seed=config["seed"])
    else:
        attr = attribution._run_method(
            net, x, cls, method, value_range=ds.value_range, seed=config["seed"]
        )
    attribution.export_attribution(attr, str(outdir / "attribution"), seed=config["seed"])
    np.save(outdir / "instance.npy", x)
    _archive(config, outdir)
    print(f"method {attr.method_tag}  class {cls}  |attr| sum {np.abs(attr.values).sum():.6f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "baseline": cmd_baseline,
    "sweep": cmd_sweep,
    "invariance": cmd_invariance,
    "evaluate": cmd_evaluate,
    "nonconservation": cmd_nonconservation,
    "explain": cmd_explain,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="igbaselines",
        description="Integrated Gradients baseline and ablation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted keys, JSON values)")
        p.add_argument("--seed", type=int, default=None,
                       help=f"run seed (default {DEFAULT_SEED})")
        p.add_argument("--out", help=f"output directory (default under ${OUTPUT_ROOT_ENV} or .)")
        p.add_argument("--jobs", type=int, default=None, help="worker thread cap")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        if args.jobs is not None:
            config["jobs"] = args.jobs
        return COMMANDS[args.command](config)
    except (FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
