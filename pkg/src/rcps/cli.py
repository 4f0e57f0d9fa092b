"""Command-line pipeline: simulate | train | calibrate | apply | evaluate.

Configuration comes from an optional TOML file, overridden by repeated
``--set section.key=value`` flags, overridden again by explicit command
flags. Outputs are staged in a temporary sibling directory and moved into
place only after the whole command succeeded, so an interrupted run never
leaves partial results behind.

Exit codes: 0 success, 2 usage or configuration problem, 3 training failure,
4 calibration infeasibility. Failures print a single machine-parsable line
starting with ``error:`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import io as rcio
from .calibration import CalibrationResult, RiskSpec, calibrate
from .core import make_interval_field
from .evaluation import metrics_report, risk_trials
from .exceptions import (
    ArgumentError,
    ConfigError,
    DomainError,
    FormatError,
    InfeasibleError,
    RcpsError,
    ShapeError,
    TrainingError,
)
from .synthetic import (
    DownsampleTaskSpec,
    GaussianFieldSpec,
    gen_downsample_task,
    gen_gaussian_field,
)
from .trainer import (
    HEAD_KINDS,
    TrainConfig,
    init_model,
    load_model,
    predict_triple,
    save_model,
    train,
)

MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# configuration plumbing


def _parse_override(text: str):
    low = text.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if "," in text:
        return [_parse_override(part) for part in text.split(",")]
    return text


def _load_config(args) -> dict:
    config: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                config = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"invalid TOML in {path}: {exc}")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set needs section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        node = config
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {dotted!r} collides with a scalar")
        node[parts[-1]] = _parse_override(value)
    return config


def _cfg(config: dict, dotted: str, default=None):
    node = config
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def _pick(flag_value, config, dotted, default):
    """Flag beats --set/TOML beats default."""
    if flag_value is not None:
        return flag_value
    return _cfg(config, dotted, default)


# ---------------------------------------------------------------------------
# staging


@contextmanager
def _atomic_dir(out_dir):
    out = Path(out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.tmp-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    out.mkdir(exist_ok=True)
    for child in sorted(tmp.iterdir()):
        os.replace(child, out / child.name)
    tmp.rmdir()


# ---------------------------------------------------------------------------
# manifest handling


def _load_manifest(data_dir) -> tuple[Path, dict]:
    root = Path(data_dir)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise ConfigError(f"no {MANIFEST_NAME} in {root}")
    with open(path, "r", encoding="utf-8") as fh:
        return root, json.load(fh)


def _split_indices(manifest: dict, split: str) -> list[int]:
    splits = manifest.get("splits", {})
    if split not in splits:
        raise ConfigError(
            f"split {split!r} not in manifest (have {sorted(splits)})"
        )
    return list(splits[split])


def _split_files(manifest: dict, split: str) -> set[str]:
    items = manifest["items"]
    names = set()
    for i in _split_indices(manifest, split):
        names.add(items[i]["x"])
        names.add(items[i]["y"])
    return names


def _load_split(root: Path, manifest: dict, split: str):
    items = manifest["items"]
    out = []
    for i in _split_indices(manifest, split):
        x = rcio.read_tensor(root / items[i]["x"])
        y = rcio.read_tensor(root / items[i]["y"])
        out.append((x, y))
    return out


# ---------------------------------------------------------------------------
# subcommands


def _cmd_simulate(args) -> int:
    config = _load_config(args)
    kind = _pick(args.spec, config, "dataset.kind", None)
    if kind not in ("gaussian", "downsample"):
        raise ConfigError(
            f"--spec must be 'gaussian' or 'downsample', got {kind!r}"
        )
    count = int(_pick(args.n, config, "dataset.n", 100))
    size = int(_pick(args.size, config, "dataset.size", 32))
    seed = int(_pick(args.seed, config, "dataset.seed", 0))
    out_dir = _pick(args.out, config, "dataset.out", None)
    if out_dir is None:
        raise ConfigError("simulate needs --out")
    if count < 1:
        raise ConfigError(f"dataset size must be >= 1, got {count}")

    n_train = _pick(args.train_count, config, "splits.train", None)
    n_calib = _pick(args.calib_count, config, "splits.calib", None)
    n_val = _pick(args.val_count, config, "splits.val", None)
    if n_train is None and n_calib is None and n_val is None:
        n_train = count - 2 * (count // 4)
        n_calib = count // 4
        n_val = count // 4
    else:
        n_train = int(n_train or 0)
        n_calib = int(n_calib or 0)
        n_val = int(n_val or 0)
    if n_train + n_calib + n_val != count or min(n_train, n_calib, n_val) < 0:
        raise ConfigError(
            f"splits ({n_train}, {n_calib}, {n_val}) must be >= 0 and sum to n={count}"
        )

    manifest: dict = {"kind": kind, "seed": seed}
    if kind == "gaussian":
        sigma = float(_pick(args.sigma, config, "dataset.sigma", 0.05))
        signal = _pick(args.signal, config, "dataset.signal", "constant")
        spec = GaussianFieldSpec(
            height=size, width=size, noise_std=sigma, signal=signal, seed=seed
        )
        dataset = gen_gaussian_field(spec, count)
        samples = dataset.samples
        manifest["spec"] = {
            "height": size,
            "width": size,
            "sigma": sigma,
            "signal": signal,
        }
        manifest["clip_fraction"] = dataset.clip_fraction
    else:
        factor = int(_pick(args.factor, config, "dataset.factor", 4))
        spec = DownsampleTaskSpec(height=size, width=size, factor=factor, seed=seed)
        samples = gen_downsample_task(spec, count)
        manifest["spec"] = {"height": size, "width": size, "factor": factor}

    with _atomic_dir(out_dir) as tmp:
        items = []
        for i, (x, y) in enumerate(samples):
            x_name, y_name = f"x_{i:05d}.npy", f"y_{i:05d}.npy"
            rcio.write_tensor(x, tmp / x_name)
            rcio.write_tensor(y, tmp / y_name)
            items.append({"x": x_name, "y": y_name})
        manifest["items"] = items
        manifest["splits"] = {
            "train": list(range(n_train)),
            "calib": list(range(n_train, n_train + n_calib)),
            "val": list(range(n_train + n_calib, count)),
        }
        if kind == "gaussian":
            rcio.write_tensor(dataset.noise_std, tmp / "sigma.npy")
            manifest["sigma_file"] = "sigma.npy"
        rcio.write_report(manifest, tmp / MANIFEST_NAME)
    print(f"wrote {count} image pairs to {out_dir}")
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args)
    if args.data is None:
        raise ConfigError("train needs --data pointing at a simulated dataset")
    root, manifest = _load_manifest(args.data)
    heuristic = _pick(args.heuristic, config, "model.heuristic", None)
    if heuristic not in HEAD_KINDS:
        raise ConfigError(f"--heuristic must be one of {HEAD_KINDS}, got {heuristic!r}")
    num_bins = _pick(args.K, config, "model.num_bins", 50 if heuristic == "softmax" else None)
    if heuristic != "softmax" and num_bins is not None and args.K is not None:
        raise ConfigError(f"--K only applies to the softmax head, not {heuristic!r}")
    alpha = float(_pick(args.alpha, config, "model.alpha", 0.1))
    patch = int(_pick(args.patch_size, config, "model.patch_size", 5))
    hidden = int(_pick(args.hidden, config, "model.hidden_width", 16))
    grid_period = _pick(args.grid_period, config, "model.grid_period", None)
    seed = int(_pick(args.seed, config, "train.seed", 0))

    sweep = _pick(args.lr_sweep, config, "train.lr_sweep", None)
    if isinstance(sweep, str):
        sweep = [float(v) for v in sweep.split(",")]
    train_cfg = TrainConfig(
        learning_rate=float(_pick(args.lr, config, "train.learning_rate", 1e-3)),
        epochs=int(_pick(args.epochs, config, "train.epochs", 10)),
        batch_size=int(_pick(args.batch_size, config, "train.batch_size", 8)),
        optimizer=_pick(args.optimizer, config, "train.optimizer", "adam"),
        seed=seed,
        lr_sweep=tuple(sweep) if sweep else None,
    )

    dataset = _load_split(root, manifest, "train")
    val = _load_split(root, manifest, "val") if train_cfg.lr_sweep else None
    x0 = dataset[0][0]
    model = init_model(
        patch_size=patch,
        hidden_width=hidden,
        head_kind=heuristic,
        in_channels=x0.channels,
        num_bins=int(num_bins) if num_bins is not None else None,
        alpha=alpha,
        seed=seed,
        grid_period=int(grid_period) if grid_period is not None else None,
    )
    history: list = []
    model = train(dataset, model, train_cfg, val=val, history=history)

    out_dir = Path(args.out or _cfg(config, "train.out", "model"))
    with _atomic_dir(out_dir) as tmp:
        save_model(model, tmp / "model.ckpt", train_config=train_cfg)
        with open(tmp / "training_curve.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "mean_loss"])
            for epoch, loss in enumerate(history, start=1):
                writer.writerow([epoch, format(loss, ".17g")])
    print(f"trained {heuristic} head for {train_cfg.epochs} epochs -> {out_dir}")
    return 0


def _predict_pairs(model, pairs):
    return [(predict_triple(model, x), y) for x, y in pairs]


def _cmd_calibrate(args) -> int:
    config = _load_config(args)
    if args.data is None or args.model is None:
        raise ConfigError("calibrate needs --model and --data")
    root, manifest = _load_manifest(args.data)
    model = load_model(args.model)
    spec = RiskSpec(
        alpha=float(_pick(args.alpha, config, "risk.alpha", 0.1)),
        delta=float(_pick(args.delta, config, "risk.delta", 0.1)),
    )
    grid_count = int(_pick(args.grid_count, config, "risk.grid_count", 1000))
    split = args.split or "calib"
    pairs = _load_split(root, manifest, split)
    result = calibrate(_predict_pairs(model, pairs), spec, grid_count)

    out = Path(args.out or "calibration.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.tmp-{os.getpid()}"
    rcio.write_report(result, tmp)
    os.replace(tmp, out)
    print(
        f"lambda_hat={result.lambda_hat:.6g} at alpha={spec.alpha}, "
        f"delta={spec.delta}, n={result.n} -> {out}"
    )
    return 0


def _cmd_apply(args) -> int:
    _load_config(args)
    if args.model is None or args.result is None:
        raise ConfigError("apply needs --model and --result")
    if not args.inputs:
        raise ConfigError("apply needs at least one input tensor file")
    model = load_model(args.model)
    with open(args.result, "r", encoding="utf-8") as fh:
        result = CalibrationResult.from_dict(json.load(fh))
    lam = result.lambda_hat

    out_dir = Path(args.out or "intervals")
    with _atomic_dir(out_dir) as tmp:
        for name in args.inputs:
            x = rcio.read_tensor(name)
            triple = predict_triple(model, x)
            field = make_interval_field(triple, lam)
            stem = Path(name).stem
            rcio.write_tensor(field.lo, tmp / f"{stem}_lo.npy")
            rcio.write_tensor(field.hi, tmp / f"{stem}_hi.npy")
            rcio.render_heatmap(field.sizes(), tmp / f"{stem}_sizes.png")
    print(f"wrote intervals for {len(args.inputs)} inputs at lambda={lam:.6g} -> {out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    config = _load_config(args)
    if args.model is None or args.result is None or args.data is None:
        raise ConfigError("evaluate needs --model, --result and --data")
    root, manifest = _load_manifest(args.data)
    model = load_model(args.model)
    with open(args.result, "r", encoding="utf-8") as fh:
        result = CalibrationResult.from_dict(json.load(fh))

    eval_split = args.split or "val"
    calib_split = args.calib_split or "calib"
    overlap = _split_files(manifest, eval_split) & _split_files(manifest, calib_split)
    if overlap:
        raise ConfigError(
            f"evaluation split {eval_split!r} shares {len(overlap)} files with "
            f"calibration split {calib_split!r}; refusing to evaluate on "
            "calibration data"
        )

    pairs = _load_split(root, manifest, eval_split)
    items = _predict_pairs(model, pairs)
    report = metrics_report(items, result.lambda_hat)

    trials = _pick(args.trials, config, "evaluate.trials", None)
    out_dir = Path(args.out or "evaluation")
    with _atomic_dir(out_dir) as tmp:
        rcio.write_report(report, tmp / "report.json")
        rcio.write_histogram_csv(
            report.size_stats.hist_edges,
            report.size_stats.hist_counts,
            tmp / "size_histogram.csv",
        )
        if trials is not None:
            pool = items + _predict_pairs(model, _load_split(root, manifest, calib_split))
            trials_result = risk_trials(
                pool,
                result.spec,
                n_calib=len(_split_indices(manifest, calib_split)),
                trials=int(trials),
                seed=int(_pick(None, config, "evaluate.seed", 0)),
                grid_count=result.grid.count,
            )
            rcio.write_report(trials_result, tmp / "risk_trials.json")
            if trials_result.risks.size:
                top = float(max(trials_result.risks.max(), 1e-12))
                counts, edges = np.histogram(
                    trials_result.risks, bins=50, range=(0.0, top)
                )
                rcio.write_histogram_csv(edges, counts, tmp / "risk_histogram.csv")
    print(
        f"empirical risk {report.empirical_risk:.6g} over {report.n_test} images "
        f"-> {out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(parser):
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a config value, e.g. --set risk.alpha=0.05",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rcps",
        description="Pixelwise uncertainty intervals with a distribution-free "
        "risk guarantee: simulate data, train a heuristic, calibrate the "
        "interval scale, apply it, and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--spec", choices=["gaussian", "downsample"])
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma", type=float, help="gaussian noise std")
    p.add_argument(
        "--signal", choices=["constant", "smooth-gradient", "checkerboard"]
    )
    p.add_argument("--factor", type=int, help="downsample factor")
    p.add_argument("--train-count", type=int)
    p.add_argument("--calib-count", type=int)
    p.add_argument("--val-count", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("train", help="train a heuristic uncertainty head")
    _add_common(p)
    p.add_argument("--data", help="dataset directory with manifest.json")
    p.add_argument("--heuristic", choices=list(HEAD_KINDS))
    p.add_argument("--K", type=int, help="softmax bin count")
    p.add_argument("--alpha", type=float, help="level for quantile/softmax heads")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--grid-period", type=int, help="periodic position feature")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-sweep", help="comma-separated rates, best val MSE wins")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory for checkpoint + curve")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("calibrate", help="pick the interval scale on held-out data")
    _add_common(p)
    p.add_argument("--model", help="model checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", help="manifest split to calibrate on (default calib)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--grid-count", type=int)
    p.add_argument("--out", help="output JSON path")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("apply", help="emit calibrated intervals for new inputs")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--result", help="calibration JSON")
    p.add_argument("--out")
    p.add_argument("inputs", nargs="*", help="input .npy tensors")
    p.set_defaults(func=_cmd_apply)

    p = sub.add_parser("evaluate", help="metric suite on a held-out split")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--result")
    p.add_argument("--data")
    p.add_argument("--split", help="evaluation split (default val)")
    p.add_argument("--calib-split", help="split used for calibration (default calib)")
    p.add_argument("--trials", type=int, help="risk-histogram trial count")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleError as exc:
        hint = f"smallest achievable ucb is {exc.min_ucb:.6g}"
        if exc.needed_n is not None:
            hint += f"; n >= {exc.needed_n} would make it feasible"
        else:
            hint += f"; raise alpha above {exc.needed_alpha:.6g} or improve the heuristic"
        print(f"error: {exc} ({hint})", file=sys.stderr)
        return 4
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ArgumentError, ShapeError, DomainError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RcpsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
