"""Command-line entry point: train, eval, energy, gradcheck, inspect.

Configuration precedence is flag > config file > built-in default. The
config file is flat key=value text with '#' comments, keys matching the
long flag names (dashes replaced by underscores).

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure,
5 failed verification.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

import numpy as np

from . import energy, gradcheck, training
from .data import LabelMap, load_dataset, synthetic_tone_dataset
from .errors import (ConfigError, DataError, NumericError, ParseError,
                     SkwsError, VerificationError)
from .model import Model, ModelConfig, build_model, make_variant

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_VERIFY = 5

_DEFAULTS = {
    "mode": "v1-12",
    "variant": "snn-kws",
    "seed": 0,
    "epochs": 30,
    "batch_size": 32,
    "lr": 1e-3,
    "timesteps": 8,
    "split": "test",
    "samples": 16,
    "ac_mac": energy.DEFAULT_AC_MAC,
    "synthetic": False,
}

_TYPES = {
    "seed": int, "epochs": int, "batch_size": int, "timesteps": int,
    "samples": int, "lr": float, "ac_mac": float, "rate": float,
    "synthetic": lambda v: str(v).lower() in ("1", "true", "yes"),
}


def load_config_file(path: str) -> dict:
    """Parse flat key=value lines; '#' starts a comment."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path} does not exist")
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in _DEFAULTS and key not in ("data_root", "checkpoint", "out", "rate"):
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value.strip()
    return values


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config-file values and explicit flags."""
    merged = dict(_DEFAULTS)
    merged.update({"data_root": None, "checkpoint": None, "out": None, "rate": None})
    if getattr(args, "config", None):
        for key, raw in load_config_file(args.config).items():
            caster = _TYPES.get(key, str)
            try:
                merged[key] = caster(raw)
            except ValueError:
                raise ConfigError(f"config key {key!r} has invalid value {raw!r}")
    for key in merged:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    return merged


def _classes_for_mode(mode: str) -> int:
    return LabelMap(mode).num_classes


def _model_config(opts: dict, num_classes: int) -> ModelConfig:
    if opts["synthetic"]:
        base = training.synthetic_task_config(timesteps=min(opts["timesteps"], 4))
    else:
        base = ModelConfig(num_classes=num_classes, timesteps=opts["timesteps"])
    return make_variant(base, opts["variant"])


def _open_log(opts: dict):
    if opts["out"]:
        fh = open(opts["out"], "w", encoding="utf-8")
        return fh, lambda line: (fh.write(line + "\n"), fh.flush())
    return None, print


def cmd_train(args: argparse.Namespace) -> int:
    opts = resolve(args)
    if opts["synthetic"]:
        dataset = synthetic_tone_dataset(n_train=200, seed=opts["seed"])
        num_classes = 2
    else:
        if not opts["data_root"]:
            raise ConfigError("train needs --data-root (or synthetic=true)")
        dataset = load_dataset(opts["data_root"], opts["mode"], opts["seed"])
        num_classes = _classes_for_mode(opts["mode"])
    model = build_model(_model_config(opts, num_classes), seed=opts["seed"])
    print(f"parameters: {model.param_count()}")

    train_cfg = training.TrainConfig(
        epochs=opts["epochs"], batch_size=opts["batch_size"],
        learning_rate=opts["lr"], seed=opts["seed"])
    checkpoint = opts["checkpoint"] or "model.skws"
    log_file, log = _open_log(opts)
    try:
        train_split = dataset.splits["train"]
        val_split = dataset.splits.get("validation")
        if train_cfg.epochs == 0:
            model.save(checkpoint)
            metrics = training.evaluate(model, val_split or train_split,
                                        train_cfg.batch_size)
            log(metrics.line(0, "validation" if val_split else "train"))
            return EXIT_OK
        training.run_training(model, train_split, val_split, train_cfg,
                              checkpoint_path=checkpoint, log_fn=log)
    finally:
        if log_file:
            log_file.close()
    print(f"checkpoint written to {checkpoint}")
    return EXIT_OK


def _format_metrics(metrics: training.Metrics, label_names=None) -> str:
    lines = [f"loss={metrics.loss:.6f}",
             f"accuracy={metrics.accuracy:.6f}",
             f"count={metrics.count}",
             "confusion (rows true, cols predicted):"]
    for i, row in enumerate(metrics.confusion):
        name = label_names[i] if label_names else str(i)
        lines.append(f"  {name}: " + " ".join(str(v) for v in row))
    return "\n".join(lines)


def cmd_eval(args: argparse.Namespace) -> int:
    opts = resolve(args)
    if not opts["checkpoint"]:
        raise ConfigError("eval needs --checkpoint")
    model = Model.load(opts["checkpoint"])
    if opts["synthetic"]:
        dataset = synthetic_tone_dataset(n_train=200, n_test=60, seed=opts["seed"])
    else:
        if not opts["data_root"]:
            raise ConfigError("eval needs --data-root (or synthetic=true)")
        expected = _classes_for_mode(opts["mode"])
        if model.cfg.num_classes != expected:
            raise ConfigError(
                f"checkpoint has {model.cfg.num_classes} classes but mode "
                f"{opts['mode']} expects {expected}")
        dataset = load_dataset(opts["data_root"], opts["mode"], opts["seed"])
    split = dataset.splits.get(opts["split"])
    if split is None:
        raise ConfigError(f"dataset has no split {opts['split']!r}")
    metrics = training.evaluate(model, split, opts["batch_size"])
    print(_format_metrics(metrics, dataset.label_names))
    return EXIT_OK


def cmd_energy(args: argparse.Namespace) -> int:
    opts = resolve(args)
    if opts["rate"] is not None:
        # direct computation from an injected firing rate, no data needed
        rate, saving = energy.energy_ratio(opts["rate"], opts["timesteps"],
                                           opts["ac_mac"])
        print(f"mean_rate={opts['rate']!r}")
        print(f"timesteps={opts['timesteps']}")
        print(f"ac_mac_ratio={opts['ac_mac']!r}")
        print(f"energy_rate={rate!r}")
        print(f"saving_factor={saving!r}")
        return EXIT_OK
    if not opts["checkpoint"]:
        raise ConfigError("energy needs --checkpoint (or --rate)")
    model = Model.load(opts["checkpoint"])
    n = opts["samples"]
    record = energy.SpikeRecord()
    if n > 0:
        if opts["synthetic"]:
            dataset = synthetic_tone_dataset(n_train=n, seed=opts["seed"])
            split = dataset.splits["train"]
        else:
            if not opts["data_root"]:
                raise ConfigError("energy needs --data-root (or synthetic=true)")
            dataset = load_dataset(opts["data_root"], opts["mode"], opts["seed"])
            split = dataset.splits[opts["split"]]
        n = min(n, len(split))
        from .tensor import no_grad
        with no_grad():
            for start in range(0, n, opts["batch_size"]):
                indices = range(start, min(start + opts["batch_size"], n))
                waves, _ = split.batch(list(indices))
                model.forward(waves, train=False, record=record)
        report = energy.build_report(
            record, opts["ac_mac"],
            ann_mac_ops=float(model.dense_mac_count()),
            front_mac_ops=float(model.front_mac_count()))
    else:
        report = energy.build_report(record, opts["ac_mac"])
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    opts = resolve(args)
    gradcheck.run_or_raise(seed=opts["seed"], corrupt=getattr(args, "corrupt", None))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    opts = resolve(args)
    if not opts["checkpoint"]:
        raise ConfigError("inspect needs --checkpoint")
    model = Model.load(opts["checkpoint"])
    print(model.cfg.to_text(), end="")
    print(f"param_count={model.param_count()}")
    for name, tensor in sorted(model.params.items()):
        print(f"  {name}: {tensor.shape}")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data-root", dest="data_root", help="GSC dataset root")
    p.add_argument("--mode", choices=("v1-12", "v2-12", "v2-35"))
    p.add_argument("--variant", choices=("snn-kws", "glsc-only-local",
                                         "glsc-only-global", "glc-ann"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="metrics log path (default stdout)")
    p.add_argument("--synthetic", action="store_const", const=True, default=None,
                   help="use the built-in two-class tone task")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skws",
        description="Spiking keyword spotting on raw waveforms")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model")
    _add_common(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--split", choices=("train", "validation", "test"))
    p_eval.set_defaults(fn=cmd_eval)

    p_energy = sub.add_parser("energy", help="spike rates and energy ratio")
    _add_common(p_energy)
    p_energy.add_argument("--split", choices=("train", "validation", "test"))
    p_energy.add_argument("--samples", type=int)
    p_energy.add_argument("--rate", type=float,
                          help="skip measurement; compute the ratio for this rate")
    p_energy.add_argument("--ac-mac", dest="ac_mac", type=float)
    p_energy.set_defaults(fn=cmd_energy)

    p_grad = sub.add_parser("gradcheck", help="finite-difference verification")
    _add_common(p_grad)
    p_grad.add_argument("--corrupt", help=argparse.SUPPRESS)  # negative-control hook
    p_grad.set_defaults(fn=cmd_gradcheck)

    p_inspect = sub.add_parser("inspect", help="describe a checkpoint")
    _add_common(p_inspect)
    p_inspect.set_defaults(fn=cmd_inspect)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except SkwsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
