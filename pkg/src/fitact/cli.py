"""Command-line entry points.

Every subcommand reads an optional TOML config (``--config``/``--spec``),
applies ``--set section.key=value`` overrides and writes its outputs under
``--out``. One JSON summary line is printed to stdout.

Exit codes: 0 success, 2 usage or config error, 3 model error, 4 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import activations as act
from . import modelfile
from .config import ConfigError, load_config
from .data import DataError
from .faultsim import FaultError, read_fault_log, run_trial
from .harness import (
    ExperimentSpec, build_model, load_split, measure_overhead, neuron_max_histogram,
    post_train_config, rates_for_flips, rows_to_csv, run_campaign, sweep_global_bound, train_config,
)
from .network import with_global_bounds
from .training import (
    NoFeasibleCheckpointError, StageOrderError, TrainingDivergedError, modify_architecture,
    post_train_bounds, train_accuracy,
)

EXIT_OK, EXIT_USAGE, EXIT_MODEL, EXIT_DATA = 0, 2, 3, 4
MODEL_ERRORS = (modelfile.ModelFileError, StageOrderError, NoFeasibleCheckpointError,
                TrainingDivergedError, FaultError)

log = logging.getLogger("fitact")


def _clean(v):
    # JSON has no NaN
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def write_jsonl(path: Path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(_clean(r), sort_keys=True) + "\n")


def _emit(summary: dict) -> None:
    print(json.dumps(_clean(summary), sort_keys=True))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_model(args):
    if not args.model:
        raise ConfigError("--model is required")
    return modelfile.load(args.model)


def _model_map(base: dict, pairs, root: Path | None) -> dict[str, str]:
    """Scheme -> model path. Config paths are relative to the config file;
    ``--model-for`` paths are taken as given."""
    out = {k: str(root / v) if root is not None and not Path(v).is_absolute() else str(v)
           for k, v in base.items()}
    for p in pairs or ():
        scheme, sep, path = p.partition("=")
        if not sep:
            raise ConfigError(f"--model-for expects scheme=path, got {p!r}")
        out[scheme] = path
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args, cfg):
    train = load_split(cfg["data"], "train")
    net = build_model(cfg["model"], train)
    hist = []
    net = train_accuracy(net, train, train_config(cfg), history=hist)
    out = _out(args)
    nbytes = modelfile.save(net, out / "model.bin")
    write_jsonl(out / "metrics.jsonl", hist)
    _emit({"command": "train", "model": str(out / "model.bin"), "bytes": nbytes, **hist[-1]})


def cmd_calibrate(args, cfg):
    net = _require_model(args)
    train = load_split(cfg["data"], "train")
    mode = cfg["modify"]["global_mode"]
    if mode:
        out_net = with_global_bounds(net, act.layer_global_bounds(net, train.x), mode)
    else:
        out_net = modify_architecture(net, train, cfg["modify"]["slope"], cfg["modify"]["granularity"])
    out = _out(args)
    nbytes = modelfile.save(out_net, out / "model.bin")
    lam = out_net.bound_store().flat()
    _emit({"command": "calibrate", "model": str(out / "model.bin"), "bytes": nbytes,
           "bounds": int(lam.size), "mean_bound": float(lam.mean()) if lam.size else None})


def cmd_post_train(args, cfg):
    net = _require_model(args)
    train = load_split(cfg["data"], "train")
    val = load_split(cfg["data"], "val")
    hist = []
    net = post_train_bounds(net, train, post_train_config(cfg), validation=val, history=hist)
    out = _out(args)
    nbytes = modelfile.save(net, out / "model.bin")
    write_jsonl(out / "metrics.jsonl", hist)
    _emit({"command": "post-train", "model": str(out / "model.bin"), "bytes": nbytes, **hist[-1],
           "final_sum_squares": net.bound_store().sum_squares()})


def campaign_spec(cfg: dict, root: Path | None = None, model_pairs=()) -> tuple[ExperimentSpec, dict]:
    c = cfg["campaign"]
    models = _model_map(c["models"], model_pairs, root)
    nets = {}
    for scheme in c["schemes"]:
        if scheme not in models:
            raise modelfile.ModelFileError(f"no model given for scheme {scheme!r}")
        nets[scheme] = modelfile.load(models[scheme])
    rates = list(c["fault_rates"])
    if c["expected_flips"]:
        ref = c["rate_reference"]
        if ref not in models:
            raise ConfigError(f"campaign.rate_reference {ref!r} has no model")
        ref_net = nets[ref] if ref in nets else modelfile.load(models[ref])
        rates += list(rates_for_flips(ref_net, c["expected_flips"]))
    spec = ExperimentSpec(
        schemes=tuple(c["schemes"]), fault_rates=tuple(rates), trials_per_rate=c["trials_per_rate"],
        seed=c["seed"], data=cfg["data"], eval_split=cfg["data"]["eval_split"], models=models,
        scope_layers=tuple(c["scope_layers"]), include_bounds=c["include_bounds"], workers=c["workers"],
        metadata={"expected_flips": list(c["expected_flips"]), "zeta": cfg["post_train"]["zeta"],
                  "delta": cfg["post_train"]["delta"], "slope": cfg["modify"]["slope"]},
    )
    return spec, nets


def cmd_campaign(args, cfg):
    root = Path(args.config).parent if args.config else None
    spec, nets = campaign_spec(cfg, root, args.model_for)
    out = _out(args)
    if args.fault_logs:
        spec.fault_log_dir = str(out / "faults")
    report = run_campaign(spec, nets)
    report.write(out)
    _emit({"command": "campaign", "report": str(out / "report.json"), "samples": str(out / "samples.csv"),
           "cells": [{k: cell[k] for k in ("scheme", "fault_rate", "mean")} for cell in report.cells()]})


def cmd_sweep(args, cfg):
    net = _require_model(args)
    s = cfg["sweep"]
    rate = s["fault_rate"] or (rates_for_flips(net, [s["expected_flips"]])[0] if s["expected_flips"] else 0.0)
    eval_set = load_split(cfg["data"], cfg["data"]["eval_split"])
    rows = sweep_global_bound(net, s["layer"], s["bounds"], rate, s["trials"], eval_set, s["seed"],
                              s["scope_layers"] or None, s["mode"])
    out = _out(args)
    (out / "sweep.csv").write_text(rows_to_csv(rows))
    best = max(rows, key=lambda r: r["mean_faulted_accuracy"])
    _emit({"command": "sweep", "csv": str(out / "sweep.csv"), "fault_rate": rate, "best_bound": best["bound"]})


def cmd_histogram(args, cfg):
    net = _require_model(args)
    h = neuron_max_histogram(net, cfg["histogram"]["layer"], load_split(cfg["data"], "train"),
                             cfg["histogram"]["bins"])
    out = _out(args)
    (out / "histogram.csv").write_text(h.csv_text())
    _emit({"command": "histogram", "csv": str(out / "histogram.csv"), "neurons": int(h.maxima.size),
           "max": float(h.maxima.max()), "cv": h.cv})


def cmd_overhead(args, cfg):
    root = Path(args.config).parent if args.config else None
    models = _model_map(cfg["overhead"]["models"], args.model_for, root)
    if "unprotected" not in models:
        raise ConfigError("overhead needs a model for scheme 'unprotected'")
    nets = {s: modelfile.load(p) for s, p in models.items()}
    x = load_split(cfg["data"], cfg["data"]["eval_split"]).x[: cfg["overhead"]["batch"]]
    rep = measure_overhead(nets, x, cfg["overhead"]["reps"], cfg["overhead"]["warmup"])
    out = _out(args)
    (out / "overhead.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit({"command": "overhead", "runtime_overhead": rep.runtime_overhead,
           "memory_overhead": rep.memory_overhead, "framing_slack_bytes": rep.framing_slack_bytes})


def cmd_replay(args, cfg):
    net = _require_model(args)
    if not args.faults:
        raise ConfigError("--faults is required")
    trial = read_fault_log(args.faults)
    acc = run_trial(net, trial, load_split(cfg["data"], cfg["data"]["eval_split"]))
    _emit({"command": "replay", "seed": trial.seed, "events": len(trial), "accuracy": acc})


COMMANDS = {
    "train": (cmd_train, "train a plain-ReLU model"),
    "calibrate": (cmd_calibrate, "swap ReLUs for bounded activations calibrated on the training set"),
    "post-train": (cmd_post_train, "train per-neuron bounds under the accuracy budget"),
    "campaign": (cmd_campaign, "fault-injection campaign over schemes and fault rates"),
    "sweep": (cmd_sweep, "global-bound sweep on one layer"),
    "histogram": (cmd_histogram, "histogram of per-neuron maxima of one layer"),
    "overhead": (cmd_overhead, "runtime and memory overhead against plain ReLU"),
    "replay": (cmd_replay, "re-evaluate a model under a logged fault trial"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fitact", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", "--spec", dest="config", help="TOML config file")
        sp.add_argument("--preset", choices=("blobs", "digits"), help="workload preset applied before the file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (TOML value), repeatable")
        sp.add_argument("--out", default="results", help="output directory (default: results)")
        sp.add_argument("--model", help="input model file")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("campaign", "overhead"):
            sp.add_argument("--model-for", action="append", metavar="SCHEME=PATH",
                            help="model file for one scheme, repeatable")
        if name == "campaign":
            sp.add_argument("--fault-logs", action="store_true", help="write every trial's fault log under OUT/faults")
        if name == "replay":
            sp.add_argument("--faults", help="fault log to replay")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config, args.overrides, args.preset)
        func(args, cfg)
    except ConfigError as e:
        print(f"fitact {args.command}: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MODEL_ERRORS as e:
        print(f"fitact {args.command}: model error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except DataError as e:
        print(f"fitact {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, IndexError) as e:
        print(f"fitact {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"fitact {args.command}: {e}", file=sys.stderr)
        return EXIT_MODEL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
