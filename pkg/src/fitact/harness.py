"""Experiment orchestration: scheme preparation, fault campaigns, bound sweeps,
neuron-maximum histograms and overhead measurement.

Campaign trial seeds depend only on (campaign seed, rate index, trial index),
so every protection scheme sees the same seed sequence (paired trials).

Raw samples are written as CSV with the fixed columns
``scheme,fault_rate,trial,seed,accuracy``; summaries go to ``report.json``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import activations as act
from . import modelfile
from .data import DataError, Dataset, load_image_dir, make_blobs
from .faultsim import FaultModel, layer_scope, run_trial, sample_faults, write_fault_log
from .network import (
    Network, forward, hidden_layer_indices, parameter_census, relu_variant, with_global_bounds,
)
from .numerics import decode_array
from .training import (
    PostTrainConfig, TrainConfig, evaluate_accuracy, modify_architecture, post_train_bounds,
    train_accuracy,
)
from .workloads import DIGITS_DIR, init_cnn, init_mlp

log = logging.getLogger(__name__)

SCHEMES = ("unprotected", "gbrelu_squash", "gbrelu_clamp", "fitact")
CSV_COLUMNS = ("scheme", "fault_rate", "trial", "seed", "accuracy")


# ---------------------------------------------------------------------------
# datasets and models from config tables

def load_split(data_cfg: dict, split: str) -> Dataset:
    kind = data_cfg["kind"]
    if kind == "blobs":
        sizes = {"train": data_cfg["n_train"], "val": data_cfg["n_val"], "test": data_cfg["n_test"]}
        offsets = {"train": 0, "val": 1, "test": 2}
        if split not in sizes:
            raise DataError(f"unknown split {split!r}")
        return make_blobs(sizes[split], seed=data_cfg["seed"] + offsets[split])
    if kind in ("digits", "directory"):
        path = Path(data_cfg["path"]) if kind == "directory" else DIGITS_DIR
        if kind == "directory" and not data_cfg["path"]:
            raise DataError("data.path is required for kind = 'directory'")
        return load_image_dir(path, split)
    raise DataError(f"unknown dataset kind {kind!r}")


def build_model(model_cfg: dict, data: Dataset) -> Network:
    arch = model_cfg["arch"]
    if arch == "mlp":
        sizes = list(model_cfg["sizes"])
        sizes[0], sizes[-1] = int(np.prod(data.x.shape[1:])), data.num_classes
        return init_mlp(tuple(sizes), seed=model_cfg["seed"])
    if arch == "cnn":
        return init_cnn(tuple(data.x.shape[1:]), tuple(model_cfg["channels"]), data.num_classes,
                        model_cfg["kernel"], tuple(model_cfg["pools"]), seed=model_cfg["seed"])
    raise ValueError(f"unknown model arch {arch!r}")


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def post_train_config(cfg: dict) -> PostTrainConfig:
    return PostTrainConfig(**cfg["post_train"])


# ---------------------------------------------------------------------------
# scheme preparation

@dataclass
class PreparedSchemes:
    models: dict[str, Network]
    splits: dict[str, Dataset]
    train_history: list = field(default_factory=list)
    post_history: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def derive_scheme(net: Network, scheme: str, train: Dataset, val: Dataset | None = None,
                  slope: float = act.DEFAULT_SLOPE, granularity: str = "element",
                  post: PostTrainConfig | None = None, history: list | None = None) -> Network:
    """Turn a trained ReLU network into one protection scheme."""
    if scheme == "unprotected":
        return relu_variant(net)
    if scheme in ("gbrelu_squash", "gbrelu_clamp"):
        mode = "squash_to_zero" if scheme == "gbrelu_squash" else "clamp_to_bound"
        return with_global_bounds(net, act.layer_global_bounds(net, train.x), mode)
    if scheme == "fitact":
        fit = modify_architecture(net, train, slope, granularity)
        return post_train_bounds(fit, train, post or PostTrainConfig(), validation=val, history=history)
    raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")


def prepare_schemes(cfg: dict, schemes=SCHEMES) -> PreparedSchemes:
    """Train a ReLU network from ``cfg`` and derive each requested scheme."""
    splits = {s: load_split(cfg["data"], s) for s in ("train", "val", "test")}
    net = build_model(cfg["model"], splits["train"])
    train_hist, post_hist = [], []
    net = train_accuracy(net, splits["train"], train_config(cfg), history=train_hist)
    models = {}
    for scheme in schemes:
        models[scheme] = derive_scheme(net, scheme, splits["train"], splits["val"],
                                       cfg["modify"]["slope"], cfg["modify"]["granularity"],
                                       post_train_config(cfg), post_hist)
    meta = {"slope": cfg["modify"]["slope"], "zeta": cfg["post_train"]["zeta"],
            "delta": cfg["post_train"]["delta"], "granularity": cfg["modify"]["granularity"]}
    return PreparedSchemes(models, splits, train_hist, post_hist, meta)


# ---------------------------------------------------------------------------
# campaigns

@dataclass
class ExperimentSpec:
    """One fault campaign.

    ``models`` maps each scheme to a model file; in-memory networks can be
    passed to :func:`run_campaign` instead. ``scope_layers`` restricts faults
    to the buffers of those layers (empty = whole census).
    """

    schemes: tuple[str, ...]
    fault_rates: tuple[float, ...]
    trials_per_rate: int = 100
    seed: int = 0
    data: dict = field(default_factory=lambda: {"kind": "blobs"})
    eval_split: str = "test"
    models: dict = field(default_factory=dict)
    scope_layers: tuple[int, ...] = ()
    include_bounds: bool = True
    workers: int = 1
    fault_log_dir: str | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.schemes = tuple(self.schemes)
        self.fault_rates = tuple(float(r) for r in self.fault_rates)
        self.scope_layers = tuple(self.scope_layers)
        if not self.schemes:
            raise ValueError("at least one scheme is required")
        for s in self.schemes:
            if s not in SCHEMES:
                raise ValueError(f"unknown scheme {s!r}; choose from {SCHEMES}")
        if not self.fault_rates:
            raise ValueError("fault_rates must be non-empty")
        if any(not 0.0 <= r <= 1.0 for r in self.fault_rates):
            raise ValueError("fault rates must lie in [0, 1]")
        if self.trials_per_rate < 1:
            raise ValueError("trials_per_rate must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def rates_for_flips(net: Network, expected_flips) -> tuple[float, ...]:
    """Per-bit rates that give ``expected_flips`` flips on average in ``net``."""
    bits = sum(c[2] for c in parameter_census(net))
    return tuple(float(f) / bits for f in expected_flips)


def trial_seed(campaign_seed: int, rate_index: int, trial: int) -> int:
    return int(np.random.SeedSequence([campaign_seed, rate_index, trial]).generate_state(1)[0])


def describe(samples) -> dict:
    a = np.asarray(samples, dtype=np.float64)
    q1, med, q3 = np.percentile(a, [25, 50, 75])
    return {"n": int(a.size), "mean": float(a.mean()), "std": float(a.std()),
            "min": float(a.min()), "max": float(a.max()),
            "q1": float(q1), "median": float(med), "q3": float(q3)}


@dataclass
class CampaignReport:
    """Samples and summary statistics per (scheme, fault rate).

    ``std`` is the population standard deviation; quartiles use linear
    interpolation.
    """

    samples: dict[tuple[str, float], list[tuple[int, int, float]]]  # (trial, seed, accuracy)
    clean_accuracy: dict[str, float]
    metadata: dict = field(default_factory=dict)

    def accuracies(self, scheme: str, rate: float) -> np.ndarray:
        return np.array([a for _, _, a in self.samples[(scheme, rate)]])

    def mean(self, scheme: str, rate: float) -> float:
        return float(self.accuracies(scheme, rate).mean())

    def cells(self) -> list[dict]:
        return [{"scheme": s, "fault_rate": r, **describe([a for _, _, a in v])}
                for (s, r), v in self.samples.items()]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for (s, r), rows in self.samples.items():
            for trial, seed, acc in rows:
                w.writerow([s, repr(r), trial, seed, repr(acc)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"clean_accuracy": self.clean_accuracy, "cells": self.cells(), "metadata": self.metadata}

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "samples.csv").write_text(self.csv_text())
        (out / "report.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return out / "report.json", out / "samples.csv"


def read_samples_csv(path) -> dict[tuple[str, float], list[float]]:
    out: dict = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.setdefault((row["scheme"], float(row["fault_rate"])), []).append(float(row["accuracy"]))
    return out


def _load_models(spec: ExperimentSpec, nets: dict | None) -> dict[str, Network]:
    nets = dict(nets or {})
    for scheme in spec.schemes:
        if scheme in nets:
            continue
        path = spec.models.get(scheme)
        if not path:
            raise modelfile.ModelFileError(f"no model given for scheme {scheme!r}")
        nets[scheme] = modelfile.load(path)
    return nets


def run_campaign(spec: ExperimentSpec, nets: dict[str, Network] | None = None,
                 eval_set: Dataset | None = None) -> CampaignReport:
    """Evaluate every scheme at every rate over ``trials_per_rate`` paired trials.

    Models and data are loaded (and errors raised) before any trial runs.
    """
    nets = _load_models(spec, nets)
    if eval_set is None:
        eval_set = load_split(spec.data, spec.eval_split)
    started = time.time()
    clean = {s: evaluate_accuracy(nets[s], eval_set) for s in spec.schemes}
    jobs = []
    for scheme in spec.schemes:
        net = nets[scheme]
        census = parameter_census(net)
        scope = layer_scope(net, spec.scope_layers) if spec.scope_layers else None
        for ri, rate in enumerate(spec.fault_rates):
            for t in range(spec.trials_per_rate):
                jobs.append((scheme, net, census, scope, ri, rate, t))

    def one(job):
        scheme, net, census, scope, ri, rate, t = job
        seed = trial_seed(spec.seed, ri, t)
        trial = sample_faults(FaultModel(rate, seed, scope, spec.include_bounds), census)
        if spec.fault_log_dir:
            write_fault_log(trial, Path(spec.fault_log_dir) / f"{scheme}_r{ri}_t{t}.log")
        return seed, run_trial(net, trial, eval_set)

    if spec.fault_log_dir:
        Path(spec.fault_log_dir).mkdir(parents=True, exist_ok=True)
    if spec.workers > 1:
        with ThreadPoolExecutor(spec.workers) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]

    samples: dict = {}
    for (scheme, _, _, _, _, rate, t), (seed, acc) in zip(jobs, results):
        samples.setdefault((scheme, rate), []).append((t, seed, acc))
    meta = {
        "seed": spec.seed, "trials_per_rate": spec.trials_per_rate,
        "fault_rates": list(spec.fault_rates), "schemes": list(spec.schemes),
        "scope_layers": list(spec.scope_layers), "include_bounds": spec.include_bounds,
        "bits": {s: sum(c[2] for c in parameter_census(nets[s])) for s in spec.schemes},
        "slopes": {s: sorted({float(l.activation.slope) for l in nets[s].layers
                              if l.activation.kind == "fitrelu"}) for s in spec.schemes},
        **spec.metadata,
        "timestamps": {"started": started, "finished": time.time()},
    }
    return CampaignReport(samples, clean, meta)


# ---------------------------------------------------------------------------
# global-bound sweep

def sweep_global_bound(net: Network, layer_index: int, bound_values, fault_rate: float,
                       trials: int, eval_set: Dataset, seed: int = 0, scope_layers=None,
                       mode: str = "squash_to_zero") -> list[dict]:
    """Clean and mean faulted accuracy with a global bound on one hidden layer.

    Every other hidden layer keeps plain ReLU. Faults hit the buffers of
    ``scope_layers`` (default: the first layer and ``layer_index``), and the
    same trial seeds are used for every bound value.
    """
    base = relu_variant(net)
    if layer_index not in hidden_layer_indices(base):
        raise IndexError(f"layer {layer_index} is not a hidden parametric layer "
                         f"(hidden layers: {hidden_layer_indices(base)})")
    if scope_layers is None or len(scope_layers) == 0:
        scope_layers = sorted({hidden_layer_indices(base)[0], layer_index})
    rows = []
    for value in bound_values:
        guarded = with_global_bounds(base, {layer_index: float(value)}, mode, layers_only=[layer_index])
        census = parameter_census(guarded)
        scope = layer_scope(guarded, scope_layers)
        accs = [run_trial(guarded, sample_faults(FaultModel(fault_rate, trial_seed(seed, 0, t), scope), census),
                          eval_set) for t in range(trials)]
        rows.append({"bound": float(value), "stored_bound": float(act_bound(guarded, layer_index)),
                     "clean_accuracy": evaluate_accuracy(guarded, eval_set),
                     "mean_faulted_accuracy": float(np.mean(accs)), "std_faulted_accuracy": float(np.std(accs))})
    return rows


def act_bound(net: Network, layer_index: int) -> float:
    return float(decode_array(net.layers[layer_index].bounds).reshape(-1)[0])


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# neuron maxima

@dataclass
class Histogram:
    layer: int
    maxima: np.ndarray
    edges: np.ndarray
    counts: np.ndarray

    @property
    def cv(self) -> float:
        m = self.maxima.mean()
        return float(self.maxima.std() / m) if m > 0 else 0.0

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("bin_low", "bin_high", "count"))
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            w.writerow((repr(float(lo)), repr(float(hi)), int(c)))
        return buf.getvalue()


def neuron_max_histogram(net: Network, layer_index: int, dataset: Dataset, bins: int = 20) -> Histogram:
    """Per-neuron maximum ReLU output of one hidden layer over ``dataset``, binned.

    Maxima are floored at ``activations.BOUND_FLOOR`` exactly as calibration
    does, so the largest value equals the layer's global calibration bound.
    """
    if layer_index not in hidden_layer_indices(net):
        raise IndexError(f"layer {layer_index} is not a hidden parametric layer")
    maxima = np.maximum(act.neuron_maxima(net, dataset.x)[layer_index], act.BOUND_FLOOR).reshape(-1)
    lo, hi = float(maxima.min()), float(maxima.max())
    if lo == hi:
        return Histogram(layer_index, maxima, np.array([lo, hi]), np.array([maxima.size]))
    counts, edges = np.histogram(maxima, bins=bins, range=(lo, hi))
    return Histogram(layer_index, maxima, edges, counts)


# ---------------------------------------------------------------------------
# overhead

@dataclass
class OverheadReport:
    """Inference time (median wall seconds) and model-file bytes per scheme.

    Overheads are ``(scheme - baseline) / baseline`` against ``baseline``.
    ``predicted_extra_bytes`` is 4 bytes per stored bound word.
    """

    baseline: str
    runtime: dict[str, float]
    file_bytes: dict[str, int]
    reps: int
    warmup: int
    batch: int
    bound_words: dict[str, int]

    @property
    def runtime_overhead(self) -> dict[str, float]:
        b = self.runtime[self.baseline]
        return {s: (t - b) / b for s, t in self.runtime.items()}

    @property
    def memory_overhead(self) -> dict[str, float]:
        b = self.file_bytes[self.baseline]
        return {s: (n - b) / b for s, n in self.file_bytes.items()}

    @property
    def predicted_extra_bytes(self) -> dict[str, int]:
        return {s: 4 * n for s, n in self.bound_words.items()}

    @property
    def framing_slack_bytes(self) -> dict[str, int]:
        b = self.file_bytes[self.baseline]
        return {s: self.file_bytes[s] - b - self.predicted_extra_bytes[s] for s in self.file_bytes}

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(runtime_overhead=self.runtime_overhead, memory_overhead=self.memory_overhead,
                 predicted_extra_bytes=self.predicted_extra_bytes,
                 framing_slack_bytes=self.framing_slack_bytes)
        return d


def measure_overhead(nets: dict[str, Network], x: np.ndarray, reps: int = 30, warmup: int = 5,
                     baseline: str = "unprotected") -> OverheadReport:
    """Median forward-pass wall time over ``reps`` timed runs after ``warmup`` untimed ones.

    Schemes are timed round-robin so drift in machine load hits all of them alike.
    """
    if baseline not in nets:
        raise ValueError(f"baseline scheme {baseline!r} missing")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    for _ in range(warmup):
        for net in nets.values():
            forward(net, x)
    times = {s: [] for s in nets}
    for _ in range(reps):
        for s, net in nets.items():
            t0 = time.perf_counter()
            forward(net, x)
            times[s].append(time.perf_counter() - t0)
    return OverheadReport(
        baseline=baseline,
        runtime={s: float(np.median(v)) for s, v in times.items()},
        file_bytes={s: len(modelfile.to_bytes(n)) for s, n in nets.items()},
        reps=reps,
        warmup=warmup,
        batch=len(x),
        bound_words={s: sum(l.bounds.size for l in n.layers if l.bounds is not None) for s, n in nets.items()},
    )
