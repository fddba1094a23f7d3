"""Monte-Carlo bit flips in parameter memory.

A trial draws its flip count from Binomial(bits_in_scope, rate) and picks that
many distinct bit positions uniformly from the scope. Flips persist for the
whole evaluation of the trial. The pristine network is never touched: every
trial works on a private copy.

Fault logs are plain text, one event per line::

    # fitact fault log v1
    # seed=12345 rate=1e-05
    2.weight 117 30
    4.bias 3 31
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .network import Network, parse_buffer_id, parameter_census
from .numerics import WORD_BITS, BitFlipEvent, flip_bits_inplace
from .training import evaluate_accuracy

LOG_HEADER = "# fitact fault log v1"


class FaultError(ValueError):
    """An event does not fit the network it is applied to."""


@dataclass(frozen=True)
class FaultModel:
    """Per-bit flip probability over a set of census buffers.

    ``scope`` lists buffer ids (``None`` = every buffer in the census).
    ``include_bounds=False`` drops activation-bound buffers from the scope.
    """

    rate: float
    seed: int = 0
    scope: tuple[str, ...] | None = None
    include_bounds: bool = True

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"fault rate {self.rate} outside [0, 1]")

    def buffers(self, census) -> list[tuple[str, int, int]]:
        ids = {c[0] for c in census}
        if self.scope is not None:
            unknown = set(self.scope) - ids
            if unknown:
                raise FaultError(f"scope names buffers not in the census: {sorted(unknown)}")
        chosen = [c for c in census if self.scope is None or c[0] in self.scope]
        if not self.include_bounds:
            chosen = [c for c in chosen if parse_buffer_id(c[0])[1] != "bound"]
        return chosen


@dataclass
class FaultTrial:
    seed: int
    events: list[BitFlipEvent] = field(default_factory=list)
    rate: float | None = None

    def __len__(self):
        return len(self.events)


def layer_scope(net: Network, layer_indices) -> tuple[str, ...]:
    """Buffer ids belonging to the given layers."""
    wanted = set(layer_indices)
    return tuple(bid for bid, _ in net.buffers() if parse_buffer_id(bid)[0] in wanted)


def sample_faults(model: FaultModel, census) -> FaultTrial:
    """Draw one trial; identical (model, census) give identical events."""
    chosen = model.buffers(census)
    rng = np.random.default_rng(model.seed)
    sizes = np.array([c[2] for c in chosen], dtype=np.int64)
    total = int(sizes.sum())
    m = int(rng.binomial(total, model.rate)) if total else 0
    if m == 0:
        return FaultTrial(model.seed, [], model.rate)
    flat = np.sort(rng.choice(total, size=m, replace=False))
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    which = np.searchsorted(starts, flat, side="right") - 1
    local = flat - starts[which]
    events = [BitFlipEvent(chosen[b][0], int(o // WORD_BITS), int(o % WORD_BITS))
              for b, o in zip(which, local)]
    return FaultTrial(model.seed, events, model.rate)


def apply_faults(net: Network, trial: FaultTrial) -> Network:
    """Deep copy of ``net`` with every event's bit XOR-flipped."""
    out = net.copy()
    flip_events_inplace(out, trial.events)
    return out


def flip_events_inplace(net: Network, events) -> None:
    by_buffer: dict[str, tuple[list, list]] = {}
    for ev in events:
        try:
            buf = net.buffer(ev.target_id)
        except KeyError:
            raise FaultError(f"event {ev} targets unknown buffer") from None
        if ev.element_index >= buf.size:
            raise FaultError(f"event {ev} outside buffer of {buf.size} words")
        idx, bits = by_buffer.setdefault(ev.target_id, ([], []))
        idx.append(ev.element_index)
        bits.append(ev.bit_position)
    for bid, (idx, bits) in by_buffer.items():
        flip_bits_inplace(net.buffer(bid), idx, bits)


def run_trial(net: Network, trial: FaultTrial, eval_set: Dataset) -> float:
    """Accuracy of a faulted copy; ``net`` itself is left untouched."""
    return evaluate_accuracy(apply_faults(net, trial), eval_set)


def run_trials(net: Network, model: FaultModel, seeds, eval_set: Dataset) -> list[tuple[FaultTrial, float]]:
    census = parameter_census(net)
    results = []
    for s in seeds:
        trial = sample_faults(FaultModel(model.rate, int(s), model.scope, model.include_bounds), census)
        results.append((trial, run_trial(net, trial, eval_set)))
    return results


# ---------------------------------------------------------------------------
# fault logs

def write_fault_log(trial: FaultTrial, path) -> None:
    lines = [LOG_HEADER, f"# seed={trial.seed} rate={trial.rate!r}"]
    lines += [f"{e.target_id} {e.element_index} {e.bit_position}" for e in trial.events]
    Path(path).write_text("\n".join(lines) + "\n")


def read_fault_log(path) -> FaultTrial:
    seed, rate, events = 0, None, []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                if key == "seed":
                    seed = int(val)
                elif key == "rate" and val != "None":
                    rate = float(val)
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FaultError(f"{path}:{n}: expected 'buffer element bit', got {line!r}")
        try:
            parse_buffer_id(parts[0])
            events.append(BitFlipEvent(parts[0], int(parts[1]), int(parts[2])))
        except (KeyError, ValueError) as e:
            raise FaultError(f"{path}:{n}: {e}") from None
    return FaultTrial(seed, events, rate)
