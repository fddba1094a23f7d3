import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fitact.activations import BoundStore
from fitact.data import make_blobs
from fitact.faultsim import (
    FaultError, FaultModel, FaultTrial, apply_faults, layer_scope, read_fault_log,
    run_trial, run_trials, sample_faults, write_fault_log,
)
from fitact.network import parameter_census, parameter_digest, with_bounds
from fitact.numerics import BitFlipEvent
from fitact.workloads import init_mlp


@pytest.fixture(scope="module")
def fit_mlp():
    net = init_mlp((2, 6, 5, 3), seed=0)
    return with_bounds(net, BoundStore({0: np.full(6, 2.0), 1: np.full(5, 3.0)}))


def total_bits(census):
    return sum(c[2] for c in census)


class TestSampling:
    def test_rate_zero_and_one(self, fit_mlp):
        census = parameter_census(fit_mlp)
        assert len(sample_faults(FaultModel(0.0, 1), census)) == 0
        full = sample_faults(FaultModel(1.0, 1), census)
        assert len(full) == total_bits(census)
        flipped = apply_faults(fit_mlp, full)
        for (_, a), (_, b) in zip(fit_mlp.buffers(), flipped.buffers()):
            assert np.array_equal(b, ~a)

    def test_same_seed_same_events(self, fit_mlp):
        census = parameter_census(fit_mlp)
        a = sample_faults(FaultModel(0.01, 42), census)
        b = sample_faults(FaultModel(0.01, 42), census)
        c = sample_faults(FaultModel(0.01, 43), census)
        assert a.events == b.events and a.events != c.events

    def test_events_distinct_and_in_range(self, fit_mlp):
        census = parameter_census(fit_mlp)
        sizes = {bid: n for bid, n, _ in census}
        trial = sample_faults(FaultModel(0.2, 5), census)
        keys = [(e.target_id, e.element_index, e.bit_position) for e in trial.events]
        assert len(set(keys)) == len(keys)
        assert all(e.element_index < sizes[e.target_id] for e in trial.events)

    def test_mean_flip_count(self, fit_mlp):
        census = parameter_census(fit_mlp)
        bits = total_bits(census)
        p = 3e-3
        counts = [len(sample_faults(FaultModel(p, s), census)) for s in range(4000)]
        assert np.mean(counts) == pytest.approx(bits * p, rel=0.05)

    def test_scope_restricts_targets(self, fit_mlp):
        census = parameter_census(fit_mlp)
        scope = layer_scope(fit_mlp, [1])
        assert set(scope) == {"1.weight", "1.bias", "1.bound"}
        trial = sample_faults(FaultModel(0.05, 0, scope), census)
        assert trial.events and all(e.target_id.startswith("1.") for e in trial.events)
        no_bounds = sample_faults(FaultModel(0.2, 0, include_bounds=False), census)
        assert all(not e.target_id.endswith("bound") for e in no_bounds.events)
        with pytest.raises(FaultError):
            FaultModel(0.1, scope=("9.weight",)).buffers(census)

    def test_rate_validated(self):
        with pytest.raises(ValueError):
            FaultModel(1.5)


class TestApplication:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-4, 0.05))
    def test_involution_and_isolation(self, fit_mlp, seed, rate):
        before = parameter_digest(fit_mlp, ("weight", "bias", "bound"))
        trial = sample_faults(FaultModel(rate, seed), parameter_census(fit_mlp))
        once = apply_faults(fit_mlp, trial)
        twice = apply_faults(once, trial)
        assert twice == fit_mlp
        assert parameter_digest(fit_mlp, ("weight", "bias", "bound")) == before
        assert (once == fit_mlp) == (len(trial) == 0)

    def test_bad_events(self, fit_mlp):
        with pytest.raises(FaultError):
            apply_faults(fit_mlp, FaultTrial(0, [BitFlipEvent("7.weight", 0, 0)]))
        with pytest.raises(FaultError):
            apply_faults(fit_mlp, FaultTrial(0, [BitFlipEvent("0.bias", 6, 0)]))
        with pytest.raises(ValueError):
            BitFlipEvent("0.bias", 0, 32)

    def test_run_trials_leaves_net_alone(self, fit_mlp):
        data = make_blobs(200, num_classes=3, seed=0)
        before = parameter_digest(fit_mlp, ("weight", "bias", "bound"))
        res = run_trials(fit_mlp, FaultModel(1e-2), range(5), data)
        assert len(res) == 5 and all(0 <= acc <= 1 for _, acc in res)
        assert parameter_digest(fit_mlp, ("weight", "bias", "bound")) == before
        assert run_trial(fit_mlp, res[3][0], data) == res[3][1]


class TestLog:
    def test_round_trip_replays_identically(self, fit_mlp, tmp_path):
        data = make_blobs(200, num_classes=3, seed=0)
        trial = sample_faults(FaultModel(5e-3, 77), parameter_census(fit_mlp))
        write_fault_log(trial, tmp_path / "t.log")
        back = read_fault_log(tmp_path / "t.log")
        assert back.events == trial.events and back.seed == 77 and back.rate == 5e-3
        assert apply_faults(fit_mlp, back) == apply_faults(fit_mlp, trial)
        assert run_trial(fit_mlp, back, data) == run_trial(fit_mlp, trial, data)

    @pytest.mark.parametrize("line", ["0.weight 1", "0.gamma 0 1", "0.weight 0 40", "x.weight 0 1"])
    def test_malformed_lines(self, tmp_path, line):
        (tmp_path / "bad.log").write_text(f"# fitact fault log v1\n{line}\n")
        with pytest.raises(FaultError, match=":2:"):
            read_fault_log(tmp_path / "bad.log")
