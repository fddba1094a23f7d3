import json
import subprocess
import sys

import pytest

from fitact.cli import EXIT_DATA, EXIT_MODEL, EXIT_USAGE, main

SMALL = ["--set", "model.sizes=[2, 16, 16, 4]", "--set", "train.epochs=6", "--set", "train.learning_rate=0.005",
         "--set", "data.n_train=600", "--set", "data.n_val=200", "--set", "data.n_test=300"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out.splitlines()[-1]) if out.strip() else None), err


@pytest.fixture(scope="module")
def models(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["train", *SMALL, "--out", str(root / "relu")]) == 0
    assert main(["calibrate", *SMALL, "--model", str(root / "relu/model.bin"), "--out", str(root / "cal")]) == 0
    assert main(["calibrate", *SMALL, "--set", "modify.global_mode='squash_to_zero'",
                 "--model", str(root / "relu/model.bin"), "--out", str(root / "gb")]) == 0
    assert main(["post-train", *SMALL, "--set", "post_train.zeta=0.5", "--set", "post_train.epochs=3",
                 "--set", "post_train.learning_rate=0.01",
                 "--model", str(root / "cal/model.bin"), "--out", str(root / "fit")]) == 0
    return root


def test_pipeline_outputs(models):
    lines = (models / "fit/metrics.jsonl").read_text().splitlines()
    rec = json.loads(lines[-1])
    assert {"epoch", "loss", "clean_accuracy", "mean_bound", "min_bound", "max_bound"} <= rec.keys()
    assert json.loads(lines[0])["loss"] is None  # epoch 0 has no training loss
    assert len((models / "relu/metrics.jsonl").read_text().splitlines()) == 6


def test_campaign_and_replay(models, capsys, tmp_path):
    spec = tmp_path / "s.toml"
    spec.write_text(f"""schema_version = 1
[data]
kind = "blobs"
n_test = 300
[campaign]
schemes = ["unprotected", "gbrelu_squash", "fitact"]
expected_flips = [1, 20]
trials_per_rate = 4
[campaign.models]
unprotected = "{models / 'relu/model.bin'}"
gbrelu_squash = "{models / 'gb/model.bin'}"
fitact = "{models / 'fit/model.bin'}"
""")
    code, summary, _ = run(capsys, "campaign", "--spec", str(spec), "--out", str(tmp_path / "r"), "--fault-logs")
    assert code == 0 and len(summary["cells"]) == 6
    body1 = (tmp_path / "r/samples.csv").read_text()
    assert body1.splitlines()[0] == "scheme,fault_rate,trial,seed,accuracy"
    assert json.loads((tmp_path / "r/report.json").read_text())["metadata"]["expected_flips"] == [1, 20]
    assert main(["campaign", "--spec", str(spec), "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r2/samples.csv").read_text() == body1

    row = [l.split(",") for l in body1.splitlines()[1:] if l.startswith("fitact")][-1]
    log = tmp_path / "r/faults/fitact_r1_t3.log"
    code, rep, _ = run(capsys, "replay", "--set", "data.n_test=300", "--model", str(models / "fit/model.bin"),
                       "--faults", str(log))
    assert code == 0 and repr(rep["accuracy"]) == row[4]


def test_sweep_histogram_overhead(models, capsys, tmp_path):
    relu = str(models / "relu/model.bin")
    code, s, _ = run(capsys, "sweep", "--set", "data.n_test=300", "--set", "sweep.layer=1",
                     "--set", "sweep.bounds=[1e-6, 2.0, 1e4]", "--set", "sweep.trials=2",
                     "--set", "sweep.expected_flips=5.0", "--model", relu, "--out", str(tmp_path))
    assert code == 0 and (tmp_path / "sweep.csv").read_text().count("\n") == 4
    code, h, _ = run(capsys, "histogram", *SMALL, "--set", "histogram.layer=0", "--model", relu, "--out", str(tmp_path))
    assert code == 0 and h["neurons"] == 16
    code, o, _ = run(capsys, "overhead", "--set", "overhead.reps=3", "--set", "overhead.warmup=1",
                     "--model-for", f"unprotected={relu}", "--model-for", f"fitact={models / 'fit/model.bin'}",
                     "--out", str(tmp_path))
    assert code == 0 and o["framing_slack_bytes"]["fitact"] == 0


def test_error_codes(models, capsys, tmp_path):
    code, _, err = run(capsys, "post-train", "--model", str(models / "relu/model.bin"), "--out", str(tmp_path))
    assert code == EXIT_MODEL and "run modify/calibrate first" in err
    bad = tmp_path / "bad.toml"
    bad.write_text("schema_version = 1\n[train\n")
    assert run(capsys, "train", "--config", str(bad))[0] == EXIT_USAGE
    assert run(capsys, "train", "--set", "train.nope=1")[0] == EXIT_USAGE
    assert run(capsys, "histogram", "--set", "data.kind='directory'", "--set", f"data.path='{tmp_path}'",
               "--model", str(models / "relu/model.bin"))[0] == EXIT_DATA
    assert run(capsys, "replay", "--model", str(tmp_path / "none.bin"), "--faults", "x")[0] == EXIT_MODEL
    with pytest.raises(SystemExit) as e:
        main(["campaign", "--no-such-flag"])
    assert e.value.code == EXIT_USAGE


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "fitact", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("train", "calibrate", "post-train", "campaign", "sweep", "histogram", "overhead", "replay"):
        assert name in out.stdout
