import csv

import pytest

from misodice import cli, data, verify
from misodice.phase1 import SplitResult


def _main(argv):
    return cli.main([str(a) for a in argv])


SMALL = """\
dataset: {n_expert: 12, n_poor: 24, horizon: 6}
preference: {n_pairs: 100}
phase1: {steps: 30, k: 12}
phase2: {disc_steps: 30, value_steps: 30, policy_steps: 30, log_every: 10}
eval: {episodes: 8, seeds: 2}
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "small.yaml"
    cfg.write_text(SMALL)
    assert _main(["gen-data", "--config", cfg, "--out", d / "data.bin"]) == 0
    assert _main(["label", "--config", cfg, "--data", d / "data.bin", "--out", d / "split.json"]) == 0
    assert _main(["train", "--config", cfg, "--data", d / "data.bin", "--manifest", d / "split.json",
                  "--out-dir", d / "miso"]) == 0
    return d, cfg


def test_pipeline_artifacts(run):
    d, _ = run
    assert len(data.load(d / "data.bin")) == 36
    split = SplitResult.from_text((d / "split.json").read_text())
    assert len(split.expert_ids) == 12 and len(split.mix_ids) == 24
    assert (d / "split.json.model").exists()
    for name in ("disc.ckpt", "values.ckpt", "policy.ckpt", "metrics.csv"):
        assert (d / "miso" / name).exists()
    rows = list(csv.DictReader(open(d / "miso" / "metrics.csv")))
    assert {r["stage"] for r in rows} == {"discriminator", "values", "policy"}


@pytest.mark.parametrize("flags", [["--method", "bc", "--beta", "0.5"], ["--method", "indd"],
                                   ["--method", "vdn"], ["--method", "misodice", "--mixer", "two-layer"]])
def test_other_methods_train(run, flags):
    d, cfg = run
    out = d / ("m" + "-".join(flags).replace(".", ""))
    assert _main(["train", "--config", cfg, "--data", d / "data.bin", "--manifest", d / "split.json",
                  "--out-dir", out, *flags]) == 0
    assert (out / "policy.ckpt").exists()


def test_phase1_greedy_and_eval(run, capsys):
    d, cfg = run
    out = d / "greedy"
    assert _main(["train", "--config", cfg, "--data", d / "data.bin", "--manifest", d / "split.json",
                  "--out-dir", out, "--method", "phase1-greedy", "--phase1-model", d / "split.json.model"]) == 0
    assert _main(["eval", "--config", cfg, "--policy", out / "policy.ckpt", "--out", out / "eval.csv"]) == 0
    assert "return" in capsys.readouterr().out
    assert len((out / "eval.csv").read_text().splitlines()) == 3


def test_eval_expert(run, capsys):
    _, cfg = run
    assert _main(["eval", "--config", cfg, "--expert"]) == 0
    assert "exact" in capsys.readouterr().out


def test_gen_data_is_deterministic(run, tmp_path):
    d, cfg = run
    assert _main(["gen-data", "--config", cfg, "--out", tmp_path / "again.bin"]) == 0
    assert (tmp_path / "again.bin").read_bytes() == (d / "data.bin").read_bytes()
    assert _main(["gen-data", "--config", cfg, "--seed", "1", "--out", tmp_path / "other.bin"]) == 0
    assert (tmp_path / "other.bin").read_bytes() != (d / "data.bin").read_bytes()


@pytest.mark.parametrize("argv", [
    ["train", "--method", "bc"],                                  # beta missing
    ["train", "--method", "indd", "--beta", "0.5"],               # beta not allowed
    ["train", "--method", "bc", "--beta", "2"],
    ["train", "--method", "phase1-greedy"],
    ["train", "--alpha", "-1"],
    ["train", "--mixer", "two-layer", "--config", "missing.yaml"],
])
def test_config_errors_exit_2(run, argv):
    d, cfg = run
    if "--config" not in argv:
        argv = argv + ["--config", str(cfg)]
    argv = argv + ["--data", d / "data.bin", "--manifest", d / "split.json", "--out-dir", d / "bad"]
    assert _main(argv) == 2
    assert not (d / "bad").exists()


def test_bad_inputs_exit_2(run, tmp_path):
    d, cfg = run
    corrupt = tmp_path / "corrupt.bin"
    raw = bytearray((d / "data.bin").read_bytes())
    raw[100] ^= 1
    corrupt.write_bytes(bytes(raw))
    assert _main(["label", "--config", cfg, "--data", corrupt, "--out", tmp_path / "s.json"]) == 2
    assert _main(["label", "--config", cfg, "--data", d / "data.bin", "--topk", "99",
                  "--out", tmp_path / "s.json"]) == 2
    assert not (tmp_path / "s.json").exists()
    assert _main(["eval", "--config", cfg, "--policy", d / "data.bin"]) == 2
    assert _main(["eval", "--config", cfg]) == 2
    assert _main(["inspect", tmp_path / "nothing"]) == 2


def test_unreachable_labeller_exits_2(run, tmp_path):
    d, cfg = run
    assert _main(["label", "--config", cfg, "--data", d / "data.bin", "--provider", "http",
                  "--endpoint", "http://127.0.0.1:9/label", "--n-pairs", "1", "--out", tmp_path / "s.json"]) == 2
    assert not (tmp_path / "s.json").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the run is forced to overflow
def test_divergence_exits_3_without_partial_artifacts(run, tmp_path):
    d, _ = run
    cfg = tmp_path / "hot.yaml"
    cfg.write_text(SMALL.replace("log_every: 10}", "log_every: 10, lr_value: 1.0e+300}"))
    out = tmp_path / "out"
    assert _main(["train", "--config", cfg, "--data", d / "data.bin", "--manifest", d / "split.json",
                  "--out-dir", out]) == 3
    assert not out.exists() or not any(out.iterdir())


def test_verify_exit_codes(monkeypatch, capsys):
    ok = verify.CheckResult("x", True, 0.0, 1.0)
    monkeypatch.setattr(verify, "run_suite", lambda: [ok])
    assert _main(["verify"]) == 0
    monkeypatch.setattr(verify, "run_suite", lambda: [ok, verify.CheckResult("y", False, 2.0, 1.0)])
    assert _main(["verify"]) == 4
    assert "FAIL" in capsys.readouterr().out


def test_plot_aggregates_runs(run, tmp_path):
    d, _ = run
    m = d / "miso" / "metrics.csv"
    assert _main(["plot", m, m, "--out", tmp_path / "curves.csv"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "curves.csv")))
    n_metric_rows = len(list(csv.DictReader(open(m))))
    assert len(rows) == n_metric_rows
    assert all(r["n_runs"] == "2" and float(r["std"]) == 0.0 for r in rows)
    assert _main(["plot", d / "split.json", "--out", tmp_path / "x.csv"]) == 2


def test_inspect_every_artifact(run, capsys):
    d, _ = run
    for p in (d / "data.bin", d / "miso" / "policy.ckpt", d / "split.json"):
        assert _main(["inspect", p]) == 0
    out = capsys.readouterr().out
    assert "n_trajectories: 36" in out and "checkpoint" in out and "split manifest" in out
