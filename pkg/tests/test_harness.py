import json
import math

import numpy as np
import pytest

from hybridcl import cli
from hybridcl import harness as hx
from hybridcl.harness import (ConfigError, ExperimentConfig, RunFailure, RunRecord, aggregate, emit_plot_data,
                              load_config, load_records, parse_config_text, read_plot_data, run_experiment)
from hybridcl.metrics import CHANNELS, ResultsMatrix, bwt
from hybridcl.synth import load_task
from audit import Recorder, instrument

TINY = dict(num_tasks=2, hidden_dim=4, train_clean=4, train_noisy=2, val_clean=1, val_noisy=1,
            test_clean=2, test_noisy=2, u_max=4, learning_rate=5e-3)


def tiny(**kw):
    return ExperimentConfig(**{**TINY, **kw}).validate()


def write_cfg(path, cfg_dict):
    path.write_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in cfg_dict.items()))
    return path


def test_defaults_and_validation():
    cfg = ExperimentConfig()
    assert (cfg.num_tasks, cfg.w_ctc, cfg.learning_rate, cfg.batch_size) == (5, 0.3, 1e-4, 8)
    assert (cfg.lambda_ewc, cfg.gamma, cfg.lambda_mas, cfg.alpha_ctx, cfg.alpha_kd) == (10, 1.0, 1, 0.3, 0.1)
    for bad in (dict(method="replay"), dict(num_tasks=10), dict(alpha_kd=2.0), dict(epochs_per_task=0),
                dict(task_permutation=(1, 1, 2, 3, 4)), dict(test_noisy=0)):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad).validate()


def test_parse_config_text():
    cfg = parse_config_text("# comment\nmethod = lwf   # trailing\nepochs_per_task = 5\n"
                            "learning_rate = 1e-3\nseeds = [1, 2]\ndistill_kind = \"mse\"\n")
    assert (cfg.method, cfg.epochs_per_task, cfg.learning_rate, cfg.seeds, cfg.distill_kind) == \
        ("lwf", 5, 1e-3, (1, 2), "mse")
    for text in ("bogus_key = 1\n", "epochs_per_task = 1.5\n", "no equals sign\n", "method = a\nmethod = b\n"):
        with pytest.raises(ConfigError):
            parse_config_text(text)


def test_config_round_trip_and_missing_file(tmp_path):
    cfg = tiny(task_permutation=(2, 1), method="mas")
    path = tmp_path / "c.cfg"
    path.write_text(hx.format_config(cfg))
    assert load_config(path) == cfg
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_shipped_configs_parse():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    for path in root.glob("*.cfg"):
        load_config(path)


def test_run_shape_and_persistence(tmp_path):
    cfg = tiny(num_tasks=3)
    rec = run_experiment(cfg, run_dir=tmp_path / "run")
    assert rec.complete and rec.error is None
    assert len(list(rec.matrix.cells())) == 6
    assert all(set(v) == set(CHANNELS) for _, _, v in rec.matrix.cells())
    assert sorted(rec.loss_curves) == [1, 2, 3] and all(len(c) == 1 for c in rec.loss_curves.values())
    assert {p.name for p in (tmp_path / "run").iterdir()} >= {"results.json", "model.ckpt", "state.ckpt"}
    back = RunRecord.load(tmp_path / "run" / "results.json")
    assert back.matrix == rec.matrix and back.complete


def test_run_is_deterministic():
    cfg = tiny(method="lwf")
    a = run_experiment(cfg, persist=False)
    b = run_experiment(cfg, persist=False)
    assert a.matrix == b.matrix and a.loss_curves == b.loss_curves


def test_seed_changes_results():
    a = run_experiment(tiny(global_seed=0), persist=False)
    b = run_experiment(tiny(global_seed=1), persist=False)
    assert a.loss_curves != b.loss_curves


def test_cells_written_once_in_protocol_order(monkeypatch):
    writes = []
    original = ResultsMatrix.set_cell

    def spy(self, k, i, values):
        writes.append((k, i))
        original(self, k, i, values)

    monkeypatch.setattr(ResultsMatrix, "set_cell", spy)
    run_experiment(tiny(num_tasks=3), persist=False)
    assert writes == [(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3)]


@pytest.mark.parametrize("method", ["naive", "ewc", "mas", "lwf"])
def test_training_reads_only_current_task(method):
    rec = Recorder()
    cfg = tiny(num_tasks=3, method=method)
    tasks = instrument(hx.build_tasks(cfg), rec)
    run_experiment(cfg, tasks=tasks, on_phase=rec.on_phase, persist=False)
    assert rec.violations() == {}
    assert all(rec.reads[("train", k, k, "train")] > 0 for k in (1, 2, 3))
    assert not any(key[3] != "train" for key in rec.reads if key[0] == "train")
    assert any(key[0] == "eval" and key[2] < key[1] for key in rec.reads)


def test_io_failure_leaves_partial_record(tmp_path, monkeypatch):
    calls = {"n": 0}
    original = hx.evaluate_matrix_row

    def flaky(model, tasks, k, matrix=None):
        calls["n"] += 1
        if k == 2:
            raise OSError("disk full")
        return original(model, tasks, k, matrix)

    monkeypatch.setattr(hx, "evaluate_matrix_row", flaky)
    with pytest.raises(RunFailure):
        run_experiment(tiny(), run_dir=tmp_path / "r")
    rec = RunRecord.load(tmp_path / "r" / "results.json")
    assert not rec.complete and "disk full" in rec.error and rec.completed_tasks() == 1


def _record(K, seed=0, method="naive"):
    rng = np.random.default_rng(seed)
    m = ResultsMatrix(K)
    for k in range(1, K + 1):
        for i in range(1, k + 1):
            m.set_cell(k, i, {ch: float(rng.uniform(0, 1.2)) for ch in CHANNELS})
    cfg = ExperimentConfig(num_tasks=K, method=method, global_seed=seed).to_dict()
    return RunRecord(config=cfg, matrix=m, complete=True)


def test_plot_data_row_count_and_round_trip(tmp_path):
    rec = _record(2)
    n = emit_plot_data([rec], tmp_path / "p.csv")
    assert n == 24
    rows = read_plot_data(tmp_path / "p.csv")
    assert len(rows) == 24
    for r in rows:
        if r["metric"] == "wer":
            assert r["value"] == rec.matrix.get(r["k"], r["i_or_null"], r["channel"])
        elif r["metric"] == "bwt":
            assert r["value"] == bwt(rec.matrix, r["k"], r["channel"]) and r["i_or_null"] is None
    assert emit_plot_data([rec], tmp_path / "q.csv") == 24
    assert (tmp_path / "p.csv").read_bytes() == (tmp_path / "q.csv").read_bytes()


def test_plot_data_empty_and_mixed(tmp_path):
    assert emit_plot_data([], tmp_path / "e.csv") == 0
    assert (tmp_path / "e.csv").read_text().strip() == ",".join(hx.PLOT_COLUMNS)
    with pytest.raises(ValueError):
        emit_plot_data([_record(2), _record(3)], tmp_path / "m.csv")


def test_aggregate_envelope():
    rows = aggregate([_record(2, s) for s in range(3)])
    for r in rows:
        assert r["min"] <= r["mean"] <= r["max"] and r["n"] == 3
    assert {r["metric"] for r in rows} == {"current_wer", "avg_wer", "bwt"}


# -- CLI ---------------------------------------------------------------------

def test_cli_missing_config_exit_1(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.cfg")]) == 1
    assert "config error" in capsys.readouterr().err


def test_cli_bad_arguments_exit_1(tmp_path):
    cfg = write_cfg(tmp_path / "c.cfg", TINY)
    assert cli.main(["run"]) == 1
    assert cli.main(["run", "--config", str(cfg), "--method", "replay"]) == 1
    assert cli.main(["sweep", "--config", str(cfg), "--methods", "naive,replay"]) == 1


def test_cli_runtime_failure_exit_2(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path / "c.cfg", TINY)

    def boom(*a, **k):
        raise RunFailure("simulated")

    monkeypatch.setattr(cli, "run_experiment", boom)
    assert cli.main(["run", "--config", str(cfg)]) == 2


def test_cli_run_overrides(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.cfg", TINY)
    out = tmp_path / "r"
    assert cli.main(["run", "--config", str(cfg), "--seed", "3", "--method", "ewc", "--epochs", "2",
                     "--out", str(out)]) == 0
    rec = RunRecord.load(out / "results.json")
    assert (rec.config["global_seed"], rec.config["method"], rec.config["epochs_per_task"]) == (3, "ewc", 2)
    assert "ewc epochs=2 seed=3" in capsys.readouterr().out


def test_output_root_env_overrides_config(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path / "c.cfg", {**TINY, "output_dir": str(tmp_path / "ignored")})
    monkeypatch.setenv(hx.OUTPUT_ROOT_ENV, str(tmp_path / "env"))
    assert cli.main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "env" / "naive_e1_s0" / "results.json").exists()
    assert not (tmp_path / "ignored").exists()


@pytest.mark.slow
def test_cli_sweep_and_report(tmp_path, monkeypatch):
    monkeypatch.delenv(hx.OUTPUT_ROOT_ENV, raising=False)
    cfg = write_cfg(tmp_path / "c.cfg", {**TINY, "hidden_dim": 2, "train_clean": 2, "train_noisy": 1,
                                         "test_clean": 1, "test_noisy": 1, "output_dir": str(tmp_path / "runs")})
    assert cli.main(["sweep", "--config", str(cfg), "--methods", "naive,ewc,mas,lwf",
                     "--epochs", "1,2,5,10", "--seeds", "0,1,2", "--jobs", "2"]) == 0
    records = load_records(tmp_path / "runs")
    assert len(records) == 48
    keys = {(r.config["method"], r.config["epochs_per_task"], r.config["global_seed"]) for r in records}
    assert len(keys) == 48
    csv_path, summary, figs = tmp_path / "all.csv", tmp_path / "summary.csv", tmp_path / "figs"
    assert cli.main(["report", "--in", str(tmp_path / "runs"), "--out", str(csv_path),
                     "--summary", str(summary), "--figures", str(figs)]) == 0
    assert len(read_plot_data(csv_path)) == 48 * 24
    assert summary.exists() and sorted(p.suffix for p in figs.iterdir()) == [".png"] * 3


def test_cli_report_empty_dir(tmp_path):
    assert cli.main(["report", "--in", str(tmp_path), "--out", str(tmp_path / "x.csv")]) == 0
    assert read_plot_data(tmp_path / "x.csv") == []


def test_cli_gen_data_round_trip(tmp_path):
    cfg_path = write_cfg(tmp_path / "c.cfg", TINY)
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "data")]) == 0
    tasks = hx.build_tasks(load_config(cfg_path))
    for task in tasks:
        back = load_task(tmp_path / "data" / f"task_{task.task_id}.jsonl")
        for a, b in zip(task.train + task.test, back.train + back.test):
            assert a.targets == b.targets and np.array_equal(a.features, b.features)
