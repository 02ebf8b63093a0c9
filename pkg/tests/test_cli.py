"""Config schema, artifact emission, and the command-line driver."""

import dataclasses
import json

import numpy as np
import pytest

from freshdistill.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_OK,
    EXIT_VERIFY,
    _rel_throughput,
    main,
    run_ablation,
    run_compare,
    run_lag_sweep,
)
from freshdistill.config import (
    EXAMPLE_CONFIG,
    ConfigError,
    load_config,
    parse_config,
    with_overrides,
    write_config_copy,
)
from freshdistill.metrics import (
    SummaryRow,
    build_summary,
    is_collapsed,
    read_metrics_jsonl,
    read_summary_csv,
    record_lines,
    runs_from_jsonl,
    summaries_from_jsonl,
    verify_artifacts,
    write_metrics_jsonl,
    write_summary_csv,
)
from freshdistill import plots
from freshdistill.env import make_task
from freshdistill.trainer import Trainer, TrainerConfig

BASE_CONFIG = """\
schema: 1
label: unit
task:
  family: tool-analog
  seed: 3
  vocab_size: 4
  horizon: 3
  observation_positions: [1]
  n_prompts: 4
  n_eval_prompts: 3
trainer:
  mode: f-opd
  steps: 20
  batch_size: 4
  lag: 2
  eval_every: 5
  buffer_capacity: 32
seeds: [0, 1]
"""


def write_config(tmp_path, text=BASE_CONFIG, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def tiny_runs(n_seeds=2, **cfg_kw):
    task = make_task("tool-analog", seed=3, vocab_size=4, horizon=3,
                     observation_positions=(1,), n_prompts=4, n_eval_prompts=3)
    kw = dict(mode="sync", steps=12, batch_size=4, eval_every=4,
              buffer_capacity=16)
    kw.update(cfg_kw)
    cfg = TrainerConfig(**kw)
    return task, cfg, [Trainer(cfg, task, seed=s).run() for s in range(n_seeds)]


# -- config schema ------------------------------------------------------------


def test_parse_config_minimal():
    cfg = parse_config(BASE_CONFIG)
    assert cfg.label == "unit"
    assert cfg.task.family == "tool-analog"
    assert cfg.trainer.mode == "f-opd"
    assert cfg.trainer.steps == 20
    assert cfg.seeds == (0, 1)
    assert cfg.out_dir is None
    assert cfg.source_text == BASE_CONFIG


def test_example_config_parses():
    cfg = parse_config(EXAMPLE_CONFIG)
    assert cfg.trainer.mode == "f-opd"
    assert cfg.out_dir == "runs/quick-fopd"


def test_schema_version_is_enforced():
    with pytest.raises(ConfigError, match="expected version 1"):
        parse_config(BASE_CONFIG.replace("schema: 1", "schema: 2"))
    with pytest.raises(ConfigError, match="expected version 1"):
        parse_config("task: {family: single-step}\ntrainer: {mode: sync}\n")


def test_unknown_keys_rejected_per_section():
    with pytest.raises(ConfigError, match="top level: unknown keys.*'typo'"):
        parse_config(BASE_CONFIG + "typo: 1\n")
    with pytest.raises(ConfigError, match="trainer: unknown keys"):
        parse_config(BASE_CONFIG.replace("  steps: 20", "  steps: 20\n  stepz: 9"))
    with pytest.raises(ConfigError, match="unknown task config keys"):
        parse_config(BASE_CONFIG.replace("  seed: 3", "  seed: 3\n  horizons: 2"))
    with pytest.raises(ConfigError, match="freshness: unknown keys"):
        parse_config(BASE_CONFIG + "freshness: {gamma: 1.0}\n")
    with pytest.raises(ConfigError, match="refresh: unknown keys"):
        parse_config(BASE_CONFIG + "refresh: {period: 10}\n")
    with pytest.raises(ConfigError, match="pipeline: unknown keys"):
        parse_config(BASE_CONFIG + "pipeline: {threads: 4}\n")


def test_sections_and_values_validated():
    with pytest.raises(ConfigError, match="task: section is required"):
        parse_config("schema: 1\ntrainer: {mode: sync}\n")
    with pytest.raises(ConfigError, match="trainer: section is required"):
        parse_config("schema: 1\ntask: {family: single-step}\n")
    with pytest.raises(ConfigError, match="trainer.mode: required"):
        parse_config("schema: 1\ntask: {family: single-step}\ntrainer: {steps: 5}\n")
    with pytest.raises(ConfigError, match="unknown mode"):
        parse_config(BASE_CONFIG.replace("mode: f-opd", "mode: turbo"))
    with pytest.raises(ConfigError, match="not valid YAML"):
        parse_config("schema: [unclosed")
    with pytest.raises(ConfigError, match="top level must be a mapping"):
        parse_config("- a\n- b\n")


def test_seed_forms():
    assert parse_config(BASE_CONFIG.replace("seeds: [0, 1]", "seeds: 3")).seeds == (0, 1, 2)
    assert parse_config(BASE_CONFIG.replace("seeds: [0, 1]\n", "")).seeds == (0,)
    with pytest.raises(ConfigError, match="seeds"):
        parse_config(BASE_CONFIG.replace("seeds: [0, 1]", "seeds: [0, 0]"))
    with pytest.raises(ConfigError, match="seeds"):
        parse_config(BASE_CONFIG.replace("seeds: [0, 1]", "seeds: [-1]"))
    with pytest.raises(ConfigError, match="seeds"):
        parse_config(BASE_CONFIG.replace("seeds: [0, 1]", "seeds: []"))


def test_overrides_apply_and_revalidate():
    cfg = parse_config(BASE_CONFIG)
    over = with_overrides(cfg, mode="async", lag=8, n_seeds=3)
    assert over.trainer.mode == "async"
    assert over.trainer.lag == 8
    assert over.trainer.buffer_capacity >= 9 * over.trainer.batch_size
    assert over.seeds == (0, 1, 2)
    with pytest.raises(ConfigError, match="sync mode forbids"):
        with_overrides(cfg, mode="sync", lag=4)


def test_load_config_and_copy(tmp_path):
    path = write_config(tmp_path)
    cfg = load_config(path)
    copy = write_config_copy(cfg, tmp_path / "out")
    assert copy.read_text() == path.read_text()
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")


# -- collapse rule --------------------------------------------------------------


def test_collapse_rule_cases():
    # crashed and stayed down through the tail window
    assert is_collapsed([(9, 1.0), (19, 0.3), (99, 0.2)], steps=100)
    # final recovered above 60% of peak
    assert not is_collapsed([(9, 1.0), (19, 0.3), (99, 0.95)], steps=100)
    # final is low, but the tail still touched 90% of peak
    assert not is_collapsed([(9, 1.0), (92, 0.95), (99, 0.2)], steps=100)
    # both tail points below 90%, final below 60%
    assert is_collapsed([(9, 1.0), (92, 0.85), (99, 0.2)], steps=100)
    # flat zero curve never counts as collapsed
    assert not is_collapsed([(9, 0.0), (99, 0.0)], steps=100)
    with pytest.raises(ValueError, match="no evaluation scores"):
        is_collapsed([], steps=100)


# -- jsonl and summary artifacts -------------------------------------------------


def test_record_lines_are_sorted_and_stable():
    _, _, results = tiny_runs(n_seeds=1)
    lines = record_lines(results[0], task="t", lag=0)
    assert len(lines) == 12
    row = json.loads(lines[0])
    assert list(row) == sorted(row)
    assert row["arm"] == "sync" and row["task"] == "t" and row["seed"] == 0
    assert lines == record_lines(results[0], task="t", lag=0)


def test_jsonl_roundtrip_rebuilds_runs(tmp_path):
    task, cfg, results = tiny_runs()
    path = write_metrics_jsonl(
        [("sync", task.name, 0, r) for r in results], tmp_path / "m.jsonl")
    rebuilt = runs_from_jsonl(path)
    assert set(rebuilt) == {(task.name, "sync", 0)}
    for orig, back in zip(results, rebuilt[(task.name, "sync", 0)]):
        assert back.records == orig.records
        assert back.evals == orig.evals
        assert back.final_score == orig.final_score
        assert back.peak_score == orig.peak_score
        assert back.refresh_count == orig.refresh_count


def test_summary_csv_roundtrip(tmp_path):
    task, cfg, results = tiny_runs()
    row = build_summary(results, task.name, 0, cfg.steps, rel_throughput=1.25)
    other = build_summary(results, task.name, 4, cfg.steps, mode="alt")
    path = write_summary_csv([row, other], tmp_path / "s.csv")
    back = read_summary_csv(path)
    assert back == [row, other]
    assert back[0].collapse_ratio == "0/2"
    assert back[1].rel_throughput is None


def test_artifact_cross_check_detects_tampering(tmp_path):
    task, cfg, results = tiny_runs()
    write_metrics_jsonl([("sync", task.name, 0, r) for r in results],
                        tmp_path / "metrics.jsonl")
    row = build_summary(results, task.name, 0, cfg.steps)
    write_summary_csv([row], tmp_path / "summary.csv")
    assert verify_artifacts(tmp_path) == []
    write_summary_csv([dataclasses.replace(row, final_mean=row.final_mean + 1e-6)],
                      tmp_path / "summary.csv")
    problems = verify_artifacts(tmp_path)
    assert problems and "final_mean" in problems[0]
    write_summary_csv([dataclasses.replace(row, mode="other")],
                      tmp_path / "summary.csv")
    assert "row keys differ" in verify_artifacts(tmp_path)[0]


def test_recomputed_summaries_match_built(tmp_path):
    task, cfg, results = tiny_runs()
    write_metrics_jsonl([("sync", task.name, 0, r) for r in results],
                        tmp_path / "metrics.jsonl")
    built = build_summary(results, task.name, 0, cfg.steps)
    recomputed = summaries_from_jsonl(tmp_path / "metrics.jsonl")
    assert len(recomputed) == 1
    got = recomputed[0]
    for name in ("final_mean", "final_std", "peak_mean", "peak_final_drop",
                 "mean_d_roll", "mean_d_sup"):
        assert getattr(got, name) == pytest.approx(getattr(built, name), abs=1e-12)
    assert got.collapse_count == built.collapse_count


# -- plots -----------------------------------------------------------------------


def test_plot_outputs_are_deterministic(tmp_path):
    _, _, results = tiny_runs()
    p1 = plots.learning_curves({"sync": results}, tmp_path / "a.svg")
    p2 = plots.learning_curves({"sync": results}, tmp_path / "b.svg")
    data = p1.read_bytes()
    assert data == p2.read_bytes()
    assert data.startswith(b"<?xml") and b"</svg>" in data
    assert b"Date" not in data[:400]


def test_lag_sweep_panels_files(tmp_path):
    _, _, runs_a = tiny_runs()
    _, _, runs_b = tiny_runs(mode="async", lag=2, buffer_capacity=16)
    sweep = {"fam": {0: runs_a, 2: runs_b}}
    paths = plots.lag_sweep_panels(sweep, tmp_path)
    names = sorted(p.name for p in paths)
    assert names == ["drift_vs_lag.svg", "entropy_vs_step.svg", "score_vs_lag.svg"]
    assert all(p.stat().st_size > 0 for p in paths)


# -- drivers ---------------------------------------------------------------------


def test_lag_sweep_driver_shape():
    cfg = parse_config(BASE_CONFIG)
    sweep = run_lag_sweep(cfg, lags=(0, 2), families=("single-step",))
    assert set(sweep) == {"single-step"}
    assert set(sweep["single-step"]) == {0, 2}
    assert all(len(v) == 2 for v in sweep["single-step"].values())


def test_compare_driver_runs_all_modes():
    cfg = parse_config(BASE_CONFIG)
    rows, by_mode = run_compare(cfg, lag=2)
    assert [r.mode for r in rows] == list(
        ("sync", "async", "async+hard-refresh", "async+lag-only", "f-opd"))
    assert rows[0].lag == 0 and all(r.lag == 2 for r in rows[1:])
    assert all(r.rel_throughput is not None for r in rows)
    sync_rel = rows[0].rel_throughput
    assert sync_rel == 1.0
    assert all(r.rel_throughput > 1.0 for r in rows[1:])


def test_ablation_ladder_reproduces_fopd():
    cfg = parse_config(BASE_CONFIG)
    rows, by_rung, identity = run_ablation(cfg, lag=2)
    assert identity
    assert [r.mode for r in rows] == ["async", "+relabel", "+weighting",
                                      "+anchor", "+adaptive-refresh", "f-opd"]
    last, full = by_rung["+adaptive-refresh"], by_rung["f-opd"]
    for a, b in zip(last, full):
        assert a.final_score == b.final_score
        assert a.refresh_count == b.refresh_count


def test_throughput_model_ordering():
    cfg = parse_config(BASE_CONFIG)
    r_sync = _rel_throughput(cfg, "sync", None)
    r_async = _rel_throughput(cfg, "async", None)
    r_hard = _rel_throughput(cfg, "async+hard-refresh", 10)
    r_fopd = _rel_throughput(cfg, "f-opd", 25)
    assert r_sync == 1.0
    assert r_async > r_fopd > r_hard > r_sync


# -- command line -----------------------------------------------------------------


def test_cmd_run_artifacts_and_determinism(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "arts"
    assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_OK
    assert (out / "config.yaml").read_text() == path.read_text()
    assert (out / "curves.svg").exists()
    assert verify_artifacts(out) == []
    first = (out / "metrics.jsonl").read_bytes()
    assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_OK
    assert (out / "metrics.jsonl").read_bytes() == first


def test_cmd_run_overrides(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "arts"
    assert main(["run", "--config", str(path), "--out", str(out),
                 "--mode", "async", "--lag", "4", "--seeds", "1"]) == EXIT_OK
    rows = read_summary_csv(out / "summary.csv")
    assert rows[0].mode == "async" and rows[0].lag == 4 and rows[0].n_seeds == 1


def test_cmd_run_bad_config_exits_1(tmp_path, capsys):
    path = write_config(tmp_path, BASE_CONFIG.replace("mode: f-opd", "mode: warp"))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    missing = tmp_path / "nope.yaml"
    assert main(["run", "--config", str(missing)]) == EXIT_CONFIG


def test_cmd_run_no_out_dir_exits_1(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", "--config", str(path)]) == EXIT_CONFIG


def test_numeric_fields_must_be_numbers():
    # plain YAML parses an unsigned exponent as a string; the schema rejects it
    bad = BASE_CONFIG.replace("steps: 20", "steps: 20\n  learning_rate: 1.0e308")
    with pytest.raises(ConfigError, match="trainer.learning_rate: expected float"):
        parse_config(bad)
    with pytest.raises(ConfigError, match="trainer.steps: expected int"):
        parse_config(BASE_CONFIG.replace("steps: 20", "steps: 20.5"))
    with pytest.raises(ConfigError, match="trainer.use_weighting: expected bool"):
        parse_config(BASE_CONFIG.replace("steps: 20", "steps: 20\n  use_weighting: 1"))


def test_cmd_run_divergence_exits_3(tmp_path, capsys):
    text = BASE_CONFIG.replace("mode: f-opd", "mode: sync").replace(
        "  lag: 2\n", "").replace("steps: 20", "steps: 40\n  learning_rate: 1.0e+308")
    path = write_config(tmp_path, text)
    with np.errstate(all="ignore"):
        code = main(["run", "--config", str(path), "--out", str(tmp_path / "o")])
    assert code == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


def test_cmd_lag_sweep_artifacts(tmp_path):
    text = BASE_CONFIG.replace("mode: f-opd", "mode: async").replace(
        "steps: 20", "steps: 8").replace("seeds: [0, 1]", "seeds: [0]")
    path = write_config(tmp_path, text)
    out = tmp_path / "sweep"
    assert main(["lag-sweep", "--config", str(path), "--out", str(out)]) == EXIT_OK
    assert verify_artifacts(out) == []
    rows = read_summary_csv(out / "summary.csv")
    assert {(r.task, r.lag) for r in rows} == {
        (fam, lag) for fam in ("single-step", "tool-analog", "long-horizon")
        for lag in (0, 2, 4, 8)}
    for name in ("score_vs_lag.svg", "drift_vs_lag.svg", "entropy_vs_step.svg"):
        assert (out / name).exists()


def test_cmd_compare_artifacts(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(path), "--out", str(out),
                 "--lag", "2"]) == EXIT_OK
    assert verify_artifacts(out) == []
    rows = read_summary_csv(out / "summary.csv")
    assert len(rows) == 5
    assert (out / "final_scores.svg").exists()


def test_cmd_ablate_artifacts(tmp_path, capsys):
    path = write_config(tmp_path)
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(path), "--out", str(out),
                 "--lag", "2"]) == EXIT_OK
    assert "step for step: yes" in capsys.readouterr().out
    assert verify_artifacts(out) == []
    assert len(read_summary_csv(out / "summary.csv")) == 6


def test_cmd_verify_passes(tmp_path, capsys):
    assert main(["verify", "--instances", "4", "--out", str(tmp_path)]) == EXIT_OK
    assert "negative control detected" in capsys.readouterr().out
    assert (tmp_path / "verification.csv").exists()


def test_cmd_plot_regenerates(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "arts"
    assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_OK
    dest = tmp_path / "figs"
    assert main(["plot", "--artifacts", str(out), "--out", str(dest)]) == EXIT_OK
    assert (dest / "curves.svg").exists()
    assert main(["plot", "--artifacts", str(tmp_path / "empty")]) == EXIT_CONFIG
