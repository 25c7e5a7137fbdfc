import json
import math

import numpy as np
import pandas as pd
import pytest

from src.env_files import load_registry, parse_registry, registry_to_json
from src.errors import ConfigInvalid, EnvironmentFileMissing
from src.harness import (
    CSV_COLUMNS,
    CampaignReport,
    RowContext,
    emit_report,
    load_config,
    parse_config,
    run_campaign,
)
from src.metagen import main
from src.seeding import derive_seed

LEMMAS_TOML = """
master_seed = 11
trials = {trials}

[sweep]
n = [2, 3]
m = [2, 4]

[estimation]
cases = 10
"""

MDP_REGISTRY = {
    "kind": "mdp",
    "mdps": [
        {"name": "left", "n_states": 1, "n_actions": 2, "transition": [[[1.0], [1.0]]],
         "reward": [[1.0, 0.0]], "initial": [1.0], "gamma": 0.9, "horizon": 1},
        {"name": "right", "n_states": 1, "n_actions": 2, "transition": [[[1.0], [1.0]]],
         "reward": [[0.0, 1.0]], "initial": [1.0], "gamma": 0.9, "horizon": 1},
    ],
    "environments": {"train": [0.75, 0.25], "test": [0.25, 0.75]},
}


def lemmas_config(tmp_path, trials=3, **overrides):
    raw = {"master_seed": 11, "trials": trials, "sweep": {"n": [2, 3], "m": [2, 4]},
           "estimation": {"cases": 10}}
    raw.update(overrides)
    cfg = parse_config(raw, "lemmas")
    cfg.out_dir = str(tmp_path)
    return cfg


class TestConfig:
    def test_empty_axis(self):
        with pytest.raises(ConfigInvalid) as info:
            parse_config({"master_seed": 1, "sweep": {"n": []}}, "lemmas")
        assert any("sweep.n" in p for p in info.value.problems)

    def test_every_problem_is_reported(self):
        with pytest.raises(ConfigInvalid) as info:
            parse_config({"master_seed": -1, "sweep": {"gamma": [1.5], "bogus": [1]},
                          "schedule": {"speed": 2}}, "metarl")
        problems = " ".join(info.value.problems)
        for field in ("master_seed", "sweep.gamma", "sweep.bogus", "schedule.speed"):
            assert field in problems

    def test_unknown_campaign(self):
        with pytest.raises(ConfigInvalid):
            parse_config({"master_seed": 1}, "nonsense")

    def test_seed_override(self):
        assert parse_config({"master_seed": 1}, "lemmas", seed=9).master_seed == 9

    def test_schedule_lists_and_scaling(self):
        cfg = parse_config({"master_seed": 1, "schedule": {"outer_steps": 2, "outer_noise_sd": [0.1, 0.2]}},
                           "metarl")
        sched = cfg.schedule.build(noise_scale=2.0)
        assert sched.outer_noise_sd == pytest.approx((0.2, 0.4))
        assert sched.inner_noise_sd == pytest.approx((0.1, 0.1))

    def test_metarl_estimation_defaults(self):
        est = parse_config({"master_seed": 1}, "metarl").estimation
        assert est.mi_trials == 1000
        assert est.resamples == 256

    def test_env_defaults(self, monkeypatch):
        monkeypatch.setenv("METAGEN_OUT_DIR", "/tmp/metagen-out")
        monkeypatch.setenv("METAGEN_WORKERS", "3")
        cfg = parse_config({"master_seed": 1}, "lemmas")
        assert cfg.out_dir == "/tmp/metagen-out"
        assert cfg.workers == 3

    def test_load_resolves_registry_next_to_config(self, tmp_path):
        path = tmp_path / "metarl.toml"
        path.write_text('master_seed = 1\nregistry = "envs.json"\n')
        cfg = load_config(str(path), campaign="metarl")
        assert cfg.registry == str(tmp_path / "envs.json")

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigInvalid):
            load_config(str(tmp_path / "absent.toml"), campaign="lemmas")


class TestCampaign:
    def test_sweep_row_count(self, tmp_path):
        report = run_campaign(lemmas_config(tmp_path))
        assert len(report.rows) == 12
        assert report.holds
        assert [(r["cell"], r["trial"]) for r in report.rows] == [(c, t) for c in range(4) for t in range(3)]

    def test_rerun_is_identical(self, tmp_path):
        a = run_campaign(lemmas_config(tmp_path)).frame()
        b = run_campaign(lemmas_config(tmp_path)).frame()
        pd.testing.assert_frame_equal(a, b)

    def test_adding_trials_keeps_earlier_rows(self, tmp_path):
        short = run_campaign(lemmas_config(tmp_path, trials=2)).rows
        long = {(r["cell"], r["trial"]): r for r in run_campaign(lemmas_config(tmp_path, trials=3)).rows}
        for row in short:
            assert long[(row["cell"], row["trial"])] == row

    def test_workers_do_not_change_rows(self, tmp_path):
        serial = run_campaign(lemmas_config(tmp_path, trials=1)).frame()
        parallel = run_campaign(lemmas_config(tmp_path, trials=1, workers=2)).frame()
        pd.testing.assert_frame_equal(serial, parallel)

    def test_failed_row_is_recorded(self, tmp_path):
        cfg = parse_config({"master_seed": 3, "trials": 1, "sweep": {"n": [8], "m": [3]}}, "supervised")
        report = run_campaign(cfg)
        assert not report.holds
        assert report.failures and "EnumerationTooLarge" in report.failures[0]["error"]
        assert math.isnan(report.rows[0]["gap"])

    def test_candidate_stream_is_split_from_instance(self):
        cfg = parse_config({"master_seed": 4}, "regret")
        cell = {"n": 2, "m": 2, "gamma": 0.9, "noise_scale": 1.0}
        ctx = RowContext(cfg, cell, 123)
        ctx.mdp_pair()
        drawn = ctx.draw_rng().random(4)
        fresh = np.random.default_rng(derive_seed(123, "instance")).random(4)
        assert not np.allclose(drawn, fresh)
        again = RowContext(cfg, cell, 123)
        again.mdp_pair()
        np.testing.assert_array_equal(again.draw_rng().random(4), drawn)

    def test_registry_kind_must_match(self, tmp_path):
        path = tmp_path / "envs.json"
        path.write_text(json.dumps(MDP_REGISTRY))
        cfg = parse_config({"master_seed": 1, "registry": str(path)}, "offline")
        with pytest.raises(ConfigInvalid):
            run_campaign(cfg)

    def test_registry_regret_campaign(self, tmp_path):
        path = tmp_path / "envs.json"
        path.write_text(json.dumps(MDP_REGISTRY))
        raw = {"master_seed": 2, "trials": 1, "registry": str(path),
               "estimation": {"draws": 2, "replicates": 2},
               "schedule": {"outer_steps": 1, "inner_steps": 1, "batch_size": 1}}
        report = run_campaign(parse_config(raw, "regret"))
        assert not report.failures
        assert report.holds


class TestOutput:
    def test_empty_report_writes_header_only(self, tmp_path):
        report = CampaignReport("lemmas", [], [], {}, {"lemmas": False})
        path = emit_report(report, str(tmp_path), "csv")
        with open(path, encoding="utf-8") as f:
            assert f.read().strip() == ",".join(CSV_COLUMNS)

    def test_csv_columns(self, tmp_path):
        report = run_campaign(lemmas_config(tmp_path, trials=1))
        frame = pd.read_csv(emit_report(report, str(tmp_path), "csv"))
        assert list(frame.columns) == CSV_COLUMNS
        assert len(frame) == 4

    def test_json_round_trip(self, tmp_path):
        report = run_campaign(lemmas_config(tmp_path, trials=1))
        with open(emit_report(report, str(tmp_path), "json"), encoding="utf-8") as f:
            payload = json.load(f)
        assert payload["campaign"] == "lemmas"
        assert payload["created_at"].endswith("Z")
        assert len(payload["rows"]) == 4
        assert payload["config"]["master_seed"] == 11
        assert "data_processing" in payload["rows"][0]["extras"]

    def test_nan_is_null_in_json(self, tmp_path):
        row = {c: math.nan for c in CSV_COLUMNS}
        row.update(campaign="lemmas", cell=0, trial=0, seed=1, holds=False)
        report = CampaignReport("lemmas", [row], [{"c": math.inf}], {}, {"lemmas": False})
        with open(emit_report(report, str(tmp_path), "json"), encoding="utf-8") as f:
            payload = json.load(f)
        assert payload["rows"][0]["gap"] is None
        assert payload["rows"][0]["extras"]["c"] == "inf"


class TestCommandLine:
    def write_config(self, tmp_path, body):
        path = tmp_path / "campaign.toml"
        path.write_text(body)
        return str(path)

    def test_check_passes(self, tmp_path, capsys):
        path = self.write_config(tmp_path, LEMMAS_TOML.format(trials=1))
        assert main(["lemmas", "--config", path, "--out", str(tmp_path), "--check"]) == 0
        assert "Campaign: lemmas" in capsys.readouterr().out
        assert (tmp_path / "lemmas.csv").exists()

    def test_check_fails_on_violation(self, tmp_path):
        path = self.write_config(tmp_path, "master_seed = 1\ntrials = 1\n[sweep]\nn = [8]\nm = [3]\n")
        assert main(["supervised", "--config", path, "--out", str(tmp_path), "--check"]) == 1
        assert main(["supervised", "--config", path, "--out", str(tmp_path)]) == 0

    def test_missing_registry(self, tmp_path, capsys):
        path = self.write_config(tmp_path, 'master_seed = 1\nregistry = "nowhere.json"\n')
        assert main(["metarl", "--config", path, "--out", str(tmp_path)]) == 2
        assert "not found" in capsys.readouterr().err

    def test_malformed_registry_exit_code(self, tmp_path):
        (tmp_path / "envs.json").write_text("{not json")
        path = self.write_config(tmp_path, 'master_seed = 1\nregistry = "envs.json"\n')
        assert main(["metarl", "--config", path, "--out", str(tmp_path)]) == 2

    def test_bad_config_exit_code(self, tmp_path):
        path = self.write_config(tmp_path, "trials = 0\n")
        assert main(["lemmas", "--config", path]) == 2


class TestRegistry:
    def test_round_trip(self):
        registry = parse_registry(MDP_REGISTRY)
        again = parse_registry(registry_to_json(registry))
        assert again.kind == "mdp"
        for a, b in zip(registry.members, again.members):
            np.testing.assert_array_equal(a.reward, b.reward)
            assert a.name == b.name and a.gamma == b.gamma
        np.testing.assert_array_equal(again.weightings["test"], [0.25, 0.75])

    def test_environments_share_members(self):
        registry = parse_registry(MDP_REGISTRY)
        train, test = registry.environment("train"), registry.environment("test")
        assert all(a is b for a, b in zip(train.mdps, test.mdps))

    def test_unknown_environment(self):
        with pytest.raises(ConfigInvalid):
            parse_registry(MDP_REGISTRY).environment("holdout")

    def test_weight_count_checked(self):
        raw = dict(MDP_REGISTRY, environments={"train": [1.0]})
        with pytest.raises(ConfigInvalid):
            parse_registry(raw)

    def test_episodic_default_behavior_is_uniform(self):
        raw = {
            "kind": "episodic",
            "mdps": [{"n_states": 1, "n_actions": 2, "transition": [[[1.0], [1.0]]],
                      "reward": [[0.5, 0.2]], "initial": [1.0], "horizon": 2}],
            "environments": {"train": [1.0]},
        }
        env = parse_registry(raw).environment("train")
        np.testing.assert_allclose(env.behavior.probs, 0.25)

    def test_tasks_registry(self):
        raw = {"kind": "tasks", "loss_table": [[0.2, 0.8], [0.8, 0.2]],
               "tasks": [{"sample_dist": [0.5, 0.5]}, {"sample_dist": [0.9, 0.1]}],
               "environments": {"train": [0.5, 0.5]}}
        env = parse_registry(raw).environment("train")
        assert len(env.tasks) == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(EnvironmentFileMissing):
            load_registry(str(tmp_path / "absent.json"))

    def test_missing_member_pool(self):
        raw = {k: v for k, v in MDP_REGISTRY.items() if k != "mdps"}
        with pytest.raises(ConfigInvalid) as info:
            parse_registry(raw)
        assert "mdps" in info.value.problems[0]

    def test_missing_tasks(self):
        raw = {"kind": "tasks", "loss_table": [[0.2, 0.8]], "environments": {"train": [1.0]}}
        with pytest.raises(ConfigInvalid):
            parse_registry(raw)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "envs.json"
        path.write_text('{"kind": "mdp", "mdps": [')
        with pytest.raises(ConfigInvalid):
            load_registry(str(path))
