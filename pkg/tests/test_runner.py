import csv
import json
import os

import numpy as np
import pytest

import psbench as pb
from psbench.cli import main as cli_main
from psbench.cohort import GeneratorConfig
from psbench.errors import ConfigurationError
from psbench.experiment import (
    ExperimentConfig,
    ModelSpec,
    cell_seed,
    make_negative_control_model,
)


def config_dict(out_dir, **over):
    d = {
        "generator": {
            "n_treated": 60,
            "n_comparator": 180,
            "n_covariates": 30,
            "n_confounders": 5,
            "prevalence_range": [0.05, 0.4],
            "seed": 11,
        },
        "ps_models": [
            {"name": "unadjusted", "strategy": "unadjusted"},
            {"name": "all", "strategy": "all"},
            {"name": "all_iv", "strategy": "all",
             "iv": {"prevalence": 0.1, "rr": 4.0}},
            {"name": "hdps", "strategy": "hdps"},
            {"name": "cox", "strategy": "cox"},
        ],
        "true_hrs": [1.0, 2.0],
        "n_replicates": 2,
        "n_negative_controls": 4,
        "cv": {"n_folds": 3, "grid_size": 5},
        "hdps": {"n_prevalent": 20, "n_select": 10},
        "lambda_outcome": 0.05,
        "lambda_censor": 0.05,
        "seed": 11,
        "output_dir": str(out_dir),
    }
    d.update(over)
    return d


def read_bytes_map(out_dir):
    data = {}
    for root, _, files in os.walk(out_dir):
        for f in files:
            p = os.path.join(root, f)
            with open(p, "rb") as fh:
                data[os.path.relpath(p, out_dir)] = fh.read()
    return data


class TestConfig:
    def test_from_dict_round_trips_fields(self, tmp_path):
        cfg = ExperimentConfig.from_dict(config_dict(tmp_path))
        assert cfg.generator.n_treated == 60
        assert len(cfg.ps_models) == 5
        assert cfg.ps_models[2].iv.rr == 4.0
        assert cfg.cv.n_folds == 3
        assert cfg.lambda_outcome == 0.05

    def test_hash_ignores_output_dir_only(self, tmp_path):
        a = ExperimentConfig.from_dict(config_dict(tmp_path / "a"))
        b = ExperimentConfig.from_dict(config_dict(tmp_path / "b"))
        c = ExperimentConfig.from_dict(config_dict(tmp_path / "a", seed=12))
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != c.config_hash()

    def test_duplicate_model_names_rejected(self, tmp_path):
        d = config_dict(tmp_path)
        d["ps_models"][1]["name"] = "unadjusted"
        with pytest.raises(ConfigurationError):
            ExperimentConfig.from_dict(d)

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(name="x", strategy="mystery")

    def test_unadjusted_cannot_carry_iv(self):
        from psbench.pipeline import IvSpec

        with pytest.raises(ConfigurationError):
            ModelSpec(name="x", strategy="unadjusted",
                      iv=IvSpec(prevalence=0.1, rr=2.0))


class TestSeedSchedule:
    def test_deterministic_and_key_sensitive(self):
        assert cell_seed(5, 1, 2, 3) == cell_seed(5, 1, 2, 3)
        seeds = {cell_seed(5, a, b) for a in range(4) for b in range(4)}
        assert len(seeds) == 16
        assert cell_seed(5, 1) != cell_seed(6, 1)


class TestNegativeControlModels:
    def test_zero_treatment_effect_and_permuted_values(self):
        co = pb.generate_cohort(
            GeneratorConfig(n_treated=80, n_comparator=240, n_covariates=20,
                            n_confounders=4, seed=21)
        )
        gm = pb.fit_generating_model(co, pb.select_all(co), 0.02, 0.02)
        nc = make_negative_control_model(gm, co.covariate_ids, seed=3)
        assert nc.treatment_coef == 0.0
        assert sorted(nc.coefficients.values()) == \
            pytest.approx(sorted(gm.outcome_model.coefficients.values()))
        assert set(nc.coefficients) <= set(int(c) for c in co.covariate_ids)
        again = make_negative_control_model(gm, co.covariate_ids, seed=3)
        other = make_negative_control_model(gm, co.covariate_ids, seed=4)
        assert again.coefficients == nc.coefficients
        assert other.coefficients != nc.coefficients


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = ExperimentConfig.from_dict(config_dict(out))
    pb.run_experiment(cfg)
    return out, cfg


class TestRunExperiment:
    def test_artifacts_exist(self, bundle):
        out, cfg = bundle
        for f in ("subjects.csv", "covariates.csv", "estimates.csv",
                  "bias_summary.csv", "coverage.csv", "nc_estimates.csv",
                  "null_distributions.json", "errors.csv", "manifest.json",
                  "ps_all.csv", "balance_all.csv", "model_all.json",
                  "ps_all_iv.csv", "balance_hdps.csv", "model_cox.json"):
            assert (out / f).exists(), f

    def test_estimates_cover_the_grid(self, bundle):
        out, cfg = bundle
        with open(out / "estimates.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        cells = {(r["model"], r["true_hr"], r["replicate"]) for r in rows}
        with open(out / "errors.csv", newline="") as fh:
            n_errors = len(list(csv.DictReader(fh)))
        assert len(cells) + n_errors >= 5 * 2 * 2
        assert {r["model"] for r in rows} <= {m.name for m in cfg.ps_models}

    def test_manifest_matches_files(self, bundle):
        out, cfg = bundle
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config_hash"] == cfg.config_hash()
        for art in manifest["artifacts"]:
            assert (out / art).exists(), art

    def test_nc_estimates_and_null_fits(self, bundle):
        out, _ = bundle
        with open(out / "nc_estimates.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["control"] for r in rows} == {"0", "1", "2", "3"}
        nulls = json.loads((out / "null_distributions.json").read_text())
        for name, nd in nulls.items():
            assert nd["sigma"] >= 0.0
            assert nd["n_controls"] >= 2

    def test_plot_data(self, bundle):
        out, _ = bundle
        plots = pb.emit_plot_data(str(out))
        for f in ("preference_hist.csv", "bias_sd.csv", "smd_scatter.csv",
                  "nc_strip.csv"):
            assert os.path.exists(os.path.join(plots, f)), f
        with open(os.path.join(plots, "preference_hist.csv"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        by_model_arm = {}
        for r in rows:
            key = (r["model"], r["arm"])
            by_model_arm[key] = by_model_arm.get(key, 0) + int(r["count"])
        # every histogram sums to that arm's subject count
        assert by_model_arm[("all", "1")] == 60
        assert by_model_arm[("all", "0")] == 180

    def test_rerun_is_byte_identical(self, bundle, tmp_path):
        out, cfg = bundle
        import dataclasses

        cfg2 = dataclasses.replace(cfg, output_dir=str(tmp_path / "again"))
        pb.run_experiment(cfg2)
        a = read_bytes_map(out)
        b = read_bytes_map(tmp_path / "again")
        a.pop("plots/preference_hist.csv", None)
        a = {k: v for k, v in a.items() if not k.startswith("plots")}
        assert a == b

    def test_threads_do_not_change_output(self, bundle, tmp_path):
        out, cfg = bundle
        import dataclasses

        cfg2 = dataclasses.replace(cfg, output_dir=str(tmp_path / "threaded"))
        pb.run_experiment(cfg2, threads=4)
        a = {k: v for k, v in read_bytes_map(out).items()
             if not k.startswith("plots")}
        b = read_bytes_map(tmp_path / "threaded")
        assert a == b


class TestCli:
    def write_config(self, tmp_path, out_dir):
        p = tmp_path / "config.json"
        p.write_text(json.dumps(config_dict(out_dir)))
        return p

    def test_generate(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path, tmp_path / "gen")
        assert cli_main(["generate", "--config", str(cfg)]) == 0
        assert (tmp_path / "gen" / "subjects.csv").exists()
        meta = json.loads((tmp_path / "gen" / "cohort_meta.json").read_text())
        assert meta["n_subjects"] == 240
        assert meta["n_treated"] == 60

    def test_seed_override_changes_cohort(self, tmp_path):
        cfg = self.write_config(tmp_path, tmp_path / "g1")
        cli_main(["generate", "--config", str(cfg), "--out", str(tmp_path / "g1")])
        cli_main(["generate", "--config", str(cfg), "--seed", "99",
                  "--out", str(tmp_path / "g2")])
        a = (tmp_path / "g1" / "subjects.csv").read_bytes()
        b = (tmp_path / "g2" / "subjects.csv").read_bytes()
        assert a != b

    def test_run_and_plots(self, tmp_path):
        cfg = self.write_config(tmp_path, tmp_path / "cli_run")
        assert cli_main(["run", "--config", str(cfg)]) == 0
        assert (tmp_path / "cli_run" / "estimates.csv").exists()
        assert cli_main(["plots", "--out", str(tmp_path / "cli_run")]) == 0
        assert (tmp_path / "cli_run" / "plots" / "bias_sd.csv").exists()

    def test_missing_config_is_clean_error(self, tmp_path, capsys):
        assert cli_main(["run", "--config", str(tmp_path / "absent.json")]) == 1
        assert "error" in capsys.readouterr().err

    def test_plots_needs_location(self, capsys):
        assert cli_main(["plots"]) == 2

    def test_console_script_entry_point(self):
        import subprocess
        import sys

        proc = subprocess.run(
            [sys.executable, "-m", "psbench.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "generate" in proc.stdout
