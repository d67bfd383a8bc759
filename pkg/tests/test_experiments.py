"""Scenario driver tests.

Oracles: the closed-form random-walk energy m * sigma^2 * null_dim for the
perturbation scenarios, the subset-enumeration margin solver inside the
direction study, and byte-level file comparison for the determinism
contract. Scenario runs here use trimmed repetition/horizon overrides; the
full-size defaults are exercised in the acceptance suite.
"""

import filecmp
import json
import os

import numpy as np
import pytest

from gradflow.experiments import (
    ExperimentConfig,
    ScenarioReport,
    SCENARIO_DEFAULTS,
    chebyshev_nodes,
    run_scenario,
    write_report_json,
    _fmt_cell,
    _write_table,
)


class TestExperimentConfig:
    def test_unknown_scenario_names_field(self):
        with pytest.raises(ValueError, match="scenario"):
            ExperimentConfig(scenario="nope")

    def test_unknown_param_names_key(self):
        with pytest.raises(ValueError, match="params.widgets"):
            ExperimentConfig(scenario="growth_asymptotics",
                             params={"widgets": 3})

    def test_repetitions_floor(self):
        with pytest.raises(ValueError, match="params.repetitions"):
            ExperimentConfig(scenario="min_norm_degree_sweep",
                             params={"repetitions": 0})

    def test_seed_must_be_integer(self):
        with pytest.raises(ValueError, match="seed"):
            ExperimentConfig(scenario="growth_asymptotics", seed=1.5)

    def test_resolved_merges_overrides(self):
        cfg = ExperimentConfig(scenario="min_norm_degree_sweep",
                               params={"max_degree": 12})
        merged = cfg.resolved()
        assert merged["max_degree"] == 12
        assert merged["n_train"] == SCENARIO_DEFAULTS[
            "min_norm_degree_sweep"]["n_train"]

    def test_hash_stable_and_sensitive(self):
        a = ExperimentConfig(scenario="growth_asymptotics", seed=3)
        b = ExperimentConfig(scenario="growth_asymptotics", seed=3)
        c = ExperimentConfig(scenario="growth_asymptotics", seed=4)
        d = ExperimentConfig(scenario="growth_asymptotics", seed=3,
                             params={"t_max": 2e4})
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != c.config_hash()
        assert a.config_hash() != d.config_hash()

    def test_hash_ignores_output_dir(self):
        a = ExperimentConfig(scenario="growth_asymptotics", output_dir="/x")
        b = ExperimentConfig(scenario="growth_asymptotics", output_dir="/y")
        assert a.config_hash() == b.config_hash()

    def test_header_embeds_scenario_hash_seed(self):
        cfg = ExperimentConfig(scenario="growth_asymptotics", seed=11)
        head = cfg.header()
        assert head.startswith("scenario=growth_asymptotics config=")
        assert head.endswith("seed=11")
        assert cfg.config_hash() in head


class TestReportPlumbing:
    def test_fmt_cell(self):
        assert _fmt_cell(None) == ""
        assert _fmt_cell("flag") == "flag"
        assert _fmt_cell(True) == "1"
        assert _fmt_cell(7) == "7"
        # shortest round-trip float text
        assert float(_fmt_cell(0.1)) == 0.1
        assert _fmt_cell(0.1) == "0.1"

    def test_write_table_layout(self, tmp_path):
        path = tmp_path / "t.csv"
        _write_table(path, "hdr line", ["a", "b"], [[1, None], [2.5, "x"]])
        raw = path.read_bytes().decode()
        assert raw == "# hdr line\na,b\n1,\n2.5,x\n"

    def test_report_json_uses_basenames(self, tmp_path):
        report = ScenarioReport(
            scenario="growth_asymptotics", seed=0, config_hash="abc",
            repetitions=1, excluded=0, predicates={"ok": True},
            aggregates={"x": np.float64(1.5)},
            trace_paths=["/some/deep/dir/run.csv"], notes=[],
        )
        path = tmp_path / "r.json"
        write_report_json(report, path, header="h")
        body = json.loads(path.read_text())
        assert body["trace_paths"] == ["run.csv"]
        assert body["passed"] is True
        assert body["aggregates"]["x"] == 1.5

    def test_passed_requires_nonempty_predicates(self):
        base = dict(scenario="growth_asymptotics", seed=0, config_hash="a",
                    repetitions=1, excluded=0, aggregates={},
                    trace_paths=[], notes=[])
        assert not ScenarioReport(predicates={}, **base).passed
        assert ScenarioReport(predicates={"p": True}, **base).passed
        assert not ScenarioReport(predicates={"p": True, "q": False},
                                  **base).passed


class TestChebyshevNodes:
    def test_closed_form(self):
        n = 9
        got = chebyshev_nodes(n)
        i = np.arange(1, n + 1)
        assert np.allclose(got, np.cos((2 * i - 1) * np.pi / (2 * n)))
        assert got.shape == (n,)
        assert np.all(np.abs(got) < 1.0)


class TestSinePerturbation:
    def test_trimmed_run_passes(self, tmp_path):
        cfg = ExperimentConfig(
            scenario="sine_polynomial_perturbation", seed=0,
            output_dir=str(tmp_path),
            params={"repetitions": 8, "total_steps": 1_200_000},
        )
        report = run_scenario(cfg)
        assert report.passed
        assert report.excluded == 0
        # four events fire before the halfway stop (120k..480k)
        counts = report.aggregates["perturbation_counts"]
        assert int(counts[-1]) == 4
        assert np.all(np.diff(counts) >= 0)
        obs = report.aggregates["final_null_sq_observed"]
        pred = report.aggregates["final_null_sq_predicted"]
        assert abs(obs / pred - 1.0) <= 0.2
        assert report.aggregates["null_dimension"] == 31

    def test_trace_files_carry_header(self, tmp_path):
        cfg = ExperimentConfig(
            scenario="sine_polynomial_perturbation", seed=0,
            output_dir=str(tmp_path),
            params={"repetitions": 2, "total_steps": 480_000},
        )
        report = run_scenario(cfg)
        assert report.trace_paths
        for path in report.trace_paths:
            if path.endswith(".json"):
                continue
            first = open(path).readline()
            assert first.startswith(f"# {cfg.header()}")

    def test_impossible_tolerance_excludes_everything(self):
        cfg = ExperimentConfig(
            scenario="sine_polynomial_perturbation", seed=0,
            params={"repetitions": 3, "total_steps": 480_000,
                    "reconverge_tol": 1e-30},
        )
        report = run_scenario(cfg)
        assert report.excluded == 3
        assert not report.predicates["exclusions_ok"]
        assert not report.passed

    def test_control_norms_flat(self):
        cfg = ExperimentConfig(
            scenario="sine_polynomial_perturbation", seed=0,
            params={"perturb": False, "degree": 30, "total_steps": 250_000,
                    "repetitions": 3, "init_scale": 0.3},
        )
        report = run_scenario(cfg)
        assert report.passed
        assert report.predicates["norms_flat_after_convergence"]
        assert report.aggregates["norm_drift_after_halfway"] <= 1e-4


@pytest.fixture(scope="module")
def sweep_report():
    return run_scenario(ExperimentConfig(
        scenario="min_norm_degree_sweep", seed=0,
        params={"max_degree": 90},
    ))


@pytest.fixture(scope="module")
def growth_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("growth")
    return run_scenario(ExperimentConfig(
        scenario="growth_asymptotics", seed=0, output_dir=str(out),
        params={"ks": (1, 2), "grid_points": 31, "slope_points": 11,
                "closed_form_points": 5},
    ))


class TestDegreeSweep:
    @pytest.fixture
    def report(self, sweep_report):
        return sweep_report

    def test_predicates_pass(self, report):
        assert report.passed
        assert report.predicates["degree_one_underfits"]
        assert report.predicates["interpolates_from_threshold"]
        assert report.predicates["condition_flags_fire"]

    def test_analytic_target_crosses_early(self, report):
        # geometric coefficient decay beats the tolerance well before the
        # rank threshold forces exact interpolation
        assert report.aggregates["first_degree_within_tolerance"] == 37

    def test_threshold_spike_is_flagged_not_solved(self, report):
        # conditioning peaks right at the square case; those degrees are
        # refused as rank-deficient rather than silently mis-solved
        flagged = sorted(
            int(n.split()[1].rstrip(":")) for n in report.notes
        )
        assert flagged == [72, 73, 74]

    def test_interpolation_residual_scale(self, report):
        assert report.aggregates["max_train_sse_past_threshold"] <= 1e-8


class TestToyDeepnet:
    def test_trimmed_run_passes(self, tmp_path):
        cfg = ExperimentConfig(
            scenario="toy_deepnet_perturbation", seed=0,
            output_dir=str(tmp_path),
            params={"repetitions": 3, "cycles": 4,
                    "control_repetitions": 1},
        )
        report = run_scenario(cfg)
        assert report.passed
        assert report.predicates["train_error_zero_each_cycle"]
        assert report.predicates["mean_layer_norms_increase_each_cycle"]
        assert report.aggregates["min_norm_increment"] > 0.0
        # perturbed growth dominates the unperturbed control on each layer
        ctrl = np.asarray(report.aggregates["control_growth"])
        pert = np.asarray(report.aggregates["perturbed_growth"])
        assert np.all(pert >= 2.0 * np.maximum(ctrl, 0.0))
        names = [os.path.basename(p) for p in report.trace_paths]
        assert "toy_deepnet_perturbation_plot.csv" in names


class TestGrowthAsymptotics:
    @pytest.fixture
    def report(self, growth_report):
        return growth_report

    def test_predicates_pass(self, report):
        assert report.passed

    def test_depth_one_tracks_log(self, report):
        assert 0.95 <= report.aggregates["k1_slope"] <= 1.05

    def test_depth_two_matches_closed_form(self, report):
        assert report.aggregates["k2_closed_form_max_rel_err"] <= 1e-3

    def test_csv_has_rho_and_product_columns(self, report):
        path = [p for p in report.trace_paths if p.endswith("_k2.csv")][0]
        with open(path) as fh:
            fh.readline()
            header = fh.readline().strip().split(",")
        assert header == ["t", "log_t", "rho", "product"]

    def test_zero_scale_rejected_for_deep_stacks(self):
        cfg = ExperimentConfig(scenario="growth_asymptotics",
                               params={"rho0": 0.0})
        with pytest.raises(ValueError, match="params.rho0"):
            run_scenario(cfg)


class TestDirectionStudy:
    def test_trimmed_run_passes(self, tmp_path):
        cfg = ExperimentConfig(
            scenario="convergence_direction_study", seed=0,
            output_dir=str(tmp_path),
            params={"n_datasets": 2, "n_inits": 2},
        )
        report = run_scenario(cfg)
        assert report.passed
        assert report.aggregates["min_cosine_to_oracle"] >= 0.999
        assert report.aggregates["min_pairwise_cosine"] >= 0.999
        assert report.aggregates["square_zero_init_gap"] <= 1e-6
        assert report.aggregates["square_null_init_gap"] <= 1e-6


class TestByteDeterminism:
    def _run_twice(self, tmp_path, scenario, params):
        dirs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            run_scenario(ExperimentConfig(
                scenario=scenario, seed=5, output_dir=str(out),
                params=params,
            ))
            dirs.append(out)
        names = sorted(os.listdir(dirs[0]))
        assert names == sorted(os.listdir(dirs[1]))
        for name in names:
            assert filecmp.cmp(dirs[0] / name, dirs[1] / name,
                               shallow=False), name

    def test_sweep_reruns_identical(self, tmp_path):
        self._run_twice(tmp_path, "min_norm_degree_sweep",
                        {"max_degree": 40})

    def test_sine_reruns_identical(self, tmp_path):
        self._run_twice(tmp_path, "sine_polynomial_perturbation",
                        {"repetitions": 3, "total_steps": 480_000})
