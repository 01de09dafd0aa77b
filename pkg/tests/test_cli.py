"""Tests for file formats and the command-line interface."""

import json

import numpy as np
import pytest
from click.testing import CliRunner
from numpy.testing import assert_allclose

from cebmf import engine as eng
from cebmf import io
from cebmf.cli import main


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


class TestDenseMatrixIO:
    def test_round_trip_with_missing(self, tmp_path):
        path = tmp_path / "m.tsv"
        values = np.array([[1.0, np.nan, 3.0], [-2.5, 0.0, np.nan]])
        io.write_matrix(path, values)
        dm = io.read_dense_matrix(path)
        assert_allclose(dm.values[dm.mask], values[~np.isnan(values)])
        assert np.array_equal(dm.mask, ~np.isnan(values))

    def test_comma_delimited_with_empty_cells(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("1.5,,2\n3,NA,4\n")
        dm = io.read_dense_matrix(path)
        assert np.array_equal(dm.mask, [[True, False, True], [True, False, True]])
        assert_allclose(dm.values[:, 0], [1.5, 3.0])

    def test_header_row_and_label_column_skipped(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("gene\ts1\ts2\ng1\t1\t2\ng2\t3\t4\n")
        dm = io.read_dense_matrix(path)
        assert_allclose(dm.values, [[1.0, 2.0], [3.0, 4.0]])

    def test_ragged_rows_rejected(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("1\t2\n3\n")
        with pytest.raises(io.ParseError, match="inconsistent"):
            io.read_dense_matrix(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("")
        with pytest.raises(io.ParseError, match="empty"):
            io.read_dense_matrix(path)

    def test_non_numeric_cell_rejected(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("1\t2\n3\tbad\n")
        with pytest.raises(io.ParseError, match="not a number"):
            io.read_dense_matrix(path)


class TestCooMatrixIO:
    def test_triples_with_extra_column(self, tmp_path):
        path = tmp_path / "r.tsv"
        path.write_text("1\t2\t5.0\t881250949\n3\t1\t-1.5\t881250950\n")
        dm = io.read_coo_matrix(path)
        assert dm.values.shape == (3, 2)
        assert dm.values[0, 1] == 5.0 and dm.values[2, 0] == -1.5
        assert dm.mask.sum() == 2

    def test_shape_inferred_from_max_indices(self, tmp_path):
        path = tmp_path / "r.tsv"
        path.write_text("1682\t943\t3\n1\t1\t5\n")
        dm = io.read_coo_matrix(path)
        assert dm.values.shape == (1682, 943)

    def test_duplicate_cell_rejected(self, tmp_path):
        path = tmp_path / "r.tsv"
        path.write_text("1\t1\t2\n1\t1\t3\n")
        with pytest.raises(io.ParseError, match="duplicate"):
            io.read_coo_matrix(path)

    def test_zero_index_rejected(self, tmp_path):
        path = tmp_path / "r.tsv"
        path.write_text("0\t1\t2\n")
        with pytest.raises(io.ParseError, match="1-indexed"):
            io.read_coo_matrix(path)

    def test_sniffing(self, tmp_path):
        coo = tmp_path / "coo.tsv"
        coo.write_text("1\t2\t0.5\n2\t1\t1.5\n")
        assert io.sniff_matrix_format(coo) == "coo"
        dense = tmp_path / "dense.tsv"
        dense.write_text("0.5\t2\t3\n1\t2\t3\n")
        assert io.sniff_matrix_format(dense) == "dense"
        # An all-integer table is ambiguous; an explicit format wins.
        ints = tmp_path / "ints.tsv"
        ints.write_text("1\t2\t3\n4\t5\t6\n")
        assert io.read_matrix(ints, fmt="dense").values.shape == (2, 3)
        assert io.read_matrix(ints, fmt="coo").values.shape == (4, 5)


class TestConfigIO:
    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# nothing but comments\n\n")
        assert io.read_config(path) == eng.FitConfig()

    def test_overrides_and_comments(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(
            "K_max = 4\nseed=9\nelbo_rel_tol = 1e-5  # tighter\n"
            "prior_family_l = exp_mix\nelbo_per_update = true\n"
            "precision = by_row\n"
        )
        cfg = io.read_config(path)
        assert cfg.K_max == 4 and cfg.seed == 9
        assert cfg.elbo_rel_tol == 1e-5
        assert cfg.prior_family_l == "exp_mix"
        assert cfg.elbo_per_update is True
        assert cfg.precision.value == "by_row"

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("n_factors = 4\n")
        with pytest.raises(io.ParseError, match="unknown config key"):
            io.read_config(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("K_max = many\n")
        with pytest.raises(io.ParseError, match="K_max"):
            io.read_config(path)

    def test_invalid_setting_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("K_max = 0\n")
        with pytest.raises(io.ParseError):
            io.read_config(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 1\nseed = 2\n")
        with pytest.raises(io.ParseError, match="duplicate"):
            io.read_config(path)


class TestArtifacts:
    def test_round_trip_moments_and_summary(self, tmp_path):
        rng = np.random.default_rng(0)
        Z = np.outer(rng.normal(size=20), rng.normal(size=12))
        Z += rng.normal(0, 0.3, (20, 12))
        cfg = eng.FitConfig(K_max=2, seed=0, max_sweeps=10)
        res = eng.fit(Z, config=cfg)
        out = io.write_artifact(tmp_path / "run", res, cfg, {"command": "fit"})
        Lbar, Fbar, summary = io.load_artifact(out)
        assert np.array_equal(Lbar, res.state.Lbar)
        assert np.array_equal(Fbar, res.state.Fbar)
        assert summary["K"] == res.state.K
        assert summary["config"]["K_max"] == 2
        assert summary["elbo_trace"] == res.elbo_trace.tolist()
        assert (out / "timings.txt").is_file()

    def test_covariate_prior_parameters_serialized(self, tmp_path):
        rng = np.random.default_rng(1)
        from cebmf.types import SideInfo

        Z = np.outer(rng.normal(size=25), rng.normal(size=10))
        Z += rng.normal(0, 0.4, (25, 10))
        side = SideInfo(X=rng.normal(size=(25, 2)))
        cfg = eng.FitConfig(
            K_max=1, seed=0, max_sweeps=4, prior_family_l="softmax_normal"
        )
        res = eng.fit(Z, side=side, config=cfg)
        out = io.write_artifact(tmp_path / "run", res, cfg)
        summary = json.loads((out / "summary.json").read_text())
        prior = summary["priors_l"][0]
        assert prior["kind"] == "covariate"
        assert prior["family"] == "softmax_normal"
        theta = np.asarray(prior["theta"])
        assert theta.shape[0] == 3  # intercept + two covariates

    def test_empty_model_artifact_loads(self, tmp_path):
        res = eng.fit(np.zeros((5, 4)), config=eng.FitConfig(K_max=2, seed=0))
        out = io.write_artifact(tmp_path / "run", res, eng.FitConfig(K_max=2))
        Lbar, Fbar, summary = io.load_artifact(out)
        assert summary["K"] == 0
        assert Lbar.shape == (5, 0) and Fbar.shape == (4, 0)

    def test_missing_artifact_rejected(self, tmp_path):
        with pytest.raises(io.ParseError, match="summary.json"):
            io.load_artifact(tmp_path / "nowhere")


class TestSimulateCommand:
    def test_writes_instance_files(self, tmp_path):
        out = tmp_path / "sim"
        r = invoke("simulate", "--scenario", "tiled", "--n", 40, "--p", 15,
                   "--seed", 0, "--out-dir", out)
        assert r.exit_code == 0, r.output
        Z = io.read_dense_matrix(out / "matrix.tsv")
        assert Z.values.shape == (40, 15)
        X = io.read_covariates(out / "row_covariates.tsv")
        assert X.shape == (40, 2)
        assert not (out / "col_covariates.tsv").exists()
        echo = json.loads((out / "scenario.json").read_text())
        assert echo["scenario"] == "tiled" and echo["K_true"] == 3

    def test_same_seed_writes_identical_files(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            r = invoke("simulate", "--scenario", "sparsity_driven", "--n", 60,
                       "--p", 25, "--seed", 4, "--out-dir", out)
            assert r.exit_code == 0, r.output
        for name in ["matrix.tsv", "row_covariates.tsv", "col_covariates.tsv",
                     "L_true.tsv", "scenario.json"]:
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_unknown_scenario_is_usage_error(self, tmp_path):
        r = invoke("simulate", "--scenario", "mystery", "--out-dir", tmp_path)
        assert r.exit_code == 2


class TestFitCommand:
    def test_fit_on_simulated_instance(self, tmp_path):
        sim_dir, fit_dir = tmp_path / "sim", tmp_path / "fit"
        invoke("simulate", "--scenario", "tiled", "--n", 50, "--p", 20,
               "--seed", 1, "--out-dir", sim_dir)
        cfg = tmp_path / "c.cfg"
        cfg.write_text("K_max = 3\nmax_sweeps = 8\nprior_family_l = softmax_normal\n")
        r = invoke("fit", "--matrix", sim_dir / "matrix.tsv",
                   "--row-covariates", sim_dir / "row_covariates.tsv",
                   "--config", cfg, "--seed", 0, "--out-dir", fit_dir)
        assert r.exit_code == 0, r.output
        summary = json.loads((fit_dir / "summary.json").read_text())
        assert summary["K"] <= 3
        trace = np.asarray(summary["elbo_trace"])
        slack = 1e-8 * np.maximum(1.0, np.abs(trace[:-1]))
        assert np.all(np.diff(trace) >= -slack)

    def test_matches_library_fit_without_covariates(self, tmp_path):
        rng = np.random.default_rng(2)
        Z = np.outer(rng.normal(size=18), rng.normal(size=9))
        Z += rng.normal(0, 0.2, (18, 9))
        path = tmp_path / "m.tsv"
        io.write_matrix(path, Z)
        fit_dir = tmp_path / "fit"
        r = invoke("fit", "--matrix", path, "--seed", 5, "--out-dir", fit_dir)
        assert r.exit_code == 0, r.output
        res = eng.fit(io.read_dense_matrix(path), config=eng.FitConfig(seed=5))
        Lbar, Fbar, _ = io.load_artifact(fit_dir)
        assert np.array_equal(Lbar, res.state.Lbar)
        assert np.array_equal(Fbar, res.state.Fbar)

    def test_empty_matrix_is_parse_error(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("")
        r = invoke("fit", "--matrix", path, "--out-dir", tmp_path / "f")
        assert r.exit_code == 3

    def test_covariate_dimension_mismatch_is_parse_error(self, tmp_path):
        m, x = tmp_path / "m.tsv", tmp_path / "x.tsv"
        io.write_matrix(m, np.ones((6, 4)))
        io.write_matrix(x, np.ones((5, 2)))
        r = invoke("fit", "--matrix", m, "--row-covariates", x,
                   "--out-dir", tmp_path / "f")
        assert r.exit_code == 3


class TestBenchCommand:
    def test_table_rows_and_medians(self, tmp_path):
        out = tmp_path / "bench"
        r = invoke("bench", "--scenario", "uninformative", "--seeds", 2,
                   "--n", 60, "--p", 25, "--max-sweeps", 3,
                   "--tau", 1.0, "--tau", 4.0, "--out-dir", out)
        assert r.exit_code == 0, r.output
        lines = (out / "bench.tsv").read_text().strip().splitlines()
        assert lines[0] == "scenario\tmethod\ttau\tseed\trmse"
        assert len(lines) - 1 == 2 * 2 * 2  # seeds * methods * taus
        for line in lines[1:]:
            scenario, method, tau, seed, rmse = line.split("\t")
            assert scenario == "uninformative"
            assert method in ("ebmf", "cebmf")
            assert float(rmse) >= 0.0

    def test_holdout_mode(self, tmp_path):
        out = tmp_path / "bench"
        r = invoke("bench", "--scenario", "tiled", "--seeds", 1, "--n", 50,
                   "--p", 20, "--max-sweeps", 3, "--holdout-frac", 0.2,
                   "--methods", "ebmf", "--out-dir", out)
        assert r.exit_code == 0, r.output
        lines = (out / "bench.tsv").read_text().strip().splitlines()
        assert len(lines) == 2

    def test_unknown_method_is_usage_error(self, tmp_path):
        r = invoke("bench", "--scenario", "tiled", "--methods", "pca",
                   "--out-dir", tmp_path)
        assert r.exit_code == 2


class TestImputeCommand:
    def test_predictions_match_artifact_fitted_values(self, tmp_path):
        rng = np.random.default_rng(3)
        Z = np.outer(rng.normal(size=15), rng.normal(size=8))
        Z += rng.normal(0, 0.2, (15, 8))
        m = tmp_path / "m.tsv"
        io.write_matrix(m, Z)
        fit_dir = tmp_path / "fit"
        invoke("fit", "--matrix", m, "--seed", 0, "--out-dir", fit_dir)
        targets = tmp_path / "t.tsv"
        targets.write_text("1\t1\n3\t5\n15\t8\n")
        out = tmp_path / "imp"
        r = invoke("impute", "--matrix", m, "--artifact-dir", fit_dir,
                   "--targets", targets, "--out-dir", out)
        assert r.exit_code == 0, r.output
        Lbar, Fbar, _ = io.load_artifact(fit_dir)
        fitted = Lbar @ Fbar.T
        got = {}
        for line in (out / "predictions.tsv").read_text().splitlines():
            i, j, v = line.split("\t")
            got[(int(i), int(j))] = float(v)
        assert got[(1, 1)] == fitted[0, 0]
        assert got[(3, 5)] == fitted[2, 4]
        assert got[(15, 8)] == fitted[14, 7]

    def test_defaults_to_missing_cells_and_scores_truth(self, tmp_path):
        rng = np.random.default_rng(4)
        truth = np.outer(rng.normal(size=12), rng.normal(size=7))
        holes = rng.uniform(size=truth.shape) < 0.3
        train = np.where(holes, np.nan, truth)
        m, t = tmp_path / "m.tsv", tmp_path / "truth.tsv"
        io.write_matrix(m, train)
        io.write_matrix(t, truth)
        cfg = tmp_path / "c.cfg"
        cfg.write_text("K_max = 1\nmax_sweeps = 20\n")
        out = tmp_path / "imp"
        r = invoke("impute", "--matrix", m, "--config", cfg, "--seed", 0,
                   "--truth", t, "--out-dir", out)
        assert r.exit_code == 0, r.output
        preds = (out / "predictions.tsv").read_text().strip().splitlines()
        assert len(preds) == int(holes.sum())
        rmse = float((out / "rmse.txt").read_text())
        assert 0.0 <= rmse < 1.0

    def test_missing_artifact_is_usage_error(self, tmp_path):
        m = tmp_path / "m.tsv"
        io.write_matrix(m, np.ones((3, 3)))
        r = invoke("impute", "--matrix", m, "--out-dir", tmp_path / "o")
        assert r.exit_code == 2
        r = invoke("impute", "--matrix", m, "--artifact-dir",
                   tmp_path / "nowhere", "--out-dir", tmp_path / "o")
        assert r.exit_code == 3

    def test_triple_file_ingestion(self, tmp_path):
        rng = np.random.default_rng(5)
        full = np.outer(rng.normal(size=10), rng.normal(size=6))
        rows, cols = np.nonzero(rng.uniform(size=full.shape) < 0.7)
        lines = [f"{i + 1}\t{j + 1}\t{full[i, j]:.17g}\t000" for i, j in
                 zip(rows, cols)]
        m = tmp_path / "ratings.tsv"
        m.write_text("\n".join(lines) + "\n")
        cfg = tmp_path / "c.cfg"
        cfg.write_text("K_max = 1\nmax_sweeps = 10\n")
        out = tmp_path / "imp"
        r = invoke("impute", "--matrix", m, "--config", cfg, "--out-dir", out)
        assert r.exit_code == 0, r.output
        assert (out / "predictions.tsv").is_file()


class TestRerunDeterminism:
    def test_fit_artifacts_identical_except_timings(self, tmp_path):
        sim_dir = tmp_path / "sim"
        invoke("simulate", "--scenario", "uninformative", "--n", 40, "--p", 18,
               "--seed", 2, "--out-dir", sim_dir)
        dirs = [tmp_path / "f1", tmp_path / "f2"]
        for d in dirs:
            r = invoke("fit", "--matrix", sim_dir / "matrix.tsv",
                       "--row-covariates", sim_dir / "row_covariates.tsv",
                       "--col-covariates", sim_dir / "col_covariates.tsv",
                       "--seed", 3, "--out-dir", d)
            assert r.exit_code == 0, r.output
        names = ["Lbar.tsv", "Lbar2.tsv", "Fbar.tsv", "Fbar2.tsv",
                 "elbo_trace.tsv", "summary.json"]
        for name in names:
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()

    def test_bench_table_identical(self, tmp_path):
        dirs = [tmp_path / "b1", tmp_path / "b2"]
        for d in dirs:
            r = invoke("bench", "--scenario", "tiled", "--seeds", 1, "--n", 40,
                       "--p", 16, "--max-sweeps", 2, "--out-dir", d)
            assert r.exit_code == 0, r.output
        assert (dirs[0] / "bench.tsv").read_bytes() == \
               (dirs[1] / "bench.tsv").read_bytes()
