import csv
import json

import numpy as np
import pytest

from aghqmm.cli import gradient_check, main
from aghqmm.data import ModelSpec, SimSpec, parse_dataset, simulate, simulate_columns, write_csv
from aghqmm.errors import DataError, InvalidArgumentError, NotPositiveDefiniteError
from aghqmm.replicate import replicate, summarize, true_values, ReplicateOutcome


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestParse:
    def test_two_groups_intercept_only(self, tmp_path):
        f = _write(tmp_path / "d.csv", "g,y\na,1\na,0\nb,0\nb,1\n")
        data = parse_dataset(f, ModelSpec("y", "g"))
        assert (data.m, data.q, data.d, data.N) == (2, 1, 1, 4)
        np.testing.assert_array_equal(data.group(0).y, [1.0, 0.0])

    def test_first_appearance_order(self, tmp_path):
        f = _write(tmp_path / "d.csv", "g,y,x\nz,1,0.5\nb,0,1\nz,0,2\na,1,3\n")
        data = parse_dataset(f, ModelSpec("y", "g", ("x",)))
        assert data.group_labels == ("z", "b", "a")
        np.testing.assert_array_equal(data.group(0).X[:, 1], [0.5, 2.0])
        np.testing.assert_array_equal(data.sizes, [2, 1, 1])

    def test_slopes_and_flags(self, tmp_path):
        f = _write(tmp_path / "d.csv", "g,y,t\n1,1,-1\n1,0,1\n2,1,0\n")
        data = parse_dataset(f, ModelSpec("y", "g", ("t",), ("t",), intercept=False))
        assert (data.q, data.d) == (1, 2)
        np.testing.assert_array_equal(data.group(0).V, [[1.0, -1.0], [1.0, 1.0]])
        assert data.param_names()[0] == "beta[t]"

    def test_round_trip(self, tmp_path):
        spec = SimSpec("eq5", m=30, n=4, seed=7)
        write_csv(tmp_path / "s.csv", simulate_columns(spec))
        a = simulate(spec)
        b = parse_dataset(tmp_path / "s.csv", spec.model_spec)
        for attr in ("y", "X", "V", "mask", "sizes"):
            np.testing.assert_array_equal(getattr(a, attr), getattr(b, attr))
        assert a.param_names() == b.param_names()

    def test_missing_column_is_named(self, tmp_path):
        f = _write(tmp_path / "d.csv", "g,y\n1,1\n")
        with pytest.raises(DataError, match="'x'"):
            parse_dataset(f, ModelSpec("y", "g", ("x",)))

    def test_bad_response_names_row(self, tmp_path):
        f = _write(tmp_path / "d.csv", "g,y\n1,1\n1,2\n")
        with pytest.raises(DataError, match="row 1"):
            parse_dataset(f, ModelSpec("y", "g"))

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError):
            parse_dataset(_write(tmp_path / "e.csv", ""), ModelSpec("y", "g"))
        with pytest.raises(DataError):
            parse_dataset(_write(tmp_path / "h.csv", "g,y\n"), ModelSpec("y", "g"))

    def test_ragged_row(self, tmp_path):
        with pytest.raises(DataError, match="line 3"):
            parse_dataset(_write(tmp_path / "r.csv", "g,y\n1,1\n1\n"), ModelSpec("y", "g"))

    def test_non_numeric(self, tmp_path):
        with pytest.raises(DataError):
            parse_dataset(_write(tmp_path / "n.csv", "g,y,x\n1,1,abc\n"), ModelSpec("y", "g", ("x",)))

    def test_spec_needs_effects(self):
        with pytest.raises(InvalidArgumentError):
            ModelSpec("y", "g", intercept=False)
        with pytest.raises(InvalidArgumentError):
            ModelSpec("y", "g", random_intercept=False)


class TestSimulate:
    def test_defaults(self):
        s5, s6 = SimSpec("eq5"), SimSpec("eq6")
        assert s5.beta == (-2.5, -0.15, 0.1, 0.2) and s5.Sigma == ((2.0, 1.0), (1.0, 1.0))
        assert s6.beta == (-2.5, -0.15) and s6.Sigma == ((2.0,),)

    def test_design(self):
        cols = simulate_columns(SimSpec("eq5", m=4, n=5, seed=1))
        np.testing.assert_array_equal(cols["t"][:5], np.linspace(-3, 3, 5))
        np.testing.assert_array_equal(cols["x"].reshape(4, 5)[:, 0], [1, 1, 0, 0])
        np.testing.assert_array_equal(cols["xt"], cols["x"] * cols["t"])
        assert set(np.unique(cols["y"])) <= {0.0, 1.0}

    def test_deterministic(self):
        a = simulate_columns(SimSpec("eq6", m=50, n=3, seed=3))
        b = simulate_columns(SimSpec("eq6", m=50, n=3, seed=3))
        c = simulate_columns(SimSpec("eq6", m=50, n=3, seed=4))
        np.testing.assert_array_equal(a["y"], b["y"])
        assert not np.array_equal(a["y"], c["y"])

    def test_default_correlation(self):
        S = np.array(SimSpec("eq5").Sigma)
        assert abs(S[0, 1] / np.sqrt(S[0, 0] * S[1, 1]) - 0.71) < 0.005

    def test_marginal_response_rate(self):
        # with Sigma = 0 the response rate is the logistic of the linear predictor
        cols = simulate_columns(SimSpec("eq6", m=40_000, n=1, Sigma=((1e-300,),), beta=(0.0, 0.0), seed=2))
        assert abs(cols["y"].mean() - 0.5) < 0.01

    def test_errors(self):
        with pytest.raises(InvalidArgumentError):
            SimSpec("eq7")
        with pytest.raises(InvalidArgumentError):
            SimSpec("eq5", m=0)
        with pytest.raises(InvalidArgumentError):
            SimSpec("eq5", beta=(1.0, 2.0))
        with pytest.raises(NotPositiveDefiniteError):
            simulate(SimSpec("eq5", Sigma=((1.0, 2.0), (2.0, 1.0))))


class TestReplicate:
    def test_truth_order(self):
        names, truth = true_values(SimSpec("eq5"))
        assert names == ["beta[(Intercept)]", "beta[x]", "beta[t]", "beta[xt]",
                         "Sigma[0,0]", "Sigma[0,1]", "Sigma[1,1]"]
        np.testing.assert_array_equal(truth, [-2.5, -0.15, 0.1, 0.2, 2.0, 1.0, 1.0])

    def test_summary_formulas(self):
        names, truth = ["a"], np.array([1.0])
        outs = [ReplicateOutcome(r, np.array([e]), np.array([0.5]), np.array([e - 1]), np.array([e + 1]), True, "")
                for r, e in enumerate([0.5, 1.5, 3.0, 1.0])]
        outs.append(ReplicateOutcome(9, np.array([np.nan]), *(np.array([np.nan]),) * 3, False, "boom"))
        row = summarize(names, truth, outs)[0]
        assert row["n_ok"] == 4 and row["n_failed"] == 1
        assert row["mean_estimate"] == pytest.approx(1.5)
        assert row["bias"] == pytest.approx(0.5) and row["rel_bias"] == pytest.approx(1.5)
        assert row["coverage"] == pytest.approx(0.75)
        half = 2 * np.sqrt(0.75 * 0.25 / 4)
        assert row["coverage_band_lo"] == pytest.approx(0.75 - half)
        assert row["mean_length"] == pytest.approx(2.0)

    def test_bit_identical_and_worker_independent(self):
        spec = SimSpec("eq6", m=50, n=5, seed=11)
        a = replicate(spec, 5, 4)
        b = replicate(spec, 5, 4)
        c = replicate(spec, 5, 4, workers=2)
        for x, y in ((a, b), (a, c)):
            for o1, o2 in zip(x.outcomes, y.outcomes):
                np.testing.assert_array_equal(o1.estimate, o2.estimate)
                np.testing.assert_array_equal(o1.upper, o2.upper)

    def test_failures_are_recorded(self):
        study = replicate(SimSpec("eq6", m=3, n=1, seed=1), 3, 3)
        assert len(study.outcomes) == 3
        rows = study.rows()
        assert sum(r["kind"] == "summary" for r in rows) == len(study.names)


class TestGradientCheck:
    def test_fixture_gradient(self, eq5_data):
        theta = np.array([-2.4, -0.1, 0.1, 0.2, -0.5, 0.1, 0.4])
        _, _, rel = gradient_check(eq5_data, "bernoulli", 7, theta)
        assert np.max(rel) <= 1e-6


class TestCli:
    @pytest.fixture
    def eq6_csv(self, tmp_path):
        out = tmp_path / "eq6.csv"
        assert main(["simulate", "--design", "eq6", "--m", "200", "--n", "5", "--seed", "1", "--out", str(out)]) == 0
        return out

    def test_simulate_writes_header(self, eq6_csv):
        with eq6_csv.open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["group", "y", "x", "t", "xt"] and len(rows) == 1001

    def test_simulate_custom_parameters(self, tmp_path):
        out = tmp_path / "eq5.csv"
        assert main(["simulate", "--design", "eq5", "--m", "10", "--n", "3", "--seed", "2",
                     "--beta", "0,0,0,0", "--sigma", "1,0.5,1", "--out", str(out)]) == 0
        assert main(["simulate", "--design", "eq6", "--m", "10", "--n", "3", "--seed", "2",
                     "--sigma", "1,2", "--out", str(out)]) == 2

    def test_fit_report(self, eq6_csv, tmp_path, capsys):
        out = tmp_path / "fit.json"
        code = main(["fit", "--data", str(eq6_csv), "--response", "y", "--group", "group", "--fixed", "x",
                     "--k", "25", "--out", str(out)])
        assert code == 0
        rep = json.loads(out.read_text())
        assert rep["schema"] == "aghqmm.fit/1"
        assert rep["converged"] is True and rep["grad_norm"] <= 1e-5
        assert [p["name"] for p in rep["parameters"]] == ["beta[(Intercept)]", "beta[x]", "delta[(Intercept)]"]
        entry = rep["Sigma"]["entries"][0]
        assert entry["lower"] > 0 and entry["lower"] <= entry["estimate"] <= entry["upper"]
        assert rep["n_groups"] == 200 and rep["n_obs"] == 1000

    def test_fit_to_stdout(self, eq6_csv, capsys):
        assert main(["fit", "--data", str(eq6_csv), "--response", "y", "--group", "group", "--fixed", "x",
                     "--k", "5"]) == 0
        assert json.loads(capsys.readouterr().out)["k"] == 5

    def test_gradcheck(self, eq6_csv, tmp_path, capsys):
        out = tmp_path / "gc.json"
        code = main(["gradcheck", "--data", str(eq6_csv), "--response", "y", "--group", "group", "--fixed", "x",
                     "--k", "25", "--out", str(out)])
        assert code == 0
        assert "max relative error" in capsys.readouterr().out
        assert json.loads(out.read_text())["max_relative_error"] <= 1e-6

    def test_gradcheck_bad_theta(self, eq6_csv, capsys):
        code = main(["gradcheck", "--data", str(eq6_csv), "--response", "y", "--group", "group", "--fixed", "x",
                     "--k", "5", "--theta", "1,2"])
        assert code == 2
        assert "needs 3 values" in capsys.readouterr().err

    def test_replicate(self, tmp_path, capsys):
        out = tmp_path / "rep.csv"
        code = main(["replicate", "--design", "eq6", "--m", "50", "--n", "5", "--k", "5", "--reps", "3",
                     "--seed", "1", "--out", str(out)])
        assert code == 0
        with out.open() as fh:
            rows = list(csv.DictReader(fh))
        assert sum(r["kind"] == "replicate" for r in rows) == 9
        assert sum(r["kind"] == "summary" for r in rows) == 3
        assert "coverage" in capsys.readouterr().out

    def test_missing_file(self, tmp_path, capsys):
        code = main(["fit", "--data", str(tmp_path / "nope.csv"), "--response", "y", "--group", "g"])
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_missing_column(self, eq6_csv, capsys):
        code = main(["fit", "--data", str(eq6_csv), "--response", "y", "--group", "cluster"])
        assert code == 2
        assert "'cluster'" in capsys.readouterr().err
