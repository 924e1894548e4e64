import os
import subprocess
import sys

import numpy as np
import pytest

from figmm.cli import main, read_config
from figmm.data import IncompleteDataset
from figmm.em import EmConfig, run_em
from figmm.errors import ConfigurationError, DataError
from figmm.io import (read_csv, read_imputation, read_table, write_dataset, write_imputation,
                      write_table)
from figmm.mixture import GaussianMixture


def write(path, text):
    path.write_text(text)
    return str(path)


# --- ingestion --------------------------------------------------------------------
def test_two_by_two_with_one_missing(tmp_path):
    data = read_csv(write(tmp_path / "a.csv", "x,y\n1.5,2\n3,NA\n"))
    np.testing.assert_array_equal(data.response, [[1, 1], [1, 0]])
    assert data.columns == ("x", "y") and data.values[0, 0] == 1.5


def test_missing_token_is_case_sensitive_and_configurable(tmp_path):
    path = write(tmp_path / "a.csv", "x,y\n1,na\n2,3\n")
    with pytest.raises(DataError):
        read_csv(path)
    assert np.isnan(read_csv(path, missing_token="na").values[0, 1])


def test_parse_errors_carry_coordinates(tmp_path):
    with pytest.raises(DataError, match=r"row 3, column 'y'"):
        read_csv(write(tmp_path / "a.csv", "x,y\n1,2\n3,abc\n"))
    with pytest.raises(DataError, match="empty"):
        read_csv(write(tmp_path / "b.csv", ""))
    with pytest.raises(DataError, match="duplicate record id"):
        read_csv(write(tmp_path / "c.csv", "id,x\na,1\na,2\n"))
    with pytest.raises(DataError, match="fields"):
        read_csv(write(tmp_path / "d.csv", "x,y\n1\n"))


def test_ids_categorical_and_log_transform(tmp_path):
    path = write(tmp_path / "a.csv", "record_id,grp,x\nr1,a,1\nr2,b,NA\nr3,a,100\n")
    data = read_csv(path, categorical_column="grp", log_transform=True)
    assert data.ids == ("r1", "r2", "r3") and data.columns == ("x",)
    assert list(data.category) == ["a", "b", "a"]
    assert data.values[2, 0] == pytest.approx(np.log(100.0))
    with pytest.raises(DataError):
        read_csv(write(tmp_path / "b.csv", "x\n-1\n"), log_transform=True)


def test_survey_shaped_file(tmp_path):
    rng = np.random.default_rng(0)
    cols = ["mos", "Sales00", "asales00", "Sales01", "Inventories00", "ainventories00",
            "Inventories01"]
    lines = [",".join(cols)]
    for i in range(30):
        row = [f"{x:.6f}" for x in rng.lognormal(3.0, 1.0, size=7)]
        if i % 3 == 0:
            row[1] = "NA"
        if i % 4 == 1:
            row[4] = "NA"
        lines.append(",".join(row))
    data = read_csv(write(tmp_path / "survey.csv", "\n".join(lines) + "\n"), log_transform=True)
    assert data.columns == tuple(cols)
    missing = ~data.observed.all(axis=0)
    assert [c for c, m in zip(cols, missing) if m] == ["Sales00", "Inventories00"]


def test_dataset_round_trip(tmp_path):
    v = np.array([[0.1, np.nan], [1 / 3, 2.0 ** -40]])
    data = IncompleteDataset(v, ("a", "b"), ("p", "q"))
    write_dataset(tmp_path / "d.csv", data)
    back = read_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.values, v)
    assert back.ids == ("p", "q")


def test_long_form_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    v = rng.normal(size=(30, 3))
    v[rng.random((30, 3)) < 0.3] = np.nan
    v[:, 0] = rng.normal(size=30)
    data = IncompleteDataset(v)
    res = run_em(data, 2, EmConfig(seed=0, M=5, max_iter=5))
    path = tmp_path / "imp.csv"
    write_imputation(path, res.imputation, {"seed": 0})
    ids, comp, idx, w, vals, meta = read_imputation(path)
    rec, c0, i0, w0, v0 = res.imputation.long_form()
    np.testing.assert_array_equal(vals, v0)
    np.testing.assert_array_equal(w, w0)
    np.testing.assert_array_equal(comp, c0 + 1)
    assert meta == {"seed": "0"}


def test_table_metadata_block(tmp_path):
    write_table(tmp_path / "t.csv", ["a", "b"], [(1, 0.1)], {"k": "v w"})
    meta, header, rows = read_table(tmp_path / "t.csv")
    assert meta == {"k": "v w"} and header == ["a", "b"] and rows == [["1", "0.10000000000000001"]]


# --- configuration ----------------------------------------------------------------
def test_config_file(tmp_path):
    cfg = read_config(write(tmp_path / "c.txt", "# comment\nseed = 4\nM=20  # inline\n"
                                                 "jackknife = off\nG = none\n"))
    assert cfg == {"seed": 4, "M": 20, "jackknife": False, "G": None}
    with pytest.raises(ConfigurationError, match="unknown config key"):
        read_config(write(tmp_path / "d.txt", "sede = 4\n"))
    with pytest.raises(ConfigurationError):
        read_config(write(tmp_path / "e.txt", "M = many\n"))


# --- subcommands ------------------------------------------------------------------
@pytest.fixture
def m1_file(tmp_path):
    rng = np.random.default_rng(2)
    rho = 0.7
    S = np.array([[1, rho, rho ** 2], [rho, 1, rho], [rho ** 2, rho, 1]])
    m = GaussianMixture([0.3, 0.3, 0.4], [[-3.0] * 3, [1.0] * 3, [5.0] * 3], S)
    y, _ = m.sample(150, rng)
    y[rng.random(150) < 0.3, 1] = np.nan
    y[rng.random(150) < 0.3, 2] = np.nan
    path = tmp_path / "m1.csv"
    write_dataset(path, IncompleteDataset(y))
    return str(path)


def test_impute_is_deterministic(tmp_path, m1_file):
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["impute", "--input", m1_file, "--G", "3", "--seed", "1", "--M", "10",
                     "--output-dir", str(d)]) == 0
        outs.append([(d / f).read_bytes() for f in ("model.txt", "imputation.csv", "report.csv")])
    assert outs[0] == outs[1]
    model = GaussianMixture.load(tmp_path / "a" / "model.txt")
    assert model.G == 3


def test_complete_data_impute_gives_unit_weights(tmp_path):
    rng = np.random.default_rng(3)
    path = tmp_path / "c.csv"
    write_dataset(path, IncompleteDataset(rng.normal(size=(40, 2))))
    assert main(["impute", "--input", str(path), "--G", "1", "--output-dir", str(tmp_path)]) == 0
    _, comp, _, w, v, _ = read_imputation(tmp_path / "imputation.csv")
    assert np.all(w == 1.0) and np.all(comp == 0)
    model = GaussianMixture.load(tmp_path / "model.txt")
    np.testing.assert_allclose(model.means[0], v.mean(axis=0), atol=1e-12)


def test_select_estimate_variance(tmp_path, m1_file, capsys):
    out = str(tmp_path)
    assert main(["select-g", "--input", m1_file, "--gmax", "4", "--output-dir", out]) == 0
    meta, header, rows = read_table(tmp_path / "bic.csv")
    assert header == ["G", "BIC"] and rows[-1] == ["selected", "3"]
    assert capsys.readouterr().out.strip() == "3"
    assert main(["estimate", "--input", m1_file, "--G", "3", "--estimand", "mean:y2",
                 "--estimand", "prop:3:-2", "--output-dir", out]) == 0
    _, _, est = read_table(tmp_path / "estimates.csv")
    assert [r[0] for r in est] == ["mean:y2", "prop:3:-2"]
    assert main(["variance", "--input", m1_file, "--G", "3", "--M", "10",
                 "--estimand", "mean:y2", "--output-dir", out]) == 0
    _, header, var = read_table(tmp_path / "variance.csv")
    assert header[:3] == ["estimand", "estimate", "se"] and float(var[0][2]) > 0


def test_estimate_from_existing_imputation(tmp_path, m1_file):
    out = str(tmp_path)
    assert main(["impute", "--input", m1_file, "--G", "3", "--output-dir", out]) == 0
    assert main(["estimate", "--imputation", str(tmp_path / "imputation.csv"),
                 "--estimand", "mean:y1", "--output-dir", out]) == 0
    _, _, rows = read_table(tmp_path / "estimates.csv")
    data = read_csv(m1_file)
    assert float(rows[0][1]) == pytest.approx(data.values[:, 0].mean(), abs=1e-12)


def test_simulate_writes_tables(tmp_path):
    assert main(["simulate", "--model", "M4", "--n", "60", "--B", "2", "--methods", "Full,CC",
                 "--threads", "1", "--output-dir", str(tmp_path)]) == 0
    meta, header, rows = read_table(tmp_path / "table.csv")
    assert header == ["method", "estimand", "rmse_ratio", "coverage"] and len(rows) == 8
    assert "missing_rate_y2" in meta
    assert (tmp_path / "g_histogram.csv").exists()


def test_errors_give_nonzero_exit(tmp_path, capsys):
    assert main(["impute", "--input", str(tmp_path / "nope.csv"), "--output-dir",
                 str(tmp_path)]) == 1
    bad = write(tmp_path / "bad.csv", "x,y\n1,oops\n")
    assert main(["impute", "--input", bad, "--output-dir", str(tmp_path)]) == 1
    cfg = write(tmp_path / "c.txt", "colour = red\n")
    assert main(["impute", "--input", bad, "--config", cfg]) == 1
    assert "error" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "figmm.cli", "--version"], capture_output=True,
                       text=True, env={**os.environ})
    assert r.returncode == 0 and r.stdout.startswith("figmm")
