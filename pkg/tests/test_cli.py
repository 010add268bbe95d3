import csv
import io
import json

import numpy as np
import pytest

from bosonmeter.cli import CSV_FIELDS, EXIT_CONFIG, EXIT_INFEASIBLE, derive_seed, main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)
    assert derive_seed(0, 0.25) != derive_seed(0, 0.5)
    assert 0 <= derive_seed(5, -3) < 2 ** 32


def test_tmsv_csv_and_determinism(capsys):
    argv = ["cv-tmsv", "--r", "0.5", "--T", "200", "--R", "3", "--seed", "11"]
    code, out1, _ = run(capsys, *argv)
    assert code == 0
    _, out2, _ = run(capsys, *argv)
    assert out1 == out2
    data = rows(out1)
    assert list(data[0]) == list(CSV_FIELDS)
    assert len(data) == 3
    assert float(data[0]["exact"]) == pytest.approx(np.sinh(0.5) ** 2)
    _, out3, _ = run(capsys, *argv[:-1], "12")
    assert out3 != out1


def test_output_files(tmp_path, capsys):
    out = tmp_path / "res.csv"
    code, _, _ = run(capsys, "cv-tmsv", "--r", "0.25", "--T", "100", "--R", "2", "--output", str(out))
    assert code == 0
    summary = json.loads(out.with_suffix(".json").read_text())
    assert summary["seed"] == 0 and summary["experiment"] == "cv-tmsv"
    assert len(rows(out.read_text())) == 2


def test_qudit_runs(capsys):
    code, out, _ = run(capsys, "qudit", "--d", "3", "--n", "2", "--scheme", "ogm", "--T", "200", "--R", "2",
                       "--hamiltonian", "configs/h2o_like.json")
    assert code == 0, out
    assert len(rows(out)) == 2


def test_infeasible_cs_dimension(capsys):
    code, _, err = run(capsys, "qudit-cs", "--d", "4", "--n", "1", "--T", "10", "--R", "1",
                       "--hamiltonian", "configs/h2o_like.json")
    assert code == EXIT_INFEASIBLE
    assert "infeasible" in err


def test_config_errors(tmp_path, capsys):
    code, _, _ = run(capsys, "qudit", "--hamiltonian", str(tmp_path / "missing.json"), "--T", "5", "--R", "1")
    assert code == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["cv-tmsv", "--T", "0"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main(["cv-tmsv", "--B", "banana"])


def test_compare_merge_rejects_mixed_seeds(tmp_path, capsys):
    paths = []
    for seed in (1, 2):
        p = tmp_path / f"c{seed}.csv"
        assert main(["compare", "--n", "2", "--instances", "2", "--T", "50", "--R", "2", "--M", "5",
                     "--seed", str(seed), "--output", str(p)]) == 0
        paths.append(str(p.with_suffix(".json")))
    code, _, err = run(capsys, "compare", "--inputs", *paths)
    assert code == EXIT_CONFIG and "seeds" in err
    code, _, _ = run(capsys, "compare", "--inputs", paths[0], paths[0], "--format", "json")
    assert code == 0


def test_shift_and_purity(capsys):
    code, out, _ = run(capsys, "shift", "--a0", "1.5", "--T", "20000", "--format", "json")
    assert code == 0
    code, out, _ = run(capsys, "purity", "--s", "0.2", "--T", "20000", "--R", "2")
    assert code == 0 and len(rows(out)) >= 1


@pytest.mark.parametrize("experiment", ["cv-squeezed", "cv-noise", "cv-separable", "cv-random"])
def test_every_cv_subcommand_runs(capsys, experiment):
    code, out, err = run(capsys, experiment, "--T", "100", "--R", "2", "--n", "2", "--K", "1", "2", "--M", "5")
    assert code == 0, err
    assert rows(out)
