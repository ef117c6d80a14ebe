import hashlib
from pathlib import Path

import numpy as np
import pytest

from afem_eit import cli
from afem_eit.artifacts import read_bundle, read_errors
from afem_eit.fem import SolverError

SMALL = """
example = 1
epsilon = 1e-3
seed = 4
data_dof = 2500
dof_budget = 500
max_levels = 6
uniform_levels = 4
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL)
    return root


def run(*argv):
    return cli.main([str(a) for a in argv])


def digest(directory: Path) -> dict:
    return {p.relative_to(directory).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.rglob("*.csv"))}


def test_gendata_checksum_is_deterministic(workdir, capsys):
    cfg = workdir / "small.cfg"
    assert run("gendata", "--config", cfg, "--out", workdir / "d1") == 0
    first = capsys.readouterr().out.split()[-1]
    assert run("gendata", "--config", cfg, "--out", workdir / "d2") == 0
    second = capsys.readouterr().out.split()[-1]
    assert first == second and len(first) == 64
    assert run("gendata", "--config", cfg, "--out", workdir / "d3", "--seed", 5) == 0
    assert capsys.readouterr().out.split()[-1] != first
    bundle = read_bundle(workdir / "d1")
    assert bundle.noisy.shape == (10, 16) and bundle.example == 1


def test_afem_uniform_and_rates(workdir, capsys):
    cfg = workdir / "small.cfg"
    data = workdir / "d1"
    assert run("afem", "--config", cfg, "--out", workdir / "a1", "--data", data) == 0
    assert run("afem", "--config", cfg, "--out", workdir / "a2", "--data", data, "--no-figures") == 0
    assert digest(workdir / "a1") == digest(workdir / "a2")
    assert (workdir / "a1" / "figures" / "sigma_final.png").stat().st_size > 0
    assert not (workdir / "a2" / "figures").exists()
    for name in ("levels.csv", "errors.csv", "voltages.csv", "config.cfg"):
        assert (workdir / "a1" / name).exists()
    assert (workdir / "a1" / "estimators" / "level_00.csv").read_text().startswith(
        "element,eta1_sq,eta2_sq,eta3_sq,marked")

    assert run("uniform", "--config", cfg, "--out", workdir / "u1", "--data", data) == 0
    dof, l2, h1 = read_errors(workdir / "u1")
    assert list(dof) == [81, 145, 289, 545]
    capsys.readouterr()
    assert run("rates", "--adaptive", workdir / "a1", "--uniform", workdir / "u1", "--out", workdir / "r") == 0
    out = capsys.readouterr().out
    assert "adaptive" in out and "uniform" in out
    rows = (workdir / "r" / "rates.csv").read_text().splitlines()
    assert rows[0] == "run,norm,rate" and len(rows) == 5
    assert (workdir / "r" / "figures" / "errors.png").exists()


def test_generates_data_when_missing(workdir):
    assert run("afem", "--config", workdir / "small.cfg", "--out", workdir / "g", "--no-figures") == 0
    assert (workdir / "g" / "data" / "noisy.csv").exists()
    np.testing.assert_array_equal(read_bundle(workdir / "g" / "data").noisy, read_bundle(workdir / "d1").noisy)


def test_exit_codes(workdir, tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("example = 7\n")
    assert run("gendata", "--config", bad, "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert run("gendata", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert run("afem", "--config", workdir / "small.cfg", "--out", tmp_path / "y",
               "--data", tmp_path / "nothing") == cli.EXIT_DATA
    other = tmp_path / "ex2.cfg"
    other.write_text(SMALL.replace("example = 1", "example = 2"))
    assert run("afem", "--config", other, "--out", tmp_path / "z", "--data", workdir / "d1") == cli.EXIT_DATA

    def explode(*args, **kwargs):
        raise SolverError("singular")

    monkeypatch.setattr(cli, "afem_run", explode)
    assert run("afem", "--config", workdir / "small.cfg", "--out", tmp_path / "w",
               "--data", workdir / "d1") == cli.EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        run("afem", "--out", tmp_path / "v")
