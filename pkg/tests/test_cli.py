import json
from pathlib import Path

import numpy as np
import pytest

from defectfit.cli import main

CONFIG = """\
schema_version = 1

[potential]
pair_stiffness = 4.0
density_decay = 3.0
embed_sqrt = -1.5
embed_quad = 1.0
cutoff_factor = 1.9
taper_width_factor = 0.4

[lattice]
N = 6
defects = [{kind = "vacancy", cell = [0, 0]}]

[basis]
n_radial = 5
m_max = 3
ladder = [[1, 4], [2, 6]]

[training]
n_train = 10
n_test = 4
delta = 0.01
seed = 7
L_values = [4, 5]

[weights]
energy = 100.0
force = 1.0

[study]
simulation_N = 14
core_N = 12
defect_cases = [["vacancy", "vacancy"]]
"""


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.toml"
    path.write_text(CONFIG)
    return path


def test_unknown_config_key_is_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(CONFIG + "\n[training2]\nn = 2\n")
    rc = main(["generate-lattice", "--config", str(bad), "--out", str(tmp_path)])
    assert rc == 2
    err = capsys.readouterr().err
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["error"] == "ConfigError"
    assert "training2" in payload["message"]

    bad.write_text(CONFIG.replace("n_train = 10", "n_trainn = 10"))
    rc = main(["generate-lattice", "--config", str(bad), "--out", str(tmp_path)])
    assert rc == 2
    err = capsys.readouterr().err
    assert "n_trainn" in err


def test_generate_lattice(config_file, tmp_path):
    rc = main(["generate-lattice", "--config", str(config_file), "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "lattice.xyz").read_text().strip().splitlines()
    assert lines[0] == "35"          # 36 cells minus one vacancy
    meta = json.loads((tmp_path / "lattice.json").read_text())
    assert meta["n_sites"] == 35
    assert len(meta["meta"]["config_sha256"]) == 64


def test_equilibrate_artifacts(config_file, tmp_path):
    rc = main(["equilibrate", "--config", str(config_file), "--out", str(tmp_path)])
    assert rc == 0
    doc = json.loads((tmp_path / "equilibrium.json").read_text())
    assert doc["converged"] is True
    assert doc["c_bar"] > 0
    assert doc["energy"] < 0
    csv = (tmp_path / "displacement.csv").read_text().splitlines()
    header = [l for l in csv if not l.startswith("#")][0]
    assert header == "index,x,y,ux,uy"
    assert len([l for l in csv if not l.startswith(("#", "index"))]) == 35


def test_training_set_fit_and_matching_round_trip(config_file, tmp_path):
    rc = main(["make-training-set", "--config", str(config_file),
               "--out", str(tmp_path), "--L", "4", "--defect", "vacancy"])
    assert rc == 0
    set_dir = tmp_path / "trainset_L4_vacancy"
    lines = (set_dir / "observations.jsonl").read_text().splitlines()
    assert len(lines) == 1 + 14          # header + 10 train + 4 test
    rec = json.loads(lines[1])
    assert {"config_csv", "energy", "forces", "tag", "defect_kind"} <= rec.keys()

    rc = main(["fit", "--config", str(config_file), "--out", str(tmp_path),
               "--training-set", str(set_dir), "--basis-order", "2",
               "--basis-degree", "5"])
    assert rc == 0
    fit_doc = json.loads((tmp_path / "fit.json").read_text())
    assert fit_doc["rmse_force_test"] < 0.2
    model_doc = json.loads((tmp_path / "model.json").read_text())
    assert model_doc["spec"]["order"] == 2
    assert model_doc["spec"]["max_degree"] == 5

    rc = main(["report-matching", "--config", str(config_file), "--out", str(tmp_path),
               "--training-set", str(set_dir), "--model", str(tmp_path / "model.json")])
    assert rc == 0
    rep = json.loads((tmp_path / "matching.json").read_text())
    assert rep["eps_F"] >= 0 and rep["eps_FC_hom"] >= 0


def test_check_derivatives(config_file, tmp_path, capsys):
    rc = main(["check-derivatives", "--config", str(config_file), "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "force FD max rel err" in out


def test_study_runs_and_is_deterministic(config_file, tmp_path):
    rc = main(["study", "--config", str(config_file), "--out", str(tmp_path / "a")])
    assert rc == 0
    rc = main(["study", "--config", str(config_file), "--out", str(tmp_path / "b")])
    assert rc == 0
    a = (tmp_path / "a" / "study.csv").read_bytes()
    b = (tmp_path / "b" / "study.csv").read_bytes()
    assert a == b
    rows = [l for l in a.decode().splitlines() if not l.startswith("#")]
    assert rows[0].startswith("L,n_D,defect_kinds,n_basis")
    assert len(rows) == 1 + 2 * 2        # header + two L values x two basis sizes
    rates = json.loads((tmp_path / "a" / "rates.json").read_text())
    assert "vacancy+vacancy" in rates["rates"]
