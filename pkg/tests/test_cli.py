import csv
import json
import subprocess
import sys

import jsonschema
import pytest

from pgrecruit.cli import load_schema, main


@pytest.fixture(scope="module")
def part2_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--config", "part2", "--seed", "7", "--out", str(out)]) == 0
    return out


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_simulate_outputs(part2_data, tmp_path):
    rows = [r for r in read_rows(part2_data / "patients.csv") if r["arrival_time"]]
    lost = sum(r["status"] == "LOST_ON_ARRIVAL" for r in rows) / len(rows)
    assert abs(lost - 0.2) < 0.03
    assert len(read_rows(part2_data / "latents.csv")) == 75
    man = json.loads((part2_data / "manifest.json").read_text())
    assert man["seed"] == 7 and man["resolved"]["trial"]["screening_window"] == 0.2
    assert main(["simulate", "--config", "part2", "--seed", "7", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "patients.csv").read_bytes() == (part2_data / "patients.csv").read_bytes()


def test_estimate_and_predict(part2_data, tmp_path, capsys):
    fitted = tmp_path / "fm.json"
    assert main(["estimate", str(part2_data / "patients.csv"), "--model", "B3", "--t1", "2",
                 "--out", str(fitted)]) == 0
    doc = json.loads(fitted.read_text())
    jsonschema.validate(doc, load_schema("fitted_model"))
    assert doc["variant"] == "B3"
    out = tmp_path / "fc"
    assert main(["predict", str(fitted), str(part2_data / "patients.csv"), "--config", "part2",
                 "--paths", "2000", "--seed", "1", "--out", str(out)]) == 0
    fc = json.loads((out / "forecast.json").read_text())
    jsonschema.validate(fc, load_schema("forecast"))
    rt = fc["recruitment_time"]
    assert 2 < rt["lower"] <= rt["median"] <= rt["upper"] < 12
    grid = read_rows(out / "grid.csv")
    assert all(float(g["lower"]) <= float(g["mean"]) <= float(g["upper"]) for g in grid)

    assert main(["predict", str(fitted), str(part2_data / "patients.csv"), "--target", "5",
                 "--out", str(tmp_path / "deg")]) == 0
    assert "already reached" in capsys.readouterr().err
    assert json.loads((tmp_path / "deg" / "forecast.json").read_text())["degenerate"]


def test_instant_data_with_delay_end_to_end(tmp_path):
    data = tmp_path / "a.csv"
    lines = ["centre_id,opening_time,arrival_time,last_seen_time"]
    for c in range(12):
        for j in range(8):
            a = 0.1 * j + 0.01 * c
            lines.append(f"{c},0,{a},{'' if j % 5 == 4 else a + 0.2}")
    data.write_text("\n".join(lines) + "\n")
    fitted = tmp_path / "fm.json"
    assert main(["estimate", str(data), "--model", "A2", "--t1", "0.7", "--out", str(fitted)]) == 0
    assert main(["predict", str(fitted), str(data), "--target", "120", "--paths", "500",
                 "--out", str(tmp_path / "fc")]) == 0


def test_exit_codes(part2_data, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("trial: {n_centres: 0}\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "trial.n_centres" in capsys.readouterr().err
    assert main(["study", "--config", "part1", "--workers", "0", "--out", str(tmp_path / "y")]) == 2

    a_dir = tmp_path / "a"
    assert main(["simulate", "--seed", "3", "--out", str(a_dir)]) == 0
    assert main(["estimate", str(a_dir / "patients.csv"), "--model", "B2", "--t1", "1"]) == 3
    capsys.readouterr()
    late = tmp_path / "late.csv"
    late.write_text("centre_id,opening_time,arrival_time,last_seen_time\n1,2,2.5,2.5\n")
    assert main(["estimate", str(late), "--model", "A1", "--t1", "1"]) == 3
    assert main(["estimate", str(tmp_path / "missing.csv"), "--model", "A1", "--t1", "1"]) == 2
    assert "error" in capsys.readouterr().err


def test_study_command(tmp_path):
    assert main(["study", "--config", "part1", "--replications", "2", "--paths", "100",
                 "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    jsonschema.validate(man, load_schema("study_manifest"))
    assert man["plan"]["study"]["n_replications"] == 2
    assert len(read_rows(tmp_path / "table3.csv")) == 6


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pgrecruit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("simulate", "estimate", "predict", "study"):
        assert cmd in proc.stdout
