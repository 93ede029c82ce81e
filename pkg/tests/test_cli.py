import csv
import subprocess
import sys
from pathlib import Path

import pytest

from workflux.cli import main, read_config_file


def body(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))


def header_block(path: Path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            k, v = line[2:].strip().split("=", 1)
            out[k] = v
    return out


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(d), "--seed", "5", "--n-cities", "20", "--n-pairs", "120"]) == 0
    return d


@pytest.fixture(scope="module")
def planted_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("planted")
    assert main(["synth", "--kind", "planted", "--out", str(d), "--seed", "2"]) == 0
    return d


def test_extract_tiny(tmp_path):
    log = tmp_path / "log.csv"
    log.write_text("message_id,user_id,timestamp,city_id\n"
                   "m1,u1,100,A\nm2,u1,200,A\nm3,u1,300,B\nm4,u2,100,B\nm5,u2,200,A\nm6,u3,50,Q\n")
    reg = tmp_path / "reg.csv"
    reg.write_text("raw,city_id\nA,A\nB,B\n")
    out = tmp_path / "out"
    assert main(["extract", "--messages", str(log), "--registry", str(reg), "--out", str(out)]) == 0
    assert body(out / "flux_directed.csv") == [["origin", "destination", "count"], ["A", "B", "1"], ["B", "A", "1"]]
    assert body(out / "flux_undirected.csv") == [["city_a", "city_b", "count"], ["A", "B", "2"]]
    import json

    meta = json.loads((out / "extract_metadata.json").read_text())
    assert meta["counts"]["transitions"] == 2
    assert meta["rejects"]["unknown_city"] == 1
    assert meta["metadata"]["seed"] == 0


def test_extract_empty_log_is_warning(tmp_path):
    log = tmp_path / "log.csv"
    log.write_text("message_id,user_id,timestamp,city_id\n")
    reg = tmp_path / "reg.csv"
    reg.write_text("raw,city_id\nA,A\n")
    out = tmp_path / "out"
    assert main(["extract", "--messages", str(log), "--registry", str(reg), "--out", str(out)]) == 2
    assert body(out / "flux_directed.csv") == [["origin", "destination", "count"]]


def test_extract_bad_header_is_fatal(tmp_path, capsys):
    log = tmp_path / "log.csv"
    log.write_text("a,b,c,d\n")
    reg = tmp_path / "reg.csv"
    reg.write_text("raw,city_id\nA,A\n")
    assert main(["extract", "--messages", str(log), "--registry", str(reg), "--out", str(tmp_path)]) == 1
    assert "header" in capsys.readouterr().err


def test_missing_input_file_is_fatal(tmp_path):
    assert main(["extract", "--messages", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 1


def test_fit_twelve_rows(synth_dir, tmp_path):
    ex = tmp_path / "ex"
    assert main(["extract", "--messages", str(synth_dir / "messages.csv"), "--cities", str(synth_dir / "cities.csv"),
                 "--out", str(ex)]) == 0
    out = tmp_path / "fit"
    rc = main(["fit", "--flux-dir", str(ex), "--cities", str(synth_dir / "cities.csv"),
               "--travel-km", str(synth_dir / "travel_km.csv"), "--travel-min", str(synth_dir / "travel_min.csv"),
               "--out", str(out)])
    assert rc == 0
    rows = body(out / "fits.csv")
    assert rows[0] == ["family", "metric", "alpha", "beta", "gamma", "log_a", "r2", "f_stat", "f_pvalue", "f_stars", "n_obs", "ssi", "error"]
    assert len(rows) == 13
    assert len(list((out / "predictions").glob("*.csv"))) == 12
    assert header_block(out / "fits.csv")["diameter_km"] == "12742.0"
    assert {r[9] for r in rows[1:]} <= {"", "*", "**", "***"}
    assert {r[9] for r in rows[1:] if r[0] == "DIRG_GM"} == {"***"}
    pred = body(out / "predictions" / "G_GM_travel_min.csv")
    assert pred[0] == ["origin", "destination", "actual", "predicted"]


def test_fit_without_travel_time_is_partial(synth_dir, tmp_path):
    ex = tmp_path / "ex"
    main(["extract", "--messages", str(synth_dir / "messages.csv"), "--cities", str(synth_dir / "cities.csv"),
          "--out", str(ex)])
    out = tmp_path / "fit"
    rc = main(["fit", "--flux-dir", str(ex), "--cities", str(synth_dir / "cities.csv"),
               "--travel-km", str(synth_dir / "travel_km.csv"), "--out", str(out)])
    assert rc == 2
    rows = body(out / "fits.csv")[1:]
    for row in rows:
        assert bool(row[-1]) == (row[1] == "travel_min")


def test_cluster_planted(planted_dir, tmp_path):
    out = tmp_path / "cl"
    rc = main(["cluster", "--flux-dir", str(planted_dir), "--cities", str(planted_dir / "cities.csv"),
               "--travel-min", str(planted_dir / "travel_min.csv"), "--out", str(out), "--restarts", "5"])
    assert rc == 0
    truth = {(r[0], r[1]): r[2] for r in body(planted_dir / "truth.csv")[1:]}
    got = {(r[0], r[1]): r[3] for r in body(out / "assignments.csv")[1:]}
    assert got == truth
    assert len(body(out / "silhouette.csv")) == 8
    assert len(body(out / "elbow.csv")) == 8
    assert [r[0] for r in body(out / "pattern_fits.csv")[1:]] == ["All", "I", "II", "III", "IV"]
    for name in ("di.csv", "province_patterns.csv"):
        assert (out / name).exists()
    assert any((out / "locality").iterdir())
    for path in out.rglob("*.csv"):
        assert set(header_block(path)) >= {"tool_version", "seed", "config_hash"}


def test_indices_and_correlate(planted_dir, tmp_path):
    cl = tmp_path / "cl"
    main(["cluster", "--flux-dir", str(planted_dir), "--cities", str(planted_dir / "cities.csv"),
          "--travel-min", str(planted_dir / "travel_min.csv"), "--out", str(cl), "--k-max", "4", "--restarts", "3"])
    ind = tmp_path / "ind"
    assert main(["indices", "--flux-dir", str(planted_dir), "--cities", str(planted_dir / "cities.csv"),
                 "--travel-min", str(planted_dir / "travel_min.csv"), "--assignments", str(cl / "assignments.csv"),
                 "--out", str(ind)]) == 0
    assert body(ind / "di.csv") == body(cl / "di.csv")

    cov = tmp_path / "cov.csv"
    rows = body(planted_dir / "flux_undirected.csv")[1:]
    cov.write_text("city_a,city_b,value\n" + "".join(f"{a},{b},{int(c) * 2 + 1}\n" for a, b, c in rows))
    prov = tmp_path / "prov.csv"
    prov.write_text("province_id,value\nP0,1.0\nP1,2.0\nP2,0.5\n")
    out = tmp_path / "corr"
    assert main(["correlate", "--flux-dir", str(planted_dir), "--covariate", str(cov),
                 "--province-covariate", str(prov), "--assignments", str(cl / "assignments.csv"),
                 "--cities", str(planted_dir / "cities.csv"), "--out", str(out)]) == 0
    result = body(out / "correlations.csv")
    assert float(result[1][1]) == pytest.approx(1.0)
    assert result[2][0] == "province_covariate_vs_pattern_III_IV_share"


def test_config_file_with_flag_override(planted_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# planted run\nflux_dir = {planted_dir}\ncities = {planted_dir / 'cities.csv'}\n"
                   f"travel_min = {planted_dir / 'travel_min.csv'}\nk_max = 6\nseed = 9\nrestarts = 2\n")
    out = tmp_path / "cl"
    assert main(["cluster", "--config", str(cfg), "--k-max", "5", "--out", str(out)]) == 0
    assert [r[0] for r in body(out / "elbow.csv")[1:]] == ["2", "3", "4", "5"]
    assert header_block(out / "elbow.csv")["seed"] == "9"


def test_read_config_file_booleans(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("representative = yes\nverbose = no\nseed=3\n")
    assert read_config_file(cfg) == ["--representative", "--seed", "3"]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "workflux", "--version"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "workflux" in res.stdout
