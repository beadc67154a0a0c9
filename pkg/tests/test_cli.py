import json
import subprocess
import sys

import pytest

from primalfix import catalog
from primalfix.cli import main
from primalfix.data import write_csv
from primalfix.graph import graph_to_dict
from primalfix.simulation import DgpSpec, generate


@pytest.fixture
def files(tmp_path):
    g = tmp_path / "g.json"
    g.write_text(json.dumps(graph_to_dict(catalog.mediators_treatment_outcome_confounded())))
    d = tmp_path / "d.csv"
    write_csv(generate(DgpSpec("yinL", 600, 1)), d)
    return tmp_path, g, d


def test_graph_command(files, capsys):
    _, g, _ = files
    assert main(["graph", "--graph", str(g)]) == 0
    out = capsys.readouterr().out
    assert "primal fixable: yes" in out
    assert "L = {A, Y}; M = {M, L}" in out


def test_graph_command_unfixable(tmp_path, capsys):
    g = tmp_path / "g.json"
    g.write_text(json.dumps({"vertices": ["A", "M", "Y"], "di_edges": [["A", "M"], ["M", "Y"]],
                             "bi_edges": [["A", "M"]]}))
    assert main(["graph", "--graph", str(g)]) == 1
    assert "primal fixable: no" in capsys.readouterr().out


def test_graph_command_latent_projects_hidden_vertices(tmp_path, capsys):
    g = tmp_path / "g.json"
    g.write_text(json.dumps(graph_to_dict(catalog.front_door_hidden())))
    assert main(["graph", "--graph", str(g)]) == 0
    assert "L = {A, Y}; M = {M}" in capsys.readouterr().out


def test_estimate_writes_report(files, capsys):
    tmp, g, d = files
    out = tmp / "r.json"
    code = main(["estimate", "--graph", str(g), "--data", str(d), "--ace", "--strategy", "dnorm", "--out", str(out)])
    assert code == 0
    payload = json.loads(out.read_text())
    assert set(payload) == {"a0=1", "a0=0", "ace"}
    assert payload["ace"]["psi"] == pytest.approx(payload["a0=1"]["psi"] - payload["a0=0"]["psi"])
    assert "converged=true" in capsys.readouterr().out


def test_estimate_with_explicit_binding(files, tmp_path):
    _, g, d = files
    code = main(["estimate", "--graph", str(g), "--data", str(d), "--bind", "M=M1,M2",
                 "--estimator", "onestep", "--crossfit", "3"])
    assert code == 0


def test_estimate_input_errors(files, capsys):
    tmp, g, d = files
    assert main(["estimate", "--graph", str(tmp / "missing.json"), "--data", str(d)]) == 2
    assert main(["estimate", "--graph", str(g), "--data", str(d), "--bind", "M=M1,Q9"]) == 2
    assert "Q9" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--graph", str(g), "--data", str(d), "--strategy", "kde"])
    assert exc.value.code == 2


def test_simulate_command(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dgp": "yinL", "n": [200], "replications": 2, "truth": 10.31367,
                               "estimators": [{"estimator": "tmle", "strategy": "bayes"}]}))
    out = tmp_path / "m.csv"
    assert main(["simulate", "--config", str(cfg), "--out", str(out), "--replications", "3"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("label,estimator,strategy,n,replications")
    assert lines[1].startswith("tmle/bayes,tmle,bayes,200,3")
    assert json.loads((tmp_path / "m.json").read_text())["replications"] == 3


def test_simulate_bad_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["simulate", "--config", str(cfg)]) == 2


def test_oracle_command(tmp_path, capsys):
    g = tmp_path / "g.json"
    g.write_text(json.dumps({"vertices": ["A", "M", "Y"], "di_edges": [["A", "M"], ["M", "Y"]],
                             "bi_edges": [["A", "Y"]]}))
    t = tmp_path / "t.csv"
    t.write_text("A,M,Y,prob\n0,0,0,0.1\n0,0,1,0.1\n0,1,0,0.05\n0,1,1,0.15\n"
                 "1,0,0,0.1\n1,0,1,0.1\n1,1,0,0.2\n1,1,1,0.2\n")
    assert main(["oracle", "--graph", str(g), "--table", str(t), "--a0", "1"]) == 0
    psi = float(capsys.readouterr().out.strip().split("=")[1])
    # front-door functional: sum_m P(m | A=1) sum_a P(a) P(Y=1 | m, a)
    pm1 = {0: 0.2 / 0.6, 1: 0.4 / 0.6}
    pa = {0: 0.4, 1: 0.6}
    py = {(0, 0): 0.5, (1, 0): 0.75, (0, 1): 0.5, (1, 1): 0.5}
    want = sum(pm1[m] * sum(pa[a] * py[(m, a)] for a in (0, 1)) for m in (0, 1))
    assert psi == pytest.approx(want, abs=1e-12)
    t.write_text("A,M,Y,prob\n0,0,0,0.5\n0,1,1,0.5\n")
    assert main(["oracle", "--graph", str(g), "--table", str(t)]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "primalfix", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "estimate" in res.stdout
