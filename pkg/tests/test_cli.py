import subprocess
import sys

import pytest
import yaml

from sdas.cell import Genotype, parse_dot_edges
from sdas.cli import main

TOY = {
    "search": {"ops": ["identity", "max_pool_3x3", "sep_conv_3x3"], "n_int": 2, "K": 1, "C1": 4, "C2": 8,
               "batch_size": 8, "epochs": 2, "seed": 0},
    "network": {"K": 1, "C1": 4, "C2": 8},
    "data": {"kind": "image", "num_classes": 2, "n": 40, "shape": [3, 8, 8]},
    "train": {"epochs": 1, "batch_size": 8},
}


def run(argv, capsys):
    with pytest.raises(SystemExit) as e:
        main(argv)
    out = capsys.readouterr()
    return e.value.code, out.out, out.err


def lines(out):
    return dict(line.split("\t", 1) for line in out.strip().splitlines() if "\t" in line)


@pytest.fixture
def toy_config(tmp_path):
    p = tmp_path / "toy.yaml"
    p.write_text(yaml.safe_dump(TOY))
    return p


@pytest.fixture
def searched(toy_config, tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(["search", str(toy_config), "--out", str(out)], capsys)
    assert code == 0
    return out, lines(stdout)


def test_search_writes_outputs(searched):
    out, paths = searched
    for name in ("genotype.json", "disc_log.txt", "metrics.csv", "checkpoint.npz", "resolved_config.yaml",
                 "discretization.png", "losses.png"):
        assert (out / name).exists(), name
    assert paths["reachable_count"] == "1"
    Genotype.load(out / "genotype.json").validate()


def test_count_space_headline(capsys):
    code, out, _ = run(["count-space", "--opset", "o2d"], capsys)
    assert code == 0
    d = lines(out)
    assert int(d["count"]) == 1037664180 ** 2 and d["scientific"] == "1.08e+18"


def test_count_space_small_and_state(searched, capsys):
    code, out, _ = run(["count-space", "--n-int", "1", "--cell-types", "1"], capsys)
    assert code == 0 and lines(out)["count"] == "49"
    code, out, _ = run(["count-space", "--state", str(searched[0] / "checkpoint.npz")], capsys)
    assert code == 0 and lines(out)["count"] == "1"


def test_export_dot_and_json(searched, tmp_path, capsys):
    geno = Genotype.load(searched[0] / "genotype.json")
    code, _, _ = run(["export", str(searched[0] / "genotype.json"), "--out", str(tmp_path / "x")], capsys)
    assert code == 0
    for ct in geno.cells:
        assert sorted(parse_dot_edges((tmp_path / "x" / f"{ct}.dot").read_text())) == sorted(geno.edge_list(ct))
    code, _, _ = run(["export", str(searched[0] / "genotype.json"), "--format", "json", "--out",
                      str(tmp_path / "j")], capsys)
    assert code == 0 and Genotype.load(tmp_path / "j" / "genotype.json") == geno


def test_evaluate_zero_epochs(searched, toy_config, tmp_path, capsys):
    code, out, _ = run(["evaluate", str(searched[0] / "genotype.json"), str(toy_config), "--epochs", "0",
                        "--out", str(tmp_path / "ev")], capsys)
    assert code == 0
    d = lines(out)
    assert 0.0 <= float(d["accuracy"]) <= 1.0 and int(d["params"]) > 0
    assert (tmp_path / "ev" / "eval_metrics.csv").exists()


def test_gradcheck_table(capsys):
    code, out, _ = run(["gradcheck", "--opset", "oadv"], capsys)
    rows = [r for r in out.strip().splitlines()[1:]]
    assert code == 0 and len(rows) == 9 and all(r.endswith("pass") for r in rows)


def test_gradcheck_failure_exit(capsys):
    code, _, _ = run(["gradcheck", "--opset", "o2d", "--tol", "0"], capsys)
    assert code == 1


def test_usage_errors(toy_config, tmp_path, capsys):
    assert run(["search", str(toy_config), "--schedule", "Z"], capsys)[0] == 2
    assert run(["search", str(tmp_path / "missing.yaml")], capsys)[0] == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({**TOY, "search": {**TOY["search"], "learning_rate": 1}}))
    code, _, err = run(["search", str(bad)], capsys)
    assert code == 2 and "learning_rate" in err
    g = tmp_path / "g.json"
    g.write_text("{}")
    assert run(["export", str(g)], capsys)[0] == 2


def test_help_entry_point():
    res = subprocess.run([sys.executable, "-m", "sdas.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "count-space" in res.stdout
