import csv
import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import pytest

from predsearch.bench import ExperimentReport
from predsearch.cli import main
from predsearch.report import emit_report, summary_schema, write_manifest

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# -- exit codes -------------------------------------------------------------------


def test_no_arguments_is_usage_error(capsys):
    code, _, err = run(capsys)
    assert code == 2 and "usage" in err


def test_bad_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["cost", "anynet"])
    assert info.value.code == 2


def test_console_script_exit_codes(tmp_path):
    exe = [sys.executable, "-m", "predsearch"]
    assert subprocess.run(exe, capture_output=True).returncode == 2
    bad = subprocess.run(exe + ["cost", "anynet", "--arch", str(tmp_path / "none.json")], capture_output=True, text=True)
    assert bad.returncode == 1 and "none.json" in bad.stderr


# -- space / cost -------------------------------------------------------------------


def test_space_validate_presets(capsys):
    code, out, _ = run(capsys, "space", "validate", "nb201")
    doc = json.loads(out)
    assert code == 0 and doc["cardinality"] == 15625 and doc["encoding_shape"] == [8, 7]
    code, out, _ = run(capsys, "space", "validate", CONFIGS / "anynet.json")
    assert code == 0 and json.loads(out)["kind"] == "SSS"


def test_space_sample(capsys, tmp_path):
    code, out, _ = run(capsys, "space", "sample", "nb201", "-n", 3, "--seed", 1)
    assert code == 0 and len(out.splitlines()) == 3
    run(capsys, "space", "sample", "anynet", "-n", 2, "--out", tmp_path / "s.txt")
    assert (tmp_path / "manifest.json").is_file()


def test_cost_regnetx_600mf(capsys):
    code, out, _ = run(capsys, "cost", "anynet", "--arch", CONFIGS / "regnetx" / "regnetx_600mf.json")
    doc = json.loads(out)
    assert code == 0
    assert doc["flops"] == pytest.approx(6.0e8, rel=0.03)
    assert set(doc) == {"flops", "params"}


def test_cost_bad_group_is_domain_error(capsys, tmp_path):
    arch = tmp_path / "a.json"
    arch.write_text(json.dumps({"d": [1, 1, 4, 7], "w": [24, 56, 152, 368], "g": [3, 7, 9, 46]}))
    code, _, err = run(capsys, "cost", "anynet", "--arch", arch)
    assert code == 1 and "g3" in err


def test_cost_missing_key(capsys, tmp_path):
    arch = tmp_path / "a.json"
    arch.write_text(json.dumps({"d": [1], "w": [24]}))
    code, _, err = run(capsys, "cost", "anynet", "--arch", arch)
    assert code == 1 and "'g'" in err


def test_missing_checkpoint_names_path(capsys, tmp_path):
    ckpt = tmp_path / "missing_main.npz"
    code, _, err = run(capsys, "search", "run", "--space", "anynet", "--main", ckpt, "--out", tmp_path / "p.json")
    assert code == 1 and str(ckpt) in err


def test_unknown_dataset_is_usage_error(capsys, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["bench", "random-baseline", "--dataset", "mnist", "--out", str(tmp_path)])
    assert info.value.code == 2


# -- pipeline ------------------------------------------------------------------------


def pipeline(capsys, d: Path, jobs=1):
    d.mkdir(parents=True, exist_ok=True)
    assert run(capsys, "collect", "--space", "anynet", "--n", 20, "--seed", 3, "--oracle-seed", 7, "--out", d / "samples.csv")[0] == 0
    for role in ("main", "aux"):
        code = run(capsys, "predictor", "train", "--space", "anynet", "--samples", d / "samples.csv", "--role", role,
                   "--seed", 4, "--epochs", 40, "--out", d / f"{role}.npz")[0]
        assert code == 0
    code, _, err = run(capsys, "search", "run", "--space", "anynet", "--main", d / "main.npz", "--aux", d / "aux.npz",
                       "--alpha", 0.2, "--tmax", 12, "--trajectories", 16, "--topk", 10, "--curves", 2,
                       "--seed", 5, "--jobs", jobs, "--out", d / "pool.json")
    assert code == 0, err
    code, _, err = run(capsys, "search", "evaluate", "--space", "anynet", "--pool", d / "pool.json", "--k", 5,
                       "--oracle-seed", 7, "--out", d / "eval.json")
    assert code == 0, err
    return d


def test_pipeline_outputs(capsys, tmp_path):
    d = pipeline(capsys, tmp_path / "a")
    with open(d / "samples.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20 and set(rows[0]) == {"arch", "performance", "cost"}
    pool = json.loads((d / "pool.json").read_text())
    assert 0 < len(pool) <= 10
    assert set(pool[0]) == {"arch", "arch_string", "score", "flops", "provenance", "target_flops"}
    assert set(pool[0]["provenance"]) == {"trajectory", "seed", "iteration", "alpha"}
    with open(d / "pool_curves.csv") as fh:
        curves = list(csv.DictReader(fh))
    assert len(curves) == 2 * 12
    assert {r["trajectory"] for r in curves} == {"0", "1"}
    ev = json.loads((d / "eval.json").read_text())
    assert ev[0]["queried"] == min(5, len(pool))
    man = json.loads((d / "manifest.json").read_text())
    cmds = [r["subcommand"] for r in man["runs"]]
    assert cmds == ["collect", "predictor train", "predictor train", "search run", "search evaluate"]
    rec = man["runs"][3]
    assert set(rec["outputs"]) == {"pool.json", "pool_curves.csv"}
    assert rec["seeds"]["search"] == 5 and rec["args"]["alpha"] == 0.2


def test_pipeline_is_byte_identical(capsys, tmp_path):
    a = pipeline(capsys, tmp_path / "a")
    b = pipeline(capsys, tmp_path / "b", jobs=4)
    for name in ("samples.csv", "main.npz", "aux.npz", "pool.json", "pool_curves.csv", "eval.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_manifest_rerun_replaces_record(capsys, tmp_path):
    for _ in range(2):
        run(capsys, "collect", "--space", "anynet", "--n", 5, "--out", tmp_path / "s.csv")
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert len(man["runs"]) == 1


def test_alpha_without_aux_is_domain_error(capsys, tmp_path):
    d = tmp_path
    run(capsys, "collect", "--space", "anynet", "--n", 5, "--out", d / "s.csv")
    run(capsys, "predictor", "train", "--space", "anynet", "--samples", d / "s.csv", "--epochs", 2, "--out", d / "m.npz")
    code, _, err = run(capsys, "search", "run", "--space", "anynet", "--main", d / "m.npz", "--alpha", 0.5,
                       "--out", d / "p.json")
    assert code == 1 and "--aux" in err


def test_empty_window_is_domain_error(capsys, tmp_path):
    d = tmp_path
    run(capsys, "collect", "--space", "anynet", "--n", 5, "--out", d / "s.csv")
    run(capsys, "predictor", "train", "--space", "anynet", "--samples", d / "s.csv", "--epochs", 2, "--out", d / "m.npz")
    code, _, err = run(capsys, "search", "run", "--space", "anynet", "--main", d / "m.npz", "--target-flops", 1,
                       "--delta", 0, "--tmax", 2, "--trajectories", 2, "--out", d / "p.json")
    assert code == 1 and "no candidates in window" in err


def test_checkpoint_for_other_space_refused(capsys, tmp_path):
    d = tmp_path
    run(capsys, "collect", "--space", "anynet", "--n", 5, "--out", d / "s.csv")
    run(capsys, "predictor", "train", "--space", "anynet", "--samples", d / "s.csv", "--epochs", 2, "--out", d / "m.npz")
    code, _, err = run(capsys, "search", "run", "--space", "nb201", "--main", d / "m.npz", "--out", d / "p.json")
    assert code == 1 and "trained for space" in err


# -- bench --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def table(tmp_path_factory):
    path = tmp_path_factory.mktemp("tbl") / "nb201.csv"
    assert main(["bench", "make-synthetic-nb201", "--out", str(path)]) == 0
    return path


def test_data_env_lookup(capsys, table, tmp_path, monkeypatch):
    monkeypatch.setenv("PREDNAS_DATA", str(table.parent))
    code, out, err = run(capsys, "bench", "random-baseline", "--repeats", 15, "--out", tmp_path / "rnd")
    assert code == 0, err
    with open(tmp_path / "rnd" / "random.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["row"] for r in rows] == [str(i) for i in range(15)] + ["mean", "std"]
    assert all(r["queries"] == "70" for r in rows[:15])
    doc = json.loads((tmp_path / "rnd" / "random.json").read_text())
    jsonschema.validate(doc, summary_schema())


def test_missing_table(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv("PREDNAS_DATA", raising=False)
    code, _, err = run(capsys, "bench", "nb201", "--data", tmp_path / "absent.csv", "--out", tmp_path)
    assert code == 1 and "absent.csv" in err


def test_bench_nb201_csv_out(capsys, table, tmp_path):
    code, out, err = run(capsys, "bench", "nb201", "--data", table, "--repeats", 1, "--epochs", 30, "--jobs", 1,
                         "--out", tmp_path / "r" / "gradient.csv")
    assert code == 0, err
    doc = json.loads((tmp_path / "r" / "gradient.json").read_text())
    jsonschema.validate(doc, summary_schema())
    assert doc["std_undefined"] is True and doc["std"] == 0.0 and doc["queries"] == [70]


# -- report writer --------------------------------------------------------------------


def test_emit_report_rows_and_schema(tmp_path):
    rep = ExperimentReport("gradient", "cifar100", 30, 40, values=[70.0 + i / 10 for i in range(15)],
                           select_values=[1.0] * 15, archs=["a"] * 15, queries=[70] * 15)
    curves = [{"trajectory": 0, "iteration": t, "score": 1.0, "flops": None, "in_window": True, "arch": "x"}
              for t in range(1, 5)]
    paths = emit_report(rep, tmp_path, curves=curves)
    assert [p.name for p in paths] == ["report.csv", "report.json", "report_curves.csv"]
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert len(lines) == 1 + 15 + 2
    jsonschema.validate(json.loads((tmp_path / "report.json").read_text()), summary_schema())
    assert len((tmp_path / "report_curves.csv").read_text().splitlines()) == 1 + 4


def test_schema_rejects_negative_std():
    doc = ExperimentReport("g", "cifar10", 1, 1, values=[1.0], queries=[2]).summary()
    doc["std"] = -1.0
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(doc, summary_schema())


def test_manifest_digests(tmp_path):
    (tmp_path / "x.txt").write_text("hello")
    write_manifest(tmp_path, "demo", {"a": 1}, outputs=[tmp_path / "x.txt"], seeds={"s": 1})
    man = json.loads((tmp_path / "manifest.json").read_text())
    rec = man["runs"][0]
    assert rec["outputs"]["x.txt"] == "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
    assert rec["subcommand"] == "demo" and rec["seeds"] == {"s": 1}
