import json

import jsonschema
import numpy as np
import pytest

from mimdm.cli import main
from mimdm.config import ConfigError, load_sections
from mimdm.io import load_checkpoint
from mimdm.mdm import ModelConfig, TrainConfig
from mimdm.samplers import TRACE_SCHEMA
from mimdm.sudoku import read_puzzles

MDM_INI = """
[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
[train]
epochs = {epochs}
batch_size = 32
warmup_steps = 4
"""

EST_INI = """
[estimator]
d_proj = 4
hidden = 8
[train]
epochs = 2
batch_size = 16
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "mdm.ini").write_text(MDM_INI.format(epochs=2))
    (d / "est.ini").write_text(EST_INI)
    assert run("gen-data", "--count", 160, "--holes", "4-10", "--seed", 1, "--test-frac", 0.1, "--out", d / "p.txt") == 0
    assert run("train-mdm", "--config", d / "mdm.ini", "--data", d / "p.txt", "--out", d / "mdm") == 0
    assert run("build-mi-data", "--mdm", d / "mdm", "--data", d / "p.txt", "--samples", 1, "--limit", 40,
               "--out", d / "mi.bin") == 0
    assert run("train-estimator", "--config", d / "est.ini", "--mi-data", d / "mi.bin", "--mdm", d / "mdm",
               "--out", d / "est") == 0
    return d


class TestGenData:
    def test_lines_and_split(self, tmp_path):
        assert run("gen-data", "--count", 100, "--holes", 6, "--out", tmp_path / "a.txt") == 0
        recs = read_puzzles(tmp_path / "a.txt")
        assert len(recs) == 100 and all(len(r.holes) == 6 for r in recs)
        man = json.loads((tmp_path / "a.txt.split.json").read_text())
        hashes = sum((man["splits"][k] for k in ("train", "val", "test")), [])
        assert sorted(hashes) == sorted(r.content_hash() for r in recs)

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-data", "--count", 50, "--holes", "3-9", "--seed", 4, "--out", tmp_path / name) == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        assert (tmp_path / "a.split.json").read_bytes() == (tmp_path / "b.split.json").read_bytes()

    def test_holes_out_of_range(self, tmp_path, capsys):
        assert run("gen-data", "--count", 5, "--holes", 17, "--out", tmp_path / "x") == 2
        assert "hole" in capsys.readouterr().err

    def test_exclude(self, work, tmp_path):
        assert run("gen-data", "--count", 30, "--holes", 10, "--seed", 1, "--exclude", work / "p.txt",
                   "--out", tmp_path / "t.txt") == 0
        train = {r.content_hash() for r in read_puzzles(work / "p.txt")}
        assert not train & {r.content_hash() for r in read_puzzles(tmp_path / "t.txt")}

    def test_nine_by_nine(self, tmp_path):
        assert run("gen-data", "--box-size", 3, "--count", 3, "--holes", 40, "--out", tmp_path / "n.txt") == 0
        assert all(r.box_size == 3 for r in read_puzzles(tmp_path / "n.txt"))


class TestTraining:
    def test_checkpoint_verifiable(self, work):
        man, store = load_checkpoint(work / "mdm", "mdm")
        assert store.step == 2 * 5
        assert man["lineage"]["split"] == "train"
        rows = (work / "mdm" / "loss.csv").read_text().splitlines()
        assert rows[0] == "step,loss" and len(rows) == 11
        assert "[model]" in (work / "mdm" / "resolved_config.ini").read_text()

    def test_resume_continues_step(self, work, tmp_path):
        out = tmp_path / "m"
        ini = tmp_path / "m.ini"
        ini.write_text(MDM_INI.format(epochs=1))
        assert run("train-mdm", "--config", ini, "--data", work / "p.txt", "--out", out) == 0
        assert run("train-mdm", "--config", ini, "--data", work / "p.txt", "--out", out) == 2
        ini.write_text(MDM_INI.format(epochs=3))
        assert run("train-mdm", "--config", ini, "--data", work / "p.txt", "--out", out, "--resume") == 0
        _, store = load_checkpoint(out)
        assert store.step == 15
        assert len((out / "loss.csv").read_text().splitlines()) == 16

    def test_missing_data(self, work, tmp_path):
        assert run("train-mdm", "--config", work / "mdm.ini", "--data", tmp_path / "none.txt", "--out", tmp_path / "o") == 2

    def test_malformed_data(self, work, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("1234,5678\n")
        assert run("train-mdm", "--config", work / "mdm.ini", "--data", bad, "--split", "", "--out", tmp_path / "o") == 3

    def test_unknown_config_key(self, work, tmp_path):
        ini = tmp_path / "bad.ini"
        ini.write_text("[model]\nwidth = 3\n")
        assert run("train-mdm", "--config", ini, "--data", work / "p.txt", "--out", tmp_path / "o") == 2

    def test_dataset_sidecar_records_hash(self, work):
        side = json.loads((work / "mi.bin.json").read_text())
        man, _ = load_checkpoint(work / "mdm")
        assert side["mdm_sha256"] == man["sha256"] and side["count"] == 40

    def test_estimator_reports_and_checks_backbone(self, work, tmp_path, capsys):
        est_man, _ = load_checkpoint(work / "est", "estimator")
        assert est_man["extra"]["backbone_sha256"] == json.loads((work / "mi.bin.json").read_text())["mdm_sha256"]
        rows = (work / "est" / "mse.csv").read_text().splitlines()
        assert rows[0] == "epoch,train_mse,val_mse" and len(rows) == 3
        train_curve = [float(r.split(",")[1]) for r in rows[1:]]
        assert est_man["extra"]["train_monotone"] == (train_curve[1] <= train_curve[0])
        other = tmp_path / "other"
        ini = tmp_path / "o.ini"
        ini.write_text(MDM_INI.format(epochs=1).replace("[model]", "[model]\nseed = 9"))
        assert run("train-mdm", "--config", ini, "--data", work / "p.txt", "--out", other) == 0
        args = ("train-estimator", "--config", work / "est.ini", "--mi-data", work / "mi.bin", "--mdm", other)
        assert run(*args, "--out", tmp_path / "e1") == 2
        assert "--force" in capsys.readouterr().err
        assert run(*args, "--out", tmp_path / "e2", "--force") == 0


class TestSample:
    def test_mi_guided_needs_estimator(self, work):
        assert run("sample", "--mdm", work / "mdm", "--puzzles", work / "p.txt", "--strategy", "mi_guided") == 2

    def test_trace_schema_and_nfe(self, work, tmp_path):
        out = tmp_path / "t.json"
        assert run("sample", "--mdm", work / "mdm", "--estimator", work / "est", "--puzzles", work / "p.txt",
                   "--split", "test", "--strategy", "mi_guided", "--gamma", 1.0, "--lambda", 2.0, "--trace-out", out) == 0
        doc = json.loads(out.read_text())
        assert len(doc["traces"]) == 16
        for tr in doc["traces"]:
            jsonschema.validate(tr, TRACE_SCHEMA)
            assert tr["backbone_nfe"] == tr["head_nfe"] == len(tr["passes"])

    def test_sequential_nfe_is_empty_cells(self, work, tmp_path):
        out = tmp_path / "s.json"
        assert run("sample", "--mdm", work / "mdm", "--puzzles", work / "p.txt", "--strategy", "sequential",
                   "--trace-out", out) == 0
        for tr in json.loads(out.read_text())["traces"]:
            assert tr["backbone_nfe"] == len(tr["initial_masked"])

    def test_seeded_output_reproducible(self, work, tmp_path):
        args = ("sample", "--mdm", work / "mdm", "--puzzles", work / "p.txt", "--strategy", "naive_k", "--k", 3,
                "--commit", "sample", "--seed", 5, "--limit", 20)
        assert run(*args, "--trace-out", tmp_path / "a.json") == 0
        assert run(*args, "--trace-out", tmp_path / "b.json") == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_bad_strategy(self, work):
        assert run("sample", "--mdm", work / "mdm", "--puzzles", work / "p.txt", "--strategy", "beam") == 2


class TestBenchmark:
    def test_json_and_table(self, work, tmp_path):
        suite = tmp_path / "suite.ini"
        suite.write_text(
            f"[suite]\nmdm = {work / 'mdm'}\nestimator = {work / 'est'}\npuzzles = {work / 'p.txt'}\nsplit = test\n"
            "[method seq]\nstrategy = sequential\n"
            "[method naive2]\nstrategy = naive_k\nk = 2\n"
            "[method mi]\nstrategy = mi_guided\ngamma = 1.0\nlambda = 2.0\n"
        )
        assert run("benchmark", "--suite-config", suite, "--out", tmp_path / "rep") == 0
        doc = json.loads((tmp_path / "rep.json").read_text())
        assert [r["method"] for r in doc["rows"]] == ["seq", "naive2", "mi"]
        assert doc["rows"][0]["avg_passes"] == doc["avg_empty_cells"]
        assert "Avg. Passes" in (tmp_path / "rep.txt").read_text()

    def test_leak_refused(self, work, tmp_path, capsys):
        suite = tmp_path / "s.ini"
        suite.write_text(f"[suite]\nmdm = {work / 'mdm'}\npuzzles = {work / 'p.txt'}\nexclude = {work / 'p.txt'}\n"
                         "[method seq]\nstrategy = sequential\n")
        assert run("benchmark", "--suite-config", suite, "--out", tmp_path / "r") == 2
        assert "training split" in capsys.readouterr().err

    def test_bad_suite(self, work, tmp_path):
        suite = tmp_path / "s.ini"
        suite.write_text(f"[suite]\nmdm = {work / 'mdm'}\npuzzles = {work / 'p.txt'}\n[method x]\nstrategy = mi_guided\n")
        assert run("benchmark", "--suite-config", suite, "--out", tmp_path / "r") == 2
        suite.write_text(f"[suite]\nmdm = {work / 'mdm'}\npuzzles = {work / 'p.txt'}\n[method x]\nbudget = 1\n")
        assert run("benchmark", "--suite-config", suite, "--out", tmp_path / "r") == 2


class TestExport:
    def test_solved_board_zero_map(self, work, tmp_path):
        line = (work / "p.txt").read_text().splitlines()[1]
        solution = line.split(",")[1]
        assert run("export-mi-map", "--mdm", work / "mdm", "--puzzle", solution, "--out", tmp_path / "z") == 0
        vals = np.loadtxt(tmp_path / "z.oracle.csv", delimiter=",")
        assert vals.shape == (16, 16) and not vals.any()

    def test_oracle_and_estimator_side_by_side(self, work, tmp_path):
        assert run("export-mi-map", "--mdm", work / "mdm", "--estimator", work / "est", "--puzzle", work / "p.txt",
                   "--index", 3, "--out", tmp_path / "m") == 0
        a = np.loadtxt(tmp_path / "m.oracle.csv", delimiter=",")
        b = np.loadtxt(tmp_path / "m.estimator.csv", delimiter=",")
        assert a.shape == b.shape == (16, 16)
        assert np.array_equal(b, b.T) and (a >= 0).all()
        side = json.loads((tmp_path / "m.estimator.csv.json").read_text())
        assert side["label"] == "estimator"

    def test_cell_assignments(self, work, tmp_path):
        assert run("export-mi-map", "--mdm", work / "mdm", "--puzzle", "0" * 16, "--cell-assignments", "1,1=2;4,4=3",
                   "--out", tmp_path / "a") == 0
        side = json.loads((tmp_path / "a.oracle.csv.json").read_text())
        assert side["tokens"][0] == 2 and side["tokens"][15] == 3
        assert run("export-mi-map", "--mdm", work / "mdm", "--puzzle", "0" * 16, "--cell-assignments", "9,1=2",
                   "--out", tmp_path / "b") == 2


def test_config_loader(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[model]\nd_model = 32\n[train]\nlr = 0.01\nepochs = 2\n")
    secs, _ = load_sections(ini, {"model": (ModelConfig, {"vocab_size": 4, "seq_len": 16}), "train": (TrainConfig, {})})
    assert secs["model"].d_model == 32 and secs["train"].lr == 0.01 and secs["train"].batch_size == 128
    ini.write_text("[model]\nvocab_size = 9\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_sections(ini, {"model": (ModelConfig, {"vocab_size": 4, "seq_len": 16})})
    ini.write_text("[train]\nepochs = many\n")
    with pytest.raises(ConfigError, match="cannot read"):
        load_sections(ini, {"train": (TrainConfig, {})})
    with pytest.raises(ConfigError, match="not found"):
        load_sections(tmp_path / "missing.ini", {})
