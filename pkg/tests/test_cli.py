import csv
import json

import numpy as np
import pytest

from siamrank.cli import bench_rows, main
from siamrank.dataset import write_labeled_manifest
from siamrank.pgm import write_pgm
from siamrank.tensor_core import FullyConnected, GlobalAvgPool, NetworkSpec, ParameterStore
from siamrank.trainer import ModelCheckpoint, load_checkpoint, save_checkpoint


def tree_bytes(root, skip=("run_manifest.json",)):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    assert main(["generate", "--synthetic", "5", "--size", "32", "--kinds", "gaussian_blur", "--seed", "2", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def fast_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "fast.json"
    path.write_text(json.dumps({"patch_size": 16, "iterations": 4, "lr": 1e-3, "probe_every": 2}))
    return str(path)


class TestGenerate:
    def test_counts(self, tmp_path):
        out = tmp_path / "c"
        rc = main(["generate", "--synthetic", "20", "--size", "24", "--kinds",
                   "gaussian_blur,gaussian_noise,jpeg_proxy", "--out", str(out)])
        assert rc == 0
        distorted = [p for p in out.rglob("level_*.pgm")]
        assert len(distorted) == 300
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["references"]) == 20 and sorted(manifest["kinds"]) == ["gaussian_blur", "gaussian_noise", "jpeg_proxy"]
        assert (out / "run_manifest.json").is_file()

    def test_rerun_bit_identical(self, tmp_path):
        args = ["generate", "--synthetic", "3", "--size", "24", "--kinds", "gaussian_noise,jpeg_proxy", "--seed", "5"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_from_reference_dir(self, tmp_path):
        refs = tmp_path / "refs"
        for i in range(2):
            write_pgm(refs / f"scene{i}.pgm", np.random.default_rng(i).random((20, 20)))
        assert main(["generate", "--references", str(refs), "--out", str(tmp_path / "c")]) == 0
        assert (tmp_path / "c" / "gaussian_blur" / "scene1" / "level_4.pgm").is_file()

    def test_empty_reference_dir(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert main(["generate", "--references", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2
        assert "no .pgm" in capsys.readouterr().err

    def test_unreadable_reference(self, tmp_path, capsys):
        refs = tmp_path / "refs"
        refs.mkdir()
        (refs / "bad.pgm").write_bytes(b"P6\n1 1\n255\n000")
        write_pgm(refs / "good.pgm", np.zeros((8, 8)))
        assert main(["generate", "--references", str(refs), "--out", str(tmp_path / "o")]) == 2
        assert "bad.pgm" in capsys.readouterr().err

    def test_unknown_kind(self, tmp_path):
        assert main(["generate", "--synthetic", "1", "--kinds", "jp2k", "--out", str(tmp_path / "o")]) == 2


class TestTrain:
    def test_missing_corpus(self, tmp_path, capsys):
        assert main(["train-rank", "--corpus", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 2
        assert "no corpus" in capsys.readouterr().err

    def test_manifest_written_before_work(self, corpus_dir, tmp_path):
        rc = main(["train-rank", "--corpus", str(corpus_dir), "--resume", str(tmp_path / "missing.ckpt"),
                   "--seed", "4", "--out", str(tmp_path / "o")])
        assert rc == 2
        manifest = json.loads((tmp_path / "o" / "run_manifest.json").read_text())
        cfg = manifest["resolved"]["train_config"]
        assert (cfg["init_seed"], cfg["data_seed"]) == (4, 4) and manifest["tool_version"]

    def test_bad_config_file(self, tmp_path):
        bad_cfg = tmp_path / "bad.json"
        bad_cfg.write_text("{not json")
        assert main(["train-rank", "--config", str(bad_cfg), "--out", str(tmp_path / "o")]) == 2

    def test_strategies_equal_budget(self, corpus_dir, fast_config, tmp_path, capsys):
        for strategy in ("efficient", "randompair"):
            rc = main(["train-rank", "--config", fast_config, "--corpus", str(corpus_dir), "--strategy", strategy,
                       "--probe", "--out", str(tmp_path / strategy)])
            assert rc == 0
        out = capsys.readouterr().out
        assert "strategy=efficient" in out and "strategy=randompair" in out
        budgets = []
        for strategy in ("efficient", "randompair"):
            rows = list(csv.DictReader((tmp_path / strategy / "report.csv").open()))
            budgets.append([int(r["forward_count"]) for r in rows])
            assert (tmp_path / strategy / "probe.csv").is_file()
        assert budgets[0] == budgets[1]
        manifest = json.loads((tmp_path / "efficient" / "run_manifest.json").read_text())
        assert manifest["command"] == "train-rank" and manifest["resolved"]["train_config"]["patch_size"] == 16

    def test_resume_bit_identical(self, corpus_dir, fast_config, tmp_path):
        base = ["train-rank", "--config", fast_config, "--corpus", str(corpus_dir), "--seed", "3"]
        assert main(base + ["--out", str(tmp_path / "full")]) == 0
        assert main(base + ["--iterations", "2", "--out", str(tmp_path / "half")]) == 0
        assert main(base + ["--resume", str(tmp_path / "half" / "model.ckpt"), "--out", str(tmp_path / "rest")]) == 0
        assert (tmp_path / "full" / "model.ckpt").read_bytes() == (tmp_path / "rest" / "model.ckpt").read_bytes()
        full = (tmp_path / "full" / "report.csv").read_text().splitlines()
        rest = (tmp_path / "rest" / "report.csv").read_text().splitlines()
        assert rest[1:] == full[3:]

    def test_finetune(self, corpus_dir, fast_config, tmp_path, capsys):
        assert main(["train-rank", "--config", fast_config, "--corpus", str(corpus_dir), "--out", str(tmp_path / "r")]) == 0
        rc = main(["finetune", "--config", fast_config, "--checkpoint", str(tmp_path / "r" / "model.ckpt"),
                   "--labels", str(corpus_dir / "labels.txt"), "--out", str(tmp_path / "f")])
        assert rc == 0
        assert "forward_count=40" in capsys.readouterr().out
        assert load_checkpoint(tmp_path / "f" / "model.ckpt").config["phase"] == "finetune"

    def test_finetune_bad_checkpoint(self, corpus_dir, tmp_path):
        (tmp_path / "junk.ckpt").write_bytes(b"nope")
        rc = main(["finetune", "--checkpoint", str(tmp_path / "junk.ckpt"), "--labels", str(corpus_dir / "labels.txt"),
                   "--out", str(tmp_path / "f")])
        assert rc == 2


def predictor_fixture(root, weight, bias):
    """Flat images whose brightness and MOS share one order; scored by mean brightness."""
    entries = []
    for r in range(3):
        for k in range(5):
            rel = f"img/r{r}/l{k}.pgm"
            write_pgm(root / rel, np.full((16, 16), (k + 0.1 * r) / 4.5))
            entries.append((rel, 20.0 * k + 2.0 * r, f"r{r}"))
    write_labeled_manifest(root / "labels.txt", entries, (0, 100))
    spec = NetworkSpec((1, 8, 8), (GlobalAvgPool(), FullyConnected(1, 1)))
    params = ParameterStore({"1.weight": np.array([[weight]], np.float32), "1.bias": np.array([bias], np.float32)})
    save_checkpoint(ModelCheckpoint(spec, params), root / "m.ckpt")
    return ["eval", "--checkpoint", str(root / "m.ckpt"), "--labels", str(root / "labels.txt"), "--split", "all",
            "--crops", "2", "--out", str(root / "ev")]


class TestEval:
    def test_perfect_predictor(self, tmp_path, capsys):
        assert main(predictor_fixture(tmp_path, 1.0, 0.0)) == 0
        out = capsys.readouterr().out
        assert "SROCC=1.0000" in out and "N=15" in out
        rows = list(csv.reader((tmp_path / "ev" / "eval.csv").open()))
        assert rows[0] == ["id", "y", "y_hat"] and rows[-1][0].startswith("# N=15")

    def test_constant_predictor(self, tmp_path, capsys):
        assert main(predictor_fixture(tmp_path, 0.0, 0.5)) == 0
        captured = capsys.readouterr()
        assert "LCC=undefined" in captured.out and "SROCC=0.0000" in captured.out
        assert "constant" in captured.err

    def test_histograms(self, corpus_dir, fast_config, tmp_path):
        assert main(["train-rank", "--config", fast_config, "--corpus", str(corpus_dir), "--out", str(tmp_path / "r")]) == 0
        rc = main(["eval", "--checkpoint", str(tmp_path / "r" / "model.ckpt"), "--labels", str(corpus_dir / "labels.txt"),
                   "--corpus", str(corpus_dir), "--crops", "2", "--out", str(tmp_path / "e")])
        assert rc == 0
        header = (tmp_path / "e" / "histograms.csv").read_text().splitlines()[0]
        assert header == "kind,level,bin_lo,bin_hi,count"

    def test_missing_labels(self, tmp_path):
        args = predictor_fixture(tmp_path, 1.0, 0.0)
        args[args.index("--labels") + 1] = str(tmp_path / "none.txt")
        assert main(args) == 2


class TestBenchAndGradcheck:
    def test_bench_rows(self):
        ref = np.random.default_rng(0).random((20, 20))
        rows = bench_rows(ref, levels=(2, 6), patch=16, repeats=1)
        assert [(r["efficient_forwards"], r["naive_forwards"], r["count_ratio"]) for r in rows] == [(2, 2, 1.0), (6, 30, 5.0)]
        assert all(r["max_rel_diff"] <= 1e-6 for r in rows)

    def test_bench_command(self, corpus_dir, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"patch_size": 16}))
        assert main(["bench", "--config", str(cfg), "--corpus", str(corpus_dir), "--levels", "2,4", "--out", str(tmp_path / "b")]) == 0
        rows = list(csv.DictReader((tmp_path / "b" / "bench.csv").open()))
        assert [int(r["naive_forwards"]) for r in rows] == [2, 12]
        assert "MISMATCH" not in capsys.readouterr().out

    def test_bench_missing_corpus(self, tmp_path):
        assert main(["bench", "--corpus", str(tmp_path / "x"), "--out", str(tmp_path / "b")]) == 2

    def test_gradcheck(self, corpus_dir, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"patch_size": 16}))
        rc = main(["gradcheck", "--config", str(cfg), "--corpus", str(corpus_dir), "--samples", "3", "--out", str(tmp_path / "g")])
        assert rc == 0
        text = (tmp_path / "g" / "gradcheck.txt").read_text()
        assert "[ranking]" in text and "[regression]" in text
