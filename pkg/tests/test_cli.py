import numpy as np
import pytest

from rniprune.checkpoint import load_checkpoint
from rniprune.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, main
from rniprune.fileio import read_csv

CONFIG = """\
[experiment]
arch = vgg16
width_scale = 0.0625
norm = {norm}
policy = {policy}
ratios = 0.5
seeds = 1, 2, 3
out = runs

[data]
source = {source}
{data}
[train]
epochs = 2
batch_size = 32
lr = 0.05
lr_drops = 1:0.1

[sparsity]
{sparsity}
[finetune]
epochs = 1
"""
SYNTH = "train_size = 96\ntest_size = 40\nnum_classes = 4\n"
RNI = "method = rni\nlambda_s = 1e-3\nb = 3\n"


def write_config(tmp_path, name="c.ini", norm="sigma", policy="global", sparsity=RNI,
                 source="synthetic", data=SYNTH):
    p = tmp_path / name
    p.write_text(CONFIG.format(norm=norm, policy=policy, sparsity=sparsity, source=source, data=data))
    return p


def run(*args):
    return main([str(a) for a in args])


class TestPipeline:
    def test_train_prune_finetune_report(self, tmp_path, capsys):
        cfg, out = write_config(tmp_path), tmp_path / "out"
        assert run("train", "--config", cfg, "--seed", 1, "--out", out) == 0
        run_dir = out / "rni" / "seed1"
        for name in ("model.ckpt", "history.csv", "importance_hist.csv"):
            assert (run_dir / name).exists()
        _, hist = read_csv(run_dir / "history.csv")
        assert len(hist) == 2
        meta, bins = read_csv(run_dir / "importance_hist.csv")
        assert sum(int(b["count"]) for b in bins) == int(meta["channels"])

        assert run("prune", "--checkpoint", run_dir / "model.ckpt", "--ratio", 0.5, "--out", out) == 0
        pdir = run_dir / "global_r0.5"
        for name in ("pruned.ckpt", "plan.txt", "cost.csv", "layer_map.csv"):
            assert (pdir / name).exists()
        _, cost = read_csv(pdir / "cost.csv")
        c = cost[0]
        assert float(c["flops_rel"]) <= 1.0 and float(c["params_rel"]) <= 1.0
        assert float(c["acc_drop"]) == pytest.approx(float(c["acc_unpruned"]) - float(c["acc_pruned"]))

        assert run("finetune", "--checkpoint", pdir / "pruned.ckpt", "--out", out) == 0
        assert run("eval", "--checkpoint", pdir / "finetuned.ckpt") == 0
        assert "acc=" in capsys.readouterr().out

        _, rows = read_csv(out / "results.csv")
        assert [(r["method"], r["ratio"], r["seed"]) for r in rows] == [("rni", "0.0", "1"), ("rni", "0.5", "1")]
        assert run("finetune", "--checkpoint", pdir / "pruned.ckpt", "--out", out) == 0
        _, again = read_csv(out / "results.csv")
        assert again == rows

        assert run("report", "--out", out) == 0
        summary = (out / "report" / "summary.md").read_text()
        assert "| rni |" in summary and "50% FLOPs" in summary

    def test_three_seeds(self, tmp_path):
        cfg, out = write_config(tmp_path), tmp_path / "out"
        assert run("train", "--config", cfg, "--out", out) == 0
        cks = [load_checkpoint(out / "rni" / f"seed{s}" / "model.ckpt") for s in (1, 2, 3)]
        w = [c.model.params["conv1.weight"].data for c in cks]
        assert not np.array_equal(w[0], w[1]) and not np.array_equal(w[1], w[2])

    def test_deterministic_results(self, tmp_path):
        cfg = write_config(tmp_path)
        for root in ("a", "b"):
            out = tmp_path / root
            run("train", "--config", cfg, "--seed", 2, "--out", out)
            run("prune", "--checkpoint", out / "rni/seed2/model.ckpt", "--ratio", 0.5, "--out", out)
            run("finetune", "--checkpoint", out / "rni/seed2/global_r0.5/pruned.ckpt", "--out", out)
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
        assert (a / "rni/seed2/model.ckpt").read_bytes() == (b / "rni/seed2/model.ckpt").read_bytes()

    def test_uniform_layer_map(self, tmp_path):
        cfg = write_config(tmp_path, norm="vanilla", policy="uniform", sparsity="method = none\n")
        out = tmp_path / "out"
        run("train", "--config", cfg, "--seed", 1, "--out", out)
        assert run("prune", "--checkpoint", out / "ucs/seed1/model.ckpt", "--ratio", 0.5, "--out", out) == 0
        _, rows = read_csv(out / "ucs/seed1/uniform_r0.5/layer_map.csv")
        wide = [float(r["fraction"]) for r in rows if int(r["width"]) >= 8]
        assert wide and set(wide) == {0.5}


class TestExitCodes:
    def test_config_errors(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[experiment]\narch = vgg16\nwidth_scale = huge\n")
        assert run("train", "--config", bad) == EXIT_CONFIG
        assert "line 3" in capsys.readouterr().err
        assert run("train", "--config", tmp_path / "missing.ini") == EXIT_CONFIG
        assert run("train") == EXIT_CONFIG
        assert run("frobnicate") == EXIT_CONFIG

    def test_ratio_out_of_range(self, tmp_path):
        cfg, out = write_config(tmp_path), tmp_path / "out"
        run("train", "--config", cfg, "--seed", 1, "--out", out)
        assert run("prune", "--checkpoint", out / "rni/seed1/model.ckpt", "--ratio", 1.2) == EXIT_CONFIG

    def test_missing_dataset(self, tmp_path):
        cfg = write_config(tmp_path, source="cifar10", data=f"dir = {tmp_path / 'nothing'}\n")
        assert run("train", "--config", cfg, "--out", tmp_path / "out") == EXIT_DATA

    def test_bad_checkpoint(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"garbage")
        assert run("eval", "--checkpoint", tmp_path / "x.ckpt") == EXIT_DATA
        assert run("eval", "--checkpoint", tmp_path / "none.ckpt") == EXIT_DATA

    def test_empty_report(self, tmp_path):
        assert run("report", "--out", tmp_path) == EXIT_DATA

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, tmp_path):
        cfg = write_config(tmp_path)
        text = cfg.read_text().replace("lr = 0.05", "lr = 1e30")
        cfg.write_text(text)
        assert run("train", "--config", cfg, "--seed", 1, "--out", tmp_path / "out") == EXIT_NUMERIC
