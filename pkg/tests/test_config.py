from pathlib import Path

import pytest

from rniprune.config import ConfigError, load_config, parse_config

BASE = """\
[experiment]
arch = vgg16
width_scale = 0.25
norm = sigma
ratios = 0.5, 0.9
seeds = 1, 2, 3
out = runs/x

[data]
source = synthetic
train_size = 100

[train]
epochs = 20
lr_drops = 10:0.1, 15:0.1

[sparsity]
method = rni
lambda_s = 1e-3
b = 3

[finetune]
epochs = 5
"""


class TestParse:
    def test_fields(self):
        c = parse_config(BASE)
        assert (c.arch, c.width_scale, c.norm_kind, c.method) == ("vgg16", 0.25, "sigma", "rni")
        assert c.ratios == (0.5, 0.9) and c.seeds == (1, 2, 3)
        assert c.train.lr_drops == ((10, 0.1), (15, 0.1))
        assert c.train.sparsity.lambda_s == 1e-3 and c.train.sparsity.b == 3
        assert c.finetune.epochs == 5 and c.finetune.sparsity.method == "none"
        assert c.finetune.lr_drops == c.train.lr_drops
        assert c.data.train_size == 100

    def test_default_method_labels(self):
        ucs = BASE.replace("norm = sigma", "norm = vanilla\npolicy = uniform") \
            .replace("method = rni\nlambda_s = 1e-3", "method = none\nlambda_s = 0")
        assert parse_config(ucs).method == "ucs"
        l1 = BASE.replace("method = rni", "method = l1")
        assert parse_config(l1).method == "slimming"

    def test_digest_ignores_formatting(self):
        reformatted = BASE.replace("ratios = 0.5, 0.9", "ratios   =   0.5,   0.9   # comment")
        assert parse_config(reformatted).digest == parse_config(BASE).digest
        assert parse_config(BASE.replace("epochs = 20", "epochs = 21")).digest != parse_config(BASE).digest

    def test_protocol_digest_shared_across_methods(self):
        l1 = BASE.replace("norm = sigma", "norm = vanilla").replace("method = rni", "method = l1") \
            .replace("seeds = 1, 2, 3", "seeds = 4")
        a, b = parse_config(BASE), parse_config(l1)
        assert a.protocol_digest == b.protocol_digest and a.digest != b.digest
        c = parse_config(BASE.replace("train_size = 100", "train_size = 200"))
        assert c.protocol_digest != a.protocol_digest


class TestErrors:
    @pytest.mark.parametrize("old,new,line,field", [
        ("width_scale = 0.25", "width_scale = abc", 3, "experiment.width_scale"),
        ("ratios = 0.5, 0.9", "ratios = 0.9, 0.5", 5, "experiment.ratios"),
        ("ratios = 0.5, 0.9", "ratios = 0.5, 1.0", 5, "experiment.ratios"),
        ("seeds = 1, 2, 3", "seeds =", 6, "experiment.seeds"),
        ("epochs = 20", "epochs = twenty", 14, "train.epochs"),
        ("arch = vgg16", "arch = lenet", 2, "experiment.arch"),
        ("train_size = 100", "train_size = 100\ncolour = red", 12, "data.colour"),
    ])
    def test_line_and_field(self, old, new, line, field):
        with pytest.raises(ConfigError) as exc:
            parse_config(BASE.replace(old, new))
        assert exc.value.line == line and exc.value.field == field
        assert f"line {line}" in str(exc.value)

    def test_rni_needs_sigma(self):
        with pytest.raises(ConfigError, match="sigma"):
            parse_config(BASE.replace("norm = sigma", "norm = vanilla"))

    def test_lambda_consistency(self):
        with pytest.raises(ConfigError):
            parse_config(BASE.replace("lambda_s = 1e-3", "lambda_s = 0"))

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config(BASE + "\n[extra]\nx = 1\n")

    def test_malformed(self):
        with pytest.raises(ConfigError) as exc:
            parse_config(BASE.replace("[data]", "[data]\njust some words"))
        assert exc.value.line == 10

    def test_cifar_needs_dir(self):
        with pytest.raises(ConfigError, match="directory"):
            parse_config(BASE.replace("source = synthetic", "source = cifar10"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "none.ini")


class TestShippedConfigs:
    @pytest.mark.parametrize("path", sorted((Path(__file__).parents[1] / "configs").glob("*.ini")),
                             ids=lambda p: p.name)
    def test_parse(self, path):
        assert load_config(path).seeds

    def test_cifar_arms_share_protocol(self):
        root = Path(__file__).parents[1] / "configs"
        digests = {load_config(root / f"vgg16_{m}.ini").protocol_digest
                   for m in ("rni", "slimming", "ucs")}
        assert len(digests) == 1
