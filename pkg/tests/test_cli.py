"""CLI contracts: subcommand behavior, exit codes, and written artifacts."""

import os

import numpy as np
import pytest

from sfunet import data
from sfunet.cli import main, parse_config_file

CONFIG = """\
# toy run
[model]
input_channels = 1
n_classes = 2
input_hw = 16x16
mask_rho = 0.5
filter_mode = broadcast
precision = single

[train]
lr0 = 0.0005
epochs = 4
batch_size = 4
seed = 3

[data]
aug_hflip = true
aug_vflip = false
aug_rot90 = false
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "toy.cfg"
    cfg.write_text(CONFIG)
    dataset = root / "dataset"
    assert main(["synth", "--count", "10", "--classes", "2", "--out", str(dataset),
                 "--seed", "5", "--size", "16x16"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "run"
    code = main(["train", "--config", str(workdir / "toy.cfg"), "--data",
                 str(workdir / "dataset"), "--out", str(out)])
    assert code == 0
    return out


class TestConfigFile:
    def test_parse_roundtrip(self, workdir):
        model_cfg, train_cfg = parse_config_file(workdir / "toy.cfg")
        assert model_cfg.input_hw == (16, 16)
        assert model_cfg.precision == "single"
        assert train_cfg.epochs == 4 and train_cfg.seed == 3
        assert train_cfg.aug_hflip and not train_cfg.aug_vflip

    def test_missing_config_exit_2(self, workdir, capsys):
        code = main(["train", "--config", str(workdir / "absent.cfg"),
                     "--data", str(workdir / "dataset"), "--out", str(workdir / "o")])
        assert code == 2
        assert "absent.cfg" in capsys.readouterr().err

    def test_unknown_key_cites_line(self, workdir, capsys):
        bad = workdir / "bad.cfg"
        bad.write_text("[model]\nn_classes = 2\nwarp_factor = 9\n")
        code = main(["train", "--config", str(bad), "--data", str(workdir / "dataset"),
                     "--out", str(workdir / "o2")])
        assert code == 2
        err = capsys.readouterr().err
        assert ":3" in err and "warp_factor" in err

    def test_key_outside_section_rejected(self, workdir):
        bad = workdir / "nosec.cfg"
        bad.write_text("n_classes = 2\n")
        assert main(["train", "--config", str(bad), "--data", str(workdir / "dataset"),
                     "--out", str(workdir / "o3")]) == 2

    def test_train_key_in_data_section_rejected(self, workdir):
        bad = workdir / "mixed.cfg"
        bad.write_text("[data]\nlr0 = 0.1\n")
        assert main(["train", "--config", str(bad), "--data", str(workdir / "dataset"),
                     "--out", str(workdir / "o4")]) == 2


class TestSynth:
    def test_deterministic_trees(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--count", "4", "--classes", "3", "--out",
                         str(tmp_path / name), "--seed", "7", "--size", "16x16"]) == 0
        for sub in ("manifest.tsv", os.path.join("images", "synth0000.pgm")):
            assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()


class TestTrain:
    def test_writes_checkpoints_log_and_figure(self, trained):
        names = sorted(p.name for p in trained.iterdir())
        assert {"best_1.sfun", "best_2.sfun", "best_3.sfun", "train.log", "train_curves.png"} <= set(names)
        lines = (trained / "train.log").read_text().strip().splitlines()
        assert len(lines) == 4
        for line in lines:
            fields = line.split("\t")
            assert len(fields) == 5
            int(fields[0])
            for v in fields[1:]:
                float(v)

    def test_nan_lr_exits_4_and_names_epoch(self, workdir, capsys):
        cfg = workdir / "nan.cfg"
        cfg.write_text(CONFIG.replace("lr0 = 0.0005", "lr0 = 1e18"))
        out = workdir / "nanrun"
        with np.errstate(all="ignore"):
            code = main(["train", "--config", str(cfg), "--data", str(workdir / "dataset"),
                         "--out", str(out)])
        assert code == 4
        assert "epoch" in (out / "train.log").read_text()


class TestEval:
    def test_report_files(self, workdir, trained, capsys):
        out = workdir / "evalout"
        code = main(["eval", "--ckpt", str(trained / "best_1.sfun"), "--data",
                     str(workdir / "dataset"), "--split", "val", "--out", str(out)])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "class\tdsc\tiou\thd95" in stdout
        assert (out / "report.tsv").exists()
        assert "mean_iou:" in (out / "report.txt").read_text()
        assert (out / "report.png").exists()

    def test_empty_split_exit_3(self, workdir, trained, tmp_path):
        empty = tmp_path / "empty"
        data.synth_generate(empty, 2, 2, 16, 16, seed=0, fractions=(1.0, 0.0, 0.0))
        assert main(["eval", "--ckpt", str(trained / "best_1.sfun"), "--data", str(empty),
                     "--split", "test", "--out", str(tmp_path / "o")]) == 3

    def test_bad_checkpoint_exit_2(self, workdir, tmp_path):
        junk = tmp_path / "junk.sfun"
        junk.write_bytes(b"JUNKJUNKJUNK")
        assert main(["eval", "--ckpt", str(junk), "--data", str(workdir / "dataset"),
                     "--out", str(tmp_path / "o2")]) == 2


class TestPredict:
    def test_deterministic_output_dims(self, workdir, trained, tmp_path):
        entry = data.read_manifest(workdir / "dataset" / "manifest.tsv")[0]
        image = str(workdir / "dataset" / entry.image_path)
        out1 = tmp_path / "p1.pgm"
        out2 = tmp_path / "p2.pgm"
        for out in (out1, out2):
            assert main(["predict", "--ckpt", str(trained / "best_1.sfun"),
                         "--image", image, "--out", str(out)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        mask = data.read_image_file(out1)
        assert mask.shape == (16, 16)
        assert set(np.unique(mask)) <= {0, 1}

    def test_all_background_fixture(self, workdir, tmp_path):
        from sfunet import ModelConfig, SFUNet, save

        cfg = ModelConfig(input_channels=1, n_classes=2, input_hw=(16, 16), precision="single")
        model = SFUNet(cfg, seed=0)
        w = model.head.conv1.weight
        b = model.head.conv1.bias
        w.assign(np.zeros(w.dims))
        bias = np.zeros(b.dims, dtype=np.float32)
        bias[0, 0] = 10.0  # force class-0 logits to dominate everywhere
        b.assign(bias)
        ckpt = tmp_path / "bg.sfun"
        save(model, ckpt)
        entry = data.read_manifest(workdir / "dataset" / "manifest.tsv")[0]
        out = tmp_path / "bg.pgm"
        assert main(["predict", "--ckpt", str(ckpt), "--image",
                     str(workdir / "dataset" / entry.image_path), "--out", str(out)]) == 0
        np.testing.assert_array_equal(data.read_image_file(out), np.zeros((16, 16), np.uint8))

    def test_unreadable_image_exit_3(self, trained, tmp_path):
        missing = tmp_path / "nope.pgm"
        assert main(["predict", "--ckpt", str(trained / "best_1.sfun"),
                     "--image", str(missing), "--out", str(tmp_path / "x.pgm")]) == 3


class TestGradcheckCommand:
    def test_single_block_passes(self, capsys):
        assert main(["gradcheck", "--block", "sa"]) == 0
        out = capsys.readouterr().out
        assert "sa\tmax=" in out and "PASS" in out

    def test_unknown_block_exit_2(self):
        assert main(["gradcheck", "--block", "flux"]) == 2


class TestSpectrum:
    def test_dumps_masks_and_filter(self, workdir, trained, tmp_path):
        out = tmp_path / "spec"
        assert main(["spectrum", "--ckpt", str(trained / "best_1.sfun"),
                     "--level", "1", "--out", str(out)]) == 0
        low = data.read_image_file(out / "level1_mask_low.pgm")
        high = data.read_image_file(out / "level1_mask_high.pgm")
        assert low.shape == (16, 16) and high.shape == (16, 16)
        np.testing.assert_array_equal((low > 0) | (high > 0), np.ones((16, 16), bool))
        assert (out / "level1_filter.pgm").exists()
        assert (out / "level1_spectrum.png").exists()

    def test_bad_level_exit_2(self, trained, tmp_path):
        assert main(["spectrum", "--ckpt", str(trained / "best_1.sfun"),
                     "--level", "9", "--out", str(tmp_path / "s")]) == 2


class TestAblate:
    def test_runs_four_variants_and_writes_table(self, workdir, tmp_path, capsys):
        cfg = workdir / "ablate.cfg"
        cfg.write_text(CONFIG.replace("epochs = 4", "epochs = 1"))
        out = tmp_path / "ablation"
        assert main(["ablate", "--config", str(cfg), "--data", str(workdir / "dataset"),
                     "--out", str(out)]) == 0
        table = (out / "ablation.tsv").read_text()
        lines = table.strip().splitlines()
        assert lines[0] == "variant\tmpca\tfsa\tparams\tval_dsc\tval_iou"
        assert [l.split("\t")[0] for l in lines[1:]] == ["baseline", "fsa_only", "mpca_only", "full"]
        assert (out / "ablation.png").exists()
        assert table in capsys.readouterr().out


class TestUsage:
    def test_no_command_exit_2(self, capsys):
        assert main([]) == 2

    def test_unknown_flag_exit_2(self, capsys):
        assert main(["synth", "--frobnicate"]) == 2
