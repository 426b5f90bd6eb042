import os

import pytest

from cocor.cli import main
from cocor.config import RunConfig, load_config, resolved_text
from cocor.data import load_idx

TINY_CFG = """
# tiny smoke-test run
classes = 3
per_class = 16
height = 6
width = 6
noise = 0.1
hidden = 10,8
proj_hidden = 8
embed_dim = 4
pmnn_hidden = 8
queue_capacity = 8
batch_size = 4
epochs = 2
eval_epochs = 20
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY_CFG)
    return str(path)


class TestPretrain:
    def test_two_runs_produce_identical_artifacts(self, tiny_config, tmp_path):
        out1, out2 = str(tmp_path / "r1"), str(tmp_path / "r2")
        assert main(["pretrain", "--config", tiny_config, "--seed", "7",
                     "--out", out1]) == 0
        assert main(["pretrain", "--config", tiny_config, "--seed", "7",
                     "--out", out2]) == 0
        for name in ("metrics.jsonl", "checkpoint.ccor"):
            a = open(os.path.join(out1, name), "rb").read()
            b = open(os.path.join(out2, name), "rb").read()
            assert a == b, name

    def test_resolved_config_round_trips(self, tiny_config, tmp_path):
        out = str(tmp_path / "run")
        assert main(["pretrain", "--config", tiny_config, "--seed", "3",
                     "--out", out, "--epochs", "1"]) == 0
        echoed = load_config(os.path.join(out, "resolved.cfg"))
        assert echoed.seed == 3
        assert echoed.epochs == 1
        assert echoed.hidden == (10, 8)
        assert resolved_text(echoed) == open(os.path.join(out, "resolved.cfg")).read()

    def test_missing_config_exits_one_with_path(self, tmp_path, capsys):
        code = main(["pretrain", "--config", str(tmp_path / "nope.cfg")])
        assert code == 1
        assert "nope.cfg" in capsys.readouterr().err

    def test_invalid_field_exits_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("tau = -1\n")
        assert main(["pretrain", "--config", str(bad)]) == 1
        assert "tau" in capsys.readouterr().err

    def test_unknown_key_exits_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("nonsense = 1\n")
        assert main(["pretrain", "--config", str(bad)]) == 1
        assert "nonsense" in capsys.readouterr().err


class TestOtherCommands:
    def test_grad_check_passes(self, capsys):
        assert main(["grad-check"]) == 0
        out = capsys.readouterr().out
        assert "max rel err" in out and "FAIL" not in out

    def test_make_data_then_eval_pipeline(self, tiny_config, tmp_path):
        data_out = str(tmp_path / "data")
        assert main(["make-data", "--config", tiny_config, "--out", data_out]) == 0
        ds = load_idx(os.path.join(data_out, "images.idx"),
                      os.path.join(data_out, "labels.idx"))
        assert ds.images.shape == (48, 6, 6, 1)

        run_out = str(tmp_path / "run")
        assert main(["pretrain", "--config", tiny_config, "--seed", "1",
                     "--out", run_out, "--epochs", "1"]) == 0
        code = main(["eval-linear", "--config", tiny_config, "--seed", "1",
                     "--out", str(tmp_path / "eval"),
                     "--checkpoint", os.path.join(run_out, "checkpoint.ccor")])
        assert code == 0

    def test_ablate_pmnn_writes_reports(self, tmp_path):
        cfg = tmp_path / "ab.cfg"
        cfg.write_text(TINY_CFG + "lengths = 2\nepochs = 1\neval_epochs = 10\n")
        out = str(tmp_path / "ab")
        code = main(["ablate-pmnn", "--config", str(cfg), "--out", out,
                     "--seeds", "0,1,2,3,4", "--pilot-epochs", "1"])
        assert code == 0
        assert os.path.exists(os.path.join(out, "ablation.json"))
        assert os.path.exists(os.path.join(out, "ablation.csv"))

    def test_augment_preview_writes_rasters(self, tiny_config, tmp_path):
        out = str(tmp_path / "prev")
        assert main(["augment-preview", "--config", tiny_config, "--out", out]) == 0
        files = os.listdir(out)
        assert "before.pgm" in files
        assert "after_identity.pgm" in files
        assert "after_composite.pgm" in files
        assert sum(1 for f in files if f.startswith("after_")) == 15

    def test_unknown_flag_is_validation_error(self):
        assert main(["pretrain", "--bogus-flag", "1"]) == 1

    def test_unknown_command_is_validation_error(self):
        assert main(["frobnicate"]) == 1

    def test_checkpoint_missing_exits_one(self, tiny_config, tmp_path, capsys):
        code = main(["eval-linear", "--config", tiny_config,
                     "--out", str(tmp_path / "e"),
                     "--checkpoint", str(tmp_path / "missing.ccor")])
        assert code == 1
        assert "missing.ccor" in capsys.readouterr().err


class TestConfigFormat:
    def test_overrides_win_over_file(self, tiny_config):
        cfg = load_config(tiny_config)
        assert cfg.epochs == 2
        from cocor.config import apply_overrides
        cfg = apply_overrides(cfg, {"epochs": "9", "lengths": "1,2"})
        assert cfg.epochs == 9
        assert cfg.lengths == (1, 2)

    def test_resolved_text_parses_back_to_same_config(self):
        cfg = RunConfig(lengths=(1, 3), hidden=(32, 16), variant="abs", seed=11)
        from cocor.config import parse_config_text
        rebuilt = parse_config_text(resolved_text(cfg))
        assert rebuilt == cfg
