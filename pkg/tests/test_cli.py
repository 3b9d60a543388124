import json
import subprocess
import sys

import pytest

from sohdiff.cli import DEFAULT_CONFIG, load_config, main, parse_seeds
from sohdiff.errors import ConfigurationError

FAST_CONFIG = {
    "data": {"l": 64, "c_max": 1000},
    "gen": {"n_train": 10, "n_test": 4},
    "model": {
        "base_channels": 8,
        "channel_multipliers": [1, 2],
        "attn_levels": [1],
        "time_embed_dim": 16,
        "cond_embed_dim": 16,
        "dim_p": 2,
        "enc_layers": 1,
        "enc_heads": 2,
        "enc_d_model": 8,
    },
    "schedule": {"t": 10},
    "train": {"steps": 4, "batch_size": 4, "eval_every": 2, "ema_decay": 0.9},
    "eval": {"k": 2},
    "synth": {"w_list": [0.0, 2.0], "per_sample": 1, "n_trees": 3,
              "forest_seeds": [0]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A run directory with data generated and one checkpoint trained."""
    out = tmp_path_factory.mktemp("cli-run")
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(FAST_CONFIG))
    assert main(["gen-data", "--config", str(cfg_path), "--seed", "3",
                 "--out", str(out)]) == 0
    assert main(["train", "--config", str(cfg_path), "--seed", "0",
                 "--out", str(out)]) == 0
    return out, cfg_path


class TestParsing:
    def test_seed_range(self):
        assert parse_seeds(None, "0..3") == [0, 1, 2, 3]

    def test_seed_list(self):
        assert parse_seeds(None, "1,3,9") == [1, 3, 9]

    def test_single_seed(self):
        assert parse_seeds(7, None) == [7]
        assert parse_seeds(None, None) == [0]

    def test_bad_range(self):
        with pytest.raises(ConfigurationError):
            parse_seeds(None, "5..1")
        with pytest.raises(ConfigurationError):
            parse_seeds(None, "a..b")

    def test_both_flags_rejected(self):
        with pytest.raises(ConfigurationError):
            parse_seeds(1, "0..2")

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"nope": 1}}))
        with pytest.raises(ConfigurationError):
            load_config(str(p))
        p.write_text(json.dumps({"wat": {}}))
        with pytest.raises(ConfigurationError):
            load_config(str(p))

    def test_defaults_survive_partial_overlay(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"steps": 7}}))
        cfg = load_config(str(p))
        assert cfg["train"]["steps"] == 7
        assert cfg["train"]["batch_size"] == DEFAULT_CONFIG["train"]["batch_size"]


class TestGenData:
    def test_files_reproducible(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"gen": {"n_train": 5, "n_test": 2}}))
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["gen-data", "--config", str(cfg), "--seed", "7",
                         "--out", str(out)]) == 0
        assert (a / "train.json").read_bytes() == (b / "train.json").read_bytes()
        assert (a / "test.json").read_bytes() == (b / "test.json").read_bytes()
        # the printed range must match the labels that were written
        ruls = [cell["true_rul"] for cell in json.loads((a / "train.json").read_text())]
        assert f"range {min(ruls)}..{max(ruls)} cycles" in capsys.readouterr().out

    def test_invalid_parameter_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"gen": {"b_min": -1.0}}))
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == 2
        assert "error" in capsys.readouterr().err


class TestTrain:
    def test_checkpoint_and_log_written(self, workspace):
        out, _ = workspace
        assert (out / "ckpt_seed0.bin").exists()
        log = (out / "loss_seed0.csv").read_text().splitlines()
        assert log[0] == "step,loss"
        assert log[-1].startswith("4,")

    def test_seed_sweep_names_checkpoints(self, workspace):
        out, cfg_path = workspace
        assert main(["train", "--config", str(cfg_path), "--seeds", "1..2",
                     "--out", str(out)]) == 0
        assert (out / "ckpt_seed1.bin").exists()
        assert (out / "ckpt_seed2.bin").exists()

    def test_missing_dataset_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(FAST_CONFIG))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_divergent_run_exits_3(self, workspace, tmp_path, capsys):
        out, _ = workspace
        wild = dict(FAST_CONFIG)
        wild["train"] = {**FAST_CONFIG["train"], "steps": 150, "step_size": 1e4}
        cfg = tmp_path / "wild.json"
        cfg.write_text(json.dumps(wild))
        code = main(["train", "--config", str(cfg), "--seed", "9", "--out", str(out)])
        assert code == 3


class TestEvalCommands:
    def test_eval_rul(self, workspace, capsys):
        out, cfg_path = workspace
        assert main(["eval-rul", "--config", str(cfg_path), "--seed", "0",
                     "--out", str(out), "--dump-cells"]) == 0
        report = (out / "rul_report.csv").read_text()
        assert report.splitlines()[0] == "metric,dataset,seed,value"
        assert (out / "rul_table.txt").exists()
        assert (out / "rul_cells.csv").exists()
        assert "rul_rmse" in capsys.readouterr().out

    def test_eval_rul_reproducible_bytes(self, workspace):
        out, cfg_path = workspace
        args = ["eval-rul", "--config", str(cfg_path), "--seed", "0", "--out", str(out)]
        assert main(args) == 0
        first = (out / "rul_report.csv").read_bytes()
        assert main(args) == 0
        assert (out / "rul_report.csv").read_bytes() == first

    def test_eval_soh_rows(self, workspace):
        out, cfg_path = workspace
        assert main(["eval-soh", "--config", str(cfg_path), "--seed", "0",
                     "--out", str(out)]) == 0
        lines = (out / "soh_report.csv").read_text().splitlines()
        metrics = {l.split(",")[0] for l in lines[1:]}
        assert metrics == {"soh_rmse_eol90", "soh_rmse_eol80", "soh_rmse_eol70",
                           "soh_rmse_eol60"}

    def test_predict_dumps(self, workspace):
        out, cfg_path = workspace
        assert main(["predict", "--config", str(cfg_path), "--seed", "0",
                     "--out", str(out)]) == 0
        cells = json.loads((out / "predictions.json").read_text())
        assert len(cells) == FAST_CONFIG["gen"]["n_test"]
        assert {"cell_id", "cycles", "soh", "rul"} <= set(cells[0])

    def test_missing_checkpoint_exits_2(self, workspace, tmp_path):
        _, cfg_path = workspace
        assert main(["eval-rul", "--config", str(cfg_path), "--seed", "55",
                     "--out", str(tmp_path)]) == 2


class TestSynthCommand:
    def test_report_and_export(self, workspace):
        out, cfg_path = workspace
        assert main(["synth", "--config", str(cfg_path), "--seed", "0",
                     "--out", str(out), "--export-curves"]) == 0
        lines = (out / "synth_report.csv").read_text().splitlines()
        assert lines[0] == "metric,w=0.0,w=2.0"
        assert (out / "synthetic_w0.json").exists()
        assert (out / "synthetic_w2.json").exists()
        exported = json.loads((out / "synthetic_w0.json").read_text())
        assert len(exported) <= FAST_CONFIG["gen"]["n_train"]


class TestEntryPoint:
    def test_console_script_help(self):
        proc = subprocess.run([sys.executable, "-m", "sohdiff.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "gen-data" in proc.stdout and "synth" in proc.stdout
        # defaults are documented in the help epilog
        assert '"p_uncond": 0.2' in proc.stdout

    def test_usage_error_exit_code(self):
        proc = subprocess.run([sys.executable, "-m", "sohdiff.cli", "bogus"],
                              capture_output=True, text=True)
        assert proc.returncode == 2
