"""End-to-end command-line behavior on a miniature configuration."""

import json
import os

import numpy as np
import pytest

from instructpaint import cli
from instructpaint import data as mdata

TINY = {
    "model": {
        "n_z": 4, "emb_dim": 8, "c_h": 8, "c_u": 4, "c_r": 8, "height": 4, "width": 4,
        "d_model": 8, "n_heads": 2, "n_spade_blocks": 1, "image_size": 16, "c_mp": 8,
        "disc_base": 8,
    },
    "train": {
        "batch_size": 2, "max_steps": 2, "pretrain_steps": 2, "seed": 9,
        "l_max": 16, "checkpoint_every": 0,
    },
    "loss": {"r1_probes": 1},
    "data": {"grid_size": 3, "n_turns": 3, "n_train": 3, "n_val": 2, "n_test": 2},
}


@pytest.fixture()
def workdir(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(TINY))
    return tmp_path, str(cfg_path)


def run(args):
    return cli.main(args)


def base_args(tmp_path, cfg_path, extra):
    return ["--config", cfg_path, "--out", str(tmp_path / "run")] + extra


class TestDatagen:
    def test_counts_and_manifest(self, workdir):
        tmp_path, cfg = workdir
        assert run(base_args(tmp_path, cfg, ["datagen"])) == 0
        out = tmp_path / "run"
        eps, meta = mdata.load_dataset(out / "train.bin")
        assert len(eps) == 3 and meta["grid_size"] == 3
        assert len(mdata.load_dataset(out / "test.bin")[0]) == 2
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["splits"] == {"train": 3, "val": 2, "test": 2}
        assert all(len(ep.turns) == 3 for ep in eps)

    def test_deterministic_bytes(self, workdir):
        tmp_path, cfg = workdir
        run(base_args(tmp_path, cfg, ["datagen"]))
        first = (tmp_path / "run" / "train.bin").read_bytes()
        assert run(base_args(tmp_path, cfg, ["--force", "datagen"])) == 0
        assert (tmp_path / "run" / "train.bin").read_bytes() == first

    def test_overwrite_guard(self, workdir):
        tmp_path, cfg = workdir
        run(base_args(tmp_path, cfg, ["datagen"]))
        assert run(base_args(tmp_path, cfg, ["datagen"])) == cli.EXIT_USAGE

    def test_count_flags_override(self, workdir):
        tmp_path, cfg = workdir
        assert run(base_args(tmp_path, cfg, ["datagen", "--n-train", "5"])) == 0
        eps, _ = mdata.load_dataset(tmp_path / "run" / "train.bin")
        assert len(eps) == 5


class TestPipeline:
    def test_full_chain(self, workdir):
        tmp_path, cfg = workdir
        assert run(base_args(tmp_path, cfg, ["datagen"])) == 0
        assert run(base_args(tmp_path, cfg, ["pretrain"])) == 0
        out = tmp_path / "run"
        assert (out / "pretrain.ltte").exists()
        assert (out / "vocab.txt").exists()
        assert run(base_args(tmp_path, cfg, ["train"])) == 0
        assert (out / "model.ltte").exists()
        assert len((out / "losses.jsonl").read_text().strip().splitlines()) == 2
        assert run(base_args(tmp_path, cfg, ["eval"])) == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report) >= {"precision", "recall", "f1", "rsim", "config_hash"}
        assert run(base_args(tmp_path, cfg, ["generate", "--episodes", "0"])) == 0
        samples = list((out / "samples").glob("*.ppm"))
        assert len(samples) == 4  # 3 turns + contact sheet
        header = samples[0].read_bytes()[:2]
        assert header == b"P6"

    def test_train_requires_pretrain_checkpoint(self, workdir):
        tmp_path, cfg = workdir
        run(base_args(tmp_path, cfg, ["datagen"]))
        code = run(base_args(tmp_path, cfg, ["train"]))
        assert code == cli.EXIT_USAGE

    def test_eval_requires_train_checkpoint(self, workdir):
        tmp_path, cfg = workdir
        run(base_args(tmp_path, cfg, ["datagen"]))
        assert run(base_args(tmp_path, cfg, ["eval"])) == cli.EXIT_USAGE

    def test_resume_matches_uninterrupted(self, workdir):
        tmp_path, cfg = workdir
        run(base_args(tmp_path, cfg, ["datagen"]))
        run(base_args(tmp_path, cfg, ["pretrain"]))
        out = tmp_path / "run"
        # 1 step, then resume to 2
        assert run(base_args(tmp_path, cfg, ["train", "--steps", "1"])) == 0
        assert run(base_args(tmp_path, cfg, ["train", "--steps", "2", "--resume"])) == 0
        split_log = (out / "losses.jsonl").read_text()
        # fresh uninterrupted 2-step run in a second directory
        out2 = tmp_path / "run2"
        for cmd in (["datagen"], ["pretrain"], ["train", "--steps", "2"]):
            assert run(["--config", cfg, "--out", str(out2)] + cmd) == 0
        straight_log = (out2 / "losses.jsonl").read_text()
        assert split_log == straight_log

    def test_eval_oracle_scores_one(self, workdir):
        tmp_path, cfg = workdir
        run(base_args(tmp_path, cfg, ["datagen"]))
        assert run(base_args(tmp_path, cfg, ["eval", "--oracle", "--csv"])) == 0
        report = json.loads((tmp_path / "run" / "report.json").read_text())
        assert report["f1"] == 1.0 and report["rsim"] == 1.0
        assert (tmp_path / "run" / "report.csv").exists()


class TestGradcheckCommand:
    def test_exit_zero_on_healthy_build(self, workdir, capsys):
        tmp_path, cfg = workdir
        assert run(base_args(tmp_path, cfg, ["gradcheck"])) == 0
        out = capsys.readouterr().out
        assert "worst passing rel_err" in out


class TestCheckpointMetadata:
    def test_config_hash_embedded(self, workdir):
        from instructpaint.checkpoint import load_checkpoint
        from instructpaint.config import RunConfig

        tmp_path, cfg = workdir
        run(base_args(tmp_path, cfg, ["datagen"]))
        run(base_args(tmp_path, cfg, ["pretrain"]))
        run(base_args(tmp_path, cfg, ["train"]))
        _t, state, blob = load_checkpoint(tmp_path / "run" / "model.ltte")
        want = RunConfig.load(cfg)
        assert state["config_hash"] == want.config_hash()
        assert blob["config_hash"] == want.config_hash()
        report = json.loads((tmp_path / "run").joinpath("report.json").read_text()) if \
            (tmp_path / "run" / "report.json").exists() else None
        run(base_args(tmp_path, cfg, ["eval"]))
        report = json.loads((tmp_path / "run" / "report.json").read_text())
        assert report["config_hash"] == want.config_hash()


class TestConfigHandling:
    def test_set_override(self, workdir):
        tmp_path, cfg = workdir
        assert run(base_args(tmp_path, cfg, ["--set", "data.n_train=4", "datagen"])) == 0
        eps, _ = mdata.load_dataset(tmp_path / "run" / "train.bin")
        assert len(eps) == 4

    def test_unknown_key_is_usage_error(self, workdir):
        tmp_path, cfg = workdir
        assert run(base_args(tmp_path, cfg, ["--set", "data.bogus=1", "datagen"])) == cli.EXIT_USAGE

    def test_malformed_set_is_usage_error(self, workdir):
        tmp_path, cfg = workdir
        assert run(base_args(tmp_path, cfg, ["--set", "nonsense", "datagen"])) == cli.EXIT_USAGE

    def test_unknown_command_is_usage_error(self, workdir):
        tmp_path, cfg = workdir
        assert run(base_args(tmp_path, cfg, ["frobnicate"])) == cli.EXIT_USAGE

    def test_seed_flag_changes_data(self, workdir):
        tmp_path, cfg = workdir
        run(base_args(tmp_path, cfg, ["--seed", "1", "datagen"]))
        a = (tmp_path / "run" / "train.bin").read_bytes()
        run(base_args(tmp_path, cfg, ["--seed", "2", "--force", "datagen"]))
        b = (tmp_path / "run" / "train.bin").read_bytes()
        assert a != b

    def test_config_hash_stable(self, workdir):
        from instructpaint.config import RunConfig

        _, cfg = workdir
        c1 = RunConfig.load(cfg)
        c2 = RunConfig.load(cfg)
        assert c1.config_hash() == c2.config_hash()
        c2.train.seed += 1
        assert c1.config_hash() != c2.config_hash()
