"""Command-line surface."""

import json

import pytest
from click.testing import CliRunner

from mia.cli import main


TINY_CONFIG = """
# small dimensions and epoch counts for a fast smoke run
embed_dim = 8
hidden_dim = 8
global_dim = 16
lift_dim = 16
mlp_hidden = 8
part_dim = 8
backbone_channels = 4 4 6 8
step1_epochs = 1
step2_epochs = 1
step3_epochs = 1
batch_size = 4
seed = 5
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    res = runner.invoke(main, ["gen-data", "--ids", "4", "--per-id", "2",
                               "--test-ids", "2", "--seed", "9",
                               "--out", str(root / "corpus")])
    assert res.exit_code == 0, res.output
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    res = runner.invoke(main, ["train", "--corpus", str(root / "corpus"),
                               "--out", str(root / "run"),
                               "--config", str(cfg)])
    assert res.exit_code == 0, res.output
    return root


def test_gen_data_reports_splits(tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["gen-data", "--ids", "2", "--per-id", "1",
                               "--out", str(tmp_path / "c")])
    assert res.exit_code == 0
    assert "train" in res.output


def test_train_produces_checkpoints(workspace):
    for name in ("step1.miac", "step2.miac", "step3.miac", "final.miac"):
        assert (workspace / "run" / name).exists()


def test_train_single_step_requires_predecessor(workspace, tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["train", "--corpus", str(workspace / "corpus"),
                               "--out", str(tmp_path / "r"), "--step", "2"])
    assert res.exit_code != 0
    assert "step" in res.output


def test_eval_table_and_json(workspace):
    runner = CliRunner()
    args = ["eval", "--ckpt", str(workspace / "run" / "final.miac"),
            "--corpus", str(workspace / "corpus"), "--split", "test"]
    res = runner.invoke(main, args)
    assert res.exit_code == 0, res.output
    assert "R@1" in res.output
    res = runner.invoke(main, args + ["--json"])
    assert res.exit_code == 0
    row = json.loads(res.output)
    assert {"R@1", "R@5", "R@10", "Total"} <= set(row)
    assert 0.0 <= row["R@1"] <= 1.0


def test_eval_dump_attention(workspace, tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["eval", "--ckpt", str(workspace / "run" / "final.miac"),
                               "--corpus", str(workspace / "corpus"),
                               "--split", "test",
                               "--dump-attn", str(tmp_path / "attn")])
    assert res.exit_code == 0, res.output
    dumps = list((tmp_path / "attn").glob("*.json"))
    assert dumps
    entry = json.loads(dumps[0].read_text())
    assert abs(sum(entry["v"]) - 1.0) < 1e-9


def test_sweep_grid(workspace):
    runner = CliRunner()
    res = runner.invoke(main, ["sweep", "--ckpt", str(workspace / "run" / "final.miac"),
                               "--corpus", str(workspace / "corpus"),
                               "--split", "test", "--l1", "0,1", "--l2", "0:1:0.5",
                               "--json"])
    assert res.exit_code == 0, res.output
    rows = json.loads(res.output)
    assert len(rows) == 2 * 3
    assert {round(r["lambda2"], 3) for r in rows} == {0.0, 0.5, 1.0}


def test_retrieve_ranks_gallery(workspace):
    runner = CliRunner()
    res = runner.invoke(main, ["retrieve", "--ckpt", str(workspace / "run" / "final.miac"),
                               "--corpus", str(workspace / "corpus"),
                               "--split", "test", "--topk", "3",
                               "--caption", "a person wearing a red hat"])
    assert res.exit_code == 0, res.output
    assert res.output.count("img_") == 3


def test_chunk_command(workspace, tmp_path):
    captions = tmp_path / "caps.txt"
    captions.write_text("a man wearing a yellow shirt\n\nblue shoes\n")
    runner = CliRunner()
    res = runner.invoke(main, ["chunk", "--in", str(captions)])
    assert res.exit_code == 0, res.output
    rows = [json.loads(l) for l in res.output.strip().split("\n")]
    assert rows[0]["phrases"] == ["man", "yellow shirt"]
    assert rows[1]["phrases"] == ["blue shoes"]


def test_config_file_rejects_unknown_key(workspace, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_key = 3\n")
    runner = CliRunner()
    res = runner.invoke(main, ["train", "--corpus", str(workspace / "corpus"),
                               "--out", str(tmp_path / "r"),
                               "--config", str(cfg)])
    assert res.exit_code != 0
