import json

import pytest

from pemed import cli
from pemed.backbone import load_checkpoint

SMALL_CFG_TEXT = """
# desk-scale smoke configuration
epochs = 1
batch_size = 2
train_count = 2
max_train_clicks = 1
seed = 5

input_size = 32
stage_dims = 8,8,16,16
stage_depths = 1,1,1,1
stage_heads = 1,1,2,2
fusion_dim = 8
decoder_hidden = 8
tsip_hidden = 4
disk_radius = 3.0
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "train.cfg"
    cfg.write_text(SMALL_CFG_TEXT)
    out = root / "model.pemd"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return root, out


def test_train_writes_checkpoint_and_log(trained, capsys):
    root, out = trained
    assert out.exists()
    model = load_checkpoint(out)
    assert model.config.input_size == 32
    rows = [json.loads(l) for l in (root / "model.pemd.log.jsonl").read_text().splitlines()]
    assert rows and rows[0]["epoch"] == 1


def test_gen_then_bench(trained, tmp_path, capsys):
    _, ckpt = trained
    data = tmp_path / "data"
    assert cli.main(["gen", "--out", str(data), "--count", "3", "--size", "32", "--seed", "2"]) == 0
    capsys.readouterr()
    out_dir = tmp_path / "rep"
    rc = cli.main(
        ["bench", "--checkpoint", str(ckpt), "--data", str(data), "--cap", "3", "--tau", "0.5", "--out", str(out_dir)]
    )
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_cases"] == 3
    assert (out_dir / "report.jsonl").exists()
    assert json.loads((out_dir / "summary.json").read_text()) == summary


def test_bench_checkpoint_from_env(trained, tmp_path, monkeypatch, capsys):
    _, ckpt = trained
    data = tmp_path / "data"
    cli.main(["gen", "--out", str(data), "--count", "1", "--size", "32", "--seed", "3"])
    monkeypatch.setenv("PEMED_CHECKPOINT", str(ckpt))
    assert cli.main(["bench", "--data", str(data), "--cap", "2"]) == 0


def test_missing_checkpoint_is_an_error(tmp_path, monkeypatch):
    monkeypatch.delenv("PEMED_CHECKPOINT", raising=False)
    with pytest.raises(SystemExit):
        cli.main(["bench", "--data", str(tmp_path)])


def test_bench_empty_dataset_reports_error(trained, tmp_path, capsys):
    _, ckpt = trained
    rc = cli.main(["bench", "--checkpoint", str(ckpt), "--data", str(tmp_path), "--cap", "2"])
    assert rc == 1
    assert "DATASET_EMPTY" in capsys.readouterr().err
