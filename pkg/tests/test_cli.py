import numpy as np
import pytest

from roidepth.cli import main
from roidepth.io import read_csv
from roidepth.tensor import save_tensor

TINY = """
[run]
height = 32
width = 64
steps = 2
[attention]
heads = 2
levels = P4 P5
points = 2 2
[compare]
variants = deformable roi
resolutions = 32x64
steps = 1
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--seeds", "2", "--only", "softmax", "linear"]) == 0
    assert "0 failed" in capsys.readouterr().out


def test_gradcheck_unknown_name(capsys):
    assert main(["gradcheck", "--only", "nope"]) == 2


def test_gen_scene(tmp_path, capsys):
    assert main(["gen-scene", "--seed", "4", "--out", str(tmp_path / "s"), "--height", "32", "--width", "64"]) == 0
    assert {p.name for p in (tmp_path / "s").iterdir()} >= {"frame_target.ppm", "depth.rtns", "seg.pgm", "camera.txt"}


def test_eval_perfect(tmp_path, capsys):
    gt = np.random.default_rng(0).uniform(1, 20, size=(1, 4, 5)).astype(np.float32)
    save_tensor(tmp_path / "gt.rtns", gt)
    save_tensor(tmp_path / "pred.rtns", 3 * gt)
    assert main(["eval", "--pred", str(tmp_path / "pred.rtns"), "--gt", str(tmp_path / "gt.rtns")]) == 0
    header, values = capsys.readouterr().out.strip().split("\n")
    metrics = dict(zip(header.split(","), map(float, values.split(","))))
    assert metrics["abs_rel"] == pytest.approx(0.0, abs=1e-6) and metrics["a1"] == 1.0


def test_train_then_dump(tmp_path, config, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out-dir", str(out)]) == 0
    for name in ("loss.png", "depth.png", "mask.png", "metrics.csv", "train_log.csv"):
        assert (out / name).exists()
    assert len(read_csv(out / "train_log.csv")) == 2
    dump = tmp_path / "att.csv"
    argv = ["dump-attn", "--ckpt", str(out / "checkpoint"), "--query", "10,5", "--query", "40,20", "--level", "P4", "--out", str(dump)]
    assert main(argv) == 0
    assert len(read_csv(dump)) == 2 * 2 * 2
    assert dump.with_suffix(".png").exists()
    assert main(argv[:-4] + ["--level", "P3"]) == 2


def test_compare_attn(tmp_path, config, capsys):
    assert main(["compare-attn", "--config", str(config), "--out-dir", str(tmp_path / "c")]) == 0
    rows = read_csv(tmp_path / "c" / "compare_attention.csv")
    assert [r["variant"] for r in rows] == ["deformable", "roi"]
    assert (tmp_path / "c" / "compare_attention.png").exists()


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        main([])
