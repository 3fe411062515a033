import os

import numpy as np
import pytest

from mucan import cli, image_io
from mucan import network as nw
from mucan import tensor_core as tc


@pytest.fixture
def seq(tmp_path):
    """Five 16x16 frames, a small config file and weights for it."""
    cfg = nw.MucanConfig(channels=4, feat_blocks=1, recon_blocks=1, max_disp=(2, 2, 1), top_k=2)
    src = tmp_path / "in"
    src.mkdir()
    frames, _ = nw.make_toy_clip(5, 16)
    for i, f in enumerate(frames):
        image_io.write_png(src / f"frame_{i:04d}.png", f)
    (tmp_path / "cfg.txt").write_text(cfg.to_text())
    nw.init_weights(cfg).save(tmp_path / "w.bin")
    nw.zero_weights(cfg).save(tmp_path / "z.bin")
    return tmp_path, cfg


def _sr(root, weights, out, *extra):
    return cli.main(["sr", "--config", str(root / "cfg.txt"), "--weights", str(root / weights),
                     "--input", str(root / "in"), "--output", str(root / out), *extra])


def test_sr_writes_one_frame_per_input(seq, capsys):
    root, _ = seq
    assert _sr(root, "w.bin", "out") == 0
    names = sorted(os.listdir(root / "out"))
    assert names == [f"out_{i:04d}.png" for i in range(5)]
    assert image_io.read_png(root / "out" / names[0]).shape == (3, 64, 64)
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5 and all(len(line.split("\t")) == 2 for line in lines)


def test_sr_zero_weights_is_bilinear(seq):
    root, _ = seq
    assert _sr(root, "z.bin", "out") == 0
    for i in range(5):
        lr = image_io.read_png(root / "in" / f"frame_{i:04d}.png")
        want = image_io.to_uint8(tc.bilinear_upsample(lr, 4))
        got = image_io.to_uint8(image_io.read_png(root / "out" / f"out_{i:04d}.png"))
        np.testing.assert_array_equal(got, want)


def test_sr_byte_identical_across_runs_and_threads(seq):
    root, _ = seq
    assert _sr(root, "w.bin", "a", "--threads", "1") == 0
    assert _sr(root, "w.bin", "b", "--threads", "4") == 0
    for name in os.listdir(root / "a"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()


def test_sr_threads_from_environment(seq, monkeypatch):
    root, _ = seq
    monkeypatch.setenv("MUCAN_THREADS", "3")
    assert cli.resolve_threads(None) == 3
    assert cli.resolve_threads(2) == 2
    monkeypatch.setenv("MUCAN_THREADS", "x")
    assert _sr(root, "w.bin", "out") == cli.EXIT_USAGE


def test_sr_missing_weights(seq, capsys):
    root, _ = seq
    assert _sr(root, "missing.bin", "out") == 3
    assert "weights" in capsys.readouterr().err


def test_sr_mismatched_weights(seq, tmp_path):
    root, cfg = seq
    nw.init_weights(cfg.replace(channels=5)).save(root / "other.bin")
    assert _sr(root, "other.bin", "out") == 3


def test_sr_bad_image(seq):
    root, _ = seq
    (root / "in" / "frame_0002.png").write_bytes(b"not a png")
    assert _sr(root, "w.bin", "out") == 4


def test_sr_too_few_frames(seq):
    root, _ = seq
    for i in range(3, 5):
        os.remove(root / "in" / f"frame_{i:04d}.png")
    assert _sr(root, "w.bin", "out") == 4


def test_usage_errors(capsys):
    for argv in (["nope"], ["sr", "--bogus"], ["bench", "--kernel", "fft"], []):
        with pytest.raises(SystemExit) as info:
            cli.main(argv)
        assert info.value.code == 2


def test_bench_reports_speedup(capsys):
    assert cli.main(["bench", "--kernel", "corr", "--size", "24x20", "--disp", "2", "--repeat", "2"]) == 0
    rows = dict(line.split("\t") for line in capsys.readouterr().out.strip().splitlines())
    assert rows["kernel"] == "corr" and float(rows["speedup"]) >= 1.0
    assert cli.main(["bench", "--kernel", "nnsearch", "--size", "12x12"]) == 0


def test_bench_equivalence_failure_exit_code(monkeypatch):
    from mucan import bench

    def broken(*args, **kwargs):
        raise bench.EquivalenceError("forced")
    monkeypatch.setattr(bench, "bench_corr", broken)
    assert cli.main(["bench", "--kernel", "corr"]) == 5


def test_gradcheck_subset(capsys):
    assert cli.main(["gradcheck", "--ops", "leaky_relu,correlate", "--seeds", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4 and all(line.endswith("PASS") for line in lines)
    assert cli.main(["gradcheck", "--ops", "nothing"]) == 2


def test_knnflow_command(tmp_path, capsys):
    csv = tmp_path / "k.csv"
    assert cli.main(["knnflow", "--k", "1,2", "--trials", "2", "--size", "24", "--csv", str(csv)]) == 0
    assert capsys.readouterr().out.startswith("K\tmean_epe")
    assert csv.read_text().splitlines()[0] == "K,mean_epe"


def test_train_toy_command(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("channels = 2\nfeat_blocks = 0\nrecon_blocks = 0\nmax_disp = 1,1,1\ntop_k = 2\n")
    out = tmp_path / "w.bin"
    assert cli.main(["train-toy", "--config", str(cfg), "--iterations", "3", "--size", "8",
                     "--output", str(out)]) == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.strip().splitlines()]
    assert rows[0][0] == "iter" and {r[0] for r in rows} >= {"loss_initial", "psnr_final", "weights"}
    assert out.exists()


def test_metrics_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    for d in ("ref", "test"):
        (tmp_path / d).mkdir()
    for i in range(2):
        img = rng.random((3, 16, 16))
        image_io.write_png(tmp_path / "ref" / f"f{i}.png", img)
        image_io.write_png(tmp_path / "test" / f"f{i}.png", np.clip(img + 0.02, 0, 1))
    assert cli.main(["metrics", "--ref", str(tmp_path / "ref"), "--test", str(tmp_path / "test")]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0] == "image\tpsnr\tssim" and rows[-1].startswith("mean\t") and len(rows) == 4
    assert cli.main(["metrics", "--ref", str(tmp_path / "ref" / "f0.png"),
                     "--test", str(tmp_path / "test" / "f0.png"), "--luma"]) == 0
    assert cli.main(["metrics", "--ref", str(tmp_path / "ref"), "--test", str(tmp_path / "test" / "f0.png")]) == 2
