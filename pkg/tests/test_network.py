import numpy as np
import pytest

from mucan import network as nw
from mucan import tensor_core as tc
from mucan.exceptions import ConfigError, ContractError, TrainingError
from mucan.loss_metrics import charbonnier

SMALL = nw.MucanConfig(channels=4, feat_blocks=1, recon_blocks=1, max_disp=(2, 2, 1), top_k=2)


def _frames(rng, n=5, size=16):
    return [rng.random((3, size, size)).astype(np.float32) for _ in range(n)]


def test_encoder_shapes_and_determinism(rng):
    cfg = nw.MucanConfig()
    w = nw.init_weights(cfg)
    frame = rng.random((3, 32, 32)).astype(np.float32)
    pyr = nw.encode_pyramid(frame, w, cfg)
    assert [p.shape for p in pyr] == [(8, 32, 32), (8, 16, 16), (8, 8, 8)]
    again = nw.encode_pyramid(frame, nw.init_weights(cfg), cfg)
    for a, b in zip(pyr, again):
        np.testing.assert_array_equal(a, b)
        assert np.all(np.isfinite(a))


def test_forward_shape_and_zero_weight_skip(rng):
    cfg = nw.MucanConfig()
    frames = _frames(rng, 5, 32)
    out = nw.forward(frames, nw.init_weights(cfg), cfg)
    assert out.shape == (3, 128, 128)
    zero = nw.forward(frames, nw.zero_weights(cfg), cfg)
    np.testing.assert_array_equal(zero, tc.bilinear_upsample(frames[2], 4))


def test_frame_count_checked(rng):
    with pytest.raises(ConfigError):
        nw.forward(_frames(rng, 4), nw.init_weights(SMALL), SMALL)


def test_identical_frames_deterministic(rng):
    frame = rng.random((3, 16, 16)).astype(np.float32)
    w = nw.init_weights(SMALL)
    a = nw.forward([frame] * 5, w, SMALL)
    b = nw.forward([frame] * 5, nw.init_weights(SMALL), SMALL)
    assert np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("toggle", [dict(cncam_enabled=False), dict(tmcam_enabled=False),
                                    dict(tmcam_hierarchical=False), dict(tmcam_adaptive_weights=False),
                                    dict(weight_norm="raw")])
def test_ablation_toggles_keep_shapes(rng, toggle):
    frames = _frames(rng)
    cfg = SMALL.replace(**toggle)
    w = nw.init_weights(cfg)
    out = nw.forward(frames, w, cfg)
    assert out.shape == (3, 64, 64) and np.all(np.isfinite(out))
    assert not np.array_equal(out, nw.forward(frames, w, SMALL))


def test_init_bounds_and_seed(rng):
    a, b = nw.init_weights(SMALL), nw.init_weights(SMALL.replace(seed=1))
    assert list(a) == [n for n, _ in nw.weight_manifest(SMALL)]
    for name, arr in a.items():
        assert arr.dtype == np.float32
        if name.endswith(".b"):
            assert not arr.any()
        else:
            assert np.abs(arr).max() <= np.sqrt(1.0 / np.prod(arr.shape[1:]))
    assert not np.array_equal(a["out.w"], b["out.w"])


def test_splitmix64_reference_values():
    # first outputs for seed 0 from the published reference implementation
    state, out = nw.splitmix64(0)
    assert out == 0xE220A8397B1DCDAF
    _, out = nw.splitmix64(state)
    assert out == 0x6E789E6AA1B965F4


def test_config_text_round_trip(tmp_path):
    cfg = nw.MucanConfig(channels=6, max_disp=(5, 3, 2), cncam_enabled=False, learning_rate=1e-3)
    path = tmp_path / "cfg.txt"
    path.write_text("# toy\n" + cfg.to_text())
    assert nw.MucanConfig.from_file(path) == cfg
    with pytest.raises(ConfigError):
        nw.MucanConfig.from_text("bogus = 1")
    with pytest.raises(ConfigError):
        nw.MucanConfig.from_text("channels = many")
    with pytest.raises(ConfigError):
        nw.MucanConfig.from_text("top_k = 60\nmax_disp = 3,3,3")


def test_load_model_checks_manifest(tmp_path):
    path = tmp_path / "w.bin"
    w = nw.init_weights(SMALL)
    w.save(path)
    loaded = nw.load_model(path, SMALL)
    for k in w:
        np.testing.assert_array_equal(loaded[k], w[k])
    with pytest.raises(ContractError):
        nw.load_model(path, SMALL.replace(channels=5))
    del w["out.b"]
    with pytest.raises(ContractError):
        nw.check_weights(w, SMALL)


def test_lambda_zero_first_loss_is_charbonnier(rng):
    cfg = SMALL.replace(edge_weight=0.0)
    frames, hr = nw.make_toy_clip(0, 16, kind="mosaic")
    _, losses = nw.train_toy((list(frames), hr), cfg, 1)
    want = charbonnier(nw.forward(list(frames), nw.init_weights(cfg), cfg), hr, cfg.charbonnier_eps)
    assert losses[0] == want


def test_training_reduces_loss():
    frames, hr = nw.make_toy_clip(1, 16, kind="mosaic")
    _, losses = nw.train_toy((list(frames), hr), SMALL.replace(learning_rate=2e-3), 30)
    assert len(losses) == 30 and losses[-1] < losses[0]


def test_nan_loss_reports_iteration():
    frames, hr = nw.make_toy_clip(2, 16, kind="mosaic")
    bad = hr.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(TrainingError) as info:
        nw.train([(list(frames), hr), (list(frames), bad)], SMALL, 3)
    assert info.value.iteration == 1


def test_toy_clips():
    frames, hr = nw.make_toy_clip(0, 32)
    assert frames.shape == (5, 3, 32, 32) and hr.shape == (3, 128, 128)
    np.testing.assert_allclose(hr.reshape(3, 32, 4, 32, 4).mean(axis=(2, 4)), frames[2], atol=1e-6)
    frames, hr = nw.make_toy_clip(0, 32, kind="mosaic")
    np.testing.assert_array_equal(hr[:, ::4, ::4], frames[2])
    np.testing.assert_array_equal(frames[3][:, :-1, :-2], frames[2][:, 1:, 2:])
    with pytest.raises(ConfigError):
        nw.make_toy_clip(0, kind="other")


def test_predict_clamps(rng):
    out = nw.predict(_frames(rng), nw.init_weights(SMALL), SMALL)
    assert out.dtype == np.float32 and out.min() >= 0 and out.max() <= 1


def test_alignment_training_reduces_loss(trained_alignment):
    _, _, losses = trained_alignment
    assert np.mean(losses[-50:]) < 0.5 * np.mean(losses[:10])


def test_single_level_ablation_is_worse_on_large_shifts(trained_alignment):
    store, config, _ = trained_alignment
    flat_cfg = config.replace(tmcam_hierarchical=False)
    flat_store, _ = nw.train_alignment_toy(flat_cfg, iterations=400, seed=0)
    rng = np.random.default_rng(77)
    full, flat = [], []
    for shift in [(0, 8), (8, 0), (-8, 8), (8, -8), (0, -9), (9, 3)]:
        ref, nbr = nw.shifted_pair(rng, 32, shift)
        full.append(nw.interior_l1(nw.align_images(ref, nbr, store, config), ref, 9))
        flat.append(nw.interior_l1(nw.align_images(ref, nbr, flat_store, flat_cfg), ref, 9))
    assert np.mean(full) < np.mean(flat)
