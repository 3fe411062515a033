"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (repeated in the pytest terminal summary)
before asserting. Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import os
import time

import numpy as np
import pytest

from mucan import cli, cncam, gradcheck, image_io, knnflow, tmcam
from mucan import network as nw
from mucan import tensor_core as tc
from mucan.loss_metrics import charbonnier, edge_aware_loss, psnr

ORACLE_SEEDS = 100
SIZES = [(8, 8), (12, 16), (16, 16), (24, 20), (32, 32), (64, 64)]
DISPS = [3, 5, 7]
KS = [1, 2, 4, 6]
SUBSET = 24  # positions checked per seed when the full oracle is too slow


def _positions(rng, h, w):
    if h * w <= 16 * 16:
        return [(y, x) for y in range(h) for x in range(w)]
    pts = {(0, 0), (h - 1, w - 1), (0, w - 1), (h // 2, w // 2)}
    while len(pts) < SUBSET:
        pts.add((int(rng.integers(h)), int(rng.integers(w))))
    return sorted(pts)


def _corr(a, b):
    """Normalized inner product written out directly (independent of the library)."""
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b) / (na * nb)


def _volume_oracle_at(ref, nbr, p, s, d):
    h, w = ref.shape[1:]
    q = tmcam.extract_patch(ref, p, s)
    out = np.full(len(tmcam.window_offsets(d)), -np.inf)
    for n, (dr, dc) in enumerate(tmcam.window_offsets(d)):
        y, x = p[0] + dr, p[1] + dc
        if 0 <= y < h and 0 <= x < w:
            out[n] = _corr(q, tmcam.extract_patch(nbr, (y, x), s))
    return out


def _nn_oracle_at(pyr, p):
    q = pyr[0][:, p[0], p[1]]
    idx, best = [], []
    for level in pyr[1:]:
        flat = level.reshape(level.shape[0], -1)
        sc = [_corr(q, flat[:, n]) for n in range(flat.shape[1])]
        i = int(np.argmax(sc))  # first maximum = raster tie-break
        idx.append(i)
        best.append(sc[i])
    return idx, best


def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))) if np.size(a) else 0.0


def test_oracle_equivalence(acceptance):
    t0 = time.perf_counter()
    worst = {"corr": 0.0, "topk": 0.0, "nn": 0.0}
    mismatches = {"corr": 0, "topk": 0, "nn": 0}
    for seed in range(ORACLE_SEEDS):
        rng = np.random.default_rng(seed)
        h, w = SIZES[seed % len(SIZES)]
        d, k = DISPS[seed % len(DISPS)], KS[seed % len(KS)]
        ref, nbr = rng.standard_normal((2, 8, h, w))
        vol = tmcam.correlation_volume(ref, nbr, 3, d)
        _, offsets, scores = tmcam.select_top_k(vol, d, k)
        for p in _positions(rng, h, w):
            want = _volume_oracle_at(ref, nbr, p, 3, d)
            fin = np.isfinite(want)
            if not np.array_equal(fin, np.isfinite(vol[p])):
                mismatches["corr"] += 1
            worst["corr"] = max(worst["corr"], _rel(vol[p][fin], want[fin]))
            cs = tmcam.top_k_search(ref, nbr, p, 3, d, k)
            if not np.array_equal(offsets[p][:len(cs)], cs.offsets):
                mismatches["topk"] += 1
            worst["topk"] = max(worst["topk"], _rel(scores[p][:len(cs)], cs.scores))
        pyr = [np.asarray(x) for x in cncam.build_pyramid(ref)]
        indices, nn_scores = cncam.nn_search(pyr)
        if h * w <= 16 * 16:
            want_i, want_s = cncam.nn_search_naive(pyr)
            mismatches["nn"] += sum(int(not np.array_equal(a, b)) for a, b in zip(indices, want_i))
            worst["nn"] = max([worst["nn"]] + [_rel(a, b) for a, b in zip(nn_scores, want_s)])
        else:
            for p in _positions(rng, h, w):
                want_i, want_s = _nn_oracle_at(pyr, p)
                mismatches["nn"] += sum(int(ix[p] != wi) for ix, wi in zip(indices, want_i))
                worst["nn"] = max([worst["nn"]] + [_rel(np.array([sc[p]]), np.array([ws]))
                                                   for sc, ws in zip(nn_scores, want_s)])
    elapsed = time.perf_counter() - t0
    ok = (not any(mismatches.values()) and max(worst.values()) <= 1e-6 and elapsed < 60)
    acceptance("oracle equivalence", ok,
               f"seeds={ORACLE_SEEDS} index_mismatches={mismatches} max_rel={max(worst.values()):.2e} "
               f"time={elapsed:.1f}s")
    assert ok


def test_gradient_suite(acceptance):
    t0 = time.perf_counter()
    reports = gradcheck.run_suite(seeds=5)
    elapsed = time.perf_counter() - t0
    failed = sorted({r.op for r in reports if not r.passed})
    worst = max(r.max_rel_err for r in reports)
    ops = len({r.op for r in reports})
    ok = not failed and worst < 1e-4 and len(reports) == 5 * ops and elapsed < 120
    acceptance("gradient suite", ok, f"ops={ops} checks={len(reports)} max_rel={worst:.2e} "
                                     f"failed={failed} time={elapsed:.1f}s")
    assert ok


def test_shape_pipeline(acceptance):
    cfg = nw.MucanConfig()
    rng = np.random.default_rng(0)
    frames = [rng.random((3, 32, 32)).astype(np.float32) for _ in range(5)]
    out = nw.forward(frames, nw.init_weights(cfg), cfg)
    zero = nw.forward(frames, nw.zero_weights(cfg), cfg)
    exact = np.array_equal(zero, tc.bilinear_upsample(frames[2], 4))
    ok = out.shape == (3, 128, 128) and exact
    acceptance("shape/pipeline", ok, f"output={out.shape} zero_weights_equals_bilinear={exact}")
    assert ok


def test_alignment_property(acceptance, trained_alignment):
    store, config, _ = trained_alignment
    rng = np.random.default_rng(2024)
    margin = 8
    rows = []
    for s in range(1, 9):
        for shift in [(0, s), (s, 0), (-s, s), (s, -s)]:
            ref, nbr = nw.shifted_pair(rng, 32, shift)
            aligned = nw.align_images(ref, nbr, store, config)
            rows.append((shift, nw.interior_l1(aligned, ref, margin), nw.interior_l1(nbr, ref, margin)))
    bad = [r for r in rows if not r[1] < r[2]]
    worst = max(rows, key=lambda r: r[1] / r[2])
    ok = not bad
    acceptance("alignment property", ok,
               f"shifts=1..8px x4 directions, aligned<unaligned in {len(rows) - len(bad)}/{len(rows)}; "
               f"worst ratio {worst[1] / worst[2]:.3f} at {worst[0]}")
    assert ok


def test_knnflow_trend(acceptance):
    t0 = time.perf_counter()
    rep = knnflow.run_knnflow(ks=(1, 2, 4), noise_sigma=0.1, trials=20)
    e1, e2, e4 = rep.mean_epe
    zero = [knnflow.best_of_k_epe(*knnflow.synth_pair(seed, shift, 0.0), k=1)
            for seed, shift in enumerate([(0, 0), (2, 0), (-3, 1), (4, -5), (1, 5)])]
    elapsed = time.perf_counter() - t0
    ok = e4 <= e2 <= e1 and e1 > e2 > e4 and max(zero) == 0.0 and elapsed < 60
    acceptance("knn-flow trend", ok, f"EPE(1)={e1:.3f} EPE(2)={e2:.3f} EPE(4)={e4:.3f} "
                                     f"noiseless EPE(1)={max(zero)} time={elapsed:.1f}s")
    assert ok


def test_toy_overfit(acceptance):
    cfg = nw.MucanConfig()
    assert cfg.channels == 8
    frames, hr = nw.make_toy_clip(0, 32, kind="mosaic")
    t0 = time.perf_counter()
    weights, losses = nw.train_toy((list(frames), hr), cfg, 2000)
    elapsed = time.perf_counter() - t0
    psnr0 = psnr(nw.forward(list(frames), nw.init_weights(cfg), cfg), hr)
    psnr1 = psnr(nw.forward(list(frames), weights, cfg), hr)
    ratio = losses[-1] / losses[0]
    ok = ratio < 0.1 and psnr1 - psnr0 >= 10.0 and elapsed < 15 * 60
    acceptance("toy overfit", ok, f"loss {losses[0]:.5f}->{losses[-1]:.5f} (ratio {ratio:.3f}, need <0.1); "
                                  f"PSNR {psnr0:.2f}->{psnr1:.2f} dB (+{psnr1 - psnr0:.2f}, need >=10); "
                                  f"time={elapsed:.0f}s")
    assert ok


def test_loss_identities(acceptance):
    rng = np.random.default_rng(5)
    pred, target = rng.random((2, 3, 32, 32))
    lam0 = edge_aware_loss(pred, target, lam=0.0) == charbonnier(pred, target)
    const = np.full((3, 32, 32), 0.4)
    flat = all(edge_aware_loss(pred, const, lam=lam) == charbonnier(pred, const) for lam in (0.1, 0.5, 3.0))
    ok = lam0 and flat
    acceptance("loss identities", ok, f"lambda0_exact={lam0} constant_target_exact={flat}")
    assert ok


def test_sr_determinism(acceptance, tmp_path):
    cfg = nw.MucanConfig()
    src = tmp_path / "in"
    src.mkdir()
    frames, _ = nw.make_toy_clip(11, 32)
    for i, f in enumerate(frames):
        image_io.write_png(src / f"frame_{i:04d}.png", f)
    nw.init_weights(cfg).save(tmp_path / "w.bin")
    runs = {}
    for name, threads in [("t1a", 1), ("t1b", 1), ("t4", 4)]:
        code = cli.main(["sr", "--weights", str(tmp_path / "w.bin"), "--input", str(src),
                         "--output", str(tmp_path / name), "--threads", str(threads)])
        assert code == 0
        runs[name] = {n: (tmp_path / name / n).read_bytes() for n in sorted(os.listdir(tmp_path / name))}
    ok = len(runs["t1a"]) == 5 and runs["t1a"] == runs["t1b"] == runs["t4"]
    acceptance("sr determinism", ok, f"frames={len(runs['t1a'])} threads1==threads1={runs['t1a'] == runs['t1b']} "
                                     f"threads1==threads4={runs['t1a'] == runs['t4']}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
