"""Temporal multi-correspondence aggregation.

A neighbour frame's features are aligned to the reference frame by, at every
reference position, finding the K most correlated s x s patches inside a
(2d+1)^2 displacement window, fusing them with a small channel-mixing
network, and collapsing the fused patch to one pixel with per-position
learned weights. Three pyramid levels are aligned independently and merged
coarse to fine.

Scores are always computed in float64 so that the optimized volume and the
per-pixel oracle order candidates identically.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import NORM_EPS, value
from .exceptions import ConfigError, ContractError, ShapeError

LEVELS = 3


def extract_patch(fmap, p, s: int) -> np.ndarray:
    """Flattened s x s x C patch of a (C, H, W) map centred at ``p``, zero-padded."""
    x = np.asarray(value(fmap))
    c, h, w = x.shape
    r = s // 2
    out = np.zeros((s, s, c), dtype=x.dtype)
    y0, x0 = p
    for a in range(s):
        for b in range(s):
            y, xx = y0 + a - r, x0 + b - r
            if 0 <= y < h and 0 <= xx < w:
                out[a, b] = x[:, y, xx]
    return out.reshape(-1)


def correlate(a, b) -> float:
    """Normalized inner product of two patch vectors (0 when either is ~zero)."""
    return float(ad.correlate(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))


def window_offsets(d: int) -> np.ndarray:
    """All (dr, dc) with |dr|, |dc| <= d in raster order."""
    r = np.arange(-d, d + 1)
    dr, dc = np.meshgrid(r, r, indexing="ij")
    return np.stack([dr.ravel(), dc.ravel()], axis=1)


def _check_search(s, d, k):
    if s < 1 or s % 2 == 0:
        raise ConfigError(f"patch size must be odd, got {s}")
    if d < 0:
        raise ConfigError("max displacement must be >= 0")
    if k < 1 or k > (2 * d + 1) ** 2:
        raise ConfigError(f"K={k} outside 1..{(2 * d + 1) ** 2} for d={d}")


@dataclass
class CandidateSet:
    position: tuple
    offsets: np.ndarray  # (k, 2) int, sorted by descending score
    scores: np.ndarray   # (k,)

    def __len__(self):
        return len(self.scores)


def top_k_search(ref, nbr, p, s: int, d: int, k: int) -> CandidateSet:
    """Exhaustive top-K search for one reference position.

    Candidates whose centre falls outside ``nbr`` are skipped, so near the
    border fewer than (2d+1)^2 offsets compete and K is clamped to that count.
    Ties go to the candidate that comes first in raster order.
    """
    _check_search(s, d, k)
    ref, nbr = np.asarray(value(ref)), np.asarray(value(nbr))
    if ref.shape != nbr.shape:
        raise ShapeError(f"reference {ref.shape} and neighbour {nbr.shape} differ")
    _, h, w = nbr.shape
    query = extract_patch(ref, p, s)
    found = []
    for n, (dr, dc) in enumerate(window_offsets(d)):
        qy, qx = p[0] + dr, p[1] + dc
        if 0 <= qy < h and 0 <= qx < w:
            found.append((-correlate(query, extract_patch(nbr, (qy, qx), s)), n, (dr, dc)))
    found.sort(key=lambda t: (t[0], t[1]))
    found = found[:k]
    return CandidateSet(tuple(p), np.array([f[2] for f in found], dtype=int),
                        np.array([-f[0] for f in found]))


# ---------------------------------------------------------------------------
# Correlation volume

def correlation_volume_naive(ref, nbr, s: int, d: int) -> np.ndarray:
    """Per-pixel loop oracle. Returns (H, W, (2d+1)^2) scores, -inf where the
    candidate centre leaves the image."""
    ref = np.asarray(value(ref), dtype=np.float64)
    nbr = np.asarray(value(nbr), dtype=np.float64)
    _, h, w = ref.shape
    ref_p = ad.patch_table(ref, s)
    nbr_p = ad.patch_table(nbr, s)
    offsets = window_offsets(d)
    vol = np.full((h, w, len(offsets)), -np.inf)
    for y in range(h):
        for x in range(w):
            a = ref_p[y * w + x].reshape(-1)
            for n, (dr, dc) in enumerate(offsets):
                qy, qx = y + dr, x + dc
                if 0 <= qy < h and 0 <= qx < w:
                    vol[y, x, n] = correlate(a, nbr_p[qy * w + qx].reshape(-1))
    return vol


def _box_sum(x, s):
    """Sum over every s x s window of the last two axes (valid region)."""
    return sliding_window_view(x, (s, s), axis=(-2, -1)).sum(axis=(-2, -1))


def correlation_volume(ref, nbr, s: int, d: int, threads: int = 1) -> np.ndarray:
    """Vectorized correlation volume, same layout and values as the naive oracle.

    Patch inner products are assembled from per-pixel channel dot products
    followed by an s x s box sum, so the cost per offset is O(C*H*W) rather
    than O(s^2*C*H*W). Work is split across displacement rows when
    ``threads > 1``; each score is still computed by exactly one worker.
    """
    ref = np.asarray(value(ref), dtype=np.float64)
    nbr = np.asarray(value(nbr), dtype=np.float64)
    if ref.shape != nbr.shape:
        raise ShapeError(f"reference {ref.shape} and neighbour {nbr.shape} differ")
    c, h, w = ref.shape
    r = s // 2
    span = 2 * d + 1
    ref_pad = np.pad(ref, ((0, 0), (r, r), (r, r)))
    nbr_pad = np.pad(nbr, ((0, 0), (r + d, r + d), (r + d, r + d)))
    windows = sliding_window_view(nbr_pad, (h + 2 * r, w + 2 * r), axis=(1, 2))
    ref_norm = np.sqrt(_box_sum((ref_pad * ref_pad).sum(axis=0), s))
    nbr_norm = np.sqrt(_box_sum((nbr_pad * nbr_pad).sum(axis=0), s))  # (H+2d, W+2d)

    def rows(i0, i1):
        dots = np.einsum("chw,cijhw->ijhw", ref_pad, windows[:, i0:i1], optimize=True)
        num = _box_sum(dots, s)  # (i1-i0, span, H, W)
        out = np.empty_like(num)
        for i in range(i1 - i0):
            for j in range(span):
                nn = nbr_norm[i0 + i:i0 + i + h, j:j + w]
                denom = ref_norm * nn
                ok = (ref_norm >= NORM_EPS) & (nn >= NORM_EPS)
                out[i, j] = np.where(ok, num[i, j] / np.where(ok, denom, 1.0), 0.0)
        return out

    if threads > 1 and span > 1:
        bounds = np.linspace(0, span, min(threads, span) + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ab: rows(*ab), zip(bounds[:-1], bounds[1:])))
        scores = np.concatenate(parts, axis=0)
    else:
        scores = rows(0, span)
    vol = scores.reshape(span * span, h, w).transpose(1, 2, 0).copy()
    vol[~_valid_mask(h, w, d)] = -np.inf
    return vol


def _valid_mask(h, w, d):
    offs = window_offsets(d)
    ys = np.arange(h)[:, None, None] + offs[None, None, :, 0]
    xs = np.arange(w)[None, :, None] + offs[None, None, :, 1]
    return (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)


def select_top_k(vol: np.ndarray, d: int, k: int):
    """Top-K of a correlation volume with raster tie-breaking.

    Returns ``(centers, offsets, scores)`` with shapes (H, W, K), (H, W, K, 2)
    and (H, W, K); ``centers`` are flat indices into the neighbour map. Where
    fewer than K candidates are valid the remaining slots repeat the best one.
    """
    h, w, n = vol.shape
    if k > n:
        raise ConfigError(f"K={k} exceeds the {n}-candidate window")
    order = np.argsort(-vol, axis=-1, kind="stable")[..., :k]
    scores = np.take_along_axis(vol, order, axis=-1)
    invalid = ~np.isfinite(scores)
    if invalid.any():
        order = np.where(invalid, order[..., :1], order)
        scores = np.take_along_axis(vol, order, axis=-1)
    offsets = window_offsets(d)[order]
    ys = np.arange(h)[:, None, None] + offsets[..., 0]
    xs = np.arange(w)[None, :, None] + offsets[..., 1]
    return ys * w + xs, offsets, scores


def top_k_all(ref, nbr, s: int, d: int, k: int, threads: int = 1):
    """Top-K candidates for every reference position (vectorized)."""
    _check_search(s, d, k)
    return select_top_k(correlation_volume(ref, nbr, s, d, threads), d, k)


# ---------------------------------------------------------------------------
# Aggregation

@dataclass
class LevelParams:
    """Learned tensors for one pyramid level (arrays or autodiff handles)."""

    aggr1_w: object
    aggr1_b: object
    aggr2_w: object
    aggr2_b: object
    wmap_w: object
    wmap_b: object
    fuse_w: object = None
    fuse_b: object = None


@dataclass
class TmcamParams:
    levels: list

    @classmethod
    def from_store(cls, store, prefix="tmcam"):
        levels = []
        for lv in range(LEVELS):
            key = f"{prefix}.l{lv}."
            fuse = lv < LEVELS - 1
            levels.append(LevelParams(
                store[key + "aggr1.w"], store[key + "aggr1.b"],
                store[key + "aggr2.w"], store[key + "aggr2.b"],
                store[key + "wmap.w"], store[key + "wmap.b"],
                store[key + "fuse.w"] if fuse else None,
                store[key + "fuse.b"] if fuse else None,
            ))
        return cls(levels)


def tmcam_manifest(prefix, channels, patch_size, top_k):
    """(name, shape) list for one TM-CAM parameter set."""
    c, s2 = channels, patch_size * patch_size
    out = []
    for lv in range(LEVELS):
        key = f"{prefix}.l{lv}."
        out += [
            (key + "aggr1.w", (c, top_k * c, 1, 1)), (key + "aggr1.b", (c,)),
            (key + "aggr2.w", (c, c, 1, 1)), (key + "aggr2.b", (c,)),
            (key + "wmap.w", (s2, 2 * c, 3, 3)), (key + "wmap.b", (s2,)),
        ]
        if lv < LEVELS - 1:
            out += [(key + "fuse.w", (c, 2 * c, 3, 3)), (key + "fuse.b", (c,))]
    return out


def adaptive_weights(ref, nbr, kernel, bias=None, s: int = 3, normalize: str = "softmax"):
    """Per-position weights over the s^2 patch cells from conv([nbr, ref]).

    ``normalize="softmax"`` makes every column a convex combination;
    ``"raw"`` returns the conv output unchanged.
    """
    if value(ref).shape != value(nbr).shape:
        raise ShapeError(f"reference {value(ref).shape} and neighbour {value(nbr).shape} differ")
    if value(kernel).shape[0] != s * s:
        raise ShapeError(f"weight-map conv must have {s * s} output channels")
    logits = ad.conv2d(ad.concat_channels([nbr, ref]), kernel, bias, 1, value(kernel).shape[-1] // 2)
    if normalize == "softmax":
        return ad.softmax_channels(logits)
    if normalize == "raw":
        return logits
    raise ConfigError(f"unknown weight normalization {normalize!r}")


def fuse_candidates(patches, params: LevelParams):
    """Aggr: (..., K, s^2, C) candidate patches -> (..., s^2, C).

    Candidates are concatenated along channels (best first) and mixed by two
    1x1 layers with a leaky ReLU between them, independently per patch cell.
    """
    shp = value(patches).shape
    k, cells, c = shp[-3:]
    if value(params.aggr1_w).shape[1] != k * c:
        raise ContractError(f"Aggr expects {value(params.aggr1_w).shape[1] // c} candidates, got {k}")
    stacked = ad.stack_candidates(patches)
    hidden = ad.leaky_relu(ad.channel_mix(stacked, params.aggr1_w, params.aggr1_b))
    return ad.channel_mix(hidden, params.aggr2_w, params.aggr2_b)


def aggregate_candidates(patches, params: LevelParams, weight_column):
    """Fuse K candidate patches (K, s^2, C) and dot with an s^2 weight column -> (C,)."""
    patches_v = value(patches)
    if patches_v.ndim != 3:
        raise ShapeError(f"expected (K, s^2, C) candidates, got {patches_v.shape}")
    k = value(params.aggr1_w).shape[1] // patches_v.shape[-1]
    if patches_v.shape[0] != k:
        raise ContractError(f"expected {k} candidates, got {patches_v.shape[0]}")
    fused = fuse_candidates(ad.reshape(patches, (1, 1) + patches_v.shape), params)
    cells = patches_v.shape[1]
    col = ad.reshape(weight_column, (cells, 1, 1))
    out = ad.weighted_cell_sum(fused, col)
    return ad.reshape(out, (patches_v.shape[-1],))


def align_level(ref, nbr, params: LevelParams, s: int, d: int, k: int,
                adaptive: bool = True, normalize: str = "softmax", threads: int = 1):
    """Align ``nbr`` to ``ref`` at a single pyramid level -> (C, H, W)."""
    _check_search(s, d, k)
    if value(ref).shape != value(nbr).shape:
        raise ShapeError(f"reference {value(ref).shape} and neighbour {value(nbr).shape} differ")
    c, h, w = value(ref).shape
    centers, _, _ = top_k_all(value(ref), value(nbr), s, d, k, threads)
    patches = ad.gather_patches(nbr, centers, s)  # (H, W, K, s2, C)
    fused = fuse_candidates(patches, params)
    if adaptive:
        weights = adaptive_weights(ref, nbr, params.wmap_w, params.wmap_b, s, normalize)
    else:
        weights = np.full((s * s, h, w), 1.0 / (s * s), dtype=value(ref).dtype)
    return ad.weighted_cell_sum(fused, weights)


def tmcam_align(ref_pyramid, nbr_pyramid, params: TmcamParams, s: int = 3,
                max_disp=(7, 5, 3), k: int = 4, hierarchical: bool = True,
                adaptive: bool = True, normalize: str = "softmax", threads: int = 1):
    """Coarse-to-fine alignment over a 3-level pyramid; returns the level-0 map.

    ``max_disp`` lists displacements from level 0 (full resolution) to level 2.
    Every level searches its own raw features; each finer result is then
    fused with the upsampled coarser one (concat + 3x3 conv). With
    ``hierarchical=False`` only level 0 is aligned.
    """
    if len(ref_pyramid) != LEVELS or len(nbr_pyramid) != LEVELS:
        raise ConfigError(f"pyramids must have {LEVELS} levels")
    if len(max_disp) != LEVELS:
        raise ConfigError(f"need {LEVELS} displacement values")
    for lv in range(LEVELS):
        if value(ref_pyramid[lv]).shape != value(nbr_pyramid[lv]).shape:
            raise ConfigError(f"level {lv} shapes differ between pyramids")
    if not hierarchical:
        return align_level(ref_pyramid[0], nbr_pyramid[0], params.levels[0], s, max_disp[0], k,
                           adaptive, normalize, threads)
    aligned = align_level(ref_pyramid[2], nbr_pyramid[2], params.levels[2], s, max_disp[2], k,
                          adaptive, normalize, threads)
    for lv in (1, 0):
        lp = params.levels[lv]
        current = align_level(ref_pyramid[lv], nbr_pyramid[lv], lp, s, max_disp[lv], k,
                              adaptive, normalize, threads)
        up = ad.bilinear_upsample2(aligned)
        target_hw = value(current).shape[1:]
        if value(up).shape[1:] != target_hw:
            up = ad.crop(up, *target_hw)
        aligned = ad.conv2d(ad.concat_channels([current, up]), lp.fuse_w, lp.fuse_b, 1, 1)
    return aligned
