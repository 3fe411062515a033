"""Cross-scale nonlocal-correspondence aggregation.

Every position of the input map looks up its most correlated feature in each
of three average-pooled copies of the same map (searching the whole map, not
a window), gates the four vectors with a sigmoid attention mask and mixes
them back to C channels. The mixed result is added to the input, as in
nonlocal blocks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NORM_EPS, value
from .tmcam import correlate, extract_patch

SCALES = 4


def build_pyramid(m0, scales: int = SCALES) -> list:
    """``[M0, M1, M2, M3]`` where each level is a 2x2 average pool of the previous."""
    out = [m0]
    for _ in range(scales - 1):
        out.append(ad.avg_pool2(out[-1]))
    return out


def _unit_rows(table):
    norms = np.sqrt((table * table).sum(axis=1))
    ok = norms >= NORM_EPS
    return np.where(ok[:, None], table / np.where(ok, norms, 1.0)[:, None], 0.0)


def _vectors(x, s_query):
    x = np.asarray(value(x), dtype=np.float64)
    if s_query == 1:
        return x.reshape(x.shape[0], -1).T
    return ad.patch_table(x, s_query).reshape(x.shape[1] * x.shape[2], -1)


def nn_search(pyramid, s_query: int = 1, block: int = 512):
    """Nearest neighbour of every M0 position in each coarser scale.

    Returns ``(indices, scores)``: per scale s = 1..3 a flat index array of
    shape (H0, W0) and the matching correlation scores. Queries are processed
    in blocks against the full candidate set; ``argmax`` keeps the first
    maximum, i.e. the raster-order tie-break.
    """
    h0, w0 = value(pyramid[0]).shape[1:]
    queries = _unit_rows(_vectors(pyramid[0], s_query))
    indices, scores = [], []
    for level in pyramid[1:]:
        cands = _unit_rows(_vectors(level, s_query))
        idx = np.empty(len(queries), dtype=np.int64)
        best = np.empty(len(queries))
        for start in range(0, len(queries), block):
            sim = queries[start:start + block] @ cands.T
            arg = sim.argmax(axis=1)
            idx[start:start + block] = arg
            best[start:start + block] = sim[np.arange(len(arg)), arg]
        indices.append(idx.reshape(h0, w0))
        scores.append(best.reshape(h0, w0))
    return indices, scores


def nn_search_naive(pyramid, s_query: int = 1):
    """Exhaustive per-query loop oracle for :func:`nn_search`."""
    m0 = np.asarray(value(pyramid[0]), dtype=np.float64)
    h0, w0 = m0.shape[1:]
    indices, scores = [], []
    for level in pyramid[1:]:
        lv = np.asarray(value(level), dtype=np.float64)
        h, w = lv.shape[1:]
        cand = [extract_patch(lv, (y, x), s_query) for y in range(h) for x in range(w)]
        idx = np.zeros((h0, w0), dtype=np.int64)
        best = np.zeros((h0, w0))
        for y in range(h0):
            for x in range(w0):
                q = extract_patch(m0, (y, x), s_query)
                top, arg = -np.inf, 0
                for n, c in enumerate(cand):
                    sc = correlate(q, c)
                    if sc > top:
                        top, arg = sc, n
                idx[y, x], best[y, x] = arg, top
        indices.append(idx)
        scores.append(best)
    return indices, scores


def nonlocal_nn(pyramid, p, s_query: int = 1) -> list:
    """Matched C-vectors for query position ``p`` at scales 1..3 (exhaustive)."""
    m0 = np.asarray(value(pyramid[0]))
    q = extract_patch(m0, p, s_query)
    out = []
    for level in pyramid[1:]:
        lv = np.asarray(value(level))
        h, w = lv.shape[1:]
        scores = [correlate(q, extract_patch(lv, (y, x), s_query)) for y in range(h) for x in range(w)]
        best = int(np.argmax(scores))
        out.append(lv[:, best // w, best % w].copy())
    return out


@dataclass
class CncamParams:
    att_w: list
    att_b: list
    aggr1_w: object
    aggr1_b: object
    aggr2_w: object
    aggr2_b: object

    @classmethod
    def from_store(cls, store, prefix="cncam"):
        return cls(
            [store[f"{prefix}.att{s}.w"] for s in range(SCALES)],
            [store[f"{prefix}.att{s}.b"] for s in range(SCALES)],
            store[f"{prefix}.aggr1.w"], store[f"{prefix}.aggr1.b"],
            store[f"{prefix}.aggr2.w"], store[f"{prefix}.aggr2.b"],
        )


def cncam_manifest(prefix, channels):
    c = channels
    out = []
    for s in range(SCALES):
        out += [(f"{prefix}.att{s}.w", (c, c, 1, 1)), (f"{prefix}.att{s}.b", (c,))]
    out += [(f"{prefix}.aggr1.w", (c, SCALES * c, 1, 1)), (f"{prefix}.aggr1.b", (c,)),
            (f"{prefix}.aggr2.w", (c, c, 1, 1)), (f"{prefix}.aggr2.b", (c,))]
    return out


def attention_gate(x, kernel, bias=None):
    """``x * sigmoid(conv1x1(x))``."""
    return ad.mul(x, ad.sigmoid(ad.conv2d(x, kernel, bias)))


def cncam_aggregate(m0, params: CncamParams, s_query: int = 1):
    """(C, H, W) -> (C, H, W): ``m0 + Aggr([Att_s(gathered_s)])``."""
    pyramid = build_pyramid(m0)
    indices, _ = nn_search(pyramid, s_query)
    gathered = [m0] + [ad.gather_positions(level, idx) for level, idx in zip(pyramid[1:], indices)]
    gated = [attention_gate(g, w, b) for g, w, b in zip(gathered, params.att_w, params.att_b)]
    hidden = ad.leaky_relu(ad.conv2d(ad.concat_channels(gated), params.aggr1_w, params.aggr1_b))
    return ad.add(m0, ad.conv2d(hidden, params.aggr2_w, params.aggr2_b))
