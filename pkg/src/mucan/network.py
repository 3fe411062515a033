"""Full multi-frame super-resolution network at configurable (desk) scale.

Pipeline for 2N+1 low-resolution frames:

1. shared encoder -> 3-level feature pyramid per frame
2. TM-CAM aligns each neighbour to the centre frame; a second TM-CAM
   self-aggregates the centre frame
3. concat + conv + depth-to-space -> features at 2x resolution
4. CN-CAM cross-scale aggregation
5. residual reconstruction trunk, conv + depth-to-space -> 4x, output conv
6. plus bilinear x4 of the centre frame (global skip)
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import tensor_core as tc
from .autodiff import value
from .cncam import CncamParams, cncam_aggregate, cncam_manifest
from .exceptions import ConfigError, ContractError, TrainingError
from .loss_metrics import edge_aware_loss
from .tmcam import TmcamParams, tmcam_align, tmcam_manifest

log = logging.getLogger(__name__)


@dataclass
class MucanConfig:
    temporal_radius: int = 2
    channels: int = 8
    feat_blocks: int = 2
    recon_blocks: int = 4
    patch_size: int = 3
    max_disp: tuple = (7, 5, 3)
    top_k: int = 4
    cncam_enabled: bool = True
    tmcam_enabled: bool = True
    tmcam_adaptive_weights: bool = True
    tmcam_hierarchical: bool = True
    weight_norm: str = "softmax"
    cncam_patch_size: int = 1
    scale: int = 4
    seed: int = 0
    edge_threshold: float = 0.1
    edge_weight: float = 0.1
    charbonnier_eps: float = 1e-3
    learning_rate: float = 4e-4
    iterations: int = 2000

    def __post_init__(self):
        self.max_disp = tuple(int(d) for d in self.max_disp)
        self.validate()

    @property
    def n_frames(self) -> int:
        return 2 * self.temporal_radius + 1

    def validate(self):
        if self.temporal_radius < 0:
            raise ConfigError("temporal_radius must be >= 0")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError("patch_size must be odd")
        if self.cncam_patch_size < 1 or self.cncam_patch_size % 2 == 0:
            raise ConfigError("cncam_patch_size must be odd")
        if len(self.max_disp) != 3:
            raise ConfigError("max_disp needs exactly 3 entries (levels 0, 1, 2)")
        for d in self.max_disp:
            if d < 0 or self.top_k > (2 * d + 1) ** 2:
                raise ConfigError(f"top_k={self.top_k} does not fit a window with d={d}")
        if self.scale != 4:
            raise ConfigError("only x4 upscaling is supported")
        if self.weight_norm not in ("softmax", "raw"):
            raise ConfigError("weight_norm must be 'softmax' or 'raw'")

    def replace(self, **changes) -> "MucanConfig":
        return dataclasses.replace(self, **changes)

    # -- plain-text "key = value" files -------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "MucanConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        defaults = cls()
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (t.strip() for t in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, val, getattr(defaults, key))
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "MucanConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _parse_value(key, text, default):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(t) for t in text.split(",") if t.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


# ---------------------------------------------------------------------------
# Weights

def _conv(name, cout, cin, k):
    return [(name + ".w", (cout, cin, k, k)), (name + ".b", (cout,))]


def weight_manifest(config: MucanConfig) -> list:
    """Canonical (name, shape) list; every model file must match it exactly."""
    c = config.channels
    out = _conv("enc.conv_first", c, 3, 3)
    for i in range(config.feat_blocks):
        out += _conv(f"enc.block{i}.conv1", c, c, 3) + _conv(f"enc.block{i}.conv2", c, c, 3)
    out += _conv("enc.down1", c, c, 3) + _conv("enc.down2", c, c, 3)
    out += tmcam_manifest("tmcam", c, config.patch_size, config.top_k)
    out += tmcam_manifest("tmcam_self", c, config.patch_size, config.top_k)
    out += _conv("fusion", 4 * c, config.n_frames * c, 3)
    out += cncam_manifest("cncam", c)
    for i in range(config.recon_blocks):
        out += _conv(f"recon.block{i}.conv1", c, c, 3) + _conv(f"recon.block{i}.conv2", c, c, 3)
    out += _conv("upconv", 4 * c, c, 3)
    out += _conv("out", 3, c, 3)
    return out


_MASK64 = (1 << 64) - 1


def splitmix64(state: int):
    """One SplitMix64 step -> (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def init_from_manifest(manifest, seed: int) -> tc.WeightStore:
    """Kernels ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases zero.

    ``seed`` is expanded with SplitMix64 into one 64-bit seed per tensor (in
    manifest order), each driving its own PCG64 stream.
    """
    store = tc.WeightStore()
    state = seed & _MASK64
    for name, shape in manifest:
        state, sub = splitmix64(state)
        if name.endswith(".b"):
            store[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(1.0 / fan_in)
        rng = np.random.Generator(np.random.PCG64(sub))
        store[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return store


def init_weights(config: MucanConfig) -> tc.WeightStore:
    return init_from_manifest(weight_manifest(config), config.seed)


def zero_weights(config: MucanConfig) -> tc.WeightStore:
    return tc.WeightStore((n, np.zeros(s, dtype=np.float32)) for n, s in weight_manifest(config))


def check_weights(store, config: MucanConfig) -> None:
    expected = dict(weight_manifest(config))
    missing = [n for n in expected if n not in store]
    if missing:
        raise ContractError(f"weights missing {len(missing)} tensors, e.g. {missing[0]!r}")
    extra = [n for n in store if n not in expected]
    if extra:
        raise ContractError(f"unexpected tensor {extra[0]!r} in weights")
    for name, shape in expected.items():
        if tuple(value(store[name]).shape) != shape:
            raise ContractError(f"{name}: shape {value(store[name]).shape} != expected {shape}")


def load_model(path, config: MucanConfig) -> tc.WeightStore:
    store = tc.WeightStore.load(path)
    check_weights(store, config)
    return store


# ---------------------------------------------------------------------------
# Forward pass

def encode_pyramid(frame, weights, config: MucanConfig) -> list:
    """Shared encoder: (3, H, W) -> [level0 (C,H,W), level1 (C,H/2,W/2), level2 (C,H/4,W/4)]."""
    p = weights
    x = ad.leaky_relu(ad.conv2d(frame, p["enc.conv_first.w"], p["enc.conv_first.b"], 1, 1))
    for i in range(config.feat_blocks):
        key = f"enc.block{i}."
        x = ad.residual_block(x, p[key + "conv1.w"], p[key + "conv2.w"], p[key + "conv1.b"], p[key + "conv2.b"])
    l1 = ad.leaky_relu(ad.conv2d(x, p["enc.down1.w"], p["enc.down1.b"], 2, 1))
    l2 = ad.leaky_relu(ad.conv2d(l1, p["enc.down2.w"], p["enc.down2.b"], 2, 1))
    return [x, l1, l2]


def _check_frames(frames, config):
    frames = [np.asarray(f) for f in frames]
    if len(frames) != config.n_frames:
        raise ConfigError(f"expected {config.n_frames} frames, got {len(frames)}")
    shape = frames[0].shape
    if len(shape) != 3 or shape[0] != 3:
        raise ConfigError(f"frames must be (3, H, W), got {shape}")
    if any(f.shape != shape for f in frames):
        raise ConfigError("all frames must share one size")
    return frames


def forward(frames, weights, config: MucanConfig, threads: int = 1):
    """Predict the 4x centre frame; returns (3, 4H, 4W), unclamped."""
    frames = _check_frames(frames, config)
    p = weights
    center = config.temporal_radius
    pyramids = [encode_pyramid(f, p, config) for f in frames]
    aligned = []
    for j, pyr in enumerate(pyramids):
        if not config.tmcam_enabled:
            aligned.append(pyr[0])
            continue
        params = TmcamParams.from_store(p, "tmcam_self" if j == center else "tmcam")
        aligned.append(tmcam_align(
            pyramids[center], pyr, params, config.patch_size, config.max_disp, config.top_k,
            hierarchical=config.tmcam_hierarchical, adaptive=config.tmcam_adaptive_weights,
            normalize=config.weight_norm, threads=threads))
    x = ad.conv2d(ad.concat_channels(aligned), p["fusion.w"], p["fusion.b"], 1, 1)
    x = ad.leaky_relu(ad.pixel_shuffle(x, 2))
    if config.cncam_enabled:
        x = cncam_aggregate(x, CncamParams.from_store(p, "cncam"), config.cncam_patch_size)
    for i in range(config.recon_blocks):
        key = f"recon.block{i}."
        x = ad.residual_block(x, p[key + "conv1.w"], p[key + "conv2.w"], p[key + "conv1.b"], p[key + "conv2.b"])
    x = ad.leaky_relu(ad.pixel_shuffle(ad.conv2d(x, p["upconv.w"], p["upconv.b"], 1, 1), 2))
    x = ad.conv2d(x, p["out.w"], p["out.b"], 1, 1)
    return ad.add(x, tc.bilinear_upsample(frames[center], 4))


def predict(frames, weights, config: MucanConfig, threads: int = 1) -> np.ndarray:
    """Forward pass in runtime precision, clamped to [0, 1] for export."""
    frames = [np.asarray(f, dtype=np.float32) for f in frames]
    weights = {k: np.asarray(v, dtype=np.float32) for k, v in weights.items()}
    return np.clip(forward(frames, weights, config, threads), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Training

@dataclass
class Adam:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = (params[name] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[name].dtype)


def cosine_lr(base: float, it: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * it / max(total, 1)))


def loss_and_grads(frames, target, weights, config: MucanConfig):
    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in weights.items()}
    out = forward(frames, leaves, config)
    loss = edge_aware_loss(out, target, config.edge_threshold, config.edge_weight, config.charbonnier_eps)
    grads = ad.backward(tape, loss)
    return float(value(loss)), value(out), {k: grads[v.id] for k, v in leaves.items()}


def train(clips, config: MucanConfig, iterations=None, weights=None, callback=None):
    """Adam + cosine decay on the edge-aware loss over ``clips`` (cycled).

    ``clips`` is a sequence of ``(frames, hr_target)``. Returns the trained
    :class:`WeightStore` and the per-iteration loss trace.
    """
    iterations = config.iterations if iterations is None else iterations
    store = init_weights(config) if weights is None else tc.WeightStore(weights)
    check_weights(store, config)
    clips = [(_check_frames(f, config), np.asarray(t, dtype=np.float32)) for f, t in clips]
    clips = [([f.astype(np.float32) for f in fr], t) for fr, t in clips]
    opt = Adam(lr=config.learning_rate)
    losses = []
    for it in range(iterations):
        frames, target = clips[it % len(clips)]
        loss, _, grads = loss_and_grads(frames, target, store, config)
        if not np.isfinite(loss):
            raise TrainingError(f"loss became {loss} at iteration {it}", iteration=it)
        losses.append(loss)
        opt.step(store, grads, cosine_lr(config.learning_rate, it, iterations))
        if callback is not None:
            callback(it, loss)
        if it % 100 == 0:
            log.debug("iter %d loss %.6f", it, loss)
    return store, losses


def train_toy(clip, config: MucanConfig, iterations=None, callback=None):
    """Overfit a single ``(frames, hr_target)`` clip."""
    return train([clip], config, iterations, callback=callback)


def smooth_texture(rng, shape, sigma=2.0) -> np.ndarray:
    """Random (3, H, W) texture in [0, 1] from blurred noise."""
    noise = rng.standard_normal(shape)
    tex = np.stack([ndimage.gaussian_filter(ch, sigma, mode="wrap") for ch in noise])
    tex -= tex.min()
    return tex / max(tex.max(), 1e-12)


def make_toy_clip(seed: int = 0, size: int = 32, temporal_radius: int = 2, motion=(1, 2),
                  kind: str = "texture"):
    """Synthetic clip of 2N+1 LR frames plus the HR centre target.

    ``kind="texture"``: a smooth texture translating by ``motion`` HR pixels
    per frame; LR frames are 4x4 box-downsampled HR crops.
    ``kind="mosaic"``: uniform LR noise translating by ``motion`` LR pixels
    per frame; the target is the 4x nearest-neighbour (block) upsample of the
    LR centre frame, so LR -> HR is an exact, learnable local mapping.
    """
    rng = np.random.default_rng(seed)
    if kind == "mosaic":
        margin = (temporal_radius + 1) * max(abs(m) for m in motion) + 1
        tex = rng.random((3, size + 2 * margin, size + 2 * margin))
        frames = []
        for t in range(-temporal_radius, temporal_radius + 1):
            y0, x0 = margin + t * motion[0], margin + t * motion[1]
            frames.append(tex[:, y0:y0 + size, x0:x0 + size])
        frames = np.stack(frames)
        hr = np.kron(frames[temporal_radius], np.ones((1, 4, 4)))
        return frames.astype(np.float32), hr.astype(np.float32)
    if kind != "texture":
        raise ConfigError(f"unknown clip kind {kind!r}")
    hr = 4 * size
    margin = 4 * (temporal_radius + 1) * max(abs(m) for m in motion) + 4
    tex = smooth_texture(rng, (3, hr + 2 * margin, hr + 2 * margin), sigma=3.0)
    crops = []
    for t in range(-temporal_radius, temporal_radius + 1):
        y0, x0 = margin + t * motion[0], margin + t * motion[1]
        crops.append(tex[:, y0:y0 + hr, x0:x0 + hr])
    frames = np.stack([c.reshape(3, size, 4, size, 4).mean(axis=(2, 4)) for c in crops])
    return frames.astype(np.float32), crops[temporal_radius].astype(np.float32)


# ---------------------------------------------------------------------------
# Alignment sub-path experiment

def image_pyramid(img, levels: int = 3) -> list:
    """Fixed encoder for the alignment study: the image and its 2x2-pooled copies."""
    out = [img]
    for _ in range(levels - 1):
        out.append(ad.avg_pool2(out[-1]))
    return out


def shifted_pair(rng, size: int, shift, sigma: float = 2.0):
    """``(ref, nbr)`` crops of one texture; ``nbr`` content is ``ref`` moved by ``shift = (dy, dx)``."""
    dy, dx = shift
    m = max(abs(dy), abs(dx)) + 1
    tex = smooth_texture(rng, (3, size + 2 * m, size + 2 * m), sigma)
    ref = tex[:, m:m + size, m:m + size]
    nbr = tex[:, m - dy:m - dy + size, m - dx:m - dx + size]
    return ref.astype(np.float32), nbr.astype(np.float32)


def align_images(ref, nbr, store, config: MucanConfig, prefix: str = "tmcam"):
    return tmcam_align(image_pyramid(ref), image_pyramid(nbr), TmcamParams.from_store(store, prefix),
                       config.patch_size, config.max_disp, config.top_k,
                       hierarchical=config.tmcam_hierarchical, adaptive=config.tmcam_adaptive_weights,
                       normalize=config.weight_norm)


def interior_l1(a, b, margin: int) -> float:
    a, b = np.asarray(value(a)), np.asarray(value(b))
    return float(np.mean(np.abs(a[:, margin:-margin, margin:-margin] - b[:, margin:-margin, margin:-margin])))


def train_alignment_toy(config: MucanConfig, iterations: int = 300, size: int = 32, max_shift: int = 8,
                        seed: int = 0, lr: float = 1e-2, callback=None):
    """Train only the TM-CAM parameters (C=3, fixed pooling encoder) to align shifted textures.

    Each iteration draws a fresh texture and a shift with |dy|, |dx| <=
    ``max_shift`` and minimizes the Charbonnier distance between the aligned
    neighbour and the reference. Returns ``(store, losses)``.
    """
    config = config.replace(channels=3)
    manifest = tmcam_manifest("tmcam", 3, config.patch_size, config.top_k)
    store = init_from_manifest(manifest, config.seed)
    rng = np.random.default_rng(seed)
    opt = Adam(lr=lr)
    losses = []
    for it in range(iterations):
        shift = tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
        ref, nbr = shifted_pair(rng, size, shift)
        tape = ad.Tape()
        leaves = {k: tape.leaf(v) for k, v in store.items()}
        loss = ad.charbonnier(align_images(ref, nbr, leaves, config), ref, config.charbonnier_eps)
        grads = ad.backward(tape, loss)
        lv = float(value(loss))
        if not np.isfinite(lv):
            raise TrainingError(f"loss became {lv} at iteration {it}", iteration=it)
        losses.append(lv)
        opt.step(store, {k: grads[v.id] for k, v in leaves.items()}, cosine_lr(lr, it, iterations))
        if callback is not None:
            callback(it, lv)
    return store, losses
