"""Toy differentiable networks: attention blocks, the distribution-aligned ID
adapter, the face encoder, the denoiser, and the frozen decoder / identity
embedder used by guidance.

Modules are plain dataclasses whose weight fields are :class:`Tensor` values.
``bind`` swaps every weight for a leaf on a tape (training), ``freeze`` swaps
them back to constants (inference); the forward functions never care which.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .numerics import T
from .numerics.rng import SeededRng, gaussian_sample
from .numerics.tensor import Tape, Tensor, as_tensor, tensor_stats

ALIGNMENT_MODES = ("full", "addition", "norm")


# -- parameter trees --------------------------------------------------------

def map_parameters(obj: Any, fn: Callable[[str, Tensor], Tensor], prefix: str = "") -> Any:
    if isinstance(obj, Tensor):
        return fn(prefix, obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        changes = {}
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            new = map_parameters(value, fn, name)
            if new is not value:
                changes[f.name] = new
        return dataclasses.replace(obj, **changes) if changes else obj
    if isinstance(obj, list):
        return [map_parameters(v, fn, f"{prefix}.{i}") for i, v in enumerate(obj)]
    return obj


def named_parameters(obj: Any, prefix: str = "") -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}

    def visit(name, t):
        out[name] = t
        return t

    map_parameters(obj, visit, prefix)
    return out


def bind(obj: Any, tape: Tape) -> Any:
    return map_parameters(obj, lambda _, t: tape.param(t.data))


def freeze(obj: Any) -> Any:
    return map_parameters(obj, lambda _, t: Tensor(t.data) if t.tracked else t)


def load_parameters(obj: Any, arrays: dict[str, np.ndarray], prefix: str = "") -> Any:
    def take(name, t):
        if name not in arrays:
            raise KeyError(f"missing parameter {name!r}")
        a = np.asarray(arrays[name], dtype=np.float64)
        if a.shape != t.shape:
            raise ValueError(f"parameter {name!r}: shape {a.shape} != expected {t.shape}")
        return Tensor(a.copy())

    return map_parameters(obj, take, prefix)


def _w(rng: SeededRng, shape, scale: float | None = None) -> Tensor:
    if scale is None:
        scale = 1.0 / math.sqrt(shape[0])
    return Tensor(gaussian_sample(rng, shape, scale))


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape))


# -- attention --------------------------------------------------------------

@dataclass
class AttentionBlock:
    head_count: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def __post_init__(self):
        if self.model_dim % self.head_count:
            raise ValueError("model_dim must be divisible by head_count")

    @property
    def model_dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, rng: SeededRng, dim: int, heads: int, out_scale: float = 0.5) -> "AttentionBlock":
        return cls(heads, _w(rng, (dim, dim)), _w(rng, (dim, dim)), _w(rng, (dim, dim)),
                   _w(rng, (dim, dim), out_scale / math.sqrt(dim)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    k = len(lead)
    return T.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = T.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return T.reshape(x, (*lead, n, h * dh))


def attend(block: AttentionBlock, queries, context) -> Tensor:
    """Multi-head scaled dot-product attention plus the residual ``queries``."""
    queries, context = as_tensor(queries), as_tensor(context)
    d = block.model_dim
    if queries.shape[-1] != d or context.shape[-1] != d:
        raise ValueError(f"attention expects feature dim {d}, got "
                         f"{queries.shape[-1]} and {context.shape[-1]}")
    h = block.head_count
    q = _split_heads(queries @ block.wq, h)
    k = _split_heads(context @ block.wk, h)
    v = _split_heads(context @ block.wv, h)
    logits = (q @ T.swap_last(k)) * (1.0 / math.sqrt(d // h))
    mixed = _merge_heads(T.softmax(logits, -1) @ v)
    return queries + mixed @ block.wo


def self_attention(block: AttentionBlock, z) -> Tensor:
    return attend(block, z, z)


def cross_attention(block: AttentionBlock, z, emb) -> Tensor:
    return attend(block, z, emb)


@dataclass
class FeedForward:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: SeededRng, dim: int, hidden: int) -> "FeedForward":
        return cls(_w(rng, (dim, hidden)), _zeros(hidden),
                   _w(rng, (hidden, dim), 0.5 / math.sqrt(hidden)), _zeros(dim))


def feedforward(ff: FeedForward, x) -> Tensor:
    x = as_tensor(x)
    return x + T.tanh(x @ ff.w1 + ff.b1) @ ff.w2 + ff.b2


# -- ID adapter -------------------------------------------------------------

STATS_AXES = (-2, -1)


def distribution_align(z_face, z_img, axes=STATS_AXES) -> Tensor:
    """Re-standardize ``z_face`` to the mean/std of ``z_img`` over ``axes``."""
    z_face, z_img = as_tensor(z_face), as_tensor(z_img)
    if z_face.shape != z_img.shape:
        raise ValueError(f"distribution_align: shapes differ {z_face.shape} vs {z_img.shape}")
    mu_f, sd_f = tensor_stats(z_face, axes, keepdims=True)
    mu_i, sd_i = tensor_stats(z_img, axes, keepdims=True)
    return (z_face - mu_f) / sd_f * sd_i + mu_i


@dataclass
class IdAdapterBlock:
    self_attn: AttentionBlock
    cross_attn_img: AttentionBlock
    cross_attn_face: AttentionBlock
    ff: FeedForward
    alignment: str = "full"

    def __post_init__(self):
        if self.alignment not in ALIGNMENT_MODES:
            raise ValueError(f"unknown alignment {self.alignment!r}")

    @classmethod
    def init(cls, rng: SeededRng, dim: int, heads: int, alignment: str = "full") -> "IdAdapterBlock":
        return cls(AttentionBlock.init(rng, dim, heads), AttentionBlock.init(rng, dim, heads),
                   AttentionBlock.init(rng, dim, heads), FeedForward.init(rng, dim, 2 * dim),
                   alignment)


def id_adapter_forward(block: IdAdapterBlock, z, emb_img, emb_face, axes=STATS_AXES) -> Tensor:
    z = self_attention(block.self_attn, z)
    z_img = cross_attention(block.cross_attn_img, z, emb_img)
    z_face = cross_attention(block.cross_attn_face, z, emb_face)
    if block.alignment == "addition":
        return z_face + z_img
    if block.alignment == "norm":
        mu, sd = tensor_stats(z_face, axes, keepdims=True)
        return (z_face - mu) / sd + z_img
    return distribution_align(z_face, z_img, axes) + z_img


# -- face encoder -----------------------------------------------------------

@dataclass
class FaceEncoder:
    blocks: list[AttentionBlock]
    ffs: list[FeedForward]

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    @classmethod
    def init(cls, rng: SeededRng, dim: int, heads: int, count: int) -> "FaceEncoder":
        return cls([AttentionBlock.init(rng, dim, heads) for _ in range(count)],
                   [FeedForward.init(rng, dim, 2 * dim) for _ in range(count)])


def face_encoder_forward(enc: FaceEncoder, emb_face, emb_img) -> Tensor:
    e = as_tensor(emb_face)
    for attn, ff in zip(enc.blocks, enc.ffs):
        e = feedforward(ff, cross_attention(attn, e, emb_img))
    return e


# -- denoiser ---------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    latent_hw: int = 4
    latent_channels: int = 8
    model_dim: int = 32
    heads: int = 2
    adapter_blocks: int = 2
    face_encoder_blocks: int = 2
    face_tokens: int = 4
    d_id: int = 8
    sigma_data: float = 1.0
    use_temporal: bool = True
    alignment: str = "full"

    def __post_init__(self):
        if self.alignment not in ALIGNMENT_MODES:
            raise ValueError(f"unknown alignment {self.alignment!r}")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")

    @property
    def tokens(self) -> int:
        return self.latent_hw * self.latent_hw


@dataclass
class Conditioning:
    """Reference latent (emb_img source), reference identity vector, pose track.

    ``pose`` holds one (x, y) glyph position per frame in unit coordinates.
    """
    ref_latent: np.ndarray
    face_embedding: np.ndarray
    pose: np.ndarray

    @property
    def frames(self) -> int:
        return len(self.pose)


SIGMA_FREQS = np.array([1.0, 2.0, 4.0, 8.0])
POSE_WIDTH = 0.15


@dataclass
class DenoiserModel:
    config: ModelConfig
    w_in: Tensor
    b_in: Tensor
    pos: Tensor
    w_sigma: Tensor
    b_sigma: Tensor
    w_pose: Tensor
    w_ref: Tensor
    w_face: Tensor
    face_encoder: FaceEncoder
    blocks: list[IdAdapterBlock]
    temporal: AttentionBlock
    w_out: Tensor
    b_out: Tensor

    @classmethod
    def init(cls, config: ModelConfig, rng: SeededRng) -> "DenoiserModel":
        c, d = config.latent_channels, config.model_dim
        return cls(
            config=config,
            w_in=_w(rng, (c, d)), b_in=_zeros(d),
            pos=_w(rng, (config.tokens, d), 0.5),
            w_sigma=_w(rng, (2 * len(SIGMA_FREQS) + 1, d)), b_sigma=_zeros(d),
            w_pose=_w(rng, (3, d)),
            w_ref=_w(rng, (c, d)),
            w_face=_w(rng, (config.d_id, config.face_tokens * d)),
            face_encoder=FaceEncoder.init(rng, d, config.heads, config.face_encoder_blocks),
            blocks=[IdAdapterBlock.init(rng, d, config.heads, config.alignment)
                    for _ in range(config.adapter_blocks)],
            temporal=AttentionBlock.init(rng, d, config.heads),
            w_out=_w(rng, (d, c), 0.5 / math.sqrt(d)), b_out=_zeros(c),
        )

    def __call__(self, x, sigma: float, cond: Conditioning) -> np.ndarray:
        return denoiser_forward(self, x, sigma, cond).data


def sigma_features(sigma: float) -> np.ndarray:
    c = math.log(max(sigma, 1e-4)) / 4.0
    return np.concatenate([[c], np.cos(c * SIGMA_FREQS), np.sin(c * SIGMA_FREQS)])


def pose_features(pose: np.ndarray, hw: int) -> np.ndarray:
    """Per-token pose features [F, hw*hw, 3]: offset to glyph and a bump."""
    centers = (np.arange(hw) + 0.5) / hw
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    dx = pose[:, None, 0] - cx.reshape(1, -1)
    dy = pose[:, None, 1] - cy.reshape(1, -1)
    bump = np.exp(-(dx * dx + dy * dy) / (2.0 * POSE_WIDTH ** 2))
    return np.stack([2.0 * dx, 2.0 * dy, bump], axis=-1)


def denoiser_forward(model: DenoiserModel, x, sigma: float, cond: Conditioning) -> Tensor:
    """Predict the clean latent clip from ``x`` at noise level ``sigma``."""
    cfg = model.config
    x = as_tensor(x)
    hw, c = cfg.latent_hw, cfg.latent_channels
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if x.ndim != 4 or x.shape[1:] != (hw, hw, c):
        raise ValueError(f"expected latent clip [F, {hw}, {hw}, {c}], got {x.shape}")
    frames = x.shape[0]
    pose = np.asarray(cond.pose, dtype=np.float64)
    if pose.shape != (frames, 2):
        raise ValueError(f"pose track shape {pose.shape} does not match {frames} frames")
    ref = np.asarray(cond.ref_latent, dtype=np.float64).reshape(cfg.tokens, c)
    face_vec = np.asarray(cond.face_embedding, dtype=np.float64)
    if face_vec.shape != (cfg.d_id,):
        raise ValueError(f"face embedding must have shape ({cfg.d_id},)")

    c_in = 1.0 / math.sqrt(sigma * sigma + cfg.sigma_data ** 2)
    tokens = T.reshape(x * c_in, (frames, cfg.tokens, c))
    z = tokens @ model.w_in + model.b_in + model.pos
    z = z + T.tanh(Tensor(sigma_features(sigma)) @ model.w_sigma + model.b_sigma)
    z = z + Tensor(pose_features(pose, hw)) @ model.w_pose

    emb_img = Tensor(ref) @ model.w_ref + model.pos
    emb_face = T.reshape(Tensor(face_vec) @ model.w_face, (cfg.face_tokens, cfg.model_dim))
    emb_face = face_encoder_forward(model.face_encoder, emb_face, emb_img)

    for block in model.blocks:
        z = id_adapter_forward(block, z, emb_img, emb_face)
        z = feedforward(block.ff, z)

    if cfg.use_temporal:
        zt = T.transpose(z, (1, 0, 2))
        z = T.transpose(self_attention(model.temporal, zt), (1, 0, 2))

    out = z @ model.w_out + model.b_out
    return T.reshape(out, (frames, hw, hw, c))


# -- frozen decoder / encoder -----------------------------------------------

def patchify(frames, patch: int) -> Tensor:
    """[..., H, W, 3] -> [..., H/p, W/p, p*p*3]"""
    frames = as_tensor(frames)
    *lead, H, W, ch = frames.shape
    k = len(lead)
    x = T.reshape(frames, (*lead, H // patch, patch, W // patch, patch, ch))
    x = T.transpose(x, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    return T.reshape(x, (*lead, H // patch, W // patch, patch * patch * ch))


def unpatchify(cells, patch: int, channels: int = 3) -> Tensor:
    cells = as_tensor(cells)
    *lead, h, w, _ = cells.shape
    k = len(lead)
    x = T.reshape(cells, (*lead, h, w, patch, patch, channels))
    x = T.transpose(x, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    return T.reshape(x, (*lead, h * patch, w * patch, channels))


@dataclass
class ToyDecoder:
    patch: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    scale: float = 1.0

    @classmethod
    def init(cls, rng: SeededRng, channels: int = 8, patch: int = 4, hidden: int = 64) -> "ToyDecoder":
        return cls(patch, _w(rng, (channels, hidden)), _zeros(hidden),
                   _w(rng, (hidden, patch * patch * 3)), _zeros(patch * patch * 3))


@dataclass
class ToyEncoder:
    patch: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    scale: float = 1.0

    @classmethod
    def init(cls, rng: SeededRng, channels: int = 8, patch: int = 4, hidden: int = 64) -> "ToyEncoder":
        return cls(patch, _w(rng, (patch * patch * 3, hidden)), _zeros(hidden),
                   _w(rng, (hidden, channels)), _zeros(channels))


@dataclass
class LinearDecoder:
    """One matrix per latent cell, no squashing; used for convex-case checks."""
    patch: int
    w: Tensor  # [C, patch * patch * 3]

    @classmethod
    def init(cls, rng: SeededRng, channels: int = 8, patch: int = 4) -> "LinearDecoder":
        return cls(patch, _w(rng, (channels, patch * patch * 3)))


def decode(dec: ToyDecoder | LinearDecoder, latent) -> Tensor:
    """Latent cells [..., h, w, C] to pixels [..., H, W, 3] in (0, 1)."""
    if isinstance(dec, LinearDecoder):
        return unpatchify(as_tensor(latent) @ dec.w, dec.patch)
    z = as_tensor(latent) * (1.0 / dec.scale)
    cells = T.tanh(z @ dec.w1 + dec.b1) @ dec.w2 + dec.b2
    return unpatchify(T.sigmoid(cells), dec.patch)


def encode(enc: ToyEncoder, frames) -> Tensor:
    cells = patchify(frames, enc.patch)
    return (T.tanh(cells @ enc.w1 + enc.b1) @ enc.w2 + enc.b2) * enc.scale


# -- identity embedder ------------------------------------------------------

@dataclass
class IdentityEmbedder:
    """Per-pixel features pooled by a learned saliency softmax."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w_score: Tensor
    w_emb: Tensor
    b_emb: Tensor

    @property
    def d_id(self) -> int:
        return self.w_emb.shape[1]

    @classmethod
    def init(cls, rng: SeededRng, d_id: int = 8, hidden: int = 16) -> "IdentityEmbedder":
        return cls(_w(rng, (3, hidden), 2.0), _zeros(hidden), _w(rng, (hidden, hidden)),
                   _zeros(hidden), _w(rng, (hidden, 1)), _w(rng, (hidden, d_id)), _zeros(d_id))


@dataclass
class LinearEmbedder:
    """Flattened frame times one matrix, then unit-normalized."""
    w: Tensor  # [H * W * 3, d_id]

    @property
    def d_id(self) -> int:
        return self.w.shape[1]

    @classmethod
    def init(cls, rng: SeededRng, height: int, width: int, d_id: int = 8) -> "LinearEmbedder":
        return cls(_w(rng, (height * width * 3, d_id)))


def identity_embed(emb: IdentityEmbedder | LinearEmbedder, frame) -> Tensor:
    """Unit-norm identity vector for a frame [..., H, W, 3]."""
    frame = as_tensor(frame)
    if frame.ndim < 3 or frame.shape[-1] != 3:
        raise ValueError(f"expected [..., H, W, 3] pixels, got {frame.shape}")
    *lead, H, W, _ = frame.shape
    if isinstance(emb, LinearEmbedder):
        return T.normalize(T.reshape(frame, (*lead, H * W * 3)) @ emb.w, -1)
    px = T.reshape(frame, (*lead, H * W, 3))
    h = T.tanh(px @ emb.w1 + emb.b1)
    h = T.tanh(h @ emb.w2 + emb.b2)
    weights = T.softmax(h @ emb.w_score, -2)
    pooled = T.sum_(weights * h, -2)
    return T.normalize(pooled @ emb.w_emb + emb.b_emb, -1)
