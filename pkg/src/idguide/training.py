"""Masked-reconstruction training, frozen-component pretraining, checkpoints.

Checkpoint layout (little endian)::

    b"SANM" | u32 version | u32 n | n bytes UTF-8 JSON manifest | float32 payload

The manifest lists ``tensors`` (name, shape, dtype) in payload order, the
declared ``payload_bytes`` and free-form ``metadata``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .data import SyntheticClip
from .errors import (BadMagicError, CorruptManifestError, ManifestMismatchError,
                     TruncatedError, UnsupportedVersionError)
from .models import (Conditioning, DenoiserModel, IdentityEmbedder, ModelConfig, ToyDecoder,
                     ToyEncoder, bind, decode, denoiser_forward, encode, identity_embed,
                     load_parameters, named_parameters)
from .numerics import T
from .numerics.adam import Adam
from .numerics.rng import SeededRng, gaussian_sample
from .numerics.tensor import Tape, Tensor, as_tensor, backprop

CKPT_MAGIC = b"SANM"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 20
    lr: float = 2e-3
    sigma_min: float = 0.02
    sigma_max: float = 80.0
    ae_steps: int = 1500
    ae_lr: float = 1e-2
    ae_batch: int = 32
    emb_steps: int = 300
    emb_lr: float = 1e-2
    emb_batch: int = 32
    margin: float = 0.3


# -- losses -----------------------------------------------------------------

def forward_diffuse(x0, t: float, eps) -> np.ndarray:
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"forward_diffuse: shapes differ {x0.shape} vs {eps.shape}")
    if t < 0:
        raise ValueError("t must be non-negative")
    return x0 + t * eps


def latent_mask(mask_pixel: np.ndarray, hw: int) -> np.ndarray:
    """Nearest-neighbour downsample of [F, H, W] masks to [F, hw, hw] in {0, 1}."""
    F, H, W = mask_pixel.shape
    sy, sx = H // hw, W // hw
    picked = np.asarray(mask_pixel, dtype=np.float64)[:, sy // 2::sy, sx // 2::sx][:, :hw, :hw]
    return (picked >= 0.5).astype(np.float64)


def masked_reconstruction_loss(z_gt, z_eps, mask) -> Tensor:
    """mean(((z_gt - z_eps) * (1 + M))^2), M broadcast over the channel axis."""
    z_gt, z_eps = as_tensor(z_gt), as_tensor(z_eps)
    if z_gt.shape != z_eps.shape:
        raise ValueError(f"loss: shapes differ {z_gt.shape} vs {z_eps.shape}")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != z_gt.shape:
        if m.shape != z_gt.shape[:-1]:
            raise ValueError(f"mask shape {m.shape} incompatible with {z_gt.shape}")
        m = m[..., None]
    return T.mean(T.square((z_gt - z_eps) * (1.0 + m)))


# -- checkpoints ------------------------------------------------------------

def checkpoint_bytes(tensors: dict[str, np.ndarray], metadata: dict[str, Any]) -> bytes:
    entries, chunks = [], []
    for name, arr in tensors.items():
        a = np.asarray(arr)
        entries.append({"name": name, "shape": list(a.shape), "dtype": "float32"})
        chunks.append(a.astype("<f4").tobytes())
    payload = b"".join(chunks)
    manifest = json.dumps({"tensors": entries, "payload_bytes": len(payload), "metadata": metadata},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(manifest)) + manifest + payload


def checkpoint_from_bytes(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(buf) < 12:
        raise TruncatedError("header")
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(repr(buf[:4]))
    version, n = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(str(version))
    if len(buf) < 12 + n:
        raise TruncatedError("manifest")
    try:
        manifest = json.loads(buf[12:12 + n].decode("utf-8"))
        entries = manifest["tensors"]
        declared = int(manifest["payload_bytes"])
        metadata = manifest["metadata"]
        shapes = [(e["name"], tuple(int(s) for s in e["shape"])) for e in entries]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptManifestError(str(exc)) from None
    expected = sum(4 * math.prod(s) for _, s in shapes)
    if expected != declared:
        raise ManifestMismatchError(f"tensors need {expected} bytes, manifest declares {declared}")
    payload = buf[12 + n:]
    if len(payload) < declared:
        raise TruncatedError(f"{len(payload)} of {declared} bytes")
    if len(payload) > declared:
        raise ManifestMismatchError(f"{len(payload) - declared} trailing bytes")
    out, pos = {}, 0
    for name, shape in shapes:
        count = math.prod(shape)
        out[name] = np.frombuffer(payload, "<f4", count, pos).astype(np.float64).reshape(shape)
        pos += 4 * count
    return out, metadata


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict[str, Any]) -> None:
    Path(path).write_bytes(checkpoint_bytes(tensors, metadata))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return checkpoint_from_bytes(Path(path).read_bytes())


@dataclass
class ModelBundle:
    """Everything a sampling run needs, stored in one checkpoint."""
    decoder: ToyDecoder
    encoder: ToyEncoder
    embedder: IdentityEmbedder
    denoiser: DenoiserModel | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix in ("decoder", "encoder", "embedder", "denoiser"):
            module = getattr(self, prefix)
            if module is not None:
                out.update({k: v.data for k, v in named_parameters(module, prefix).items()})
        return out

    def describe(self) -> dict[str, Any]:
        meta = dict(self.metadata)
        meta["latent_scale"] = float(self.encoder.scale)
        meta["patch"] = int(self.encoder.patch)
        meta["d_id"] = int(self.embedder.d_id)
        meta["model"] = asdict(self.denoiser.config) if self.denoiser is not None else None
        return meta


def save_bundle(path, bundle: ModelBundle) -> None:
    save_checkpoint(path, bundle.tensors(), bundle.describe())


def load_bundle(path) -> ModelBundle:
    tensors, meta = load_checkpoint(path)
    patch, scale = int(meta["patch"]), float(meta["latent_scale"])
    channels = tensors["decoder.w1"].shape[0]
    hidden = tensors["decoder.w1"].shape[1]
    rng = SeededRng(0)
    dec = load_parameters(ToyDecoder.init(rng, channels, patch, hidden), tensors, "decoder")
    enc = load_parameters(ToyEncoder.init(rng, channels, patch, tensors["encoder.w1"].shape[1]),
                          tensors, "encoder")
    dec.scale = enc.scale = scale
    emb = load_parameters(IdentityEmbedder.init(rng, int(meta["d_id"]), tensors["embedder.w1"].shape[1]),
                          tensors, "embedder")
    den = None
    if meta.get("model") is not None:
        den = load_parameters(DenoiserModel.init(ModelConfig(**meta["model"]), rng), tensors, "denoiser")
    extra = {k: v for k, v in meta.items() if k not in ("patch", "latent_scale", "d_id", "model")}
    return ModelBundle(dec, enc, emb, den, extra)


# -- generic optimisation helper --------------------------------------------

def _sgd_step(module, optimizer: Adam, loss_fn) -> tuple[Any, float]:
    """Bind ``module`` to a fresh tape, take one Adam step on ``loss_fn``."""
    tape = Tape()
    bound = bind(module, tape)
    loss = loss_fn(bound)
    leaves = named_parameters(bound)
    grads = backprop(tape, loss)
    arrays = {k: v.data for k, v in leaves.items()}
    updated = optimizer.step(arrays, {k: grads[v] for k, v in leaves.items()})
    return load_parameters(module, updated), loss.item()


def _frame_pool(clips: list[SyntheticClip]) -> tuple[np.ndarray, np.ndarray]:
    frames = np.concatenate([c.frames for c in clips])
    ids = np.concatenate([np.full(c.frame_count, c.identity_id) for c in clips])
    return frames, ids


# -- pretraining ------------------------------------------------------------

def pretrain_decoder(clips: list[SyntheticClip], config: TrainConfig, rng: SeededRng,
                     channels: int = 8, patch: int = 4,
                     hidden: int = 64) -> tuple[ToyDecoder, ToyEncoder]:
    """Fit a per-patch autoencoder, then rescale latents to unit std."""
    frames, _ = _frame_pool(clips)
    enc = ToyEncoder.init(rng, channels, patch, hidden)
    dec = ToyDecoder.init(rng, channels, patch, hidden)
    pair = [enc, dec]
    opt = Adam(config.ae_lr)

    def loss_fn(bound):
        e, d = bound
        return T.mean(T.square(decode(d, encode(e, batch)) - batch))

    for _ in range(config.ae_steps):
        idx = rng.integers(0, len(frames), config.ae_batch)
        batch = frames[idx]
        pair, _ = _sgd_step(pair, opt, loss_fn)
    enc, dec = pair
    if len(frames):
        std = float(encode(enc, frames).data.std())
        enc.scale = dec.scale = 1.0 / max(std, 1e-8)
    return dec, enc


def reconstruction_psnr(enc: ToyEncoder, dec: ToyDecoder, clips: list[SyntheticClip]) -> float:
    from .metrics import psnr_metric
    frames, _ = _frame_pool(clips)
    return psnr_metric(decode(dec, encode(enc, frames)).data, frames)


def _embedder_loss(emb_bound, frames, ids, margin: float) -> Tensor:
    e = identity_embed(emb_bound, frames)
    cos = e @ T.swap_last(e)
    same = (ids[:, None] == ids[None, :]).astype(np.float64)
    np.fill_diagonal(same, 0.0)
    diff = (ids[:, None] != ids[None, :]).astype(np.float64)
    loss = T.sum_((1.0 - cos) * same) * (1.0 / max(same.sum(), 1.0))
    return loss + T.sum_(T.relu(cos - margin) * diff) * (1.0 / max(diff.sum(), 1.0))


def pretrain_identity_embedder(clips: list[SyntheticClip], config: TrainConfig, rng: SeededRng,
                               d_id: int = 8, hidden: int = 16) -> IdentityEmbedder:
    """Cosine metric learning: same identity -> 1, different -> at most ``margin``."""
    frames, ids = _frame_pool(clips)
    if len(np.unique(ids)) < 2:
        raise ValueError("embedder pretraining needs at least 2 identities")
    emb = IdentityEmbedder.init(rng, d_id, hidden)
    opt = Adam(config.emb_lr)
    for _ in range(config.emb_steps):
        idx = rng.integers(0, len(frames), config.emb_batch)
        emb, _ = _sgd_step(emb, opt, lambda b: _embedder_loss(b, frames[idx], ids[idx], config.margin))
    return emb


def identity_gap(emb: IdentityEmbedder, clips: list[SyntheticClip]) -> tuple[float, float]:
    """Mean cosine over same-identity and different-identity frame pairs."""
    frames, ids = _frame_pool(clips)
    e = identity_embed(emb, frames).data
    cos = e @ e.T
    same = ids[:, None] == ids[None, :]
    np.fill_diagonal(same, False)
    diff = ids[:, None] != ids[None, :]
    return float(cos[same].mean()), float(cos[diff].mean())


# -- denoiser training ------------------------------------------------------

@dataclass
class TrainingExample:
    latents: np.ndarray  # [F, h, w, C]
    mask: np.ndarray  # [F, h, w]
    cond: Conditioning


def prepare_examples(clips: list[SyntheticClip], encoder: ToyEncoder,
                     embedder: IdentityEmbedder) -> list[TrainingExample]:
    out = []
    for clip in clips:
        lat = encode(encoder, clip.frames).data
        hw = lat.shape[1]
        face = identity_embed(embedder, clip.frames[0]).data
        out.append(TrainingExample(lat, latent_mask(clip.face_mask_pixel, hw),
                                   Conditioning(lat[0], face, clip.pose_unit())))
    return out


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    steps: int


def _draws(rng: SeededRng, examples, config: TrainConfig):
    order = rng.generator().permutation(len(examples))
    lo, hi = math.log(config.sigma_min), math.log(config.sigma_max)
    for i in order:
        ex = examples[int(i)]
        sigma = math.exp(float(rng.uniform(lo, hi)))
        yield ex, sigma, gaussian_sample(rng, ex.latents.shape, 1.0)


def train_epoch(model: DenoiserModel, examples: list[TrainingExample], optimizer: Adam,
                config: TrainConfig, rng: SeededRng, epoch: int = 0) -> tuple[DenoiserModel, EpochStats]:
    """One pass of masked-reconstruction training; frozen parts are already baked into ``examples``."""
    if not examples:
        raise ValueError("empty dataset")
    losses = []
    for ex, sigma, eps in _draws(rng, examples, config):
        noisy = forward_diffuse(ex.latents, sigma, eps)
        model, loss = _sgd_step(model, optimizer, lambda m: masked_reconstruction_loss(
            ex.latents, denoiser_forward(m, noisy, sigma, ex.cond), ex.mask))
        losses.append(loss)
    return model, EpochStats(epoch, float(np.mean(losses)), len(losses))


def evaluate_epoch(model: DenoiserModel, examples: list[TrainingExample], config: TrainConfig,
                   rng: SeededRng) -> float:
    """Mean loss with the same draws ``train_epoch`` would make, without updates."""
    if not examples:
        raise ValueError("empty dataset")
    losses = []
    for ex, sigma, eps in _draws(rng, examples, config):
        pred = denoiser_forward(model, forward_diffuse(ex.latents, sigma, eps), sigma, ex.cond)
        losses.append(masked_reconstruction_loss(ex.latents, pred, ex.mask).item())
    return float(np.mean(losses))


def train_denoiser(examples: list[TrainingExample], model_config: ModelConfig, config: TrainConfig,
                   model: DenoiserModel | None = None,
                   log=None) -> tuple[DenoiserModel, list[EpochStats]]:
    root = SeededRng(config.seed)
    if model is None:
        model = DenoiserModel.init(model_config, root.fork(0))
    opt = Adam(config.lr)
    history = []
    for epoch in range(config.epochs):
        model, stats = train_epoch(model, examples, opt, config, root.fork(1 + epoch), epoch)
        history.append(stats)
        if log is not None:
            log(stats)
    return model, history
