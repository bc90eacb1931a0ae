"""End-to-end workflows built from the lower-level modules.

These are the steps the command line runs: pretrain the frozen decoder and
identity embedder, train the denoiser on top of them, and sample a clip for
a reference.
"""

from __future__ import annotations

import math

import numpy as np

from .config import GuidanceSection, RunConfig, ScheduleSection
from .data import SyntheticClip
from .models import Conditioning, DenoiserModel, decode, encode, identity_embed
from .numerics.rng import SeededRng
from .sampler import GuidanceConfig, TrajectoryRecord, edm_sample
from .schedule import EdmSchedule, build_schedule
from .training import (EpochStats, ModelBundle, prepare_examples, pretrain_decoder,
                       pretrain_identity_embedder, train_denoiser)


def schedule_from(section: ScheduleSection) -> EdmSchedule:
    return build_schedule(section.steps, section.sigma_min, section.sigma_max, section.rho,
                          s_churn=section.s_churn, s_noise=section.s_noise,
                          s_tmin=section.s_tmin, s_tmax=section.s_tmax)


def guidance_options(section: GuidanceSection) -> dict:
    """GuidanceConfig keyword arguments other than the enabled flag and modules."""
    full_range = section.sigma_low <= 0.0 and math.isinf(section.sigma_high)
    return dict(lr=section.lr, k_steps=section.k_steps,
                active_sigma_range=None if full_range else (section.sigma_low, section.sigma_high),
                persistent_state=section.persistent_state,
                reoptimize_correction=section.reoptimize_correction)


def pretrain_frozen(cfg: RunConfig, clips: list[SyntheticClip]) -> ModelBundle:
    """Autoencoder and identity embedder, each with its own seeded stream."""
    root = SeededRng(cfg.train.pretrain_seed)
    tc = cfg.train.train_config()
    dec, enc = pretrain_decoder(clips, tc, root.fork(0), channels=cfg.model.latent_channels,
                                patch=cfg.model.ae_patch, hidden=cfg.model.ae_hidden)
    emb = pretrain_identity_embedder(clips, tc, root.fork(1), d_id=cfg.model.d_id,
                                     hidden=cfg.model.embedder_hidden)
    return ModelBundle(dec, enc, emb, None, {"pretrain_seed": cfg.train.pretrain_seed})


def train_full(cfg: RunConfig, clips: list[SyntheticClip], frozen: ModelBundle,
               log=None) -> tuple[ModelBundle, list[EpochStats]]:
    examples = prepare_examples(clips, frozen.encoder, frozen.embedder)
    if examples and examples[0].latents.shape[1] != cfg.model.latent_hw:
        raise ValueError(f"latent grid {examples[0].latents.shape[1]} does not match "
                         f"model.latent_hw={cfg.model.latent_hw}")
    model, history = train_denoiser(examples, cfg.model.model_config(), cfg.train.train_config(),
                                    log=log)
    meta = dict(frozen.metadata)
    meta["train_seed"] = cfg.train.seed
    meta["epochs"] = cfg.train.epochs
    return ModelBundle(frozen.decoder, frozen.encoder, frozen.embedder, model, meta), history


def conditioning_for(bundle: ModelBundle, clip: SyntheticClip) -> Conditioning:
    """Reference frame latent and embedding plus the clip's pose track."""
    ref = clip.frames[0]
    return Conditioning(encode(bundle.encoder, ref).data,
                        identity_embed(bundle.embedder, ref).data, clip.pose_unit())


def sample_clip(bundle: ModelBundle, clip: SyntheticClip, schedule: EdmSchedule,
                guidance: bool, options: dict, seed: int,
                model: DenoiserModel | None = None) -> tuple[np.ndarray, TrajectoryRecord]:
    """Generate frames for ``clip``'s reference and pose; returns [F, H, W, 3] in [0, 1]."""
    model = model or bundle.denoiser
    if model is None:
        raise ValueError("checkpoint has no denoiser; train one first")
    cond = conditioning_for(bundle, clip)
    g = GuidanceConfig(enabled=guidance, reference_embedding=cond.face_embedding,
                       decoder=bundle.decoder, embedder=bundle.embedder, **options)
    latent, record = edm_sample(model, schedule, cond, g, seed)
    return decode(bundle.decoder, latent).data, record
