"""EDM stochastic sampler with identity-guided refinement of each prediction.

At every step the denoiser's clean-sample prediction is detached and refined
by a few Adam steps that pull the decoded frames' identity embedding toward
the reference embedding; the refined prediction then drives the Euler step.
The second-order correction uses a fresh, unrefined prediction unless
``reoptimize_correction`` is set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .models import IdentityEmbedder, ToyDecoder, decode, freeze, identity_embed
from .numerics import T
from .numerics.adam import AdamState, adam_step
from .numerics.rng import SeededRng, gaussian_sample
from .numerics.tensor import Tape, Tensor, backprop
from .schedule import EdmSchedule, churn_gamma


class Denoiser(Protocol):
    def __call__(self, x: np.ndarray, sigma: float, cond) -> np.ndarray: ...


@dataclass
class GuidanceConfig:
    enabled: bool = False
    lr: float = 0.01
    k_steps: int = 10
    # None means every step; otherwise only steps whose t_hat lies in [low, high]
    active_sigma_range: tuple[float, float] | None = None
    reference_embedding: np.ndarray | None = None
    decoder: ToyDecoder | None = None
    embedder: IdentityEmbedder | None = None
    persistent_state: bool = False
    reoptimize_correction: bool = False

    def __post_init__(self):
        if self.k_steps < 0:
            raise ValueError("k_steps must be >= 0")
        if self.enabled and self.lr <= 0:
            raise ValueError("guidance learning rate must be positive when enabled")
        if self.reference_embedding is not None:
            self.reference_embedding = np.asarray(self.reference_embedding, dtype=np.float64)
        if self.decoder is not None:
            self.decoder = freeze(self.decoder)
        if self.embedder is not None:
            self.embedder = freeze(self.embedder)

    def active_at(self, sigma: float) -> bool:
        if not self.enabled or self.k_steps == 0:
            return False
        if self.active_sigma_range is None:
            return True
        low, high = self.active_sigma_range
        return low <= sigma <= high


def face_loss(x_op, guidance: GuidanceConfig, decoder: ToyDecoder | None = None,
              embedder: IdentityEmbedder | None = None) -> Tensor:
    """mean over frames of |1 - cos(embed(decode(frame)), reference)|"""
    decoder = decoder or guidance.decoder
    embedder = embedder or guidance.embedder
    ref = guidance.reference_embedding
    if ref is None or decoder is None or embedder is None:
        raise ValueError("face_loss needs a reference embedding, decoder and embedder")
    emb = identity_embed(embedder, decode(decoder, x_op))
    if emb.shape[-1] != ref.shape[-1]:
        raise ValueError(f"embedding dim {emb.shape[-1]} != reference dim {ref.shape[-1]}")
    cos = T.cosine_similarity(emb, Tensor(ref), -1)
    return T.mean(T.abs_(1.0 - cos))


def hjb_face_optimize(x_pred: np.ndarray, guidance: GuidanceConfig,
                      decoder: ToyDecoder | None = None, embedder: IdentityEmbedder | None = None,
                      state: AdamState | None = None, trace: list[float] | None = None) -> np.ndarray:
    """Refine a detached copy of ``x_pred`` with ``k_steps`` Adam updates on the face loss.

    ``trace`` (if given) receives the loss before every update and once more
    after the last one. A new optimizer state is created unless ``state`` is
    passed in.
    """
    x_op = np.array(x_pred, dtype=np.float64, copy=True)
    if not guidance.enabled or guidance.k_steps == 0:
        return x_op
    decoder = freeze(decoder) if decoder is not None else guidance.decoder
    embedder = freeze(embedder) if embedder is not None else guidance.embedder
    if state is None:
        state = AdamState(guidance.lr)
    for _ in range(guidance.k_steps):
        tape = Tape()
        leaf = tape.param(x_op)
        loss = face_loss(leaf, guidance, decoder, embedder)
        grad = backprop(tape, loss)[leaf]
        if trace is not None:
            trace.append(loss.item())
        x_op, _ = adam_step(state, x_op, grad)
    if trace is not None:
        trace.append(face_loss(Tensor(x_op), guidance, decoder, embedder).item())
    return x_op


@dataclass
class StepRecord:
    step: int
    t: float
    t_hat: float
    gamma: float
    loss_before: float = math.nan
    loss_after: float = math.nan
    latent: np.ndarray | None = field(default=None, repr=False)


@dataclass
class TrajectoryRecord:
    entries: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    COLUMNS = ("step", "t_i", "gamma", "loss_before", "loss_after")

    def to_text(self) -> str:
        lines = ["\t".join(self.COLUMNS)]
        for e in self.entries:
            lines.append("\t".join([str(e.step)] + [repr(float(v)) for v in
                                                    (e.t, e.gamma, e.loss_before, e.loss_after)]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrajectoryRecord":
        rows = [ln.split("\t") for ln in text.strip().splitlines()]
        if not rows or tuple(rows[0]) != cls.COLUMNS:
            raise ValueError("not a trajectory table")
        out = cls()
        for r in rows[1:]:
            t, gamma, lb, la = (float(v) for v in r[1:])
            out.entries.append(StepRecord(int(r[0]), t, t + gamma * t, gamma, lb, la))
        return out


def _refine(x_pred, sigma, guidance, state, losses):
    if not guidance.active_at(sigma):
        return x_pred
    trace: list[float] = []
    out = hjb_face_optimize(x_pred, guidance, state=state, trace=trace)
    if losses is not None:
        losses.extend((trace[0], trace[-1]))
    return out


def edm_step(model: Denoiser, sched: EdmSchedule, i: int, x_i: np.ndarray, cond,
             guidance: GuidanceConfig, rng: SeededRng, adam_state: AdamState | None = None,
             keep_latent: bool = False) -> tuple[np.ndarray, StepRecord]:
    gamma = churn_gamma(sched, i)
    t_i, t_next = sched.sigmas[i], sched.sigmas[i + 1]
    eps = gaussian_sample(rng, x_i.shape, sched.s_noise)
    t_hat = t_i + gamma * t_i
    x_hat = x_i + math.sqrt(t_hat * t_hat - t_i * t_i) * eps if gamma > 0 else x_i

    losses: list[float] = []
    x_pred = _refine(model(x_hat, t_hat, cond), t_hat, guidance, adam_state, losses)
    d = (x_hat - x_pred) / t_hat
    # an Euler step to zero noise lands on the prediction; skip the roundoff
    x_next = x_hat + (t_next - t_hat) * d if t_next != 0 else np.array(x_pred, dtype=np.float64)
    if t_next != 0:
        pred2 = model(x_next, t_next, cond)
        if guidance.reoptimize_correction:
            pred2 = _refine(pred2, t_next, guidance, adam_state, None)
        d2 = (x_next - pred2) / t_next
        x_next = x_hat + (t_next - t_hat) * (0.5 * d + 0.5 * d2)

    rec = StepRecord(i, t_i, t_hat, gamma, *(losses or (math.nan, math.nan)))
    if keep_latent:
        rec.latent = x_next.copy()
    return x_next, rec


def edm_sample(model: Denoiser, sched: EdmSchedule, cond, guidance: GuidanceConfig,
               seed: int, shape: tuple[int, ...] | None = None,
               keep_latents: bool = False) -> tuple[np.ndarray, TrajectoryRecord]:
    if shape is None:
        cfg = model.config
        shape = (cond.frames, cfg.latent_hw, cfg.latent_hw, cfg.latent_channels)
    rng = SeededRng(seed)
    x = gaussian_sample(rng, shape, sched.sigmas[0])
    state = AdamState(guidance.lr) if guidance.enabled and guidance.persistent_state else None
    record = TrajectoryRecord()
    for i in range(sched.n_steps):
        x, entry = edm_step(model, sched, i, x, cond, guidance, rng, state, keep_latents)
        record.entries.append(entry)
    return x, record
