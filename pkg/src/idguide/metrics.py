"""Frame-quality and identity metrics, plus the variant comparison harness."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PSNR_CAP = 100.0
SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 1.0


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def l1_metric(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr_metric(a, b) -> float:
    """10 log10(1 / MSE) for [0, 1] images, capped at 100 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _ssim_global(a: np.ndarray, b: np.ndarray) -> float:
    c1, c2 = (SSIM_K1 * SSIM_L) ** 2, (SSIM_K2 * SSIM_L) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = np.mean((a - mu_a) * (b - mu_b))
    return float((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                 / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))


def ssim_metric(a, b) -> float:
    """Single-window SSIM per frame and channel, averaged.

    Inputs are [..., H, W, C]; every leading index is one frame.
    """
    a, b = _pair(a, b)
    if a.ndim < 2:
        return _ssim_global(a, b)
    if a.ndim == 2:
        return _ssim_global(a, b)
    H, W, C = a.shape[-3:]
    fa = a.reshape(-1, H * W, C)
    fb = b.reshape(-1, H * W, C)
    vals = [_ssim_global(fa[i, :, c], fb[i, :, c]) for i in range(len(fa)) for c in range(C)]
    return float(np.mean(vals))


def cosine(u, v, eps: float = 1e-8) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    return float(np.dot(u, v) / (max(np.linalg.norm(u), eps) * max(np.linalg.norm(v), eps)))


def csim_metric(frames, reference, embedder) -> float:
    """Mean cosine between each frame's identity embedding and the reference's."""
    from .models import identity_embed
    emb = identity_embed(embedder, np.asarray(frames, dtype=np.float64)).data
    ref = identity_embed(embedder, np.asarray(reference, dtype=np.float64)).data
    return float(np.mean([cosine(e, ref) for e in emb.reshape(-1, emb.shape[-1])]))


# -- ablation harness -------------------------------------------------------

METRIC_NAMES = ("l1", "psnr", "ssim", "csim")

# label -> (checkpoint key, guidance on)
ABLATION_VARIANTS = {
    "full": ("full", True),
    "no-opt": ("full", False),
    "addition": ("addition", True),
    "norm": ("norm", True),
}


@dataclass
class EvalReport:
    variant: str
    clip_names: list[str]
    per_clip: dict[str, list[float]]
    config: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in METRIC_NAMES:
            if len(self.per_clip.get(name, ())) != len(self.clip_names):
                raise ValueError(f"metric {name} needs one value per clip")

    @property
    def clip_count(self) -> int:
        return len(self.clip_names)

    @property
    def aggregate(self) -> dict[str, float]:
        return {m: float(np.mean(self.per_clip[m])) if self.clip_names else math.nan
                for m in METRIC_NAMES}

    def to_keyvalue(self) -> str:
        lines = [f"variant={self.variant}", f"clip_count={self.clip_count}"]
        lines += [f"{m}={v!r}" for m, v in self.aggregate.items()]
        lines += [f"config.{k}={v}" for k, v in sorted(self.config.items())]
        for i, name in enumerate(self.clip_names):
            lines.append(f"clip.{i}.name={name}")
            lines += [f"clip.{i}.{m}={self.per_clip[m][i]!r}" for m in METRIC_NAMES]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_keyvalue(cls, text: str) -> "EvalReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        n = int(kv["clip_count"])
        names = [kv[f"clip.{i}.name"] for i in range(n)]
        per = {m: [float(kv[f"clip.{i}.{m}"]) for i in range(n)] for m in METRIC_NAMES}
        config = {k[len("config."):]: v for k, v in kv.items() if k.startswith("config.")}
        return cls(kv["variant"], names, per, config)


@dataclass
class SignTest:
    wins: int
    losses: int
    ties: int
    p_value: float


def paired_sign_test(treated, control) -> SignTest:
    """One-sided sign test that ``treated`` exceeds ``control`` pair by pair; ties dropped."""
    from scipy.stats import binomtest
    a, b = _pair(treated, control)
    wins, losses = int(np.sum(a > b)), int(np.sum(a < b))
    ties = len(a) - wins - losses
    p = binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    return SignTest(wins, losses, ties, float(p))


def clip_metrics(generated, truth, reference, embedder) -> dict[str, float]:
    return {"l1": l1_metric(generated, truth), "psnr": psnr_metric(generated, truth),
            "ssim": ssim_metric(generated, truth), "csim": csim_metric(generated, reference, embedder)}


def worker_count() -> int:
    """Worker cap from SANM_THREADS (default 1)."""
    raw = os.environ.get("SANM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"SANM_THREADS must be an integer, got {raw!r}") from None


def evaluate_variant(label: str, bundle, clips, clip_names, schedule, guidance: bool,
                     options: dict, seed: int, workers: int | None = None) -> EvalReport:
    """Sample every clip with seed ``seed + index`` and score it against ground truth."""
    from .pipeline import sample_clip

    def one(i: int) -> dict[str, float]:
        clip = clips[i]
        frames, _ = sample_clip(bundle, clip, schedule, guidance, options, seed + i)
        return clip_metrics(frames, clip.frames, clip.frames[0], bundle.embedder)

    workers = workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, range(len(clips))))
    else:
        rows = [one(i) for i in range(len(clips))]
    cfg = bundle.denoiser.config if bundle.denoiser is not None else None
    echo = {"guidance": "on" if guidance else "off", "seed": str(seed),
            "alignment": cfg.alignment if cfg is not None else "none",
            "schedule_steps": str(schedule.n_steps)}
    echo.update({k: str(v) for k, v in options.items()})
    return EvalReport(label, list(clip_names), {m: [r[m] for r in rows] for m in METRIC_NAMES}, echo)


def run_ablation(variants, clips, checkpoints, schedule, options: dict, seed: int,
                 clip_names=None, workers: int | None = None) -> list[EvalReport]:
    """One EvalReport per variant label.

    ``checkpoints`` maps a variant label or checkpoint key to a ModelBundle;
    the label wins when both are present. Every variant uses the same sampling
    seeds, so rows are paired clip by clip.
    """
    variants = list(variants)
    if not variants:
        raise ValueError("variant list is empty")
    if clip_names is None:
        clip_names = [f"clip{i}" for i in range(len(clips))]
    reports = []
    for label in variants:
        if label not in ABLATION_VARIANTS:
            raise ValueError(f"unknown variant {label!r}; choose from {', '.join(ABLATION_VARIANTS)}")
        key, guided = ABLATION_VARIANTS[label]
        bundle = checkpoints.get(label, checkpoints.get(key))
        if bundle is None:
            raise KeyError(f"no checkpoint for variant {label!r} (expected key {label!r} or {key!r})")
        reports.append(evaluate_variant(label, bundle, clips, clip_names, schedule, guided,
                                        options, seed, workers))
    return reports


def format_table(reports: list[EvalReport], baseline: str = "no-opt") -> str:
    header = ["variant", "clips", *METRIC_NAMES]
    rows = [[r.variant, str(r.clip_count), *(f"{r.aggregate[m]:.4f}" for m in METRIC_NAMES)]
            for r in reports]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                for i, (c, w) in enumerate(zip(row, widths)))
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    base = next((r for r in reports if r.variant == baseline), None)
    if base is not None:
        for r in reports:
            if r is not base and r.clip_count == base.clip_count:
                t = paired_sign_test(r.per_clip["csim"], base.per_clip["csim"])
                lines.append(f"csim sign test {r.variant} > {baseline}: wins={t.wins} "
                             f"losses={t.losses} ties={t.ties} p={t.p_value:.3g}")
    return "\n".join(lines) + "\n"


def write_reports(reports: list[EvalReport], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in reports:
        p = out / f"report_{r.variant}.txt"
        p.write_text(r.to_keyvalue(), encoding="utf-8")
        paths.append(p)
    table = out / "ablation_table.txt"
    table.write_text(format_table(reports), encoding="utf-8")
    return paths + [table]
