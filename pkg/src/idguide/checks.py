"""Numerical self-checks run by ``idguide verify``.

Each check compares the implementation against an oracle written out here
independently (closed forms, plain numpy statistics, finite differences) and
returns the measured error next to its threshold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import verification as V
from .models import (AttentionBlock, LinearDecoder, LinearEmbedder, ToyDecoder, IdentityEmbedder,
                     attend, decode, distribution_align, identity_embed)
from .numerics import T
from .numerics.gradcheck import check_gradients
from .numerics.rng import SeededRng, gaussian_sample
from .numerics.tensor import Tape, Tensor, backprop
from .sampler import GuidanceConfig, edm_sample, face_loss, hjb_face_optimize
from .schedule import build_schedule
from .training import masked_reconstruction_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "pass" if self.passed else "fail"
        return (f"check={self.name} status={status} measured={self.measured:.6g} "
                f"threshold={self.threshold} seconds={self.seconds:.2f}")


def _timed(fn: Callable[[], tuple[str, bool, float, str]]) -> CheckResult:
    start = time.perf_counter()
    name, ok, measured, threshold = fn()
    return CheckResult(name, bool(ok), float(measured), threshold, time.perf_counter() - start)


# -- optimal control --------------------------------------------------------

def control_terminal_gap(n_steps: int = 10_000, r: float = 10.0, seed: int = 0) -> float:
    """Relative error of |X_1 - x1| against |X_0 - x1| / (1 + r)."""
    gen = np.random.default_rng(seed)
    p = V.ControlProblem(r, gen.standard_normal(4), gen.standard_normal(4))
    traj = V.integrate_controlled_ode(p, n_steps)
    got = np.linalg.norm(traj[-1] - p.x1)
    want = np.linalg.norm(p.X0 - p.x1) / (1.0 + r)
    return float(abs(got - want) / want)


def control_constancy(r: float = 10.0, seed: int = 0, points: int = 101) -> float:
    """Largest drift of r (x1 - X_t) / (1 + r(1 - t)) along the closed-form path."""
    gen = np.random.default_rng(seed)
    x1, X0 = gen.standard_normal(4), gen.standard_normal(4)
    t = np.linspace(0.0, 1.0, points)
    X = x1 - (x1 - X0) * (1.0 + r * (1.0 - t[:, None])) / (1.0 + r)
    c = np.stack([V.optimal_control(ti, Xi, x1, r) for ti, Xi in zip(t, X)])
    return float(np.max(np.abs(c - c[0])))


def control_formula(seed: int = 0, count: int = 100) -> float:
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        t, r = gen.uniform(0, 1), gen.uniform(0.1, 20)
        X, x1 = gen.standard_normal(3), gen.standard_normal(3)
        want = r * (x1 - X) / (1.0 + r * (1.0 - t))
        worst = max(worst, float(np.max(np.abs(V.optimal_control(t, X, x1, r) - want))))
        # terminal value equals the transversality costate -r (X_1 - x1)
        worst = max(worst, float(np.max(np.abs(V.optimal_control(1.0, X, x1, r) + r * (X - x1)))))
    return worst


# -- Gaussian posterior -----------------------------------------------------

def tweedie_grid_error() -> float:
    worst = 0.0
    xs, taus, sigmas = np.linspace(-3, 3, 5), np.linspace(0.2, 2.0, 5), np.linspace(0.0, 1.5, 4)
    mu0 = 0.4
    for x in xs:
        for tau in taus:
            for sigma in sigmas:
                want = (tau ** 2 * x + sigma ** 2 * mu0) / (tau ** 2 + sigma ** 2)
                got = V.tweedie_posterior_mean(x, V.GaussianToy(mu0, tau, sigma))
                worst = max(worst, abs(float(got) - want))
    return worst


def drift_identity_error(count: int = 1000, seed: int = 0) -> float:
    """(1 - t) score(X) against the bridge drift toward the posterior-mean estimate."""
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        mu0, tau, t = gen.normal(), gen.uniform(0.2, 2.0), gen.uniform(0.0, 0.98)
        x = gen.normal(mu0, 2.0, 3)
        g = V.GaussianToy(mu0, tau)
        s = 1.0 - t
        x1_hat = (tau ** 2 * x + s ** 2 * mu0) / (tau ** 2 + s ** 2)
        lhs = V.hjb_drift(x, t, V.unit_time_score(g, t))
        rhs = V.bridge_drift(x, t, x1_hat)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


# -- sampler ----------------------------------------------------------------

HEUN_TOY = V.GaussianToy(0.3, 0.5)
HEUN_PROFILE = dict(sigma_min=0.002, sigma_max=5.0, rho=1.0)


def heun_endpoint_errors(steps=(8, 16, 32), samples: int = 64, seed: int = 0) -> list[float]:
    """Max endpoint error against the exact flow map, churn off."""
    D = V.gaussian_denoiser(HEUN_TOY)
    errs = []
    for n in steps:
        sched = build_schedule(n, **HEUN_PROFILE)
        x0 = gaussian_sample(SeededRng(seed), (samples,), sched.sigmas[0])
        out, _ = edm_sample(D, sched, None, GuidanceConfig(), seed, shape=(samples,))
        errs.append(float(np.max(np.abs(out - V.flow_endpoint(HEUN_TOY, x0, sched.sigmas[0])))))
    return errs


# -- alignment --------------------------------------------------------------

def alignment_errors(count: int = 1000, seed: int = 0) -> tuple[float, float]:
    """(target-statistics error, standardized-residual error) over random pairs."""
    gen = np.random.default_rng(seed)
    stat_err = resid_err = 0.0
    for _ in range(count):
        shape = (int(gen.integers(1, 4)), int(gen.integers(2, 8)), int(gen.integers(2, 8)))
        face = gen.normal(gen.normal(0, 3), gen.uniform(0.1, 5), shape)
        img = gen.normal(gen.normal(0, 3), gen.uniform(0.1, 5), shape)
        out = distribution_align(face, img).data
        axes = (-2, -1)
        mu_o, sd_o = out.mean(axes), out.std(axes)
        stat_err = max(stat_err, float(np.max(np.abs(mu_o - img.mean(axes)))),
                       float(np.max(np.abs(sd_o - img.std(axes)))))
        z_out = (out - mu_o[..., None, None]) / sd_o[..., None, None]
        z_face = (face - face.mean(axes, keepdims=True)) / face.std(axes, keepdims=True)
        resid_err = max(resid_err, float(np.max(np.abs(z_out - z_face))))
    return stat_err, resid_err


# -- gradients --------------------------------------------------------------

def _pos(gen, shape):
    return gen.uniform(0.5, 2.0, shape)


def _away(gen, shape):
    """Values kept clear of the kink at zero."""
    return gen.choice([-1.0, 1.0], shape) * gen.uniform(0.1, 2.0, shape)


def _weighted(fn, w):
    return lambda *a: T.sum_(fn(*a) * w)


def op_cases(gen: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """(name, function of Tensors, inputs) for every differentiable primitive."""
    n = gen.standard_normal
    w = lambda *s: Tensor(n(s))  # noqa: E731
    w_mu, w_sd = w(2), w(2)
    return [
        ("add", _weighted(lambda a, b: a + b, w(3, 4)), [n((3, 4)), n((4,))]),
        ("sub", _weighted(lambda a, b: a - b, w(3, 4)), [n((3, 4)), n((3, 1))]),
        ("mul", _weighted(lambda a, b: a * b, w(3, 4)), [n((3, 4)), n((3, 4))]),
        ("div", _weighted(lambda a, b: a / b, w(3, 4)), [n((3, 4)), _pos(gen, (3, 4))]),
        ("neg", _weighted(lambda a: -a, w(5)), [n((5,))]),
        ("power", _weighted(lambda a: T.power(a, 1.7), w(5)), [_pos(gen, (5,))]),
        ("square", _weighted(T.square, w(5)), [n((5,))]),
        ("exp", _weighted(T.exp, w(5)), [n((5,))]),
        ("log", _weighted(T.log, w(5)), [_pos(gen, (5,))]),
        ("sqrt", _weighted(T.sqrt, w(5)), [_pos(gen, (5,))]),
        ("tanh", _weighted(T.tanh, w(5)), [n((5,))]),
        ("sigmoid", _weighted(T.sigmoid, w(5)), [n((5,))]),
        ("relu", _weighted(T.relu, w(6)), [_away(gen, (6,))]),
        ("abs", _weighted(T.abs_, w(6)), [_away(gen, (6,))]),
        ("clamp_min", _weighted(lambda a: T.clamp_min(a, 0.0), w(6)), [_away(gen, (6,))]),
        ("sum", _weighted(lambda a: T.sum_(a, 1), w(3)), [n((3, 4))]),
        ("mean", _weighted(lambda a: T.mean(a, (0, 2), keepdims=True), w(1, 3, 1)), [n((2, 3, 4))]),
        ("reshape", _weighted(lambda a: T.reshape(a, (4, 3)), w(4, 3)), [n((3, 4))]),
        ("transpose", _weighted(lambda a: T.transpose(a, (2, 0, 1)), w(4, 2, 3)), [n((2, 3, 4))]),
        ("swap_last", _weighted(T.swap_last, w(2, 4, 3)), [n((2, 3, 4))]),
        ("getitem", _weighted(lambda a: T.getitem(a, (slice(1, 3), [0, 2, 2])), w(2, 3)), [n((4, 3))]),
        ("concat", _weighted(lambda a, b: T.concat([a, b], 1), w(2, 5)), [n((2, 3)), n((2, 2))]),
        ("stack", _weighted(lambda a, b: T.stack([a, b], 0), w(2, 3)), [n((3,)), n((3,))]),
        ("matmul", _weighted(lambda a, b: a @ b, w(2, 3, 5)), [n((2, 3, 4)), n((4, 5))]),
        ("matmul_vec", _weighted(lambda a, b: a @ b, w(3)), [n((3, 4)), n((4,))]),
        ("softmax", _weighted(lambda a: T.softmax(a, -1), w(3, 4)), [n((3, 4))]),
        ("tensor_stats", lambda a: T.sum_(T.tensor_stats(a, (-2, -1))[0] * w_mu)
         + T.sum_(T.tensor_stats(a, (-2, -1))[1] * w_sd), [n((2, 3, 4))]),
        ("cosine", _weighted(lambda a, b: T.cosine_similarity(a, b, -1), w(3)), [n((3, 4)), n((3, 4))]),
        ("normalize", _weighted(lambda a: T.normalize(a, -1), w(3, 4)), [n((3, 4))]),
        ("distribution_align", _weighted(distribution_align, w(2, 3, 4)), [n((2, 3, 4)), n((2, 3, 4))]),
    ]


def op_gradient_error(seeds: int = 100) -> tuple[float, str]:
    worst, worst_name = 0.0, ""
    for seed in range(seeds):
        gen = np.random.default_rng(seed)
        for name, fn, inputs in op_cases(gen):
            err = check_gradients(fn, *inputs)
            if err > worst:
                worst, worst_name = err, name
    return worst, worst_name


def attention_gradient_error(seeds: int = 100) -> float:
    """Gradient of an attention block with respect to its queries and context."""
    worst = 0.0
    for seed in range(seeds):
        rng = SeededRng(seed)
        block = AttentionBlock.init(rng.fork(0), 4, 2)
        gen = np.random.default_rng(seed)
        wts = Tensor(gen.standard_normal((3, 4)))
        worst = max(worst, check_gradients(lambda q, c: T.sum_(attend(block, q, c) * wts),
                                           gen.standard_normal((3, 4)), gen.standard_normal((5, 4))))
    return worst


def face_path_gradient_error(seeds: int = 100) -> float:
    """latent -> decode -> embed -> cosine loss, every latent coordinate perturbed."""
    worst = 0.0
    for seed in range(seeds):
        rng = SeededRng(seed)
        dec = ToyDecoder.init(rng.fork(0), 8, 4, 16)
        emb = IdentityEmbedder.init(rng.fork(1), 8, 16)
        ref = identity_embed(emb, decode(dec, gaussian_sample(rng.fork(2), (4, 4, 8), 1.0))).data
        g = GuidanceConfig(enabled=True, reference_embedding=ref, decoder=dec, embedder=emb)
        x = gaussian_sample(rng.fork(3), (1, 4, 4, 8), 1.0)
        worst = max(worst, check_gradients(lambda z: face_loss(z, g), x))
    return worst


# -- masked loss ------------------------------------------------------------

def masked_gradient_ratio(seed: int = 0) -> float:
    """|dL/dz| at a masked cell over an unmasked one, equal residuals."""
    gen = np.random.default_rng(seed)
    z_gt = gen.standard_normal((2, 4, 4, 3))
    z_eps = z_gt - 0.37
    mask = np.zeros((2, 4, 4))
    mask[0, 1, 2] = 1.0
    tape = Tape()
    leaf = tape.param(z_eps)
    g = backprop(tape, masked_reconstruction_loss(z_gt, leaf, mask))[leaf]
    return float(abs(g[0, 1, 2, 0]) / abs(g[1, 3, 3, 0]))


# -- convex inner loop ------------------------------------------------------

def convex_monotone_count(seeds: int = 100, k_steps: int = 10, lr: float = 0.01) -> int:
    """Seeds whose face loss falls at every inner step with linear decoder and embedder."""
    good = 0
    for seed in range(seeds):
        rng = SeededRng(seed)
        dec = LinearDecoder.init(rng.fork(0), 8, 4)
        emb = LinearEmbedder.init(rng.fork(1), 16, 16, 8)
        ref = identity_embed(emb, decode(dec, gaussian_sample(rng.fork(3), (4, 4, 8), 1.0))).data
        g = GuidanceConfig(enabled=True, lr=lr, k_steps=k_steps, reference_embedding=ref,
                           decoder=dec, embedder=emb)
        trace: list[float] = []
        hjb_face_optimize(gaussian_sample(rng.fork(2), (8, 4, 4, 8), 1.0), g, trace=trace)
        good += bool(np.all(np.diff(trace) < 0))
    return good


# -- driver -----------------------------------------------------------------

def run_checks(quick: bool = False) -> list[CheckResult]:
    """All checks; ``quick`` trims Monte Carlo and seed counts for fast feedback."""
    seeds = 10 if quick else 100
    paths = 2000 if quick else 10_000

    def gap():
        e = control_terminal_gap()
        return "control_terminal_gap", e <= 1e-3, e, "<=1e-3"

    def const():
        e = control_constancy()
        return "control_constancy", e <= 1e-9, e, "<=1e-9"

    def formula():
        e = control_formula()
        return "control_formula", e <= 1e-12, e, "<=1e-12"

    def tweedie():
        e = tweedie_grid_error()
        return "tweedie_grid", e <= 1e-9, e, "<=1e-9"

    def drift():
        e = drift_identity_error()
        return "drift_identity", e <= 1e-9, e, "<=1e-9"

    def sde_mean():
        rep = V.sde_terminal_moments(V.GaussianToy(0.0, 1.0), 1000, paths, seed=0)
        return "sde_terminal_mean_z", abs(rep.mean_z) <= 3.0, abs(rep.mean_z), "<=3"

    def sde_collapse():
        rep = V.sde_terminal_moments(V.GaussianToy(0.0, 1e-3), 1000, paths, seed=1)
        return "sde_collapse_std", rep.terminal_std < 0.05, rep.terminal_std, "<0.05"

    def heun():
        e8, e16, e32 = heun_endpoint_errors()
        ratios = (e8 / e16, e16 / e32)
        ok = all(3.0 <= q <= 5.0 for q in ratios)
        worst = max(ratios, key=lambda q: abs(q - 4.0))
        return "heun_order_ratio", ok, worst, "in[3,5]"

    def align_stats():
        s, _ = alignment_errors()
        return "alignment_target_stats", s <= 1e-9, s, "<=1e-9"

    def align_resid():
        _, r = alignment_errors()
        return "alignment_residuals", r <= 1e-9, r, "<=1e-9"

    def grad_ops():
        e, _ = op_gradient_error(seeds)
        return "gradient_ops", e < 1e-4, e, "<1e-4"

    def grad_attn():
        e = attention_gradient_error(seeds)
        return "gradient_attention", e < 1e-4, e, "<1e-4"

    def grad_path():
        e = face_path_gradient_error(seeds)
        return "gradient_face_path", e < 1e-4, e, "<1e-4"

    def mask():
        q = masked_gradient_ratio()
        return "masked_gradient_ratio", abs(q - 4.0) <= 1e-9, q, "4+-1e-9"

    def convex():
        c = convex_monotone_count(seeds)
        return "convex_monotone", c == seeds, c, f"=={seeds}"

    checks = [gap, const, formula, tweedie, drift, sde_mean, sde_collapse, heun, align_stats,
              align_resid, grad_ops, grad_attn, grad_path, mask, convex]
    return [_timed(c) for c in checks]


def format_results(results: list[CheckResult]) -> str:
    passed = sum(r.passed for r in results)
    lines = [r.line() for r in results]
    lines.append(f"summary passed={passed} failed={len(results) - passed} "
                 f"status={'pass' if passed == len(results) else 'fail'}")
    return "\n".join(lines) + "\n"
