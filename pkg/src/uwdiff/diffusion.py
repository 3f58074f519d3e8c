"""Denoising-diffusion machinery independent of any particular predictor.

The schedule is float64 numpy; the per-step operators only combine inputs
with scalar coefficients taken from it, so they accept numpy arrays and torch
tensors alike.  Timesteps are 1-indexed at this API (t in 1..T); array
indices are t-1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

SCHEDULE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed beta/alpha chains for T timesteps.

    posterior_vars[t-1] is the reverse-step variance with the alpha_bar[0th]
    convention alpha_bar(t=0) := 1, which makes the final step deterministic.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def timesteps(self) -> int:
        return len(self.betas)

    def record(self) -> dict:
        """Small versioned description, embedded in checkpoints."""
        return {
            "schedule_version": SCHEDULE_FORMAT_VERSION,
            "timesteps": self.timesteps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @staticmethod
    def from_record(rec: dict) -> "DiffusionSchedule":
        if rec.get("schedule_version") != SCHEDULE_FORMAT_VERSION:
            raise ValueError(
                f"unsupported schedule record version {rec.get('schedule_version')}"
            )
        return make_schedule(rec["timesteps"], rec["beta_start"], rec["beta_end"])

    def dumps(self) -> str:
        return json.dumps(self.record(), sort_keys=True)

    @staticmethod
    def loads(text: str) -> "DiffusionSchedule":
        return DiffusionSchedule.from_record(json.loads(text))


def make_schedule(
    timesteps: int, beta_start: float = 1e-6, beta_end: float = 1e-2
) -> DiffusionSchedule:
    """Linear beta schedule inclusive of both endpoints."""
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    # alpha_bar at t=0 is treated as 1, so the first posterior variance is 0.
    prev = np.concatenate(([1.0], alpha_bars[:-1]))
    posterior_vars = (1.0 - prev) / (1.0 - alpha_bars) * betas
    return DiffusionSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_vars=posterior_vars,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def _check_t(t: int, sched: DiffusionSchedule) -> None:
    if not 1 <= t <= sched.timesteps:
        raise ValueError(f"timestep {t} outside 1..{sched.timesteps}")


def q_sample(x0, t: int, eps, sched: DiffusionSchedule):
    """Forward-noise x0 to step t: sqrt(ab)*x0 + sqrt(1-ab)*eps."""
    _check_t(t, sched)
    ab = sched.alpha_bars[t - 1]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def p_step(x_t, t: int, eps_hat, sched: DiffusionSchedule, z=None):
    """One reverse step from x_t to x_{t-1}.

    mean = (x_t - beta_t / sqrt(1-ab_t) * eps_hat) / sqrt(alpha_t), plus
    sigma_t * z noise.  z is ignored at t=1 where the posterior variance is
    zero by convention.
    """
    _check_t(t, sched)
    beta = sched.betas[t - 1]
    alpha = sched.alphas[t - 1]
    ab = sched.alpha_bars[t - 1]
    mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
    if z is None or t == 1:
        return mean
    return mean + math.sqrt(sched.posterior_vars[t - 1]) * z


def diffusion_loss(eps, eps_hat, kind: str = "l1"):
    """Noise-prediction objective; mean absolute by default, MSE behind a
    switch."""
    if kind == "l1":
        return abs(eps - eps_hat).mean()
    if kind == "l2":
        return ((eps - eps_hat) ** 2).mean()
    raise ValueError(f"unknown loss kind {kind!r}")


@dataclass(frozen=True)
class SkipPlan:
    """Descending subsequence of timesteps visited by the fast sampler."""

    steps: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.steps) == 0:
            raise ValueError("skip plan must not be empty")
        if any(b >= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("skip plan must be strictly decreasing")
        if self.steps[-1] != 1:
            raise ValueError("skip plan must end at t=1")

    def __len__(self) -> int:
        return len(self.steps)


def make_skip_plan(
    sched: DiffusionSchedule, num_steps: int = 10, spacing: str = "uniform_t"
) -> SkipPlan:
    """Pick the sampling subsequence.

    uniform_t spaces timesteps evenly; uniform_alpha picks steps whose
    alpha_bar values are closest to evenly spaced levels.
    """
    t_max = sched.timesteps
    num_steps = min(num_steps, t_max)
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if spacing == "uniform_t":
        raw = np.linspace(t_max, 1, num_steps)
        steps = np.unique(np.round(raw).astype(int))[::-1]
    elif spacing == "uniform_alpha":
        targets = np.linspace(sched.alpha_bars[-1], sched.alpha_bars[0], num_steps)
        picked = [int(np.argmin(np.abs(sched.alpha_bars - v))) + 1 for v in targets]
        steps = np.unique(picked)[::-1]
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    steps = steps.tolist()
    if steps[-1] != 1:
        steps.append(1)
    return SkipPlan(steps=tuple(int(s) for s in steps))


Denoiser = Callable[[object, object, int], object]


def skip_sample(
    denoiser: Denoiser,
    x_start,
    cond,
    plan: SkipPlan,
    sched: DiffusionSchedule,
    rng=None,
    eta: float = 0.0,
    randn=None,
    x0_clip: tuple[float, float] | None = None,
):
    """Sample along the skip plan with the deterministic (eta=0) update.

    The denoiser is called as ``denoiser(x_t, cond, t)`` and must return the
    predicted noise.  ``x0_clip`` bounds the intermediate clean-image
    estimate (the customary guard against noise-prediction error blowing up
    at nearly-pure-noise steps, where the estimate is divided by a tiny
    sqrt(alpha_bar)).  With eta > 0 the stochastic variant is used and fresh
    noise is drawn via ``randn(shape, rng)``.
    """
    x = x_start
    n = len(plan.steps)
    for i, t in enumerate(plan.steps):
        _check_t(t, sched)
        eps_hat = denoiser(x, cond, t)
        ab_t = sched.alpha_bars[t - 1]
        x0_hat = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        if x0_clip is not None:
            x0_hat = x0_hat.clip(*x0_clip)
        t_next = plan.steps[i + 1] if i + 1 < n else 0
        ab_next = 1.0 if t_next == 0 else sched.alpha_bars[t_next - 1]
        sigma = 0.0
        if eta > 0.0 and t_next > 0:
            sigma = (
                eta
                * math.sqrt((1.0 - ab_next) / (1.0 - ab_t))
                * math.sqrt(1.0 - ab_t / ab_next)
            )
        dir_coeff = math.sqrt(max(1.0 - ab_next - sigma**2, 0.0))
        x = math.sqrt(ab_next) * x0_hat + dir_coeff * eps_hat
        if sigma > 0.0:
            if randn is None:
                raise ValueError("eta > 0 requires a randn(shape, rng) callback")
            x = x + sigma * randn(x, rng)
    return x


def iterate_p_steps(
    denoiser: Denoiser, x_start, cond, sched: DiffusionSchedule, steps: Sequence[int]
):
    """Run the plain reverse chain with zero injected noise over ``steps``
    (descending).  Reference path for cross-checking the skip sampler."""
    x = x_start
    for t in steps:
        x = p_step(x, t, denoiser(x, cond, t), sched, z=None)
    return x
