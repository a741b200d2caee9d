"""Sampling mathematics for a v-parameterized latent diffusion model.

Everything operates on caller-owned float64 arrays of any shape. A denoiser
is any callable ``(z_t, t, condition) -> v`` where ``condition`` is ``None``
for the unconditional branch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

COSINE_OFFSET = 0.008
ALPHA_BAR_FLOOR = 1e-5
LATENT_SHAPE = (64, 64, 1)

Denoiser = Callable[[np.ndarray, int, Optional[object]], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal level ``alpha_bar[t]`` for t = 0..T."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=float)
        if ab.ndim != 1 or ab.size < 2:
            raise ValueError("alpha_bar needs T + 1 >= 2 entries")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar must lie in (0, 1]")
        if np.any(np.diff(ab) > 0):
            raise ValueError("alpha_bar must be non-increasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.alpha_bar.size - 1

    def __getitem__(self, t) -> float:
        return float(self.alpha_bar[t])

    def signal_noise(self, t) -> tuple[float, float]:
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))."""
        ab = self[t]
        return math.sqrt(ab), math.sqrt(1.0 - ab)


def cosine_schedule(T: int, s: float = COSINE_OFFSET, floor: float = ALPHA_BAR_FLOOR) -> NoiseSchedule:
    """Squared-cosine schedule normalized so alpha_bar_0 = 1.

    Values are clipped to ``[floor, 1]``; for large T the last few entries
    hit the floor, so the tail is flat rather than strictly decreasing.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    t = np.arange(T + 1, dtype=float)
    f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    return NoiseSchedule(np.clip(f / f[0], floor, 1.0))


def _check_shapes(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def forward(z0, eps, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(ab) z0 + sqrt(1 - ab) eps."""
    z0, eps = _check_shapes(z0, eps)
    a, b = schedule.signal_noise(t)
    return a * z0 + b * eps


def velocity_target(z0, eps, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """v = sqrt(ab) eps - sqrt(1 - ab) z0."""
    z0, eps = _check_shapes(z0, eps)
    a, b = schedule.signal_noise(t)
    return a * eps - b * z0


def predict_x0_eps(z_t, v, t: int, schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Invert (z_t, v) back to the clean latent and the noise."""
    z_t, v = _check_shapes(z_t, v)
    a, b = schedule.signal_noise(t)
    return a * z_t - b * v, b * z_t + a * v


def ddim_step(z_t, v_pred, t: int, t_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) jump from t to t_prev."""
    if not t >= t_prev >= 0:
        raise ValueError(f"need t >= t_prev >= 0, got t={t}, t_prev={t_prev}")
    if t == t_prev:
        return np.array(z_t, dtype=float)
    x0, eps = predict_x0_eps(z_t, v_pred, t, schedule)
    a, b = schedule.signal_noise(t_prev)
    return a * x0 + b * eps


def posterior_variance(t: int, t_prev: int, schedule: NoiseSchedule) -> float:
    ab_t, ab_prev = schedule[t], schedule[t_prev]
    return (1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev)


def ddpm_mean(z_t, v_pred, t: int, schedule: NoiseSchedule, t_prev: int | None = None) -> np.ndarray:
    """Mean of the Gaussian posterior q(z_prev | z_t, x0_hat)."""
    t_prev = t - 1 if t_prev is None else t_prev
    x0, _ = predict_x0_eps(z_t, v_pred, t, schedule)
    ab_t, ab_prev = schedule[t], schedule[t_prev]
    beta = 1 - ab_t / ab_prev
    c_x0 = math.sqrt(ab_prev) * beta / (1 - ab_t)
    c_zt = math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab_t)
    return c_x0 * x0 + c_zt * np.asarray(z_t, dtype=float)


def ddpm_step(z_t, v_pred, t: int, schedule: NoiseSchedule, rng: np.random.Generator | None = None,
              t_prev: int | None = None, noise=None) -> np.ndarray:
    """Ancestral step from t to t_prev (default t - 1).

    ``noise`` overrides the Gaussian draw; passing zeros gives the
    posterior mean.
    """
    if t < 1:
        raise ValueError("ddpm_step needs t >= 1")
    t_prev = t - 1 if t_prev is None else t_prev
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    mean = ddpm_mean(z_t, v_pred, t, schedule, t_prev)
    var = posterior_variance(t, t_prev, schedule)
    if var == 0.0:
        return mean
    if noise is None:
        if rng is None:
            raise ValueError("ddpm_step needs an rng or an explicit noise array")
        noise = rng.standard_normal(mean.shape)
    return mean + math.sqrt(var) * np.asarray(noise, dtype=float)


def cfg_velocity(v_cond, v_uncond, w: float) -> np.ndarray:
    """Guided velocity v_uncond + w (v_cond - v_uncond)."""
    if w < 0:
        raise ValueError("guidance scale must be >= 0")
    v_cond, v_uncond = _check_shapes(v_cond, v_uncond)
    # this arrangement is exact at w = 0, 1 and 2
    return w * v_cond + (1.0 - w) * v_uncond


def timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced descending integers from T to 0 (steps + 1 entries)."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    return np.rint(np.linspace(T, 0, steps + 1)).astype(int)


def guided_velocity(denoiser: Denoiser, z_t, t: int, condition, w: float, null_condition=None) -> np.ndarray:
    v_cond = np.asarray(denoiser(z_t, t, condition), dtype=float)
    if w == 1.0:
        return v_cond
    v_null = np.asarray(denoiser(z_t, t, null_condition), dtype=float)
    return cfg_velocity(v_cond, v_null, w)


def sample(denoiser: Denoiser, condition=None, steps: int = 20, w: float = 2.0, mode: str = "ddim",
           seed: int = 0, T: int = 1000, shape=LATENT_SHAPE, schedule: NoiseSchedule | None = None,
           null_condition=None, return_trajectory: bool = False):
    """Draw a latent by reverse diffusion from seeded z_T ~ N(0, I)."""
    if mode not in ("ddim", "ddpm"):
        raise ValueError(f"mode must be 'ddim' or 'ddpm', got {mode!r}")
    schedule = cosine_schedule(T) if schedule is None else schedule
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape)
    traj = [z]
    ts = timesteps(schedule.T, steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        t, t_prev = int(t), int(t_prev)
        v = guided_velocity(denoiser, z, t, condition, w, null_condition)
        if mode == "ddim":
            z = ddim_step(z, v, t, t_prev, schedule)
        else:
            z = ddpm_step(z, v, t, schedule, rng, t_prev=t_prev)
        traj.append(z)
    return (z, traj) if return_trajectory else z


class OracleDenoiser:
    """Returns the exact velocity that points every z_t at a known z0.

    From z_t = a z0 + b eps and v = a eps - b z0 it follows that
    v = (a z_t - z0) / b.
    """

    def __init__(self, z0, schedule: NoiseSchedule):
        self.z0 = np.asarray(z0, dtype=float)
        self.schedule = schedule
        self.calls = 0

    def __call__(self, z_t, t, condition=None):
        self.calls += 1
        a, b = self.schedule.signal_noise(t)
        if b == 0.0:
            raise ValueError("oracle velocity undefined at alpha_bar = 1")
        return (a * np.asarray(z_t, dtype=float) - self.z0) / b


def oracle_reconstruction_errors(n: int = 100, steps: int = 20, w: float = 2.0, mode: str = "ddim",
                                 seed: int = 0, T: int = 1000, shape=LATENT_SHAPE) -> np.ndarray:
    """Max-abs reconstruction error for ``n`` random targets under the oracle."""
    schedule = cosine_schedule(T)
    rng = np.random.default_rng(seed)
    errs = np.empty(n)
    for k in range(n):
        z0 = rng.standard_normal(shape)
        out = sample(OracleDenoiser(z0, schedule), None, steps, w, mode, seed + k + 1, schedule=schedule)
        errs[k] = float(np.max(np.abs(out - z0)))
    return errs
