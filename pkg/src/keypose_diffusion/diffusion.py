"""Noise schedules, forward noising and the per-channel reverse updates.

Diffusion steps are 1-based: step ``t`` in ``[1, T]`` reads entry ``t - 1``
of the schedule tables, and ``alpha_bar`` at step 0 is 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DimensionError, DomainError

SCALED_LINEAR = "scaled_linear"
SQUARED_COSINE = "squared_cosine"
KINDS = (SCALED_LINEAR, SQUARED_COSINE)

DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02
COSINE_OFFSET = 0.008
COSINE_BETA_CAP = 0.999

POSTERIOR = "posterior"
PRINTED = "printed"


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t):
        """``alpha_bar`` at step ``t``; step 0 gives 1. Accepts arrays."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[np.clip(t, 0, self.T)]

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise DomainError(f"diffusion step must lie in [1, {self.T}], got {t}")


def _cosine_alpha_bar(s):
    return np.cos((s + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * np.pi / 2) ** 2


def build_schedule(kind: str = SCALED_LINEAR, T: int = 100, beta_min: float = DEFAULT_BETA_MIN,
                   beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    """Tabulate beta, alpha = 1 - beta and the running product alpha_bar.

    ``scaled_linear`` spaces beta evenly from ``beta_min`` (step 1) to
    ``beta_max`` (step T). ``squared_cosine`` takes the ratio of successive
    squared-cosine signal levels, capped at 0.999.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not 0 < beta_min < beta_max < 1:
        raise ConfigError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    T = int(T)
    idx = np.arange(T, dtype=np.float64)
    if kind == SCALED_LINEAR:
        frac = idx / (T - 1) if T > 1 else np.zeros(1)
        beta = beta_min + (beta_max - beta_min) * frac
    else:
        beta = 1.0 - _cosine_alpha_bar((idx + 1) / T) / _cosine_alpha_bar(idx / T)
        beta = np.minimum(beta, COSINE_BETA_CAP)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(kind, T, beta, alpha, alpha_bar)


@dataclass
class NoisyAction:
    """Noised position and 6D rotation channels at diffusion step ``t``."""

    pos: np.ndarray
    rot: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64)
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.int64)
        if self.pos.shape[-1] != 3 or self.rot.shape[-1] != 6:
            raise DimensionError(f"expected (...,3) and (...,6) channels, got {self.pos.shape}, {self.rot.shape}")
        if np.any(self.t < 1):
            raise DomainError("diffusion step must be >= 1")


def _per_sample(coef, x):
    coef = np.asarray(coef, dtype=np.float64)
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


def forward_noise(x, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(alpha_bar_t) x + sqrt(1 - alpha_bar_t) eps``; ``t`` may be per-sample."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} does not match sample shape {x.shape}")
    sched.check_step(t)
    ab = _per_sample(sched.alpha_bar_at(t), x)
    return np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps


def noise_action(pos, rot, t, eps_pos, eps_rot, sched_pos: NoiseSchedule,
                 sched_rot: NoiseSchedule) -> NoisyAction:
    return NoisyAction(forward_noise(pos, t, eps_pos, sched_pos),
                       forward_noise(rot, t, eps_rot, sched_rot), t)


def variance_coefficient(t: int, sched: NoiseSchedule, variance: str = POSTERIOR) -> float:
    """Multiplier of the fresh noise ``z`` in the reverse update at step ``t``.

    ``posterior`` is the DDPM standard deviation
    ``sqrt((1 - ab[t-1]) / (1 - ab[t]) * beta_t)``. ``printed`` is the
    coefficient ``(1 - ab[t+1]) / (1 - ab[t]) * beta_t`` used without a
    square root, with ``ab[T+1]`` clamped to ``ab[T]``.
    """
    beta = sched.beta_at(t)
    ab_t = float(sched.alpha_bar_at(t))
    if variance == POSTERIOR:
        return float(np.sqrt((1.0 - float(sched.alpha_bar_at(t - 1))) / (1.0 - ab_t) * beta))
    if variance == PRINTED:
        return float((1.0 - float(sched.alpha_bar_at(min(t + 1, sched.T)))) / (1.0 - ab_t) * beta)
    raise ConfigError(f"unknown variance mode {variance!r}")


def reverse_step(x_t, eps_hat, t: int, sched: NoiseSchedule, z=None, variance: str = POSTERIOR) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}``. ``z`` is ignored at ``t = 1``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise DimensionError(f"eps_hat shape {eps_hat.shape} does not match x_t shape {x_t.shape}")
    sched.check_step(t)
    alpha, beta = sched.alpha_at(t), sched.beta_at(t)
    mean = (x_t - beta / np.sqrt(1.0 - float(sched.alpha_bar_at(t))) * eps_hat) / np.sqrt(alpha)
    if t == 1 or z is None:
        return mean
    z = np.asarray(z, dtype=np.float64)
    if z.shape != x_t.shape:
        raise DimensionError(f"z shape {z.shape} does not match x_t shape {x_t.shape}")
    return mean + variance_coefficient(t, sched, variance) * z


def reverse_step_pos(pos_t, eps_hat_pos, t: int, sched_pos: NoiseSchedule, z=None,
                     variance: str = POSTERIOR) -> np.ndarray:
    return reverse_step(pos_t, eps_hat_pos, t, sched_pos, z, variance)


def reverse_step_rot(rot_t, eps_hat_rot, t: int, sched_rot: NoiseSchedule, z=None,
                     variance: str = POSTERIOR) -> np.ndarray:
    return reverse_step(rot_t, eps_hat_rot, t, sched_rot, z, variance)


def training_targets(clean_pos, clean_rot, sched_pos: NoiseSchedule, sched_rot: NoiseSchedule,
                     rng: np.random.Generator, t=None):
    """Draw a step per sample and Gaussian noise; return the noised action and the noise.

    ``clean_pos`` is ``(B, L, 3)`` and ``clean_rot`` ``(B, L, 6)``; the two
    channels share the step but use their own schedules.
    """
    clean_pos = np.asarray(clean_pos, dtype=np.float64)
    clean_rot = np.asarray(clean_rot, dtype=np.float64)
    if sched_pos.T != sched_rot.T:
        raise ConfigError("position and rotation schedules must have the same length")
    batch = clean_pos.shape[0]
    if t is None:
        t = rng.integers(1, sched_pos.T + 1, size=batch)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,)).copy()
    eps_pos = rng.standard_normal(clean_pos.shape)
    eps_rot = rng.standard_normal(clean_rot.shape)
    noisy = noise_action(clean_pos, clean_rot, t, eps_pos, eps_rot, sched_pos, sched_rot)
    return noisy, eps_pos, eps_rot
