"""Discrete diffusion forward process: cumulative signal coefficients,
noising, and timestep sampling (uniform and stratified)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Floor applied to the cumulative signal coefficient so every entry stays
# strictly positive while still satisfying alpha_bar[T] <= 1e-3.
ALPHA_BAR_FLOOR = 1e-4
COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients alpha_bar[t] for t = 0..T."""

    T: int
    alpha_bar: np.ndarray

    def validate(self) -> None:
        ab = self.alpha_bar
        if ab.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have length T+1={self.T + 1}, got {ab.shape}")
        if np.any(np.diff(ab) > 0):
            raise ValueError("alpha_bar must be monotone non-increasing")
        if ab[0] < 1.0 - 1e-6:
            raise ValueError(f"alpha_bar[0] must be >= 1-1e-6, got {ab[0]}")
        if ab[-1] > 1e-3:
            raise ValueError(f"alpha_bar[T] must be <= 1e-3, got {ab[-1]}")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ValueError("alpha_bar entries must lie in (0, 1]")

    def signal(self, t) -> float:
        return math.sqrt(float(self.alpha_bar[t]))

    def noise(self, t) -> float:
        return math.sqrt(1.0 - float(self.alpha_bar[t]))


@dataclass(frozen=True)
class NoisySample:
    x0: object
    eps: object
    t: int
    xt: object


@dataclass(frozen=True)
class StratifiedDraw:
    I: int
    timesteps: np.ndarray


def cosine_alpha_bar(t_frac: np.ndarray | float, offset: float = COSINE_OFFSET) -> np.ndarray:
    """Squared-cosine cumulative coefficient at fractional time t/T, normalized
    so the value at t=0 is exactly 1."""
    f = np.cos((np.asarray(t_frac, dtype=np.float64) + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
    f0 = math.cos(offset / (1.0 + offset) * math.pi / 2.0) ** 2
    return f / f0


def build_schedule(num_timesteps: int, family: str = "cosine") -> NoiseSchedule:
    """Build a schedule of `num_timesteps` steps; alpha_bar has length T+1 with
    alpha_bar[0] = 1 and alpha_bar[T] clamped to <= 1e-3."""
    if num_timesteps < 2:
        raise ValueError(f"num_timesteps must be >= 2, got {num_timesteps}")
    T = int(num_timesteps)
    if family == "cosine":
        t_frac = np.arange(T + 1, dtype=np.float64) / T
        ab = cosine_alpha_bar(t_frac)
    elif family == "linear":
        # Linear-in-beta schedule; betas rescaled with T so the endpoint stays
        # near zero at any step count.
        scale = 1000.0 / T
        betas = np.clip(np.linspace(1e-4, 0.02, T) * scale, 0.0, 0.999)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        raise ValueError(f"unknown schedule family: {family!r}")
    ab = np.clip(ab, ALPHA_BAR_FLOOR, 1.0)
    if ab[-1] > 1e-3:
        # Force the pure-noise endpoint without touching interior values.
        ab[-1] = 1e-3
        ab = np.minimum.accumulate(ab)
    schedule = NoiseSchedule(T=T, alpha_bar=ab)
    schedule.validate()
    return schedule


def forward_noise(x0, eps, t: int, schedule: NoiseSchedule) -> NoisySample:
    """Mix clean signal and Gaussian noise at timestep t. Works on numpy arrays
    and torch tensors alike."""
    if getattr(x0, "shape", None) != getattr(eps, "shape", None):
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t = int(t)
    if not 0 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T}]")
    xt = schedule.signal(t) * x0 + schedule.noise(t) * eps
    return NoisySample(x0=x0, eps=eps, t=t, xt=xt)


def stratified_bin_edges(I: int, T: int) -> list[tuple[int, int]]:
    """Integer bin [lo, hi) per stratum, lo = floor(i*T/I)."""
    return [(i * T // I, (i + 1) * T // I) for i in range(I)]


def sample_stratified_timesteps(
    I: int, T: int, rng: np.random.Generator, t_min: int = 0
) -> StratifiedDraw:
    """Draw one integer timestep uniformly from each of I contiguous bins of
    [0, T). `t_min` lets training exclude t=0 from the first bin."""
    if not 1 <= I <= T:
        raise ValueError(f"bin count {I} outside [1, {T}]")
    ts = np.empty(I, dtype=np.int64)
    for i, (lo, hi) in enumerate(stratified_bin_edges(I, T)):
        lo = max(lo, t_min) if i == 0 else lo
        ts[i] = rng.integers(lo, hi)
    return StratifiedDraw(I=I, timesteps=ts)
