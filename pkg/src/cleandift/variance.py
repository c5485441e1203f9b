"""Noise-content analysis of tapped features: scalar least-squares
decomposition of noisy-input features against pure-noise features, with the
residual further decomposed against clean-image features."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import Denoiser
from .schedule import NoiseSchedule


@dataclass
class VarianceReport:
    rows: list[dict] = field(default_factory=list)
    # rows: t, fraction_noise, fraction_clean_of_residual, fraction_unexplained, n_images
    metadata: dict = field(default_factory=dict)


def fit_scalar_coefficient(target_features: np.ndarray, basis_features: np.ndarray) -> float:
    """No-intercept least squares: c = <F, N> / <N, N>."""
    f = np.asarray(target_features, dtype=np.float64).ravel()
    n = np.asarray(basis_features, dtype=np.float64).ravel()
    if f.shape != n.shape:
        raise ValueError("length mismatch")
    nn = float(n @ n)
    if nn == 0.0:
        raise ValueError("zero basis vector")
    return float(f @ n) / nn


def explained_fraction(target_features: np.ndarray, approximation: np.ndarray) -> float:
    """Uncentered explained-variance fraction 1 - |F - A|^2 / |F|^2, clipped
    into [0, 1] against rounding."""
    f = np.asarray(target_features, dtype=np.float64).ravel()
    a = np.asarray(approximation, dtype=np.float64).ravel()
    if f.shape != a.shape:
        raise ValueError("length mismatch")
    ff = float(f @ f)
    if ff == 0.0:
        raise ValueError("zero target vector")
    frac = 1.0 - float((f - a) @ (f - a)) / ff
    return float(np.clip(frac, 0.0, 1.0))


def _stage_features(model: Denoiser, x: torch.Tensor, t: int, stage: int) -> np.ndarray:
    with torch.no_grad():
        _, taps = model(x[None], int(t), want_features=True)
    return taps[stage][0].numpy().astype(np.float64).ravel()


def noise_decomposition_sweep(
    teacher: Denoiser,
    images: torch.Tensor,
    schedule: NoiseSchedule,
    timesteps: list[int],
    stage: int = 1,
    seed: int = 0,
) -> VarianceReport:
    """Per timestep, averaged over images: fraction of feat(x_t; t) variance
    explained by a scalar multiple of feat(eps; T), then the fraction of the
    residual explained by a scalar multiple of feat(x_0; 0). One coefficient
    per (image, timestep)."""
    if images.shape[0] == 0 or not timesteps:
        raise ValueError("need non-empty images and timesteps")
    gen = torch.Generator().manual_seed(seed)
    report = VarianceReport(metadata={
        "stage": stage, "coefficient_granularity": "per_image", "seed": seed,
    })
    eps_all = torch.randn(images.shape, generator=gen, dtype=images.dtype)
    clean_feats = [
        _stage_features(teacher, images[i], 0, stage) for i in range(images.shape[0])
    ]
    noise_feats = [
        _stage_features(teacher, eps_all[i], schedule.T, stage) for i in range(images.shape[0])
    ]
    for t in timesteps:
        fn, fc, fu = [], [], []
        for i in range(images.shape[0]):
            xt = schedule.signal(t) * images[i] + schedule.noise(t) * eps_all[i]
            f = _stage_features(teacher, xt, t, stage)
            n = noise_feats[i]
            c = fit_scalar_coefficient(f, n)
            frac_noise = explained_fraction(f, c * n)
            residual = f - c * n
            g = clean_feats[i]
            if float(residual @ residual) > 0:
                c2 = fit_scalar_coefficient(residual, g)
                frac_clean = explained_fraction(residual, c2 * g)
            else:
                frac_clean = 1.0
            fn.append(frac_noise)
            fc.append(frac_clean)
            fu.append(max(0.0, (1.0 - frac_noise) * (1.0 - frac_clean)))
        report.rows.append({
            "t": int(t),
            "fraction_noise": float(np.mean(fn)),
            "fraction_clean_of_residual": float(np.mean(fc)),
            "fraction_unexplained": float(np.mean(fu)),
            "n_images": int(images.shape[0]),
        })
    return report


def write_variance_csv(path: str, report: VarianceReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "fraction_noise", "fraction_clean_of_residual",
                         "fraction_unexplained", "n_images"])
        for r in report.rows:
            writer.writerow([r["t"], f"{r['fraction_noise']:.6f}",
                             f"{r['fraction_clean_of_residual']:.6f}",
                             f"{r['fraction_unexplained']:.6f}", r["n_images"]])
