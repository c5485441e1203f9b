"""Uniform feature-extraction API over teacher and student models:
clean/noisy/clean-control input modes, noise ensembling, sub-pixel point
sampling, pooling, projected-feature access, and a content-addressed on-disk
feature cache."""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import Denoiser, FeatureStack, param_checksum
from .consolidate import ProjectionHeads, STUDENT_TIMESTEP, project_features
from .container import load_container, save_container
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class ExtractionRequest:
    model_ref: str = "student"  # teacher | student
    input_mode: str = "clean_student"  # clean_student | noisy_teacher | clean_teacher
    t: int = 0
    noise_seed: int = 0
    stages: tuple[int, ...] | None = None  # None = all taps
    ensemble_n: int = 1

    def validate(self) -> None:
        if self.model_ref not in ("teacher", "student"):
            raise ValueError(f"unknown model_ref {self.model_ref!r}")
        if self.input_mode not in ("clean_student", "noisy_teacher", "clean_teacher"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if self.ensemble_n < 1:
            raise ValueError("ensemble_n must be >= 1")
        if self.ensemble_n > 1 and self.input_mode != "noisy_teacher":
            raise ValueError("noise ensembling only applies to noisy_teacher mode")

    def key_dict(self) -> dict:
        return {
            "model_ref": self.model_ref,
            "input_mode": self.input_mode,
            "t": self.t,
            "noise_seed": self.noise_seed,
            "stages": list(self.stages) if self.stages is not None else None,
            "ensemble_n": self.ensemble_n,
        }


class FeatureService:
    """Holds a teacher, a student and optional projection heads; serves
    FeatureStacks with optional disk caching. `forward_count` counts backbone
    forward passes for the reuse contracts."""

    def __init__(
        self,
        teacher: Denoiser,
        student: Denoiser | None,
        schedule: NoiseSchedule,
        heads: ProjectionHeads | None = None,
        cache_dir: str | None = None,
    ):
        self.teacher = teacher
        self.student = student
        self.schedule = schedule
        self.heads = heads
        self.cache_dir = cache_dir
        self.forward_count = 0
        self._checksums = {"teacher": param_checksum(teacher)}
        if student is not None:
            self._checksums["student"] = param_checksum(student)

    def _model(self, ref: str) -> Denoiser:
        model = self.teacher if ref == "teacher" else self.student
        if model is None:
            raise ValueError(f"no {ref} model loaded")
        return model

    def _single_stack(
        self, model: Denoiser, image: torch.Tensor, request: ExtractionRequest, seed: int
    ) -> tuple[list[torch.Tensor], dict]:
        t = int(request.t)
        if request.input_mode == "clean_student":
            x = image
            t = STUDENT_TIMESTEP
            prov = {"input": "clean", "t": t}
        elif request.input_mode == "clean_teacher":
            x = image
            prov = {"input": "clean", "t": t}
        else:
            gen = torch.Generator().manual_seed(seed)
            eps = torch.randn(image.shape, generator=gen, dtype=image.dtype)
            x = self.schedule.signal(t) * image + self.schedule.noise(t) * eps
            prov = {"input": "noisy", "t": t, "noise_seed": seed}
        with torch.no_grad():
            _, taps = model(x[None], t, want_features=True)
        self.forward_count += 1
        return [tap[0] for tap in taps], prov

    def _compute(self, request: ExtractionRequest, image: torch.Tensor) -> FeatureStack:
        model = self._model(request.model_ref)
        if request.input_mode == "clean_student" and request.model_ref != "student":
            raise ValueError("clean_student mode requires the student model")
        if request.input_mode != "clean_student" and request.model_ref != "teacher":
            raise ValueError(f"{request.input_mode} mode requires the teacher model")
        taps, prov = self._single_stack(model, image, request, request.noise_seed)
        if request.ensemble_n > 1:
            for j in range(1, request.ensemble_n):
                more, _ = self._single_stack(model, image, request, request.noise_seed + j)
                taps = [a + b for a, b in zip(taps, more)]
            taps = [a / request.ensemble_n for a in taps]
            prov["ensemble_n"] = request.ensemble_n
        entries = [(k, v) for k, v in enumerate(taps)]
        if request.stages is not None:
            entries = [(k, v) for k, v in entries if k in request.stages]
        return FeatureStack(entries=entries, provenance=prov)

    def extract(self, request: ExtractionRequest, image: torch.Tensor) -> FeatureStack:
        request.validate()
        if self.cache_dir is None:
            return self._compute(request, image)
        return self.cache_get_or_compute(request, image)

    # -- caching ------------------------------------------------------------

    def cache_key(self, request: ExtractionRequest, image: torch.Tensor) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(request.key_dict(), sort_keys=True).encode())
        h.update(image.detach().cpu().numpy().astype("<f4", copy=False).tobytes())
        h.update(self._checksums[request.model_ref].encode())
        return h.hexdigest()

    def cache_get_or_compute(self, request: ExtractionRequest, image: torch.Tensor) -> FeatureStack:
        key = self.cache_key(request, image)
        path = os.path.join(self.cache_dir, key + ".feat")
        if os.path.exists(path):
            try:
                tensors, meta = load_container(path)
                entries = [
                    (sid, torch.from_numpy(tensors[f"stage{sid}"]))
                    for sid in meta["stage_ids"]
                ]
                return FeatureStack(entries=entries, provenance=meta["provenance"])
            except Exception as exc:
                warnings.warn(f"corrupt cache entry {key}: {exc}; recomputing")
        stack = self._compute(request, image)
        tensors = {f"stage{sid}": v.detach().cpu().numpy() for sid, v in stack.entries}
        meta = {
            "component": "feature_cache",
            "request": request.key_dict(),
            "stage_ids": [sid for sid, _ in stack.entries],
            "provenance": stack.provenance,
        }
        save_container(path, tensors, meta)
        return stack

    # -- projected access ---------------------------------------------------

    def project_at_timestep(self, student_stack: FeatureStack, t: int) -> FeatureStack:
        if self.heads is None:
            raise ValueError("no projection heads loaded")
        return project_features(self.heads, student_stack, t)


def sample_at_point(feature_map: np.ndarray | torch.Tensor, u: float, v: float) -> np.ndarray:
    """Bilinear lookup of a [C, H, W] map at normalized coordinates
    (u, v) in [0, 1]^2, align-corners=false with edge clamping."""
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        raise ValueError(f"(u, v) = ({u}, {v}) outside [0, 1]^2")
    fm = feature_map.detach().cpu().numpy() if isinstance(feature_map, torch.Tensor) else np.asarray(feature_map)
    if not np.isfinite(fm).all():
        raise ValueError("non-finite feature map")
    _, h, w = fm.shape
    x = u * w - 0.5
    y = v * h - 0.5
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    fx = x - x0
    fy = y - y0
    xs = np.clip([x0, x0 + 1], 0, w - 1)
    ys = np.clip([y0, y0 + 1], 0, h - 1)
    top = fm[:, ys[0], xs[0]] * (1 - fx) + fm[:, ys[0], xs[1]] * fx
    bot = fm[:, ys[1], xs[0]] * (1 - fx) + fm[:, ys[1], xs[1]] * fx
    return top * (1 - fy) + bot * fy


def pool(stack: FeatureStack, stage_id: int, method: str = "mean") -> np.ndarray:
    """Spatially reduce one tapped map to a single channel vector."""
    fm = stack.array(stage_id)
    if method == "mean":
        return fm.mean(axis=(1, 2))
    if method == "max":
        return fm.max(axis=(1, 2))
    raise ValueError(f"unknown pooling method {method!r}")
