"""Feature consolidation: train a student copy of the teacher on clean images
so that, after point-wise timestep-conditioned projection heads, its features
align with the teacher's noisy-input features across the whole noise range."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Denoiser, FeatureStack, param_checksum, timestep_embedding
from .container import load_container, save_container
from .schedule import NoiseSchedule, sample_stratified_timesteps

COSINE_EPS = 1e-8

# The student is fed the clean image only; its timestep pathway (kept so the
# copied weights stay valid) always receives this constant.
STUDENT_TIMESTEP = 0


@dataclass
class AlignmentConfig:
    metric: str = "cosine"  # cosine | l2 | l1
    use_heads: bool = True
    bins: int = 3  # stratification bins per image
    steps: int = 1200
    batch_size: int = 8
    learning_rate: float = 1e-4
    warmup_steps: int = 100
    head_conditioning: str = "film"  # film | adarms
    head_gating: str = "swiglu"  # swiglu | swish
    head_pretraining: str = "none"  # none | joint | frozen_after_pretrain
    head_pretrain_steps: int = 200
    stage_weights: tuple[float, ...] | None = None

    def validate(self) -> None:
        if self.metric not in ("cosine", "l2", "l1"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.head_conditioning not in ("film", "adarms"):
            raise ValueError(f"unknown conditioning {self.head_conditioning!r}")
        if self.head_gating not in ("swiglu", "swish"):
            raise ValueError(f"unknown gating {self.head_gating!r}")
        if self.head_pretraining not in ("none", "joint", "frozen_after_pretrain"):
            raise ValueError(f"unknown pretraining mode {self.head_pretraining!r}")
        if self.steps < 0 or self.bins < 1 or self.learning_rate <= 0:
            raise ValueError("steps >= 0, bins >= 1 and learning_rate > 0 required")


class HeadBlock(nn.Module):
    """One point-wise FFN block. Conditioning is FiLM ((1+scale)*h + shift,
    zero-initialized so zero modulation is the identity) or adaptive RMS
    normalization; activation is SwiGLU gating or plain Swish."""

    def __init__(self, channels: int, t_dim: int, conditioning: str, gating: str):
        super().__init__()
        self.conditioning = conditioning
        self.gating = gating
        hidden = 2 * channels
        self.fc_in = nn.Conv2d(channels, 2 * hidden if gating == "swiglu" else hidden, 1)
        self.fc_out = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.fc_out.weight)
        nn.init.zeros_(self.fc_out.bias)
        self.cond = nn.Linear(t_dim, 2 * channels)
        nn.init.zeros_(self.cond.weight)
        nn.init.zeros_(self.cond.bias)

    def forward(self, h: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.cond(t_emb)[:, :, None, None].chunk(2, dim=1)
        x = h
        if self.conditioning == "film":
            x = (1.0 + scale) * x + shift
        else:
            rms = x.pow(2).mean(dim=1, keepdim=True).add(1e-6).sqrt()
            x = x / rms * (1.0 + scale) + shift
        z = self.fc_in(x)
        if self.gating == "swiglu":
            a, g = z.chunk(2, dim=1)
            z = F.silu(a) * g
        else:
            z = F.silu(z)
        return h + self.fc_out(z)


class ProjectionHeads(nn.Module):
    """Per-stage stacks of 3 point-wise FFN blocks with a shared timestep
    embedding map. Each stage maps its channel width onto itself, so projected
    stacks stay shape-identical to the input."""

    def __init__(
        self,
        stage_channels: list[int],
        t_dim: int = 64,
        conditioning: str = "film",
        gating: str = "swiglu",
        blocks_per_stage: int = 3,
    ):
        super().__init__()
        self.stage_channels = list(stage_channels)
        self.t_dim = t_dim
        self.conditioning = conditioning
        self.gating = gating
        self.t_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.stages = nn.ModuleList(
            nn.ModuleList(
                HeadBlock(c, t_dim, conditioning, gating) for _ in range(blocks_per_stage)
            )
            for c in stage_channels
        )

    def forward(self, taps: list[torch.Tensor], t: torch.Tensor | int) -> list[torch.Tensor]:
        """taps: per-stage tensors [B, C, H, W]; t: int or [B] integer tensor."""
        if len(taps) != len(self.stages):
            raise ValueError(f"expected {len(self.stages)} stages, got {len(taps)}")
        for k, (tap, c) in enumerate(zip(taps, self.stage_channels)):
            if tap.shape[1] != c:
                raise ValueError(f"stage {k}: expected {c} channels, got {tap.shape[1]}")
        if isinstance(t, int):
            t = torch.full((taps[0].shape[0],), t, dtype=torch.long, device=taps[0].device)
        t_emb = self.t_mlp(timestep_embedding(t, self.t_dim).to(taps[0].dtype))
        out = []
        for blocks, tap in zip(self.stages, taps):
            h = tap
            for block in blocks:
                h = block(h, t_emb)
            out.append(h)
        return out


def init_heads(teacher: Denoiser, config: AlignmentConfig, seed: int = 0) -> ProjectionHeads:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        heads = ProjectionHeads(
            teacher.config.tap_channels(),
            t_dim=teacher.config.timestep_embed_dim,
            conditioning=config.head_conditioning,
            gating=config.head_gating,
        )
    return heads


def init_student_from_teacher(teacher: Denoiser) -> Denoiser:
    if teacher.role != "teacher_frozen":
        raise ValueError("teacher must be frozen before creating a student copy")
    student = copy.deepcopy(teacher)
    student.role = "student_trainable"
    for p in student.parameters():
        p.requires_grad_(True)
    student.train()
    return student


def project_features(heads: ProjectionHeads, stack: FeatureStack, t: int) -> FeatureStack:
    """Project a single-image FeatureStack at timestep t."""
    taps = [v[None] for v in stack.tensors()]
    with torch.no_grad():
        out = heads(taps, int(t))
    prov = dict(stack.provenance)
    prov["projected_at_t"] = int(t)
    return FeatureStack(entries=[(k, o[0]) for k, o in enumerate(out)], provenance=prov)


def _stage_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean over batch and spatial positions of the per-position channel-vector
    cosine similarity; positions where either norm < 1e-8 contribute 0."""
    # Denominator as sqrt(|a|^2 * |b|^2): for bit-identical inputs IEEE sqrt of
    # a rounded square returns the square root exactly, so cosine is exactly 1.
    sa = a.pow(2).sum(dim=1)
    sb = b.pow(2).sum(dim=1)
    dot = (a * b).sum(dim=1)
    sim = (dot / (sa * sb).sqrt().clamp_min(COSINE_EPS**2)).clamp(-1.0, 1.0)
    alive = (sa > COSINE_EPS**2) & (sb > COSINE_EPS**2)
    sim = torch.where(alive, sim, torch.zeros_like(sim))
    return sim.mean()


def alignment_loss(
    projected: list[torch.Tensor] | FeatureStack,
    teacher_stack: list[torch.Tensor] | FeatureStack,
    metric: str = "cosine",
    stage_weights: list[float] | None = None,
) -> tuple[torch.Tensor, list[float]]:
    """Cosine: loss = -sum_k mean-position cosine similarity (in [-K, K]).
    l2 / l1: loss = sum_k mean element-wise squared / absolute error.
    Returns the scalar loss and per-stage mean cosine similarities for logging."""
    if isinstance(projected, FeatureStack):
        projected = [v[None] for v in projected.tensors()]
    if isinstance(teacher_stack, FeatureStack):
        teacher_stack = [v[None] for v in teacher_stack.tensors()]
    if len(projected) != len(teacher_stack):
        raise ValueError("stacks must have the same number of stages")
    for k, (a, b) in enumerate(zip(projected, teacher_stack)):
        if a.shape != b.shape:
            raise ValueError(f"stage {k}: shape {tuple(a.shape)} != {tuple(b.shape)}")
    if stage_weights is None:
        stage_weights = [1.0] * len(projected)
    loss = None
    sims = []
    for w, a, b in zip(stage_weights, projected, teacher_stack):
        sim = _stage_cosine(a, b)
        sims.append(float(sim.detach()))
        if metric == "cosine":
            term = -w * sim
        elif metric == "l2":
            term = w * (a - b).pow(2).mean()
        elif metric == "l1":
            term = w * (a - b).abs().mean()
        else:
            raise ValueError(f"unknown metric {metric!r}")
        loss = term if loss is None else loss + term
    return loss, sims


@dataclass
class DistillLog:
    losses: list[float] = field(default_factory=list)
    stage_sims: list[list[float]] = field(default_factory=list)  # per step, per stage
    bin_sims_start: list[float] = field(default_factory=list)  # held-out, per bin
    bin_sims_end: list[float] = field(default_factory=list)


def _warmup_lr(base: float, step: int, warmup: int) -> float:
    if warmup <= 0:
        return base
    return base * min(1.0, (step + 1) / warmup)


def heldout_bin_similarity(
    teacher: Denoiser,
    student: Denoiser,
    heads: ProjectionHeads,
    images: torch.Tensor,
    schedule: NoiseSchedule,
    bins: int,
    seed: int = 0,
) -> list[float]:
    """Mean per-stage cosine similarity between projected student features and
    teacher features, one value per stratification bin, on a fixed batch with
    fixed bin-center timesteps and seeded noise."""
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(images.shape, generator=gen, dtype=images.dtype)
    with torch.no_grad():
        _, student_taps = student(images, STUDENT_TIMESTEP, want_features=True)
    out = []
    for i in range(bins):
        t = int((i * schedule.T // bins + (i + 1) * schedule.T // bins) // 2)
        t = max(t, 1)
        a = float(schedule.alpha_bar[t])
        xt = math.sqrt(a) * images + math.sqrt(1 - a) * eps
        with torch.no_grad():
            _, teacher_taps = teacher(xt, t, want_features=True)
            projected = heads(student_taps, t)
        _, sims = alignment_loss(projected, teacher_taps, "cosine")
        out.append(float(np.mean(sims)))
    return out


def _distill_loop(
    teacher: Denoiser,
    student: Denoiser,
    heads: ProjectionHeads,
    images: torch.Tensor,
    schedule: NoiseSchedule,
    config: AlignmentConfig,
    seed: int,
    trainable: list[nn.Parameter],
    steps: int,
    train_student: bool,
) -> DistillLog:
    config.validate()
    if teacher.role != "teacher_frozen":
        raise ValueError("teacher must be frozen")
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(trainable, lr=config.learning_rate)
    log = DistillLog()
    sw = list(config.stage_weights) if config.stage_weights else None
    for step in range(steps):
        for group in opt.param_groups:
            group["lr"] = _warmup_lr(config.learning_rate, step, config.warmup_steps)
        idx = rng.integers(0, images.shape[0], size=config.batch_size)
        x0 = images[torch.as_tensor(idx)]
        if train_student:
            _, student_taps = student(x0, STUDENT_TIMESTEP, want_features=True)
        else:
            with torch.no_grad():
                _, student_taps = student(x0, STUDENT_TIMESTEP, want_features=True)
        # One stratified draw per image; fresh noise per (image, timestep).
        draws = np.stack(
            [
                sample_stratified_timesteps(config.bins, schedule.T, rng, t_min=1).timesteps
                for _ in range(config.batch_size)
            ]
        )  # [B, I]
        total = None
        sims_acc = np.zeros(len(student_taps))
        for i in range(config.bins):
            t = torch.as_tensor(draws[:, i])
            eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
            a = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[t][:, None, None, None]
            xt = a.sqrt() * x0 + (1 - a).sqrt() * eps
            with torch.no_grad():
                _, teacher_taps = teacher(xt, t, want_features=True)
            if config.use_heads:
                projected = heads(student_taps, t)
            else:
                projected = student_taps
            loss_i, sims = alignment_loss(projected, teacher_taps, config.metric, sw)
            if not torch.isfinite(loss_i):
                worst = int(np.argmin(sims))
                raise RuntimeError(
                    f"non-finite alignment loss at step {step}, stage {worst}"
                )
            total = loss_i if total is None else total + loss_i
            sims_acc += np.array(sims)
        opt.zero_grad()
        total.backward()
        opt.step()
        log.losses.append(float(total.detach()))
        log.stage_sims.append((sims_acc / config.bins).tolist())
    return log


def run_distillation(
    teacher: Denoiser,
    student: Denoiser,
    heads: ProjectionHeads,
    images: torch.Tensor,
    schedule: NoiseSchedule,
    config: AlignmentConfig,
    seed: int = 0,
    heldout: torch.Tensor | None = None,
) -> tuple[Denoiser, ProjectionHeads, DistillLog]:
    """Full consolidation run. Student (and heads, unless disabled or frozen
    after pretraining) receive Adam updates with linear warmup."""
    config.validate()
    if config.head_pretraining in ("joint", "frozen_after_pretrain"):
        pretrain_heads(teacher, student, heads, images, schedule, config, seed=seed + 7919)
    heads_trainable = config.use_heads and config.head_pretraining != "frozen_after_pretrain"
    for p in heads.parameters():
        p.requires_grad_(heads_trainable)
    trainable = list(student.parameters())
    if heads_trainable:
        trainable += list(heads.parameters())
    pre_bins = None
    if heldout is not None:
        pre_bins = heldout_bin_similarity(
            teacher, student, heads, heldout, schedule, config.bins, seed=seed
        )
    log = _distill_loop(
        teacher, student, heads, images, schedule, config, seed,
        trainable, config.steps, train_student=True,
    )
    if heldout is not None:
        log.bin_sims_start = pre_bins
        log.bin_sims_end = heldout_bin_similarity(
            teacher, student, heads, heldout, schedule, config.bins, seed=seed
        )
    student.eval()
    heads.eval()
    return student, heads, log


def pretrain_heads(
    teacher: Denoiser,
    student: Denoiser,
    heads: ProjectionHeads,
    images: torch.Tensor,
    schedule: NoiseSchedule,
    config: AlignmentConfig,
    seed: int = 0,
) -> DistillLog:
    """Train only the projection heads against a frozen student copy."""
    before = param_checksum(student)
    for p in heads.parameters():
        p.requires_grad_(True)
    log = _distill_loop(
        teacher, student, heads, images, schedule, config, seed,
        list(heads.parameters()), config.head_pretrain_steps, train_student=False,
    )
    assert param_checksum(student) == before, "student changed during head pretraining"
    return log


def save_heads(path: str, heads: ProjectionHeads, extra: dict | None = None) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in heads.state_dict().items()}
    meta = {
        "component": "heads",
        "stage_channels": heads.stage_channels,
        "t_dim": heads.t_dim,
        "conditioning": heads.conditioning,
        "gating": heads.gating,
    }
    meta.update(extra or {})
    save_container(path, tensors, meta)


def load_heads(path: str) -> ProjectionHeads:
    tensors, meta = load_container(path)
    heads = ProjectionHeads(
        meta["stage_channels"], t_dim=meta["t_dim"],
        conditioning=meta["conditioning"], gating=meta["gating"],
    )
    heads.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    heads.eval()
    return heads
