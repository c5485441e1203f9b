"""Small pixel-space U-Net denoiser trained from scratch as the frozen
feature-extraction teacher. Feature taps sit after the middle block and after
decoder blocks (the last two decoder blocks are never tapped); each tap emits
a group-normalized, read-only copy of the block output."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import load_container, save_container
from .schedule import NoiseSchedule, forward_noise


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    stage_multipliers: tuple[int, ...] = (1, 2, 2)
    timestep_embed_dim: int = 64

    @property
    def num_taps(self) -> int:
        # middle + coarsest decoder block + 2 per intermediate stage + 1 at the
        # finest stage (whose last two blocks stay untapped)
        s = len(self.stage_multipliers)
        return 1 + 1 + 2 * (s - 2) + 1

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.stage_multipliers)

    def tap_resolutions(self) -> list[int]:
        """Spatial size per tap, coarsest first."""
        s = len(self.stage_multipliers)
        coarse = self.image_size >> (s - 1)
        sizes = [coarse, coarse]
        for i in range(s - 2, 0, -1):
            sizes += [self.image_size >> i] * 2
        sizes.append(self.image_size)
        return sizes

    def tap_channels(self) -> list[int]:
        ch = self.stage_channels
        s = len(ch)
        out = [ch[-1], ch[-1]]
        for i in range(s - 2, 0, -1):
            out += [ch[i]] * 2
        out.append(ch[0])
        return out

    def validate(self) -> None:
        s = len(self.stage_multipliers)
        if s < 2:
            raise ValueError("need at least 2 resolution stages")
        if self.image_size % (1 << (s - 1)) != 0:
            raise ValueError("image_size must be divisible by 2^(stages-1)")
        if self.num_taps < 2:
            raise ValueError("need at least 2 taps")


@dataclass
class FeatureStack:
    """Ordered tapped feature maps from one forward pass, coarsest first."""

    entries: list[tuple[int, torch.Tensor]]  # (stage_id, values [C, H, W])
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [sid for sid, _ in self.entries]
        if ids != sorted(ids):
            raise ValueError("entries must be sorted by stage_id")
        sizes = [v.shape[-1] for _, v in self.entries]
        if any(a > b for a, b in zip(sizes, sizes[1:])):
            raise ValueError("spatial resolutions must be non-decreasing")
        for _, v in self.entries:
            if not torch.isfinite(v).all():
                raise ValueError("non-finite feature values")

    def __len__(self) -> int:
        return len(self.entries)

    def stage(self, stage_id: int) -> torch.Tensor:
        for sid, v in self.entries:
            if sid == stage_id:
                return v
        raise KeyError(f"no tap with stage_id {stage_id}")

    def tensors(self) -> list[torch.Tensor]:
        return [v for _, v in self.entries]

    def array(self, stage_id: int) -> np.ndarray:
        return self.stage(stage_id).detach().cpu().numpy()


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard sinusoidal embedding of integer timesteps, shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.device, torch.get_default_dtype())
    args = t.float().to(torch.get_default_dtype())[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


def _tap(h: torch.Tensor) -> torch.Tensor:
    # Normalized read-only copy; keeps tap statistics near zero mean so the
    # scalar-fit variance analysis is not dominated by shared activation offsets.
    return F.group_norm(h, min(8, h.shape[1]))


class Denoiser(nn.Module):
    """U-Net epsilon-predictor with `config.num_taps` feature taps."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.role = "student_trainable"
        ch = config.stage_channels
        s = len(ch)
        t_dim = config.timestep_embed_dim
        self.t_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.stem = nn.Conv2d(config.in_channels, ch[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList([ResBlock(ch[0], ch[0], t_dim)])
        self.downs = nn.ModuleList()
        for i in range(1, s):
            self.downs.append(nn.Conv2d(ch[i - 1], ch[i], 3, stride=2, padding=1))
            self.enc_blocks.append(ResBlock(ch[i], ch[i], t_dim))
        self.middle = ResBlock(ch[-1], ch[-1], t_dim)
        self.dec_coarse = ResBlock(2 * ch[-1], ch[-1], t_dim)
        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in range(s - 2, 0, -1):
            self.ups.append(nn.Conv2d(ch[i + 1], ch[i], 3, padding=1))
            self.dec_blocks.append(
                nn.ModuleList([ResBlock(2 * ch[i], ch[i], t_dim), ResBlock(ch[i], ch[i], t_dim)])
            )
        self.up_fine = nn.Conv2d(ch[1], ch[0], 3, padding=1)
        self.dec_fine = nn.ModuleList(
            [ResBlock(2 * ch[0], ch[0], t_dim), ResBlock(ch[0], ch[0], t_dim),
             ResBlock(ch[0], ch[0], t_dim)]
        )
        self.out_norm = nn.GroupNorm(min(8, ch[0]), ch[0])
        self.out_conv = nn.Conv2d(ch[0], config.in_channels, 3, padding=1)

    def forward(
        self, x: torch.Tensor, t: torch.Tensor | int, want_features: bool = False
    ) -> tuple[torch.Tensor, list[torch.Tensor] | None]:
        """x: [B, C, H, W]; t: int or [B] integer tensor. Returns epsilon
        prediction and, when requested, the tap tensors (coarsest first)."""
        if x.shape[-1] != self.config.image_size or x.shape[-2] != self.config.image_size:
            raise ValueError(f"expected {self.config.image_size}px square input, got {tuple(x.shape)}")
        if isinstance(t, int):
            t = torch.full((x.shape[0],), t, dtype=torch.long, device=x.device)
        t_emb = self.t_mlp(timestep_embedding(t, self.config.timestep_embed_dim).to(x.dtype))
        taps: list[torch.Tensor] = []
        skips = []
        h = self.stem(x)
        h = self.enc_blocks[0](h, t_emb)
        skips.append(h)
        for down, block in zip(self.downs, self.enc_blocks[1:]):
            h = down(h)
            h = block(h, t_emb)
            skips.append(h)
        h = self.middle(h, t_emb)
        if want_features:
            taps.append(_tap(h))
        h = self.dec_coarse(torch.cat([h, skips[-1]], dim=1), t_emb)
        if want_features:
            taps.append(_tap(h))
        level = len(skips) - 2
        for up, (block_a, block_b) in zip(self.ups, self.dec_blocks):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block_a(torch.cat([h, skips[level]], dim=1), t_emb)
            if want_features:
                taps.append(_tap(h))
            h = block_b(h, t_emb)
            if want_features:
                taps.append(_tap(h))
            level -= 1
        h = self.up_fine(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec_fine[0](torch.cat([h, skips[0]], dim=1), t_emb)
        if want_features:
            taps.append(_tap(h))
        h = self.dec_fine[1](h, t_emb)
        h = self.dec_fine[2](h, t_emb)
        eps = self.out_conv(F.silu(self.out_norm(h)))
        return eps, (taps if want_features else None)


def init_denoiser(config: BackboneConfig, seed: int) -> Denoiser:
    """Deterministic initialization: same seed gives bit-identical parameters."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = Denoiser(config)
    return model


def extract_stack(
    model: Denoiser, image: torch.Tensor, t: int, provenance: dict | None = None
) -> FeatureStack:
    """Single-image feature extraction; image is [C, H, W]."""
    with torch.no_grad():
        _, taps = model(image[None], int(t), want_features=True)
    entries = [(k, tap[0]) for k, tap in enumerate(taps)]
    prov = dict(provenance or {})
    prov.setdefault("t", int(t))
    return FeatureStack(entries=entries, provenance=prov)


def param_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype("<f4", copy=False).tobytes())
    return h.hexdigest()


@dataclass
class TeacherTrainConfig:
    steps: int = 1200
    batch_size: int = 16
    learning_rate: float = 2e-3


def train_teacher(
    images: torch.Tensor,
    schedule: NoiseSchedule,
    train_config: TeacherTrainConfig,
    seed: int = 0,
    model: Denoiser | None = None,
) -> tuple[Denoiser, list[float]]:
    """Train an epsilon-predictor on `images` [N, C, H, W] and return it frozen.
    Timesteps are drawn uniformly from [1, T]; t=0 is never trained."""
    if images.shape[0] == 0:
        raise ValueError("empty training dataset")
    if model is None:
        model = init_denoiser(
            BackboneConfig(image_size=images.shape[-1], in_channels=images.shape[1]), seed
        )
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=images.dtype)
    loss_curve: list[float] = []
    model.train()
    for step in range(train_config.steps):
        idx = rng.integers(0, images.shape[0], size=train_config.batch_size)
        x0 = images[torch.as_tensor(idx)]
        t = torch.as_tensor(rng.integers(1, schedule.T + 1, size=train_config.batch_size))
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        a = ab[t][:, None, None, None]
        xt = a.sqrt() * x0 + (1 - a).sqrt() * eps
        pred, _ = model(xt, t)
        loss = F.mse_loss(pred, eps)
        if not torch.isfinite(loss):
            raise RuntimeError(f"teacher training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        loss_curve.append(float(loss.detach()))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.role = "teacher_frozen"
    return model, loss_curve


def sample_images(
    model: Denoiser, schedule: NoiseSchedule, n: int, steps: int = 16, seed: int = 0
) -> torch.Tensor:
    """Minimal ancestral sampler used only as a training sanity check; final
    images are clamped to [-1.5, 1.5]."""
    gen = torch.Generator().manual_seed(seed)
    cfg = model.config
    x = torch.randn(n, cfg.in_channels, cfg.image_size, cfg.image_size, generator=gen)
    ts = np.linspace(schedule.T, 1, steps).round().astype(int)
    ab = schedule.alpha_bar
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps_pred, _ = model(x, int(t))
            a_t, a_prev = ab[t], ab[t_prev]
            x0_hat = ((x - math.sqrt(1 - a_t) * eps_pred) / math.sqrt(a_t)).clamp(-1.5, 1.5)
            x = math.sqrt(a_prev) * x0_hat + math.sqrt(1 - a_prev) * eps_pred
    return x.clamp(-1.5, 1.5)


def held_out_eps_loss(
    model: Denoiser, images: torch.Tensor, schedule: NoiseSchedule, t: int, seed: int = 0
) -> float:
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(images.shape, generator=gen, dtype=images.dtype)
    xt = forward_noise(images, eps, t, schedule).xt
    with torch.no_grad():
        pred, _ = model(xt, int(t))
    return float(F.mse_loss(pred, eps))


def save_denoiser(path: str, model: Denoiser, schedule: NoiseSchedule, extra: dict | None = None) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "component": "denoiser",
        "role": model.role,
        "backbone_config": asdict(model.config),
        "schedule": {"T": schedule.T, "alpha_bar": schedule.alpha_bar.tolist()},
    }
    meta.update(extra or {})
    save_container(path, tensors, meta)


def load_denoiser(path: str) -> tuple[Denoiser, NoiseSchedule]:
    tensors, meta = load_container(path)
    cfg_dict = dict(meta["backbone_config"])
    cfg_dict["stage_multipliers"] = tuple(cfg_dict["stage_multipliers"])
    model = Denoiser(BackboneConfig(**cfg_dict))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.role = meta["role"]
    if model.role == "teacher_frozen":
        for p in model.parameters():
            p.requires_grad_(False)
    model.eval()
    sched_meta = meta["schedule"]
    schedule = NoiseSchedule(T=sched_meta["T"], alpha_bar=np.array(sched_meta["alpha_bar"]))
    return model, schedule
