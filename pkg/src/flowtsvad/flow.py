# src/flowtsvad/flow.py
"""
Conditional flow matching on the optimal-transport path.

  z_t      = t·z1 + (1 − (1 − σ_min)·t)·z0
  u_target = (z1 − (1 − σ_min)·z_t) / (1 − (1 − σ_min)·t)

With σ_min = 0 the conditional field is the constant z1 − z0, so a perfectly
learned field is integrated exactly by any number of Euler steps.
"""
from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.flowtsvad import numerics
from src.flowtsvad.errors import ConfigError, DivergenceError, ShapeError

SOLVERS = ("euler", "midpoint")

Field = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class FlowConfig:
    sigma_min: float = 0.0
    steps: int = 2
    solver: str = "euler"

    def __post_init__(self):
        if not 0.0 <= self.sigma_min < 1.0:
            raise ConfigError(f"sigma_min must be in [0, 1), got {self.sigma_min}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}, got {self.solver!r}")


@dataclass
class PathSample:
    z_t: torch.Tensor
    u_target: torch.Tensor
    t: torch.Tensor


def _time_like(t: Union[float, torch.Tensor], z: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-item time (leading axes of z) against z."""
    t = torch.as_tensor(t, dtype=z.dtype)
    if t.dim() == 0:
        return t
    return t.reshape(*t.shape, *([1] * (z.dim() - t.dim())))


def sample_timestep(generator: torch.Generator, size=(), dtype=torch.float32) -> torch.Tensor:
    """Uniform on [0, 1)."""
    return torch.rand(size, generator=generator, dtype=dtype)


def sample_path(
    z1: torch.Tensor,
    t: Union[float, torch.Tensor],
    z0: torch.Tensor,
    config: Optional[FlowConfig] = None,
) -> PathSample:
    config = config or FlowConfig()
    if z1.shape != z0.shape:
        raise ShapeError(f"sample_path: z1 {tuple(z1.shape)} vs z0 {tuple(z0.shape)}")
    t_raw = torch.as_tensor(t, dtype=z1.dtype)
    if (t_raw >= 1.0).any() or (t_raw < 0.0).any():
        raise ShapeError("sample_path: t must lie in [0, 1)")
    tb = _time_like(t_raw, z1)
    shrink = 1.0 - config.sigma_min
    z_t = tb * z1 + (1.0 - shrink * tb) * z0
    u_target = (z1 - shrink * z_t) / (1.0 - shrink * tb)
    return PathSample(z_t=z_t, u_target=u_target, t=t_raw)


def cfm_loss(
    field: Field,
    z1: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    config: Optional[FlowConfig] = None,
    t: Optional[torch.Tensor] = None,
    z0: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Mean over batch items of ‖v(z_t, t) − u_target‖², summed over latent dims.

    z1 is B×...×k; one t per batch item (axis 0) and one z0 per latent are drawn
    unless supplied. Any conditioning is closed over by `field`.
    """
    if z1.dim() < 2 or len(z1) == 0:
        raise ShapeError(f"cfm_loss: need a non-empty batch, got shape {tuple(z1.shape)}")
    if t is None:
        t = sample_timestep(generator, (z1.shape[0],), dtype=z1.dtype)
    if z0 is None:
        z0 = torch.randn(z1.shape, generator=generator, dtype=z1.dtype)
    path = sample_path(z1, t, z0, config)
    v = field(path.z_t, path.t)
    if not torch.isfinite(v).all():
        raise DivergenceError("cfm_loss: vector field produced non-finite values")
    return numerics.squared_error_sum(v, path.u_target)


def integrate(
    field: Field,
    z0: torch.Tensor,
    config: Optional[FlowConfig] = None,
    return_trajectory: bool = False,
):
    """Fixed-step explicit solve of dz/dt = field(z, t) from t=0 to t=1."""
    config = config or FlowConfig()
    h = 1.0 / config.steps
    z = z0
    trajectory = [z0]
    for i in range(config.steps):
        t = torch.full(z.shape[:1], i * h, dtype=z.dtype)
        if config.solver == "euler":
            z = z + h * field(z, t)
        else:
            z_mid = z + 0.5 * h * field(z, t)
            z = z + h * field(z_mid, t + 0.5 * h)
        if not torch.isfinite(z).all():
            raise DivergenceError(f"integrate: non-finite state at step {i + 1}/{config.steps}")
        trajectory.append(z)
    if return_trajectory:
        return z, trajectory
    return z


# --------------------------
# toy transport
# --------------------------
class DenseField(nn.Module):
    """Two hidden layers on concat(z, t)."""

    def __init__(self, dim: int = 2, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(dim + 1, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, dim)

    def forward(self, z: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        tt = torch.as_tensor(t, dtype=z.dtype).expand(z.shape[:1]).unsqueeze(-1)
        h = F.silu(self.fc1(torch.cat([z, tt], dim=-1)))
        h = F.silu(self.fc2(h))
        return self.out(h)


def sample_gaussian_mixture(
    n: int, generator: torch.Generator, center: float = 2.0, dtype=torch.float32
) -> torch.Tensor:
    """Equal-weight mixture of N(±(c, c), I)."""
    sign = torch.randint(0, 2, (n, 1), generator=generator).to(dtype) * 2.0 - 1.0
    return sign * center + torch.randn((n, 2), generator=generator, dtype=dtype)
