"""Noise schedule, forward noising, the noise-prediction loss and two samplers.

Timesteps are 1-based throughout: ``t`` runs from 1 (almost clean) to ``T``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar"):
            arr = getattr(self, name)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have length T={self.T}")

    def check_t(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def abar(self, t) -> np.ndarray:
        """alpha_bar at 1-based timestep(s) ``t``."""
        return self.alpha_bar[np.asarray(t) - 1]


def make_schedule(T: int = 200, kind: str = "linear", beta_min: float | None = None,
                  beta_max: float | None = None) -> DiffusionSchedule:
    """Linear beta schedule.

    When bounds are omitted they default to ``[1e-4, 0.02]`` rescaled by
    ``1000 / T`` so that short schedules still end close to pure noise.
    """
    if kind != "linear":
        raise ValueError(f"only the linear schedule is available, got {kind!r}")
    if T < 1:
        raise ValueError("T must be at least 1")
    rescale = 1000.0 / T
    beta_min = 1e-4 * rescale if beta_min is None else beta_min
    beta_max = min(0.02 * rescale, 0.999) if beta_max is None else beta_max
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64) if T > 1 else np.array([beta_min])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(T, beta, alpha, alpha_bar)


def _shape_check(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_diffuse(z0, t, epsilon, sched: DiffusionSchedule):
    """``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * epsilon``.

    ``t`` may be an int or, for batched ``z0`` of shape ``(B, ...)``, an
    integer array of length ``B``. Accepts tensors or arrays and returns the
    same kind.
    """
    zv = z0.data if isinstance(z0, Tensor) else np.asarray(z0)
    ev = epsilon.data if isinstance(epsilon, Tensor) else np.asarray(epsilon)
    _shape_check(zv, ev, "forward_diffuse")
    t_arr = np.asarray(t)
    if ((t_arr < 1) | (t_arr > sched.T)).any():
        raise ValueError(f"timestep outside [1, {sched.T}]")
    ab = sched.abar(t_arr)
    if t_arr.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (zv.ndim - 1))
    out = np.sqrt(ab) * zv + np.sqrt(1.0 - ab) * ev
    out = out.astype(zv.dtype, copy=False)
    return Tensor(out) if isinstance(z0, Tensor) else out


def diffusion_loss(epsilon, epsilon_hat: Tensor) -> Tensor:
    """Mean squared error between true and predicted noise."""
    eps = epsilon if isinstance(epsilon, Tensor) else Tensor(epsilon)
    _shape_check(eps, epsilon_hat, "diffusion_loss")
    return T.mean(T.square(T.sub(epsilon_hat, eps)))


def ddpm_step(z_t: np.ndarray, t: int, epsilon_hat: np.ndarray, sched: DiffusionSchedule,
              noise: np.ndarray | None) -> np.ndarray:
    """One ancestral step from ``t`` to ``t - 1`` with ``sigma_t^2 = beta_t``."""
    sched.check_t(t)
    beta = sched.beta[t - 1]
    alpha = sched.alpha[t - 1]
    abar = sched.alpha_bar[t - 1]
    mean = (z_t - (beta / np.sqrt(1.0 - abar)) * epsilon_hat) / np.sqrt(alpha)
    if t == 1 or noise is None:
        return mean
    return mean + np.sqrt(beta) * noise


Denoiser = Callable[[np.ndarray, np.ndarray], np.ndarray]


def ddim_timesteps(T_: int, steps: int) -> np.ndarray:
    """Descending, strictly monotone sub-sequence of ``1..T`` with ``steps`` entries."""
    if steps < 1 or steps > T_:
        raise ValueError(f"steps must lie in [1, {T_}], got {steps}")
    if steps == 1:
        return np.array([T_])
    return np.unique(np.round(np.linspace(1, T_, steps)).astype(int))[::-1]


def ddim_sample(zT, model: Callable, cond, sched: DiffusionSchedule, steps: int,
                clip_x0: float | None = None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM sampling.

    ``model(z_t, t_batch, cond)`` returns predicted noise as an array of the
    same shape. The chain ends at the predicted clean sample.
    """
    z = np.asarray(zT.data if isinstance(zT, Tensor) else zT, dtype=np.float64)
    ts = ddim_timesteps(sched.T, steps)
    batch = z.shape[0]
    for i, t in enumerate(ts):
        eps = np.asarray(model(z, np.full(batch, t, dtype=np.int64), cond), dtype=np.float64)
        ab = sched.alpha_bar[t - 1]
        x0 = (z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        if clip_x0 is not None:
            x0 = np.clip(x0, -clip_x0, clip_x0)
        if i + 1 == len(ts):
            z = x0
            break
        ab_prev = sched.alpha_bar[ts[i + 1] - 1]
        z = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps
    return z


def ddpm_sample(zT, model: Callable, cond, sched: DiffusionSchedule,
                rng: np.random.Generator) -> np.ndarray:
    """Full ancestral sampling over all ``T`` steps."""
    z = np.asarray(zT.data if isinstance(zT, Tensor) else zT, dtype=np.float64)
    batch = z.shape[0]
    for t in range(sched.T, 0, -1):
        eps = np.asarray(model(z, np.full(batch, t, dtype=np.int64), cond), dtype=np.float64)
        noise = rng.standard_normal(z.shape) if t > 1 else None
        z = ddpm_step(z, t, eps, sched, noise)
    return z
