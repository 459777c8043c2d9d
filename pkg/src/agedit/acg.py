"""Latent-space age guidance: a frozen clean-image age probe and a tiny head
that reads age off a noisy latent and the predicted noise.

Both networks report ages in years but work internally on a normalised
scale, ``age = AGE_OFFSET + AGE_SPAN * raw``, so that their weights stay O(1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Adam, Embedding, Linear, MLP, Module
from .tensor import Tensor

AGE_OFFSET = 43.0
AGE_SPAN = 42.0


def _to_years(raw: Tensor) -> Tensor:
    return T.add(T.scale(raw, AGE_SPAN), AGE_OFFSET)


class ACGHead(Module):
    """Age regressor over ``[pool(z_t) | pool(eps_hat) | time embedding]``.

    Both latents are average-pooled by ``pool`` (16x16 -> 4x4 by default),
    concatenated with a learned per-timestep embedding and fed to a one
    hidden layer MLP.
    """

    def __init__(self, T_: int = 200, image_size: int = 16, pool: int = 4, d_t: int = 8,
                 hidden: int = 32, seed: int = 0, zero: bool = False):
        rng = np.random.default_rng(seed)
        self._T = T_
        self._pool = pool
        self._image_size = image_size
        cells = (image_size // pool) ** 2
        self.time_embedding = Embedding(T_, d_t, rng, std=0.1)
        self.mlp = MLP(2 * cells + d_t, hidden, 1, rng, zero_out=True)
        if zero:
            for p in self.parameters():
                p.data[...] = 0.0

    @property
    def T(self) -> int:
        return self._T

    def __call__(self, z_t, t, epsilon_hat) -> Tensor:
        return acg_forward(self, z_t, t, epsilon_hat)


def acg_forward(head: ACGHead, z_t, t, epsilon_hat) -> Tensor:
    """Age estimate in years, shape ``(B,)``, from ``(z_t, t, eps_hat)`` only.

    Differentiable in the head weights and in ``epsilon_hat``.
    """
    z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=head.mlp.fc1.weight.dtype))
    e = epsilon_hat if isinstance(epsilon_hat, Tensor) else Tensor(np.asarray(epsilon_hat, dtype=z.dtype))
    if z.shape != e.shape:
        raise ValueError(f"z_t shape {z.shape} differs from epsilon_hat shape {e.shape}")
    if z.ndim != 4 or z.shape[2] != head._image_size:
        raise ValueError(f"expected latents of shape (B, 1, {head._image_size}, {head._image_size})")
    b = z.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
    if ((t < 1) | (t > head.T)).any():
        raise ValueError(f"timestep outside [1, {head.T}]")
    pz = T.reshape(T.avg_pool_last(z, head._pool), (b, -1))
    pe = T.reshape(T.avg_pool_last(e, head._pool), (b, -1))
    temb = head.time_embedding(t - 1)
    raw = head.mlp(T.concat([pz, pe, temb], axis=1))
    return _to_years(T.reshape(raw, (b,)))


class AgeProbe(Module):
    """Clean-image age regressor, frozen after :func:`train_age_probe`."""

    def __init__(self, image_size: int = 16, hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self._n_in = image_size * image_size
        self.mlp = MLP(self._n_in, hidden, 1, rng, zero_out=True)
        self._frozen = False
        self.val_mae: float | None = None
        self.baseline_mae: float | None = None

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "AgeProbe":
        super().freeze()
        self._frozen = True
        return self

    def __call__(self, z0) -> Tensor:
        x = z0 if isinstance(z0, Tensor) else Tensor(np.asarray(z0, dtype=self.mlp.fc1.weight.dtype))
        b = x.shape[0]
        return _to_years(T.reshape(self.mlp(T.reshape(x, (b, self._n_in))), (b,)))

    def predict(self, z0) -> np.ndarray:
        with T.no_tape():
            return self(z0).data.astype(np.float64)


class ProbeTrainingError(RuntimeError):
    """The probe failed to beat the constant-mean predictor on held-out data."""


@dataclass
class ProbeReport:
    val_mae: float
    baseline_mae: float
    steps: int


def train_age_probe(images, ages, steps: int = 1500, batch: int = 128, lr: float = 3e-3,
                    val_fraction: float = 0.2, seed: int = 0) -> AgeProbe:
    """Fit, validate and freeze an :class:`AgeProbe` on ``(image, age)`` pairs.

    The held-out MAE and the MAE of the training-mean predictor on the same
    split are stored on the probe. Raises :class:`ProbeTrainingError` when the
    probe is not better than that baseline (ties count as failures, except
    for constant targets where both are zero).
    """
    images = np.asarray(images, dtype=np.float32)
    ages = np.asarray(ages, dtype=np.float64)
    n = len(ages)
    if n < 2:
        raise ValueError("need at least two examples")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    val, tr = order[:n_val], order[n_val:]
    probe = AgeProbe(image_size=images.shape[-1], seed=seed)
    mean_age = float(ages[tr].mean())
    probe.mlp.fc2.bias.data[...] = (mean_age - AGE_OFFSET) / AGE_SPAN
    opt = Adam(probe.parameters(), lr=lr)
    target = ((ages - AGE_OFFSET) / AGE_SPAN).astype(np.float32)
    for _ in range(steps):
        idx = tr[rng.integers(0, len(tr), min(batch, len(tr)))]
        with T.Tape() as tape:
            x = Tensor(images[idx].reshape(len(idx), -1))
            raw = T.reshape(probe.mlp(x), (len(idx),))
            loss = T.mean(T.square(T.sub(raw, Tensor(target[idx]))))
            tape.backward(loss)
        opt.step()
        opt.zero_grad()
    probe.val_mae = float(np.abs(probe.predict(images[val]) - ages[val]).mean())
    probe.baseline_mae = float(np.abs(mean_age - ages[val]).mean())
    probe.freeze()
    if probe.val_mae >= probe.baseline_mae and probe.baseline_mae > 1e-6:
        raise ProbeTrainingError(f"probe held-out MAE {probe.val_mae:.3f} does not beat the "
                                 f"mean predictor ({probe.baseline_mae:.3f})")
    return probe


def age_loss(target_age, acg_pred) -> Tensor:
    """Batch mean of ``(target - pred)^2``; the target carries no gradient."""
    pred = acg_pred if isinstance(acg_pred, Tensor) else Tensor(np.asarray(acg_pred, dtype=np.float64))
    tgt = target_age.data if isinstance(target_age, Tensor) else np.asarray(target_age)
    tgt = np.broadcast_to(tgt, pred.shape).astype(pred.dtype)
    return T.mean(T.square(T.sub(pred, Tensor(tgt))))


def total_loss(l_diffusion: Tensor, l_age: Tensor, lam: float) -> Tensor:
    """``l_diffusion + lam * l_age``."""
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0:
        raise ValueError(f"lambda must be a finite non-negative number, got {lam}")
    if lam == 0.0:
        return l_diffusion
    return T.add(l_diffusion, T.scale(l_age, lam))
