"""Patch-transformer noise predictor with multi-branch cross-attention."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .conditioning import (AttentionCapture, ConditionBundle, ConditionProjector, MultiCrossAttention,
                           project_conditions)
from .nn import LayerNorm, Linear, MLP, Module, param
from .tensor import Tensor
from .vocab import CAPTION_LEN


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    patch: int = 4
    d_model: int = 64
    d_txt: int = 64
    d_attn: int = 64
    n_blocks: int = 4
    ff_mult: int = 2
    m_id: int = 4
    m_age: int = 4
    d_id: int = 16
    d_age: int = 16
    T: int = 200
    enable_id_branch: bool = True
    enable_age_branch: bool = True

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def branches(self) -> tuple[str, ...]:
        out = ["text"]
        if self.enable_id_branch:
            out.append("id")
        if self.enable_age_branch:
            out += ["age", "c_age"]
        return tuple(out)

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_features(t, width: int, T_: int) -> np.ndarray:
    """Sinusoidal features of 1-based timesteps, shape ``(len(t), width)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = (t[:, None] * (1000.0 / T_)) * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class SelfAttention(Module):
    def __init__(self, d_model: int, rng: np.random.Generator):
        self.q = Linear(d_model, d_model, rng, bias=False)
        self.k = Linear(d_model, d_model, rng, bias=False)
        self.v = Linear(d_model, d_model, rng, bias=False)
        self.out = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        q, k, v = self.q(x), self.k(x), self.v(x)
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
        return self.out(T.matmul(T.softmax_rows(scores), v))


class Block(Module):
    """Pre-norm residual block: self-attention, multi-branch cross-attention, feed-forward."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.norm1 = LayerNorm(d)
        self.attn = SelfAttention(d, rng)
        self.norm2 = LayerNorm(d)
        self.cross = MultiCrossAttention(d, cfg.d_txt, cfg.d_attn, rng, branches=cfg.branches)
        self.norm3 = LayerNorm(d)
        self.ff = MLP(d, cfg.ff_mult * d, d, rng)

    def __call__(self, x, pc, capture=None, index=0):
        x = T.add(x, self.attn(self.norm1(x)))
        x = T.add(x, self.cross(self.norm2(x), pc, capture=capture, block=index))
        return T.add(x, self.ff(self.norm3(x)))


class DenoiserModel(Module):
    """Predicts the added noise from a noisy 1x16x16 image, a timestep and conditions.

    The image is cut into 4x4 patches (16 tokens), embedded, given learned
    positions and a timestep embedding, passed through the blocks and mapped
    back to patches by a zero-initialised head, so a fresh model predicts zero
    noise.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        p2 = cfg.patch * cfg.patch
        self.patch_embed = Linear(p2, cfg.d_model, rng)
        self.pos = param(rng.normal(0.0, 0.1, (cfg.n_tokens, cfg.d_model)))
        self.time_mlp = MLP(cfg.d_model, cfg.d_model, cfg.d_model, rng)
        self.cond = ConditionProjector(rng, cfg.d_id, cfg.d_age, cfg.d_txt, cfg.m_id, cfg.m_age, CAPTION_LEN)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_blocks)]
        self.norm_out = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, p2, rng, zero=True)

    @property
    def config(self) -> DenoiserConfig:
        return self._cfg

    def patchify(self, z: Tensor) -> Tensor:
        c = self._cfg
        g = c.image_size // c.patch
        b = z.shape[0]
        x = T.reshape(z, (b, g, c.patch, g, c.patch))
        x = T.transpose(x, (0, 1, 3, 2, 4))
        return T.reshape(x, (b, g * g, c.patch * c.patch))

    def unpatchify(self, x: Tensor) -> Tensor:
        c = self._cfg
        g = c.image_size // c.patch
        b = x.shape[0]
        x = T.reshape(x, (b, g, g, c.patch, c.patch))
        x = T.transpose(x, (0, 1, 3, 2, 4))
        return T.reshape(x, (b, 1, c.image_size, c.image_size))

    def __call__(self, z_t, t, bundle: ConditionBundle, capture: AttentionCapture | None = None) -> Tensor:
        return denoiser_forward(self, z_t, t, bundle, capture)

    def predict(self, z_t: np.ndarray, t, bundle: ConditionBundle,
                capture: AttentionCapture | None = None) -> np.ndarray:
        """Untracked forward on arrays (used by the samplers)."""
        with T.no_tape():
            return denoiser_forward(self, z_t, t, bundle, capture).data


def denoiser_forward(model: DenoiserModel, z_t, t, bundle: ConditionBundle,
                     capture: AttentionCapture | None = None) -> Tensor:
    cfg = model.config
    dtype = model.head.weight.dtype
    z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=dtype))
    if z.ndim != 4 or z.shape[1:] != (1, cfg.image_size, cfg.image_size):
        raise ValueError(f"expected latents of shape (B, 1, {cfg.image_size}, {cfg.image_size}), got {z.shape}")
    b = z.shape[0]
    t = np.broadcast_to(np.asarray(t), (b,))
    if ((t < 1) | (t > cfg.T)).any():
        raise ValueError("timestep out of range")
    if len(bundle) != b:
        raise ValueError("condition batch size differs from latent batch size")
    n, d = cfg.n_tokens, cfg.d_model
    x = model.patch_embed(model.patchify(z))
    x = T.add(x, T.broadcast_to(T.reshape(model.pos, (1, n, d)), (b, n, d)))
    temb = model.time_mlp(Tensor(timestep_features(t, d, cfg.T).astype(dtype)))
    x = T.add(x, T.broadcast_to(T.reshape(temb, (b, 1, d)), (b, n, d)))
    pc = project_conditions(bundle, model.cond)
    if capture is not None and capture.timestep is None:
        capture.timestep = int(t[0])
    for i, block in enumerate(model.blocks):
        x = block(x, pc, capture, i)
    return model.unpatchify(model.head(model.norm_out(x)))
