"""Condition projection and decoupled multi-branch cross-attention.

Image tokens attend to four condition streams in parallel: caption tokens
(the unweighted base term), projected identity tokens, projected age tokens and
the age-phrase tokens. Each branch has its own key/value projections and its
own softmax; the weighted branch outputs are summed before one shared output
projection::

    out = W_o (Attn(Q, K_text, V_text) + sum_i lambda_i Attn(Q, K_i, V_i)) + b_o
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Embedding, Linear, Module, param
from .tensor import Tensor
from .vocab import AGE_RANGE, embed_age_phrase, vocab_size

BRANCHES = ("text", "id", "age", "c_age")
WEIGHTED_BRANCHES = ("id", "age", "c_age")


@dataclass
class ConditionBundle:
    """Conditioning for a batch. Single examples use leading batch size 1."""

    caption_tokens: np.ndarray
    age_phrase_tokens: np.ndarray
    id_embedding: np.ndarray
    age_embedding: np.ndarray
    age_value: np.ndarray

    def __post_init__(self):
        self.caption_tokens = np.atleast_2d(np.asarray(self.caption_tokens, dtype=np.int64))
        self.age_phrase_tokens = np.atleast_2d(np.asarray(self.age_phrase_tokens, dtype=np.int64))
        self.id_embedding = np.atleast_2d(np.asarray(self.id_embedding, dtype=np.float64))
        self.age_embedding = np.atleast_2d(np.asarray(self.age_embedding, dtype=np.float64))
        self.age_value = np.atleast_1d(np.asarray(self.age_value, dtype=np.int64))
        norms = np.linalg.norm(self.id_embedding, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("id_embedding must have unit norm")
        if ((self.age_value < AGE_RANGE[0]) | (self.age_value > AGE_RANGE[1])).any():
            raise ValueError("age_value outside [1, 85]")
        n = len(self.age_value)
        for name in ("caption_tokens", "age_phrase_tokens", "id_embedding", "age_embedding"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} batch size differs from age_value")

    def __len__(self) -> int:
        return len(self.age_value)

    def take(self, index) -> "ConditionBundle":
        return ConditionBundle(self.caption_tokens[index], self.age_phrase_tokens[index],
                               self.id_embedding[index], self.age_embedding[index], self.age_value[index])

    def repeat(self, n: int) -> "ConditionBundle":
        return self.take(np.repeat(np.arange(len(self)), n))

    @classmethod
    def build(cls, caption_tokens, id_embedding, age_embedding, ages) -> "ConditionBundle":
        ages = np.atleast_1d(ages)
        phrases = np.stack([embed_age_phrase(a) for a in ages])
        return cls(caption_tokens, phrases, id_embedding, age_embedding, ages)


@dataclass
class ProjectedConditions:
    text_tokens: Tensor
    id_tokens: Tensor
    age_tokens: Tensor
    age_phrase_embeds: Tensor

    def __post_init__(self):
        widths = {t.shape[-1] for t in (self.text_tokens, self.id_tokens, self.age_tokens, self.age_phrase_embeds)}
        if len(widths) != 1:
            raise ValueError("all condition token matrices must share the text width")

    def branch(self, name: str) -> Tensor:
        return {"text": self.text_tokens, "id": self.id_tokens, "age": self.age_tokens,
                "c_age": self.age_phrase_embeds}[name]


class ConditionProjector(Module):
    """Token embedding table shared by caption and age phrase, plus separate
    identity and age projections (affine map followed by SiLU)."""

    def __init__(self, rng: np.random.Generator, d_id: int = 16, d_age: int = 16, d_txt: int = 64,
                 m_id: int = 4, m_age: int = 4, caption_len: int = 12):
        self.token_embedding = Embedding(vocab_size(), d_txt, rng, std=0.5)
        self.caption_pos = param(rng.normal(0.0, 0.1, (caption_len, d_txt)))
        self.id_proj = Linear(d_id, m_id * d_txt, rng)
        self.age_proj = Linear(d_age, m_age * d_txt, rng)
        self._dims = (d_id, d_age, d_txt, m_id, m_age)

    def __call__(self, bundle: ConditionBundle) -> ProjectedConditions:
        return project_conditions(bundle, self)


def project_conditions(bundle: ConditionBundle, weights: ConditionProjector) -> ProjectedConditions:
    d_id, d_age, d_txt, m_id, m_age = weights._dims
    if bundle.id_embedding.shape[1] != d_id or bundle.age_embedding.shape[1] != d_age:
        raise ValueError("embedding dimensions do not match the projection weights")
    dtype = weights.id_proj.weight.dtype
    b = len(bundle)
    text = weights.token_embedding(bundle.caption_tokens)
    L = bundle.caption_tokens.shape[1]
    if L != weights.caption_pos.shape[0]:
        raise ValueError(f"caption length {L} != {weights.caption_pos.shape[0]}")
    text = T.add(text, T.broadcast_to(T.reshape(weights.caption_pos, (1, L, d_txt)), (b, L, d_txt)))
    phrase = weights.token_embedding(bundle.age_phrase_tokens)
    e_id = Tensor(bundle.id_embedding.astype(dtype))
    e_age = Tensor(bundle.age_embedding.astype(dtype))
    id_tokens = T.reshape(T.silu(weights.id_proj(e_id)), (b, m_id, d_txt))
    age_tokens = T.reshape(T.silu(weights.age_proj(e_age)), (b, m_age, d_txt))
    return ProjectedConditions(text, id_tokens, age_tokens, phrase)


@dataclass
class AttentionCapture:
    """Collects per-block, per-branch softmax weights during a forward pass."""

    enabled: bool = True
    timestep: int | None = None
    maps: list[dict] = field(default_factory=list)

    def add(self, block: int, branch: str, weights: np.ndarray, values: np.ndarray,
            outputs: np.ndarray | None = None) -> None:
        """Store softmax weights, per-key value norms and per-query output norms."""
        if self.enabled:
            self.maps.append({"block": block, "branch": branch, "weights": weights.copy(),
                              "value_norms": np.linalg.norm(values, axis=-1),
                              "output_norms": None if outputs is None else np.linalg.norm(outputs, axis=-1),
                              "timestep": self.timestep})


class MultiCrossAttention(Module):
    """Single-head cross-attention with one key/value projection pair per branch."""

    def __init__(self, d_model: int, d_txt: int, d_attn: int, rng: np.random.Generator,
                 branches=BRANCHES):
        self.q = Linear(d_model, d_attn, rng, bias=False)
        self.kv = {name: _KV(d_txt, d_attn, rng) for name in branches}
        self.out = Linear(d_attn, d_model, rng)
        self._scales = {name: 1.0 for name in WEIGHTED_BRANCHES}
        self._d_attn = d_attn

    @property
    def scales(self) -> dict[str, float]:
        return dict(self._scales)

    def __call__(self, x: Tensor, pc: ProjectedConditions, capture: AttentionCapture | None = None,
                 block: int = 0, return_branches: bool = False):
        return multi_cross_attention(x, pc, self, capture=capture, block=block,
                                     return_branches=return_branches)


class _KV(Module):
    def __init__(self, d_txt, d_attn, rng):
        self.k = Linear(d_txt, d_attn, rng, bias=False)
        self.v = Linear(d_txt, d_attn, rng, bias=False)


def attend(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns ``(output, softmax weights)``."""
    d = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    w = T.softmax_rows(scores)
    return T.matmul(w, v), w


def multi_cross_attention(x: Tensor, pc: ProjectedConditions, params: MultiCrossAttention,
                          capture: AttentionCapture | None = None, block: int = 0,
                          return_branches: bool = False):
    """Apply the multi-branch attention to image tokens ``x`` of shape ``(B, n, d_model)``.

    With ``return_branches`` the per-branch contributions before the output
    projection (already multiplied by their scale) are returned as well.
    """
    if x.shape[-1] != params.q.weight.shape[0]:
        raise ValueError("query width does not match the attention parameters")
    if "text" not in params.kv:
        raise ValueError("the text branch is required")
    q = params.q(x)
    total = None
    parts = {}
    for name in BRANCHES:
        if name not in params.kv:
            continue
        lam = 1.0 if name == "text" else params._scales[name]
        tokens = pc.branch(name)
        if tokens.shape[-2] == 0:
            if lam != 0.0:
                raise ValueError(f"branch {name!r} has no tokens but a nonzero scale")
            continue
        if tokens.shape[-1] != params.kv[name].k.weight.shape[0]:
            raise ValueError(f"branch {name!r} width mismatch")
        kv = params.kv[name]
        k, v = kv.k(tokens), kv.v(tokens)
        o, w = attend(q, k, v)
        if lam != 1.0:
            o = T.scale(o, lam)
        if capture is not None:
            capture.add(block, name, w.data, v.data, o.data)
        parts[name] = o
        total = o if total is None else T.add(total, o)
    out = params.out(total)
    return (out, parts) if return_branches else out


def set_scales(params, lambda_id: float | None = None, lambda_age: float | None = None,
               lambda_cage: float | None = None):
    """Set the branch scales in place on every attention block reachable from ``params``.

    Accepts a :class:`MultiCrossAttention` or any module holding them
    (e.g. the denoiser). ``None`` leaves a scale unchanged. Returns ``params``.
    """
    new = {"id": lambda_id, "age": lambda_age, "c_age": lambda_cage}
    for value in new.values():
        if value is not None and not np.isfinite(value):
            raise ValueError("scales must be finite")
    for mca in _find_mca(params):
        for name, value in new.items():
            if value is not None:
                mca._scales[name] = float(value)
    return params


def get_scales(params) -> dict[str, float]:
    blocks = _find_mca(params)
    return blocks[0].scales if blocks else {}


def _find_mca(obj) -> list[MultiCrossAttention]:
    if isinstance(obj, MultiCrossAttention):
        return [obj]
    found = []
    if isinstance(obj, Module):
        for name, value in vars(obj).items():
            if isinstance(value, (list, tuple)):
                for item in value:
                    found += _find_mca(item)
            elif isinstance(value, Module):
                found += _find_mca(value)
    return found


def export_attention_maps(capture: AttentionCapture | None, out_dir: str | os.PathLike) -> list[str]:
    """Write one text file per captured (block, branch) map.

    Each file starts with ``#``-prefixed header lines (format version, block,
    branch, timestep, dimensions) followed by the row-major weight matrix of
    the first batch element, one query row per line.
    """
    if capture is None or not capture.enabled or not capture.maps:
        raise RuntimeError("attention capture was not enabled for this forward pass")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, m in enumerate(capture.maps):
        w = m["weights"]
        w = w[0] if w.ndim == 3 else w
        path = os.path.join(out_dir, f"attn_{i:03d}_block{m['block']}_{m['branch']}.txt")
        with open(path, "w") as fh:
            fh.write("# format_version 1\n")
            fh.write(f"# block {m['block']}\n# branch {m['branch']}\n# timestep {m['timestep']}\n")
            fh.write(f"# rows {w.shape[0]}\n# cols {w.shape[1]}\n")
            for row in w:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        paths.append(path)
    return paths


def read_attention_map(path) -> dict:
    header = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, value = line[1:].split(None, 1)
                header[key] = value.strip()
            elif line.strip():
                rows.append([float(v) for v in line.split()])
    w = np.array(rows)
    if w.shape != (int(header["rows"]), int(header["cols"])):
        raise ValueError("attention map dimensions disagree with header")
    return {"block": int(header["block"]), "branch": header["branch"],
            "timestep": None if header["timestep"] == "None" else int(header["timestep"]), "weights": w}


def copy_scales(src, dst) -> None:
    for a, b in zip(_find_mca(src), _find_mca(dst)):
        b._scales = dict(a._scales)


__all__ = [
    "BRANCHES", "ConditionBundle", "ProjectedConditions", "ConditionProjector", "project_conditions",
    "MultiCrossAttention", "multi_cross_attention", "attend", "set_scales", "get_scales",
    "AttentionCapture", "export_attention_maps", "read_attention_map",
]
