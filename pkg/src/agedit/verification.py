"""Finite-difference gradient suite over every differentiable operation and the full loss."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .acg import AGE_SPAN, ACGHead, acg_forward, age_loss, total_loss
from .conditioning import ConditionBundle, MultiCrossAttention, ProjectedConditions, multi_cross_attention
from .diffusion import diffusion_loss, forward_diffuse, make_schedule
from .model import DenoiserConfig, DenoiserModel
from .synthface import age_encoding, id_embeddings
from .tensor import Tensor, grad_check
from .vocab import tokenize_caption


def _leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _projected(f, rng):
    """Scalar read-out ``sum(f(...) * R)`` with a fixed random ``R``."""
    cache = {}

    def fn(*args):
        out = f(*args)
        if "r" not in cache:
            cache["r"] = Tensor(rng.normal(size=out.shape))
        return T.sum(T.mul(out, cache["r"]))
    return fn


def op_cases(rng: np.random.Generator) -> dict:
    """``name -> (fn, inputs)`` for every differentiable primitive and two composite chains."""
    a, b = _leaf(rng, 8, 16), _leaf(rng, 8, 16)
    cases = {
        "add": (T.add, [a, b]),
        "sub": (T.sub, [_leaf(rng, 8, 16), _leaf(rng, 8, 16)]),
        "mul": (T.mul, [_leaf(rng, 8, 16), _leaf(rng, 8, 16)]),
        "scale": (lambda x: T.scale(x, -1.7), [_leaf(rng, 8, 16)]),
        "neg": (T.neg, [_leaf(rng, 8, 16)]),
        "silu": (T.silu, [_leaf(rng, 8, 16)]),
        "square": (T.square, [_leaf(rng, 8, 16)]),
        "sqrt": (T.sqrt, [_leaf(rng, 8, 16, positive=True)]),
        "add_scalar": (lambda x: T.add(x, 2.5), [_leaf(rng, 128)]),
        "matmul": (T.matmul, [_leaf(rng, 6, 10), _leaf(rng, 10, 7)]),
        "matmul_batched": (T.matmul, [_leaf(rng, 2, 6, 8), _leaf(rng, 2, 8, 5)]),
        "linear": (T.linear, [_leaf(rng, 2, 6, 8), _leaf(rng, 8, 5), _leaf(rng, 5)]),
        "transpose": (lambda x: T.transpose(x, (1, 0, 2)), [_leaf(rng, 4, 6, 8)]),
        "reshape": (lambda x: T.reshape(x, (24, 8)), [_leaf(rng, 4, 6, 8)]),
        "broadcast_to": (lambda x: T.broadcast_to(x, (3, 8, 16)), [_leaf(rng, 1, 8, 16)]),
        "concat": (lambda x, y: T.concat([x, y], axis=1), [_leaf(rng, 8, 7), _leaf(rng, 8, 9)]),
        "softmax_rows": (T.softmax_rows, [_leaf(rng, 10, 12)]),
        "layer_norm": (T.layer_norm, [_leaf(rng, 10, 12), _leaf(rng, 12), _leaf(rng, 12)]),
        "sum_axis": (lambda x: T.sum(x, axis=1), [_leaf(rng, 8, 16)]),
        "mean_axis": (lambda x: T.mean(x, axis=(0, 2)), [_leaf(rng, 4, 6, 8)]),
        "take_rows": (lambda tab: T.take_rows(tab, np.array([[0, 2], [2, 1], [5, 5]])), [_leaf(rng, 6, 20)]),
        "avg_pool_last": (lambda x: T.avg_pool_last(x, 2), [_leaf(rng, 2, 1, 8, 8)]),
        "softmax_through_matmul": (
            lambda q, k, v: T.matmul(T.softmax_rows(T.matmul(q, T.transpose(k))), v),
            [_leaf(rng, 8, 6), _leaf(rng, 9, 6), _leaf(rng, 9, 5)]),
    }
    mca = MultiCrossAttention(8, 6, 5, rng)
    for p in mca.parameters():
        p.data = p.data.astype(np.float64)
    toks = [_leaf(rng, 2, n, 6) for n in (3, 4, 4, 3)]

    def mca_fn(x, *rest):
        return multi_cross_attention(x, ProjectedConditions(*rest[:4]), mca)
    cases["multi_cross_attention"] = (mca_fn, [_leaf(rng, 2, 5, 8), *toks] + mca.parameters())
    return {name: (_projected(fn, rng), inputs) for name, (fn, inputs) in cases.items()}


def full_loss_case(rng: np.random.Generator, lam: float = 0.1, cfg: DenoiserConfig | None = None):
    """The two-stage objective (noise loss + lambda * age loss) at a random init, in float64.

    Zero-initialised output layers are replaced by small random weights so
    that every parameter receives a nonzero gradient.
    """
    with T.precision("high"):
        model = DenoiserModel(cfg or DenoiserConfig(), seed=int(rng.integers(1 << 30)))
        head = ACGHead(T_=model.config.T, seed=int(rng.integers(1 << 30)))
    model.head.weight.data[...] = rng.normal(0, 0.05, model.head.weight.shape)
    head.mlp.fc2.weight.data[...] = rng.normal(0, 0.1, head.mlp.fc2.weight.shape)
    b = 2
    u = rng.uniform(-1, 1, (b, 8))
    ages = np.array([25, 70])
    bundle = ConditionBundle.build(np.stack([tokenize_caption("round face gray hair")] * b),
                                   id_embeddings(u), age_encoding(ages), ages)
    sched = make_schedule(model.config.T)
    t = np.array([3, model.config.T - 5])
    z0 = rng.uniform(-1, 1, (b, 1, 16, 16))
    eps = rng.standard_normal(z0.shape)
    z_t = forward_diffuse(z0, t, eps, sched)
    target = ages / AGE_SPAN
    params = model.parameters() + head.parameters()

    def fn(*_):
        eps_hat = model(Tensor(z_t), t, bundle)
        l_diff = diffusion_loss(Tensor(eps), eps_hat)
        pred = T.scale(acg_forward(head, Tensor(z_t), t, eps_hat), 1.0 / AGE_SPAN)
        return total_loss(l_diff, age_loss(target, pred), lam)
    return fn, params


def gradient_suite(probes: int = 100, seed: int = 0, tolerance: float = 1e-4, step: float = 1e-5) -> dict:
    """Run every case in high precision; returns ``name -> GradCheckReport``."""
    rng = np.random.default_rng(seed)
    reports = {}
    with T.precision("high"):
        for name, (fn, inputs) in op_cases(rng).items():
            reports[name] = grad_check(fn, inputs, step=step, tolerance=tolerance, probes=probes, rng=rng)
        fn, params = full_loss_case(rng)
        reports["denoiser_plus_guidance_loss"] = grad_check(fn, params, step=step, tolerance=tolerance,
                                                            probes=probes, rng=rng)
    return reports
