"""Module system and optimizer."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from agedit import tensor as T
from agedit.nn import MLP, Adam, Embedding, LayerNorm, Linear, Module
from agedit.tensor import Tensor


def _textbook_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    # [DERIVED] independent scalar-loop implementation of the bias-corrected update
    theta = theta.astype(np.float64).copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta -= lr * mh / (np.sqrt(vh) + eps)
    return theta


def test_adam_matches_reference_update(rng):
    with T.precision("high"):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
    start = np.concatenate([a.data.ravel(), b.data.ravel()])
    opt = Adam([a, b], lr=0.01)
    grads = [rng.normal(size=17) for _ in range(6)]
    for g in grads:
        a.grad = g[:12].reshape(3, 4)
        b.grad = g[12:]
        opt.step()
    got = np.concatenate([a.data.ravel(), b.data.ravel()])
    np.testing.assert_allclose(got, _textbook_adam(start, grads, 0.01), rtol=1e-6, atol=1e-9)


def test_adam_first_step_moves_each_coordinate_by_lr():
    # [TRIVIAL] after one bias-corrected step |delta| == lr for non-tiny gradients
    with T.precision("high"):
        p = Tensor(np.zeros(4), requires_grad=True)
    opt = Adam([p], lr=0.05)
    p.grad = np.array([3.0, -0.2, 10.0, -7.0])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.05, 0.05, -0.05, 0.05], rtol=1e-5)


def test_adam_missing_grad_is_zero_and_nonfinite_aborts():
    p = Tensor(np.ones(3), requires_grad=True)
    q = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([p, q], lr=0.1)
    p.grad = np.ones(3, dtype=p.data.dtype)
    opt.step()
    np.testing.assert_array_equal(q.data, np.ones(2))
    before = p.data.copy()
    p.grad = np.array([1.0, np.nan, 0.0], dtype=p.data.dtype)
    with pytest.raises(FloatingPointError):
        opt.step()
    np.testing.assert_array_equal(p.data, before)
    assert opt.t == 1


def test_adam_grad_clip_limits_norm():
    with T.precision("high"):
        p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([p], lr=1.0, grad_clip=1.0)
    p.grad = np.array([300.0, 400.0])
    opt.step()
    state = opt.state()
    np.testing.assert_allclose(state["m"], 0.1 * np.array([0.6, 0.8]))


def test_adam_parameters_remain_live_views(rng):
    lin = Linear(4, 3, rng)
    opt = Adam(lin.parameters(), lr=0.1)
    lin.weight.grad = np.ones_like(lin.weight.data)
    opt.step()
    x = Tensor(np.ones((1, 4)))
    expected = np.ones((1, 4)) @ lin.weight.data + lin.bias.data
    np.testing.assert_allclose(lin(x).data, expected, rtol=1e-6)


class _Net(Module):
    def __init__(self, rng):
        self.inp = Linear(3, 4, rng)
        self.norm = LayerNorm(4)
        self.blocks = [MLP(4, 8, 4, rng), MLP(4, 8, 4, rng, zero_out=True)]
        self.emb = Embedding(5, 4, rng)
        self.table = {"x": Linear(4, 1, rng, bias=False)}


def test_named_parameters_and_state_round_trip(rng):
    net = _Net(rng)
    names = [n for n, _ in net.named_parameters()]
    assert names[:4] == ["inp.weight", "inp.bias", "norm.gain", "norm.bias"]
    assert "blocks.1.fc2.weight" in names and "emb.table" in names and "table.x.weight" in names
    # [TRIVIAL] 3*4+4 + 4+4 + 2*(4*8+8+8*4+4) + 5*4 + 4
    assert net.num_parameters() == 16 + 8 + 2 * 76 + 20 + 4
    np.testing.assert_array_equal(net.blocks[1].fc2.weight.data, 0.0)
    state = net.state_dict()
    other = _Net(np.random.default_rng(99))
    other.load_state_dict(state)
    for (n, a), (_, b) in zip(net.named_parameters(), other.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=n)


def test_load_state_dict_rejects_mismatch(rng):
    net = _Net(rng)
    state = net.state_dict()
    state.pop("inp.bias")
    with pytest.raises(KeyError):
        net.load_state_dict(state)
    state = net.state_dict()
    state["inp.bias"] = np.zeros(7)
    with pytest.raises(ValueError):
        net.load_state_dict(state)


def test_freeze_and_astype(rng):
    net = _Net(rng).freeze()
    assert not any(p.requires_grad for p in net.parameters())
    net.astype(np.float64)
    assert all(p.data.dtype == np.float64 for p in net.parameters())


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_linear_matches_affine_map(n_in, n_out, seed):
    r = np.random.default_rng(seed)
    with T.precision("high"):
        lin = Linear(n_in, n_out, r)
        x = r.normal(size=(2, n_in))
        out = lin(Tensor(x)).data
    np.testing.assert_allclose(out, x @ lin.weight.data + lin.bias.data, rtol=1e-12, atol=1e-12)
