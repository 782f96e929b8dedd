import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmdlab import ndgrad as nd
from dmdlab.errors import ContractViolation, NumericFailure


def fd_grad(loss_fn, at: nd.ParamVector, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a Tensor-valued loss over the flat vector."""
    out = np.zeros_like(at.flat)
    for i in range(at.flat.size):
        up, dn = at.flat.copy(), at.flat.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (loss_fn(at.with_flat(up).tensors()).item() - loss_fn(at.with_flat(dn).tensors()).item()) / (2 * h)
    return out


def rel_err(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def pv(**arrays) -> nd.ParamVector:
    return nd.ParamVector.from_arrays({k: np.asarray(v, dtype=float) for k, v in arrays.items()})


def test_square_gradient():
    g = nd.grad(lambda p: nd.sum(nd.mul(p["x"], p["x"])), pv(x=[3.0]))
    assert g.flat.tolist() == [6.0]


def test_bilinear_gradient():
    g = nd.grad(lambda p: nd.sum(nd.mul(p["x"], p["y"])), pv(x=[2.0], y=[5.0]))
    assert g.flat.tolist() == [5.0, 2.0]


def two_layer_loss(x, target):
    def f(p):
        h = nd.silu(nd.affine(x, p["w1"], p["b1"]))
        h = nd.tanh(nd.affine(h, p["w2"], p["b2"]))
        out = nd.matmul(h, p["w3"])
        return nd.mean(nd.square(nd.sub(out, target)))

    return f


def random_net(rng, d_in=3, width=5, d_out=2):
    return pv(
        w1=rng.standard_normal((d_in, width)), b1=rng.standard_normal(width),
        w2=rng.standard_normal((width, width)), b2=rng.standard_normal(width),
        w3=rng.standard_normal((width, d_out)),
    )


@pytest.mark.parametrize("seed", range(5))
def test_two_layer_net_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    at = random_net(rng)
    f = two_layer_loss(rng.standard_normal((7, 3)), rng.standard_normal((7, 2)))
    assert rel_err(nd.grad(f, at).flat, fd_grad(f, at)) < 1e-4


def test_hinge_and_stop_gradient_compose():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 2))
    at = pv(w=rng.standard_normal((2, 1)))
    frozen = x @ at.flat.reshape(2, 1)

    def f(p, held=None):
        z = nd.matmul(x, p["w"])
        held = nd.stop_gradient(z) if held is None else held
        return nd.add(nd.mean(nd.clamp_min(nd.sub(1.0, z))), nd.sum(nd.mul(held, z)))

    # finite differences see the held branch as a constant
    expected = fd_grad(lambda p: f(p, nd.Tensor(frozen)), at)
    assert rel_err(nd.grad(f, at).flat, expected) < 1e-4


def test_stop_gradient_blocks_backward():
    g = nd.grad(lambda p: nd.sum(nd.mul(nd.stop_gradient(p["x"]), 3.0)), pv(x=[1.0, 2.0]))
    assert np.array_equal(g.flat, np.zeros(2))


def test_non_scalar_loss_rejected():
    with pytest.raises(ContractViolation):
        nd.grad(lambda p: nd.mul(p["x"], 2.0), pv(x=[1.0, 2.0]))


def test_nan_forward_names_primitive():
    with pytest.raises(NumericFailure) as info:
        nd.grad(lambda p: nd.sum(nd.mul(p["x"], np.inf)), pv(x=[1.0]))
    assert "mul" in str(info.value)


def test_grad_accumulates_until_reset():
    t = nd.Tensor([2.0], requires_grad=True)
    for _ in range(2):
        nd.sum(nd.square(t)).backward()
    assert t.grad.tolist() == [8.0]
    t.zero_grad()
    assert t.grad is None


def test_rank_three_rejected():
    with pytest.raises(ContractViolation):
        nd.Tensor(np.zeros((2, 2, 2)))


def test_param_distance_examples():
    a = pv(w=[0.0, 0.0])
    assert nd.param_distance(a, a) == 0.0
    assert nd.param_distance(a, pv(w=[3.0, 4.0])) == 5.0


def test_param_distance_matches_loop():
    rng = np.random.default_rng(0)
    a, b = pv(w=rng.standard_normal(100)), pv(w=rng.standard_normal(100))
    total = 0.0
    for x, y in zip(a.flat, b.flat):
        total += (x - y) ** 2
    assert nd.param_distance(a, b) == pytest.approx(total**0.5, rel=1e-14)


def test_layout_mismatch_rejected():
    with pytest.raises(ContractViolation):
        nd.param_distance(pv(w=[1.0, 2.0]), pv(v=[1.0, 2.0]))
    with pytest.raises(ContractViolation):
        nd.blend_params(pv(w=[1.0]), pv(w=[1.0, 2.0]), 0.5)


def test_blend_examples():
    a, b = pv(w=[1.0]), pv(w=[0.0])
    assert nd.blend_params(a, b, 1.0) == a
    assert nd.blend_params(a, b, 0.9).flat[0] == pytest.approx(0.9, abs=1e-15)
    assert abs(nd.blend_params(pv(w=[5.0]), pv(w=[-2.0]), 1e-12).flat[0] + 2.0) < 1e-9


@pytest.mark.parametrize("lam", [0.0, -0.1, 1.5])
def test_blend_weight_outside_range(lam):
    with pytest.raises(ContractViolation):
        nd.blend_params(pv(w=[1.0]), pv(w=[0.0]), lam)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 12, elements=finite), arrays(np.float64, 12, elements=finite),
       st.floats(1e-6, 1.0))
def test_blend_contracts_toward_source(a, b, lam):
    pa, pb = pv(w=a), pv(w=b)
    d = nd.param_distance(pa, pb)
    assert nd.param_distance(nd.blend_params(pa, pb, lam), pb) == pytest.approx(lam * d, rel=1e-12, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
def test_flatten_round_trip_is_exact(shapes, seed):
    rng = np.random.default_rng(seed)
    arrays_in = {f"p{i}": rng.standard_normal(s) for i, s in enumerate(shapes)}
    p = nd.ParamVector.from_arrays(arrays_in)
    out = p.unflatten()
    assert all(np.array_equal(out[k], v) for k, v in arrays_in.items())
    assert nd.ParamVector.from_arrays(out) == p


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_matches_fd_on_random_inputs(seed):
    rng = np.random.default_rng(seed)
    at = random_net(rng, d_in=2, width=3)
    f = two_layer_loss(rng.standard_normal((4, 2)), rng.standard_normal((4, 2)))
    assert rel_err(nd.grad(f, at).flat, fd_grad(f, at)) < 1e-4


def test_adamw_first_step_is_sign_times_lr():
    opt = nd.AdamW(2, lr=0.1)
    p = opt.step(pv(w=[0.0, 0.0]), pv(w=[3.0, -0.5]))
    assert np.allclose(p.flat, [-0.1, 0.1], atol=1e-6)
