import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmdlab import ndgrad as nd
from dmdlab.data import default_benchmark, sample_batch
from dmdlab.distill import discriminator_loss
from dmdlab.errors import ContractViolation
from dmdlab.nets import (
    DiscConfig, Discriminator, NetConfig, VelocityNet, discriminate, generator_step, load_checkpoint, load_net,
    save_checkpoint, save_net, velocity_forward,
)
from dmdlab.schedules import Schedule, velocity_to_x0

SMALL = NetConfig(width=16, depth=2, time_dim=8, cond_dim=4, n_cond=3)


class Field:
    """Hand-written velocity field for Euler arithmetic checks."""

    def __init__(self, fn):
        self.fn = fn

    def velocity(self, x, t, cond):
        return self.fn(np.asarray(x, dtype=float), t)


@pytest.fixture
def net():
    return VelocityNet.init(SMALL, np.random.default_rng(0))


def test_forward_is_deterministic_and_shape_preserving(net):
    x = np.random.default_rng(1).standard_normal((5, 2))
    a = velocity_forward(net, x, 0.3, [0, 1, 2, 0, 1])
    b = velocity_forward(net, x, 0.3, [0, 1, 2, 0, 1])
    assert a.shape == x.shape
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("t", [-0.1, 1.2])
def test_forward_rejects_time_outside_unit_interval(net, t):
    with pytest.raises(ContractViolation):
        velocity_forward(net, np.zeros((1, 2)), t, 0)


def test_forward_defined_off_anchor_and_per_row(net):
    x = np.zeros((3, 2))
    per_row = velocity_forward(net, x, np.array([0.0, 0.37, 1.0]), 1)
    assert np.isfinite(per_row).all()
    assert np.allclose(per_row[1], velocity_forward(net, x[:1], 0.37, 1)[0])


def test_param_gradient_matches_finite_differences(net):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 2))

    def f(p):
        return nd.mean(nd.square(net.apply(p, x, 0.6, [0, 1, 2, 1])))

    g = nd.grad(f, net.params).flat
    idx = rng.choice(len(net.params), 25, replace=False)
    fd = []
    for i in idx:
        up, dn = net.params.flat.copy(), net.params.flat.copy()
        up[i] += 1e-5
        dn[i] -= 1e-5
        fd.append((f(net.params.with_flat(up).unflatten()).item() - f(net.params.with_flat(dn).unflatten()).item()) / 2e-5)
    fd = np.array(fd)
    assert np.linalg.norm(g[idx] - fd) / np.linalg.norm(fd) < 1e-4


def test_generator_step_examples():
    x = np.array([[1.0, -2.0]])
    c = np.array([0.3, 0.7])
    const = Field(lambda x, t: np.broadcast_to(c, x.shape))
    assert np.array_equal(generator_step(const, x, 0.5, 0.5, 0), x)
    assert np.allclose(generator_step(const, x, 1.0, 0.0, 0), x - c)
    lin = Field(lambda x, t: x)
    assert np.allclose(generator_step(lin, x, 0.75, 0.5, 0), (1 + 0.5 - 0.75) * x)


def test_generator_step_direction():
    with pytest.raises(ContractViolation):
        generator_step(Field(lambda x, t: x), np.zeros((1, 2)), 0.25, 0.5, 0)


def test_generator_step_to_zero_is_reconstruction(net):
    x = np.random.default_rng(3).standard_normal((6, 2))
    v = net.velocity(x, 0.75, 0)
    assert np.allclose(generator_step(net, x, 0.75, 0.0, 0), velocity_to_x0(Schedule(), x, 0.75, v), rtol=0, atol=1e-14)


def test_shared_layout_across_roles(net):
    other = VelocityNet.init(SMALL, np.random.default_rng(9))
    assert other.params.layout == net.params.layout
    assert nd.param_distance(net.params, net.with_params(net.params.copy()).params) == 0.0


@pytest.fixture
def disc():
    return Discriminator.init(DiscConfig(backbone_width=32, head_width=8, n_cond=3), np.random.default_rng(0))


def test_backbone_gradient_is_zero(disc):
    rng = np.random.default_rng(4)
    x, ref = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    hp = disc.head_params.unflatten()
    g = nd.grad(lambda bp: nd.sum(disc.apply(bp, hp, x, [0, 1, 2, 0, 1], ref)), disc.backbone_params)
    assert np.array_equal(g.flat, np.zeros(len(g)))


def test_logits_finite_on_box(disc):
    g = np.linspace(-10, 10, 21)
    x = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    out = discriminate(disc, x, np.zeros(len(x), dtype=int), x[::-1])
    assert out.shape == (len(x),) and np.isfinite(out).all()


def test_trained_discriminator_uses_condition():
    spec = default_benchmark()
    rng = np.random.default_rng(5)
    D = Discriminator.init(DiscConfig(backbone_width=64, head_width=16), rng)
    backbone = D.backbone_params.copy()
    opt = nd.AdamW(len(D.head_params), 1e-3)
    head = D.head_params
    for _ in range(200):
        x, cond = sample_batch(spec, 64, rng)
        fake = x + rng.standard_normal(x.shape) * 0.5 + 1.0
        head = opt.step(head, nd.grad(lambda hp: discriminator_loss(D, hp, x, fake, cond, x, x), head))
    D = D.with_head(head)
    assert D.backbone_params == backbone
    x, cond = sample_batch(spec, 32, rng)
    same = discriminate(D, x, cond, x)
    swapped = discriminate(D, x, (cond + 3) % 8, x)
    assert np.abs(same - swapped).max() > 0


def test_checkpoint_round_trip_is_byte_stable(tmp_path, net):
    save_net(tmp_path / "a.ckpt", net, seed=1)
    loaded = load_net(tmp_path / "a.ckpt")
    assert loaded.params == net.params and loaded.config == net.config
    save_net(tmp_path / "b.ckpt", loaded, seed=1)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ContractViolation):
        load_checkpoint(tmp_path / "x")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20))
def test_checkpoint_payload_round_trip(tmp_path_factory, values):
    p = nd.ParamVector.from_arrays({"w": np.array(values)})
    path = tmp_path_factory.mktemp("ck") / "p.ckpt"
    save_checkpoint(path, p, {"k": 1})
    back, meta = load_checkpoint(path)
    assert back == p and meta == {"k": 1}


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_euler_step_composition_on_constant_field(a, b, seed):
    hi, lo = max(a, b), min(a, b)
    c = np.random.default_rng(seed).standard_normal(2)
    f = Field(lambda x, t: np.broadcast_to(c, x.shape))
    x = np.zeros((1, 2))
    mid = (hi + lo) / 2
    two = generator_step(f, generator_step(f, x, hi, mid, 0), mid, lo, 0)
    assert np.allclose(two, generator_step(f, x, hi, lo, 0), rtol=0, atol=1e-12)
