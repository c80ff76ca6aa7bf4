import numpy as np
import pytest

from pulseflow.errors import ArchitectureError, ArgumentError
from pulseflow.vectorfield import tape as ad
from pulseflow.vectorfield.adam import AdamState, adam_step
from pulseflow.vectorfield.network import (Architecture, build, check_params, init_params, net_forward,
                                           time_embedding)


@pytest.fixture
def small():
    return Architecture(2, hidden=8, blocks=2, kernel=5, time_dim=8)


def test_default_size_near_fifty_thousand():
    arch = Architecture(5)
    n = arch.n_params()
    assert 40_000 <= n <= 55_000
    params = init_params(arch, np.random.default_rng(0))
    assert sum(v.size for v in params.values()) == n
    assert all(v.dtype == np.float64 for v in params.values())


def test_zero_final_layer_outputs_zero(small, rng):
    p = init_params(small, rng)
    out = net_forward(p, 0.4, rng.standard_normal((30, 2)), small)
    assert out.shape == (30, 2)
    assert np.all(out == 0.0)


def test_deterministic(small, rng):
    p = init_params(small, rng, zero_final=False)
    x = rng.standard_normal((30, 2))
    assert net_forward(p, 0.3, x, small).tobytes() == net_forward(p, 0.3, x, small).tobytes()


def test_time_conditioning_live_after_one_step(small, rng):
    p = init_params(small, rng)
    x = rng.standard_normal((4, 30, 2))
    target = rng.standard_normal((4, 30, 2))
    t = np.array([0.3, 0.7, 0.3, 0.7])
    tape = ad.Tape()
    leaves = {k: tape.variable(v, name=k) for k, v in p.items()}
    loss = ad.square(build(tape, leaves, t, x, small) - target).mean()
    p, _ = adam_step(p, tape.backward(loss), AdamState.for_params(p))
    xs = x[0]
    assert not np.allclose(net_forward(p, 0.3, xs, small), net_forward(p, 0.7, xs, small))


def test_batched_matches_single(small, rng):
    p = init_params(small, rng, zero_final=False)
    x = rng.standard_normal((3, 20, 2))
    t = np.array([0.1, 0.5, 0.9])
    batched = net_forward(p, t, x, small)
    for i in range(3):
        np.testing.assert_allclose(batched[i], net_forward(p, t[i], x[i], small), rtol=1e-12, atol=1e-14)


def test_shape_errors(small, rng):
    p = init_params(small, rng)
    with pytest.raises(ArchitectureError):
        net_forward(p, 0.5, np.zeros((10, 3)), small)
    bad = dict(p)
    bad["in.w"] = np.zeros((3, 2, 8))
    with pytest.raises(ArchitectureError):
        check_params(bad, small)
    with pytest.raises(ArgumentError):
        net_forward(p, 1.5, np.zeros((10, 2)), small)


def test_time_embedding_bounded(small):
    e = time_embedding(np.linspace(0, 1, 11), small)
    assert e.shape == (11, small.time_dim)
    assert np.all(np.abs(e) <= 1.0)


def test_local_lipschitz_finite(small, rng):
    p = init_params(small, rng, zero_final=False)
    x = rng.standard_normal((40, 2))
    ratios = []
    for _ in range(20):
        d = 1e-4 * rng.standard_normal(x.shape)
        ratios.append(np.linalg.norm(net_forward(p, 0.5, x + d, small) - net_forward(p, 0.5, x, small))
                      / np.linalg.norm(d))
    assert np.all(np.isfinite(ratios)) and max(ratios) < 1e3


def test_architecture_round_trip():
    arch = Architecture(3, hidden=12, blocks=1)
    assert Architecture.from_dict(arch.to_dict()) == arch


@pytest.mark.parametrize("kw", [{"kernel": 4}, {"hidden": 0}, {"in_channels": 0}])
def test_architecture_validation(kw):
    base = dict(in_channels=2)
    base.update(kw)
    with pytest.raises(ArgumentError):
        Architecture(**base)
