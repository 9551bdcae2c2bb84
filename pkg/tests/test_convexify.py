import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dncf import autodiff as ad
from dncf.convexify import (GammaSchedule, adapt_gamma, convexity_probe, initial_gamma,
                            negative_mass, reg_full, reg_partial)
from dncf.networks import (ParamSet, build_skip_net, build_small_net, init_params,
                           project_nonnegative, with_activation)


def params_of(**arrays):
    return ParamSet({k: ad.Tensor(np.asarray(v, dtype=float)) for k, v in arrays.items()},
                    {"a": ("a.w",), "b": ("b.w", "b.b")})


def test_reg_full_values():
    assert reg_full(params_of(**{"a.w": [1.0, 2.0], "b.w": [0.0], "b.b": [-5.0]})).item() == 0.0
    assert reg_full(params_of(**{"a.w": [-2.0], "b.w": [0.0], "b.b": [0.0]}), "l1", 3.0).item() == 6.0
    p = params_of(**{"a.w": [3.0, 4.0], "b.w": [-3.0, 4.0, -4.0], "b.b": [0.0]})
    assert reg_full(p, "l2", 2.0).item() == pytest.approx(2.0 * 5.0)


def test_biases_exempt():
    assert reg_full(params_of(**{"a.w": [1.0], "b.w": [1.0], "b.b": [-9.0]})).item() == 0.0


def test_reg_partial():
    spec = build_skip_net(2, 4)
    p = init_params(spec, 0)
    everything = reg_partial(p, [g for g in ("block0", "block1", "proj")], "l1", 0.5).item()
    assert everything == pytest.approx(reg_full(p, "l1", 0.5).item(), rel=1e-12)
    assert reg_partial(p, [], "l1", 1.0).item() == 0.0
    upper = reg_partial(p, ["upper"], "l1", 1.0).item()
    q = p.copy()
    for n in q.names():
        if n.startswith("b0."):
            q[n].data[...] = -1.0
    assert reg_partial(q, ["upper"], "l1", 1.0).item() == upper
    assert upper == pytest.approx(negative_mass(p, p.group("upper")))
    with pytest.raises(KeyError):
        reg_partial(p, ["missing"])


def test_adapt_gamma_examples():
    assert adapt_gamma(GammaSchedule(8.0), 1.0, 2.0).gamma == 2.0
    assert adapt_gamma(GammaSchedule(8.0), 2.0, 1.0).gamma == 8.0
    s, seq = GammaSchedule(8.0), [8.0]
    for _ in range(3):
        s = adapt_gamma(s, 1.0, 2.0)
        seq.append(s.gamma)
    assert seq == [8.0, 2.0, 0.5, 0.125]
    assert adapt_gamma(GammaSchedule(1.0, floor=0.5), 0.0, 1.0).gamma == 0.5


def test_initial_gamma():
    assert initial_gamma(2.0, 4.0) == pytest.approx(0.005)
    assert initial_gamma(2.0, 0.0) == 0.0


def test_probe_on_projected_small_net():
    spec = build_small_net(3, 8)
    p = project_nonnegative(init_params(spec, 0), "all")
    assert convexity_probe(spec, p, 1000, seed=0, input_shape=(3, 6, 6)).max_violation <= 1e-9


def test_probe_linear_net_exact_zero():
    spec = with_activation(build_small_net(3, 8), "linear")
    r = convexity_probe(spec, init_params(spec, 1), 200, seed=0, input_shape=(3, 5, 5), low=0.0,
                        high=1.0)
    assert r.max_violation <= 1e-12


def test_probe_unconstrained_is_deterministic():
    spec = build_small_net(3, 8)
    p = init_params(spec, 2)
    a = convexity_probe(spec, p, 100, seed=4, input_shape=(3, 5, 5))
    b = convexity_probe(spec, p, 100, seed=4, input_shape=(3, 5, 5))
    assert a.max_violation == b.max_violation and a.max_violation >= 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12), st.floats(0, 10), st.floats(0.1, 10))
def test_reg_homogeneous_and_zero_iff_nonnegative(values, gamma, c):
    p = ParamSet({"w": ad.Tensor(np.array(values))})
    r = reg_full(p, "l1", gamma).item()
    assert reg_full(p, "l1", gamma * c).item() == pytest.approx(c * r, rel=1e-12, abs=1e-12)
    assert (reg_full(p, "l1", 1.0).item() == 0.0) == all(v >= 0 for v in values)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1e3), st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), max_size=30))
def test_gamma_trajectory_non_increasing(g0, terms):
    s, prev = GammaSchedule(g0), g0
    for mse_t, reg_t in terms:
        nxt = adapt_gamma(s, mse_t, reg_t)
        assert nxt.gamma == (s.gamma * 0.25 if reg_t > mse_t else s.gamma)
        assert nxt.gamma <= prev
        s, prev = nxt, nxt.gamma
