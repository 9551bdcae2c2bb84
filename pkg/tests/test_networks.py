import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dncf import autodiff as ad
from dncf.convexify import convexity_probe, negative_mass
from dncf.networks import (build_ficnn, build_skip_net, build_small_net, forward, init_params,
                           output_shape, param_shapes, project_nonnegative, with_activation)


def test_skip_net_preserves_shape():
    spec = build_skip_net(1, 8, 3, 3)
    x = np.random.default_rng(0).uniform(0, 1, (3, 16, 16))
    assert forward(spec, init_params(spec, 0), x).shape == (3, 16, 16)


def test_skip_net_sr_factor_eight():
    spec = build_skip_net(1, 4, 3, 3, sr_factor=8)
    out = forward(spec, init_params(spec, 0), np.zeros((3, 4, 4)))
    assert out.shape == (3, 32, 32) == output_shape(spec, (3, 4, 4))


def test_skip_net_block_pattern():
    spec = build_skip_net(2, 8)
    for b in spec.blocks:
        assert len(b.strides) == 4 and b.strides[1] == 2
    names = init_params(spec, 0).names()
    assert "proj.w" in names and sum(n.startswith("b0.conv") and n.endswith(".w") for n in names) == 4


def test_skip_net_build_time_validation():
    with pytest.raises(ValueError):
        build_skip_net(0, 8)
    with pytest.raises(ValueError):
        build_skip_net(1, 2)
    with pytest.raises(ValueError):
        build_skip_net(1, 8, image_size=(2, 2))


def test_small_net_three_convs_shape_preserving():
    spec = build_small_net(3, 16)
    p = init_params(spec, 0)
    assert sorted(n for n in p.names() if n.endswith(".w")) == ["conv0.w", "conv1.w", "conv2.w"]
    assert all(b.strides == (1,) for b in spec.blocks)
    x = np.random.default_rng(1).uniform(0, 1, (3, 10, 12))
    out = forward(spec, p, x)
    assert out.shape == x.shape and np.all(np.isfinite(out.data))


def test_small_net_identity_init_linear():
    spec = with_activation(build_small_net(1, 3), "linear")
    x = np.random.default_rng(2).standard_normal((3, 6, 6))
    np.testing.assert_allclose(forward(spec, init_params(spec, 0, "identity"), x).data, x)


def test_ficnn_200_wide_configuration():
    spec = build_ficnn(2, (200, 200))
    shapes = param_shapes(spec)
    assert shapes["z0.w"] == (200, 2) and shapes["z1.w"] == (200, 200) and shapes["out.wz"] == (1, 200)
    with pytest.raises(ValueError):
        build_ficnn(2, ())


def test_ficnn_zero_weights_constant():
    spec = build_ficnn(2, (5, 5))
    p = init_params(spec, 0)
    for n in p.names():
        p[n].data[...] = 0.0
    p["out.b"].data[...] = 0.3
    pts = np.random.default_rng(3).standard_normal((7, 2))
    out = forward(spec, p, (pts, np.random.default_rng(4).uniform(size=(7, 1)))).data
    np.testing.assert_array_equal(out, 0.3)


@pytest.mark.parametrize("partial", [False, True])
def test_projected_ficnn_convex_in_proposal(partial):
    spec = build_ficnn(2, (32, 32), partial=partial)
    p = project_nonnegative(init_params(spec, 5), "convex")
    assert convexity_probe(spec, p, 1000, seed=1, low=-2, high=2).max_violation <= 1e-9


def test_zero_projection_gives_zero_output_plus_bias():
    spec = build_skip_net(1, 4)
    p = init_params(spec, 0)
    p["proj.w"].data[...] = 0.0
    p["proj.b"].data[...] = [0.1, 0.2, 0.3]
    out = forward(spec, p, np.random.default_rng(0).uniform(size=(3, 8, 8))).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.array([0.1, 0.2, 0.3])[:, None, None], out.shape))


def test_forward_deterministic_and_composable():
    spec = build_skip_net(1, 4)
    p = init_params(spec, 0)
    x = np.random.default_rng(6).uniform(size=(3, 8, 8))
    a, b = forward(spec, p, x).data, forward(spec, p, x).data
    assert np.array_equal(a, b)
    assert forward(spec, p, forward(spec, p, x)).shape == x.shape


def test_forward_shape_mismatch_rejected():
    spec = build_skip_net(1, 4)
    with pytest.raises(ValueError):
        forward(spec, init_params(spec, 0), np.zeros((1, 8, 8)))


def test_init_params_seeded():
    spec = build_skip_net(1, 4)
    a, b, c = init_params(spec, 1), init_params(spec, 1), init_params(spec, 2)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.names())
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.names() if n.endswith(".w"))
    assert all(not a[n].data.any() for n in a.names() if n.endswith(".b"))


def test_init_variance_propagation():
    spec = build_small_net(3, 16)
    p = init_params(spec, 0)
    trace = []
    forward(spec, p, np.ones((3, 16, 16)), trace)
    for t in trace:
        assert 0.1 <= np.var(t) * 2 <= 10 or 0.1 <= np.mean(t ** 2) <= 10


def test_project_nonnegative():
    spec = build_ficnn(2, (3,))
    p = init_params(spec, 0)
    p["out.wz"].data[...] = [[-1.0, 2.0, 0.0]]
    q = project_nonnegative(p, "convex")
    np.testing.assert_array_equal(q["out.wz"].data, [[0.0, 2.0, 0.0]])
    np.testing.assert_array_equal(q["z0.w"].data, p["z0.w"].data)
    assert negative_mass(q, q.group("convex")) == 0.0
    r = project_nonnegative(q, "convex")
    assert all(np.array_equal(q[n].data, r[n].data) for n in q.names())
    with pytest.raises(KeyError):
        project_nonnegative(p, "nope")


def test_spec_serializes_to_text():
    text = build_skip_net(2, 8).to_text()
    assert "kind = skip" in text and "block1" in text


@settings(max_examples=15, deadline=None)
@given(n_blocks=st.integers(1, 2), ch=st.sampled_from([4, 6]), h=st.sampled_from([8, 12]),
       w=st.sampled_from([8, 16]), sr=st.sampled_from([None, 2]), seed=st.integers(0, 99))
def test_output_shape_independent_of_params(n_blocks, ch, h, w, sr, seed):
    spec = build_skip_net(n_blocks, ch, sr_factor=sr)
    x = np.random.default_rng(seed).uniform(size=(3, h, w))
    p = init_params(spec, seed)
    for n in p.names():
        p[n].data *= 3.0
    assert forward(spec, p, x).shape == output_shape(spec, x.shape)


def test_residual_net_starts_as_identity():
    spec = build_skip_net(2, 8, in_ch=3, out_ch=3, residual=True)
    params = init_params(spec, seed=4)
    x = np.random.default_rng(0).random((3, 16, 16))
    out = forward(spec, params, ad.Tensor(x)).data
    # proj.b starts at zero, so only the skip path contributes
    np.testing.assert_allclose(out, x + params["proj.b"].data.reshape(-1, 1, 1), atol=0)


def test_residual_net_rejects_shape_change():
    with pytest.raises(ValueError):
        build_skip_net(2, 8, in_ch=3, out_ch=3, sr_factor=2, residual=True)
    with pytest.raises(ValueError):
        build_skip_net(2, 8, in_ch=1, out_ch=3, residual=True)
