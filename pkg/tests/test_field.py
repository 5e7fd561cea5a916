import numpy as np
import pytest

from dietfield import diffcore as dc
from dietfield.field import (EncodingConfig, FieldConfig, field_eval, full_regime, init_params,
                             layer_shapes, positional_encode, simplified_regime)


def test_encode_zero():
    out = positional_encode(np.zeros((1, 3), np.float32), 2, True).data.reshape(-1)
    assert out.shape == (15,)
    np.testing.assert_array_equal(out[:3], 0)
    # per frequency: three sines then three cosines
    np.testing.assert_array_equal(out[3:].reshape(2, 2, 3), [[[0] * 3, [1] * 3]] * 2)


def test_encode_half_pi():
    out = positional_encode(np.full((1, 1), np.pi / 2, np.float32), 1, False).data.reshape(-1)
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-7)


def test_encode_frequencies():
    x = np.float32([[0.3]])
    out = positional_encode(x, 4, False).data.reshape(4, 2)
    f = 2.0 ** np.arange(4)
    np.testing.assert_allclose(out[:, 0], np.sin(f * 0.3), atol=1e-6)
    np.testing.assert_allclose(out[:, 1], np.cos(f * 0.3), atol=1e-6)


def test_encode_length():
    assert positional_encode(np.zeros((2, 3)), 10, True).shape == (2, 63)
    assert EncodingConfig(10, 4).position_dim == 63
    assert EncodingConfig(10, 4).direction_dim == 27


def test_encode_injective_random_pairs(rng):
    pts = rng.uniform(-np.pi, np.pi, size=(2000, 3)).astype(np.float32)
    enc = positional_encode(pts, 1, False).data
    other = rng.uniform(-np.pi, np.pi, size=(2000, 3)).astype(np.float32)
    enc2 = positional_encode(other, 1, False).data
    dist = np.abs(enc - enc2).max(axis=1)
    assert np.all(dist > 0)


def test_regimes():
    fc, ec = full_regime()
    assert (fc.depth, fc.width, fc.skip_layers, fc.view_dependent) == (8, 256, (4,), True)
    assert (ec.num_freqs_position, ec.num_freqs_direction) == (10, 4)
    fc, ec = simplified_regime()
    assert not fc.view_dependent and ec.num_freqs_position == 6
    assert simplified_regime(3)[1].num_freqs_position == 4


def test_config_validation():
    with pytest.raises(ValueError):
        FieldConfig(depth=1)
    with pytest.raises(ValueError):
        FieldConfig(depth=4, skip_layers=(4,))
    with pytest.raises(ValueError):
        EncodingConfig(0, 4)


def test_init_deterministic_and_glorot():
    fc, ec = FieldConfig(depth=3, width=32, skip_layers=(1,)), EncodingConfig(4, 2)
    a, b, c = init_params(fc, ec, 0), init_params(fc, ec, 0), init_params(fc, ec, 1)
    for k in a.tensors:
        np.testing.assert_array_equal(a.tensors[k], b.tensors[k])
    assert any(not np.array_equal(a.tensors[k], c.tensors[k]) for k in a.tensors)
    for name, (fi, fo) in layer_shapes(fc, ec).items():
        np.testing.assert_array_equal(a.tensors[f"{name}.bias"], 0)
        w = a.tensors[f"{name}.weight"]
        assert w.shape == (fi, fo)
        assert np.abs(w).max() <= np.sqrt(6 / (fi + fo))
    assert layer_shapes(fc, ec)["trunk.1"][0] == 32 + ec.position_dim


def _points(rng, n=50):
    d = rng.normal(size=(n, 3))
    return rng.uniform(-1.5, 1.5, (n, 3)).astype(np.float32), (d / np.linalg.norm(d, axis=1, keepdims=True)).astype(np.float32)


def test_view_independent_ignores_direction(rng):
    p = init_params(FieldConfig(depth=2, width=16, skip_layers=(), view_dependent=False), EncodingConfig(4, 2), 0)
    x, d = _points(rng)
    a, b = field_eval(p, x, d), field_eval(p, x, -d)
    np.testing.assert_array_equal(a.rgb.data, b.rgb.data)
    np.testing.assert_array_equal(a.sigma.data, b.sigma.data)


def test_view_dependent_sigma_invariant(rng):
    p = init_params(FieldConfig(depth=3, width=16, skip_layers=(1,), view_dependent=True), EncodingConfig(4, 2), 2)
    x, d = _points(rng)
    a, b = field_eval(p, x, d), field_eval(p, x, np.roll(d, 1, axis=0))
    np.testing.assert_array_equal(a.sigma.data, b.sigma.data)
    assert not np.array_equal(a.rgb.data, b.rgb.data)


def test_output_ranges(rng):
    p = init_params(FieldConfig(depth=2, width=16, skip_layers=(), view_dependent=True), EncodingConfig(4, 2), 0)
    p.tensors["sigma.bias"][:] = -30
    x, d = _points(rng, 200)
    out = field_eval(p, x * 100, d)
    assert out.sigma.data.min() >= 0
    assert 0 <= out.rgb.data.min() and out.rgb.data.max() <= 1
    assert out.rgb.shape == (200, 3) and out.sigma.shape == (200,)


def test_shape_errors(rng):
    p = init_params(FieldConfig(depth=2, width=8, skip_layers=()), EncodingConfig(2, 1), 0)
    with pytest.raises(dc.ShapeError):
        field_eval(p, np.zeros((4, 2)), np.zeros((4, 3)))
    with pytest.raises(dc.ShapeError):
        field_eval(p, np.zeros((4, 3)), np.zeros((5, 3)))


def test_sigma_gradcheck(rng):
    fc, ec = FieldConfig(depth=3, width=8, skip_layers=(1,), view_dependent=True), EncodingConfig(3, 2)
    base = init_params(fc, ec, 0)
    x, d = _points(rng, 6)

    def fn(params):
        out = field_eval(base.bind(params), x, d)
        return dc.sum_(out.sigma) + dc.sum_(out.rgb)

    graph = dc.Graph(fn, base.tensors)
    # ReLU kinks sit within 1e-3 of some coordinates, so use a small step with the float64 oracle.
    report = dc.finite_difference_check(graph, eps=1e-5, tolerance=1e-2, coords_per_param=6)
    assert report.passed, report


def test_rematerialized_field_matches(rng):
    ec = EncodingConfig(4, 2)
    p = init_params(FieldConfig(depth=4, width=16, skip_layers=(2,)), ec, 5)
    remat = init_params(FieldConfig(depth=4, width=16, skip_layers=(2,), rematerialize=True), ec, 5)
    x, d = _points(rng, 32)

    def loss(params):
        def fn(t):
            out = field_eval(params.bind(t), x, d)
            return dc.mean(out.sigma) + dc.mean(out.rgb)
        return dc.Graph(fn, params.tensors).value_and_grad()

    (v1, g1), (v2, g2) = loss(p), loss(remat)
    assert v1 == v2
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], atol=1e-6)
