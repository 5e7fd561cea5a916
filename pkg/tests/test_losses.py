import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dietfield import diffcore as dc
from dietfield.losses import LossError, mse_full, mse_rays, sc_cosine, sc_l2


def _unit(rng, n, d=16):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_mse_rays_examples(rng):
    x = rng.random((10, 3))
    assert float(mse_rays(x, x).data) == 0
    assert float(mse_rays([[0.1, 0, 0]], [[0, 0, 0]]).data) == pytest.approx(0.01)


def test_mse_rays_loop_oracle(rng):
    a, b = rng.random((37, 3)), rng.random((37, 3))
    total = 0.0
    for r in range(37):
        for c in range(3):
            total += (a[r, c] - b[r, c]) ** 2
    assert float(mse_rays(a, b).data) == pytest.approx(total / 37, abs=1e-6)


def test_mse_rays_errors():
    with pytest.raises(LossError):
        mse_rays(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(dc.ShapeError):
        mse_rays(np.zeros((2, 3)), np.zeros((3, 3)))


def test_mse_full(rng):
    img = rng.random((5, 4, 3))
    assert float(mse_full(img, img).data) == 0
    other = rng.random((5, 4, 3))
    assert float(mse_full(img, other).data) == pytest.approx(float(mse_rays(img.reshape(-1, 3),
                                                                            other.reshape(-1, 3)).data))
    assert float(mse_full([[[0.1, 0.2, 0.2]]], [[[0, 0, 0]]]).data) == pytest.approx(0.09)
    with pytest.raises(dc.ShapeError):
        mse_full(img, img[:4])


def test_sc_examples():
    e1, e2 = np.eye(4)[0], np.eye(4)[1]
    assert float(sc_l2(e1, e1, 1.0).data) == 0
    assert float(sc_l2(e1, e2, 1.0).data) == pytest.approx(1.0)
    assert float(sc_cosine(e1, e1, 0.5).data) == pytest.approx(0.0, abs=1e-7)
    assert float(sc_cosine(e1, e2, 0.1).data) == pytest.approx(0.1)
    assert float(sc_cosine(e1, -e1, 1.0).data) == pytest.approx(2.0)


def test_sc_identity_random_pairs(rng):
    a, b = _unit(rng, 1000), _unit(rng, 1000)
    for lam in (0.1, 1.0):
        for x, y in zip(a, b):
            l2 = float(sc_l2(x, y, lam).data)
            cos = float(sc_cosine(x, y, lam).data)
            assert abs(l2 - lam * (1 - x @ y)) < 1e-6
            assert abs(l2 - cos) < 1e-6


def test_sc_cosine_renormalizes_and_rejects_zero():
    assert float(sc_cosine([3.0, 0.0], [0.0, 0.5], 1.0).data) == pytest.approx(1.0)
    with pytest.raises(LossError):
        sc_cosine([0.0, 0.0], [1.0, 0.0], 1.0)
    with pytest.raises(dc.ShapeError):
        sc_l2([1.0, 0.0], [1.0, 0.0, 0.0], 1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6), st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_losses_nonnegative(a, b):
    a, b = np.float32(a), np.float32(b)
    assert float(mse_rays(a.reshape(2, 3), b.reshape(2, 3)).data) >= 0
    assert float(sc_l2(a, b, 0.3).data) >= 0
    if np.linalg.norm(a) > 1e-3 and np.linalg.norm(b) > 1e-3:
        assert float(sc_cosine(a, b, 0.3).data) >= -1e-6


def test_loss_gradients(rng):
    target = _unit(rng, 1)[0]
    gt = rng.random((6, 3))

    def fn(p):
        return (mse_rays(p["pred"], gt) + sc_cosine(target, p["emb"], 0.7)
                + sc_l2(target, p["emb"] / dc.sqrt(dc.sum_(dc.square(p["emb"]))), 0.2))

    graph = dc.Graph(fn, {"pred": rng.random((6, 3)), "emb": rng.normal(size=16)})
    assert dc.finite_difference_check(graph, coords_per_param=None).passed
