import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dietfield.estimator import DietNeRF
from dietfield.posedist import look_at
from dietfield.scene import CameraIntrinsics, SceneError, load_scene
from dietfield.validation import check_dataset, check_image, check_pose, check_poses, check_positive_int


def _small(**kw):
    return DietNeRF(num_iters=15, sc_interval=5, ray_batch_size=32, n_coarse=8, depth=2, width=16, **kw)


def test_params_and_clone():
    m = _small(sc_weight=0.3)
    params = m.get_params()
    assert params["sc_weight"] == 0.3 and params["depth"] == 2
    assert clone(m).get_params() == params
    assert m.set_params(width=8).width == 8


def test_fit_predict_score(tiny_cube_dir):
    train = load_scene(tiny_cube_dir, split="train")
    test = load_scene(tiny_cube_dir, split="test")
    m = _small().fit(train)
    assert m.n_iter_ == 15 and m.log_.sc_count == 3
    images = m.predict(test)
    assert images.shape == (2, 16, 16, 3)
    assert np.isfinite(m.score(test))
    one = m.predict(test.poses[0].matrix, stride=2)
    assert one.shape == (1, 8, 8, 3)
    np.testing.assert_allclose(one[0], images[0, ::2, ::2], atol=1e-6)


def test_fit_is_deterministic(tiny_cube_dir):
    train = load_scene(tiny_cube_dir, split="train")
    a, b = _small(sc_weight=0.0).fit(train), _small(sc_weight=0.0).fit(train)
    for k in a.params_:
        np.testing.assert_array_equal(a.params_[k], b.params_[k])


def test_unfitted_and_bad_input(tiny_cube_dir):
    with pytest.raises(NotFittedError):
        _small().predict(np.eye(4))
    with pytest.raises(TypeError):
        _small().fit(np.zeros((3, 4, 4, 3)))
    with pytest.raises(ValueError):
        DietNeRF(depth=0).fit(load_scene(tiny_cube_dir, split="train"))
    with pytest.raises(ValueError):
        DietNeRF(encoder="clip", num_iters=1).fit(load_scene(tiny_cube_dir, split="train"))


def test_validation_helpers():
    assert check_pose(np.eye(4)).origin.tolist() == [0, 0, 0]
    assert len(check_poses([np.eye(4), look_at((1, 2, 3), (0, 0, 0))])) == 2
    assert len(check_poses(np.eye(4))) == 1
    with pytest.raises(SceneError):
        check_pose(np.diag([1.0, 1.0, -1.0, 1.0]))
    img = check_image(np.full((2, 2, 3), 255, np.uint8))
    assert img.dtype == np.float32 and img.max() == 1.0
    for bad in (np.zeros((2, 2)), np.full((2, 2, 3), 1.5), np.full((2, 2, 3), np.nan)):
        with pytest.raises(ValueError):
            check_image(bad)
    with pytest.raises(ValueError):
        check_positive_int(0, "n")
    with pytest.raises(TypeError):
        check_positive_int(1.5, "n")
    with pytest.raises(TypeError):
        check_dataset(CameraIntrinsics(2, 2, 1.0))
