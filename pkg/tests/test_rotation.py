import numpy as np
import numpy.testing as npt
import pytest

from conftest import tiny_encoder
from rotcap.config import new_rng
from rotcap.errors import DataError, TrainingDivergence
from rotcap.models import rotation_head
from rotcap.rotation import (ROTATION_LABELS, expand_with_rotations, pretext_eval,
                             pretext_train, rotate)
from rotcap.training import TrainConfig


def test_rotate_identity_is_bit_exact():
    x = np.random.default_rng(0).normal(size=(3, 5, 5))
    npt.assert_array_equal(rotate(x, 0), x)


def test_rotate_ccw_2x2():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])  # [[a,b],[c,d]]
    npt.assert_array_equal(rotate(x, 1), np.array([[[2.0, 4.0], [1.0, 3.0]]]))


def test_rotate_group_law_and_pixel_conservation():
    rng = np.random.default_rng(1)
    for _ in range(30):
        x = rng.normal(size=(3, 6, 6))
        for a in ROTATION_LABELS:
            for b in ROTATION_LABELS:
                npt.assert_array_equal(rotate(rotate(x, a), b), rotate(x, (a + b) % 4))
        for r in ROTATION_LABELS:
            npt.assert_array_equal(np.sort(rotate(x, r), axis=None), np.sort(x, axis=None))


def test_rotate_rejects_bad_input():
    with pytest.raises(DataError):
        rotate(np.zeros((3, 4, 5)), 1)
    with pytest.raises(DataError):
        rotate(np.zeros((3, 4, 4)), 4)


def test_expand_with_rotations():
    x = np.random.default_rng(2).normal(size=(3, 4, 4))
    samples = expand_with_rotations(x)
    assert [s.label for s in samples] == [0, 1, 2, 3]
    npt.assert_array_equal(samples[0].image, x)
    npt.assert_array_equal(samples[2].image, x[:, ::-1, ::-1])
    # generic image: all four rotations pairwise distinct
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.array_equal(samples[i].image, samples[j].image)


def test_expand_symmetric_image_is_degenerate():
    # fully radially symmetric input: every rotation identical
    yy, xx = np.mgrid[0:8, 0:8]
    disc = (((yy - 3.5) ** 2 + (xx - 3.5) ** 2) <= 9).astype(float)
    img = np.stack([disc] * 3)
    samples = expand_with_rotations(img)
    for s in samples[1:]:
        npt.assert_array_equal(s.image, samples[0].image)


def _toy_images(n=8, size=8, seed=3):
    return np.random.default_rng(seed).normal(size=(n, 3, size, size))


def test_pretext_step_count_expansion_mode():
    images = _toy_images(n=10)
    rng = new_rng(0)
    enc = tiny_encoder(rng)
    head = rotation_head(enc.embed_size, rng)
    cfg = TrainConfig(batch_size=32, epochs=2, learning_rate=1e-3, seed=0)
    history = pretext_train(enc, head, images, cfg)
    # ceil(4 * 10 / 32) = 2 optimizer steps per epoch
    assert history.steps == 2 * 2
    assert len(history.rows) == 2
    assert all(np.isfinite(row[1]) for row in history.rows)


def test_pretext_initial_loss_near_ln4():
    images = _toy_images(n=16)
    rng = new_rng(4)
    enc = tiny_encoder(rng)
    head = rotation_head(enc.embed_size, rng)
    cfg = TrainConfig(batch_size=64, epochs=1, learning_rate=1e-9, seed=0)
    history = pretext_train(enc, head, images, cfg)
    assert abs(history.rows[0][1] - np.log(4)) < 0.15


def test_pretext_eval_contracts():
    images = _toy_images(n=5)
    rng = new_rng(5)
    enc = tiny_encoder(rng)
    head = rotation_head(enc.embed_size, rng)
    # bias-rigged head always answers label 0: accuracy exactly 1/4
    head.fc.w[...] = 0.0
    head.fc.b[...] = 0.0
    head.fc.b[0] = 10.0
    assert pretext_eval(enc, head, images) == 0.25
    assert pretext_eval(enc, head, images) == pretext_eval(enc, head, images)
    with pytest.raises(DataError):
        pretext_eval(enc, head, np.empty((0, 3, 8, 8)))


def test_pretext_single_rotation_mode_runs():
    images = _toy_images(n=6)
    rng = new_rng(6)
    enc = tiny_encoder(rng)
    head = rotation_head(enc.embed_size, rng)
    cfg = TrainConfig(batch_size=8, epochs=2, learning_rate=1e-3, seed=0,
                      rotation_expansion="single")
    history = pretext_train(enc, head, images, cfg)
    assert len(history.rows) == 2


@pytest.mark.filterwarnings("ignore:invalid value")
def test_pretext_divergence_aborts_with_location():
    images = _toy_images(n=6)
    rng = new_rng(7)
    enc = tiny_encoder(rng)
    head = rotation_head(enc.embed_size, rng)
    head.fc.w[...] = np.inf  # forces non-finite logits -> loss error path
    cfg = TrainConfig(batch_size=8, epochs=1, learning_rate=1e-3, seed=0)
    with pytest.raises(TrainingDivergence, match="epoch 0"):
        pretext_train(enc, head, images, cfg)
