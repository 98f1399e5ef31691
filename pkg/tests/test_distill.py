import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dseg import GROUND, IGNORE
from dseg.distill import (MAGIC, NUM_PIXEL_FEATURES, ClassifierParams, TrainHyper, TrainingDiverged,
                          batch_loss_and_grad, classifier_forward, load_classifier, pixel_features,
                          poly_lr, prediction_from_logits, refine_predictions, save_classifier,
                          student_loss, teacher_loss, train)

from oracles import central_difference, matmul_oracle, vote_oracle


# -- pixel features ----------------------------------------------------------

def test_constant_image_features():
    img = np.full((5, 7, 3), 51, dtype=np.uint8)
    f = pixel_features(img)
    assert f.shape == (5, 7, NUM_PIXEL_FEATURES)
    assert np.allclose(f[..., :3], 0.2)
    assert np.allclose(f[..., 5], 0.2)
    assert np.allclose(f[..., 6:], 0.0)
    assert f[2, 3, 3] == 3 / 7 and f[2, 3, 4] == 2 / 5


def test_single_pixel_features():
    f = pixel_features(np.array([[[255, 0, 0]]], dtype=np.uint8))
    assert f.shape == (1, 1, 9)
    assert np.allclose(f[0, 0], [1, 0, 0, 0, 0, 0.299, 0, 0, 0], atol=1e-12)


def test_ramp_matches_stencil():
    # luma grows by 1/255 * 10 per column
    col = np.arange(8) * 10
    img = np.repeat(np.repeat(col[None, :, None], 4, axis=0), 3, axis=2).astype(np.uint8)
    f = pixel_features(img)
    step = 10 / 255
    assert np.allclose(f[:, 1:-1, 7], step)                 # interior central difference
    assert np.allclose(f[:, 0, 7], step / 2)                # clamped border
    assert np.allclose(f[..., 8], 0.0)
    # 3x3 mean of a linear ramp at interior columns is the centre value
    assert np.allclose(f[1:-1, 1:-1, 5], f[1:-1, 1:-1, 0])
    vals = np.array([-1, 0, 1]) * step
    assert np.allclose(f[1:-1, 1:-1, 6], np.sqrt((vals ** 2).mean()))


# -- forward -----------------------------------------------------------------

def zero_params(n_features=3, hidden=4, k=3):
    return ClassifierParams(np.zeros((n_features, hidden)), np.zeros(hidden), np.zeros((hidden, k)), np.zeros(k))


def test_zero_weights_uniform():
    pred = classifier_forward(zero_params(k=5), np.random.default_rng(0).normal(size=(3, 4, 3)))
    assert np.allclose(pred.probs, 0.2)


def test_zero_logits_half():
    pred = prediction_from_logits(np.zeros((1, 1, 2)))
    assert pred.probs.tolist() == [[[0.5, 0.5]]]


def test_forward_matches_matmul_oracle():
    p = ClassifierParams(np.array([[0.5, -1.0], [2.0, 0.25]]), np.array([0.1, -0.2]),
                         np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0.0, 0.3]))
    x = np.array([[[1.0, 2.0], [-1.0, 0.5]]])
    pre = np.array(matmul_oracle(x[0].tolist(), p.w1.tolist())) + p.b1
    logits = np.array(matmul_oracle(np.tanh(pre).tolist(), p.w2.tolist())) + p.b2
    pred = classifier_forward(p, x)
    assert np.allclose(pred.logits[0], logits, atol=1e-12)
    e = np.exp(logits)
    assert np.allclose(pred.probs[0], e / e.sum(axis=1, keepdims=True), atol=1e-12)


def test_forward_dimension_error():
    with pytest.raises(ValueError):
        classifier_forward(zero_params(n_features=3), np.zeros((2, 2, 4)))


# -- teacher loss ------------------------------------------------------------

def test_teacher_loss_ln2():
    pred = prediction_from_logits(np.zeros((1, 2, 2)))
    loss, _ = teacher_loss(pred, np.array([[1, IGNORE]]))
    assert abs(loss - math.log(2)) < 1e-12


def test_teacher_loss_all_ignored():
    pred = prediction_from_logits(np.random.default_rng(0).normal(size=(3, 3, 4)))
    loss, grad = teacher_loss(pred, np.full((3, 3), IGNORE))
    assert loss == 0.0 and not grad.any()


def test_teacher_loss_ignores_masked_pixels():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(2, 3, 4))
    M = np.array([[1, 2, IGNORE], [4, IGNORE, 3]])
    a, _ = teacher_loss(prediction_from_logits(logits), M)
    logits[0, 2] = 100.0 * rng.normal(size=4)
    logits[1, 1] = -50.0
    b, _ = teacher_loss(prediction_from_logits(logits), M)
    assert a == b


def test_label_range_errors():
    pred = prediction_from_logits(np.zeros((1, 2, 3)))
    with pytest.raises(ValueError):
        teacher_loss(pred, np.array([[4, 1]]))
    with pytest.raises(ValueError):
        student_loss(np.array([[0, 1]]), pred)
    with pytest.raises(ValueError):
        teacher_loss(pred, np.array([[1, 1, 1]]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["teacher", "student"]))
def test_logit_gradient_matches_finite_difference(seed, kind):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(3, 4, 5))
    labels = rng.integers(1, 6, size=(3, 4))
    if kind == "teacher":
        labels[rng.random((3, 4)) < 0.3] = IGNORE

    def loss_of(z):
        pred = prediction_from_logits(z)
        return teacher_loss(pred, labels)[0] if kind == "teacher" else student_loss(labels, pred)[0]

    pred = prediction_from_logits(logits)
    _, grad = teacher_loss(pred, labels) if kind == "teacher" else student_loss(labels, pred)
    for idx in [(0, 0, 0), (1, 2, 3), (2, 3, 4), (2, 1, 0)]:
        assert abs(grad[idx] - central_difference(loss_of, logits, idx)) < 1e-7


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["teacher", "student"]))
def test_parameter_gradient_matches_finite_difference(seed, kind):
    rng = np.random.default_rng(seed)
    params = ClassifierParams.init(4, 5, 3, seed=int(rng.integers(1000)))
    xs = [rng.normal(size=(6, 4)), rng.normal(size=(9, 4))]
    ys = [rng.integers(1, 4, size=6), rng.integers(1, 4, size=9)]
    if kind == "teacher":
        ys[0][:2] = IGNORE
    _, grads = batch_loss_and_grad(params, xs, ys, kind)
    for which, idx in [(0, (1, 2)), (1, (3,)), (2, (4, 0)), (3, (2,))]:
        def loss_of(a):
            p = params.copy()
            p.arrays()[which][...] = a
            return batch_loss_and_grad(p, xs, ys, kind)[0]
        fd = central_difference(loss_of, params.arrays()[which], idx)
        assert abs(grads[which][idx] - fd) < 1e-7


# -- student loss ------------------------------------------------------------

def test_student_loss_uniform_is_ln_k():
    loss, _ = student_loss(np.array([[1, 2], [3, 4]]), prediction_from_logits(np.zeros((2, 2, 4))))
    assert abs(loss - math.log(4)) < 1e-12


def test_student_loss_confident_near_zero():
    refined = np.array([[1, 2], [2, 1]])
    logits = np.where(np.arange(1, 3) == refined[..., None], 40.0, -40.0)
    loss, _ = student_loss(refined, prediction_from_logits(logits))
    assert 0 <= loss < 1e-30


# -- refinement --------------------------------------------------------------

def test_refine_majority_examples():
    seg = np.array([[5, 5, 5]])
    assert refine_predictions(np.array([[2, 2, 3]]), seg).tolist() == [[2, 2, 2]]
    assert refine_predictions(np.array([[3, 2]]), np.array([[5, 5]])).tolist() == [[2, 2]]


def test_refine_leaves_unsegmented_and_optional_ground():
    pred = np.array([[1, 2, 3, 1]])
    seg = np.array([[IGNORE, GROUND, GROUND, 4]])
    assert refine_predictions(pred, seg).tolist() == [[1, 2, 2, 1]]
    assert refine_predictions(pred, seg, include_ground=False).tolist() == [[1, 2, 3, 1]]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_refine_matches_vote_oracle(seed, include_ground):
    rng = np.random.default_rng(seed)
    pred = rng.integers(1, 5, size=(16, 16))
    seg = rng.choice([IGNORE, GROUND, 1, 2, 3, 4, 5], size=(16, 16))
    out = refine_predictions(pred, seg, include_ground)
    assert np.array_equal(out, vote_oracle(pred, seg, include_ground))
    # idempotent, and constant on every refined segment
    assert np.array_equal(refine_predictions(out, seg, include_ground), out)


def test_refine_shape_error():
    with pytest.raises(ValueError):
        refine_predictions(np.ones((2, 2)), np.ones((2, 3)))


# -- training ----------------------------------------------------------------

def two_region_frame(h=12, w=16):
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[:, : w // 2] = (200, 40, 40)
    img[:, w // 2:] = (40, 40, 200)
    labels = np.ones((h, w), dtype=np.int64)
    labels[:, w // 2:] = 2
    return pixel_features(img), labels


def test_zero_epochs_returns_init():
    f, y = two_region_frame()
    res = train([f], [y], "teacher", TrainHyper(epochs=0, seed=3))
    init = ClassifierParams.init(NUM_PIXEL_FEATURES, 32, 2, 3)
    assert all(np.array_equal(a, b) for a, b in zip(res.params.arrays(), init.arrays()))
    assert res.log == []


def test_separable_frame_learned():
    f, y = two_region_frame()
    y_masked = y.copy()
    y_masked[::2, ::3] = IGNORE
    res = train([f], [y_masked], "teacher", TrainHyper(lr=0.01, batch=1, epochs=200, seed=0))
    acc = (classifier_forward(res.params, f).argmax == y).mean()
    assert acc >= 0.99


def test_training_deterministic():
    f, y = two_region_frame()
    hyper = TrainHyper(lr=0.01, batch=2, epochs=5, seed=9, pixels_per_frame=50)
    a = train([f, f], [y, y], "student", hyper)
    b = train([f, f], [y, y], "student", hyper)
    assert a.log == b.log
    assert all(np.array_equal(p, q) for p, q in zip(a.params.arrays(), b.params.arrays()))


def test_small_lr_loss_non_increasing():
    f, y = two_region_frame()
    res = train([f], [y], "teacher", TrainHyper(lr=1e-3, batch=1, epochs=30, seed=1,
                                                 pixels_per_frame=None, optimizer="sgd"))
    losses = [loss for _, loss, _ in res.log]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_divergence_raises_with_trajectory():
    f, y = two_region_frame()
    with pytest.raises(TrainingDiverged) as err, np.errstate(invalid="ignore", over="ignore"):
        train([f], [y], "teacher", TrainHyper(lr=math.inf, batch=1, epochs=3, optimizer="sgd"))
    assert err.value.trajectory
    assert not math.isfinite(err.value.trajectory[-1][1])


def test_poly_lr():
    assert poly_lr(0.1, 0, 10) == 0.1
    assert abs(poly_lr(0.1, 5, 10, 1.0) - 0.05) < 1e-15
    assert poly_lr(0.1, 10, 10) == 0.0


def test_train_input_errors():
    f, y = two_region_frame()
    with pytest.raises(ValueError):
        train([f], [y], "bogus")
    with pytest.raises(ValueError):
        train([f], [y[:, :4]], "teacher")
    y2 = y.copy()
    y2[0, 0] = IGNORE
    with pytest.raises(ValueError):
        train([f], [y2], "student")


# -- persistence -------------------------------------------------------------

def test_classifier_round_trip(tmp_path):
    p = ClassifierParams.init(9, 7, 5, seed=4)
    save_classifier(tmp_path / "m.bin", p)
    data = (tmp_path / "m.bin").read_bytes()
    assert data[:8] == MAGIC
    assert len(data) == 8 + 12 + 8 * (9 * 7 + 7 + 7 * 5 + 5)
    back = load_classifier(tmp_path / "m.bin")
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), back.arrays()))


def test_classifier_bad_magic(tmp_path):
    (tmp_path / "m.bin").write_bytes(b"NOTMAGIC" + bytes(12))
    with pytest.raises(ValueError):
        load_classifier(tmp_path / "m.bin")
