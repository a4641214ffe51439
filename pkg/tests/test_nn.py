import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedmho import nn
from fedmho._validation import DimensionError, ValidationError

from conftest import central_difference, max_rel_error

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def _prob_vectors(size):
    return arrays(np.float64, size, elements=st.floats(0, 10, allow_nan=False)).filter(
        lambda v: v.sum() > 1e-3).map(lambda v: v / v.sum())


# matmul ---------------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nn.matmul(np.eye(2), a), a)


def test_matmul_row_by_column():
    assert nn.matmul([[1.0, 2.0]], [[3.0], [4.0]]).tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(nn.matmul(a, b), ref, rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nn.matmul(np.ones((2, 3)), np.ones((2, 3)))


# softmax ----------------------------------------------------------------------

def test_softmax_symmetric():
    np.testing.assert_array_equal(nn.softmax([0.0, 0.0]), [0.5, 0.5])


def test_softmax_large_equal_logits():
    out = nn.softmax([1000.0, 1000.0, 1000.0])
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)


def test_softmax_matches_extended_precision():
    mpmath.mp.dps = 50
    e = [mpmath.exp(v) for v in (1, 2, 3)]
    ref = [float(x / sum(e)) for x in e]
    np.testing.assert_allclose(nn.softmax([1.0, 2.0, 3.0]), ref, rtol=0, atol=1e-15)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_normalised_and_shift_invariant(z, c):
    p = nn.softmax(z)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)
    assert np.max(np.abs(nn.softmax(z + c) - p)) < 1e-12


# cross-entropy -------------------------------------------------------------------

def test_cross_entropy_perfect_margin():
    logits = np.array([[100.0, 0.0, 0.0], [0.0, 0.0, 100.0]])
    loss, _ = nn.cross_entropy(logits, [0, 2])
    assert loss < 1e-30


def test_cross_entropy_uniform_is_batch_times_log_classes():
    loss, grad = nn.cross_entropy(np.zeros((7, 10)), np.arange(7))
    assert loss == pytest.approx(7 * np.log(10), rel=1e-14)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def test_cross_entropy_mean_is_sum_over_batch(rng):
    logits, labels = rng.normal(size=(5, 4)), rng.integers(0, 4, 5)
    s, gs = nn.cross_entropy(logits, labels, "sum")
    m, gm = nn.cross_entropy(logits, labels, "mean")
    assert m == pytest.approx(s / 5, rel=1e-14)
    np.testing.assert_allclose(gm, gs / 5, rtol=1e-14)


def test_cross_entropy_gradient_finite_difference(rng):
    logits, labels = rng.normal(size=(6, 5)), rng.integers(0, 5, 6)
    _, grad = nn.cross_entropy(logits, labels)
    num = central_difference(lambda: nn.cross_entropy(logits, labels)[0], logits)
    assert max_rel_error(grad, num) < 1e-6


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValidationError):
        nn.cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValidationError):
        nn.cross_entropy(np.zeros((2, 3)), [-1, 0])


# KL ---------------------------------------------------------------------------------

def test_kl_identical_is_zero():
    p = np.array([0.2, 0.3, 0.5])
    assert nn.kl_categorical(p, p) == 0.0


def test_kl_closed_form():
    assert nn.kl_categorical([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2), rel=1e-15)


def test_kl_matches_extended_precision(rng):
    mpmath.mp.dps = 50
    p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
    ref = mpmath.fsum(mpmath.mpf(a) * (mpmath.log(a) - mpmath.log(b)) for a, b in zip(p, q))
    assert nn.kl_categorical(p, q) == pytest.approx(float(ref), rel=1e-12)


def test_kl_floors_q():
    val = nn.kl_categorical([0.5, 0.5], [1.0, 0.0])
    assert np.isfinite(val)
    assert val == pytest.approx(0.5 * np.log(0.5) + 0.5 * (np.log(0.5) - np.log(1e-12)))


def test_kl_rejects_unnormalised():
    with pytest.raises(ValidationError):
        nn.kl_categorical([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValidationError):
        nn.kl_categorical([1.2, -0.2], [0.5, 0.5])


@given(_prob_vectors(5), _prob_vectors(5))
def test_kl_non_negative_and_zero_only_when_equal(p, q):
    kl = nn.kl_categorical(p, q)
    # flooring q adds at most C * 1e-12 mass, so KL >= -log(1 + C * 1e-12)
    assert kl >= -len(q) * nn.KL_FLOOR - 1e-15
    if np.max(np.abs(p - q)) > 1e-6:
        assert kl > 0


def test_distillation_kl_zero_when_student_matches_teacher(rng):
    logits = rng.normal(size=(4, 5)) * 30
    loss, grad = nn.distillation_kl(nn.log_softmax(logits), logits)
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_distillation_kl_agrees_with_kl_categorical(rng):
    t, s = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    loss, _ = nn.distillation_kl(nn.log_softmax(t), s, reduction="sum")
    ref = sum(nn.kl_categorical(nn.softmax(a), nn.softmax(b)) for a, b in zip(t, s))
    assert loss == pytest.approx(ref, rel=1e-12)


def test_distillation_kl_gradient(rng):
    t, s = nn.log_softmax(rng.normal(size=(5, 3))), rng.normal(size=(5, 3))
    _, grad = nn.distillation_kl(t, s)
    num = central_difference(lambda: nn.distillation_kl(t, s)[0], s)
    assert max_rel_error(grad, num) < 1e-6


# optimizers ----------------------------------------------------------------------------

def test_sgd_plain_step_is_exact(rng):
    v, g = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    p = nn.Parameter(v, g)
    nn.SGDMomentum([p], lr=0.1, momentum=0.0).step()
    np.testing.assert_array_equal(p.value, v - 0.1 * g)


def test_sgd_momentum_two_steps_unrolled():
    p = nn.Parameter(np.array([1.0]), np.array([2.0]))
    opt = nn.SGDMomentum([p], lr=0.5, momentum=0.9)
    opt.step()                      # buf = 2, value = 1 - 1 = 0
    p.grad[...] = -1.0
    opt.step()                      # buf = 1.8 - 1 = 0.8, value = 0 - 0.4
    assert p.value[0] == pytest.approx(-0.4, abs=1e-15)


def test_sgd_zero_grad_no_change(rng):
    v = rng.normal(size=4)
    p = nn.Parameter(v)
    nn.SGDMomentum([p], lr=1.0, momentum=0.9).step()
    np.testing.assert_array_equal(p.value, v)


def test_adam_zero_grad_no_change(rng):
    v = rng.normal(size=4)
    p = nn.Parameter(v)
    nn.Adam([p], lr=0.1).step(t=1)
    np.testing.assert_array_equal(p.value, v)


def test_adam_scalar_step_by_hand():
    p = nn.Parameter(np.array([0.5]), np.array([0.2]))
    nn.Adam([p], lr=0.01, beta1=0.8, beta2=0.9, eps=1e-6).step()
    m_hat = (0.2 * 0.2) / (1 - 0.8)
    v_hat = (0.1 * 0.04) / (1 - 0.9)
    assert p.value[0] == pytest.approx(0.5 - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-6), rel=1e-14)


@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3))
def test_adam_first_step_moves_by_lr(g):
    p = nn.Parameter(np.array([0.0]), np.array([g]))
    nn.Adam([p], lr=0.01).step()
    assert p.value[0] == pytest.approx(-0.01 * np.sign(g), rel=1e-4)


def test_adam_rejects_step_zero():
    with pytest.raises(ValidationError):
        nn.Adam([nn.Parameter(np.zeros(1))]).step(t=0)


@pytest.mark.parametrize("kwargs", [dict(lr=-1.0), dict(beta1=1.0), dict(beta2=0.0), dict(eps=0.0)])
def test_adam_rejects_bad_hyperparameters(kwargs):
    with pytest.raises(ValidationError):
        nn.Adam([nn.Parameter(np.zeros(1))], **kwargs)


def test_sgd_rejects_bad_momentum():
    with pytest.raises(ValidationError):
        nn.SGDMomentum([nn.Parameter(np.zeros(1))], lr=0.1, momentum=1.0)


def test_optimizer_buffers_match_parameters(rng):
    ps = [nn.Parameter(rng.normal(size=s)) for s in [(3, 2), (2,), (4, 1)]]
    for opt in (nn.SGDMomentum(ps, 0.1, 0.9), nn.Adam(ps)):
        bufs = opt.buffers if hasattr(opt, "buffers") else opt.m + opt.v
        assert all(b.shape == p.shape for b, p in zip(bufs, ps * (len(bufs) // len(ps))))


def test_parameter_shape_invariant():
    with pytest.raises(DimensionError):
        nn.Parameter(np.zeros((2, 2)), np.zeros(3))


# dense layer -----------------------------------------------------------------------------

def test_dense_identity_passthrough(rng):
    x = rng.normal(size=(5, 3))
    out, _ = nn.dense_forward(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(out, x)


def test_relu_backward_masks_negative_preactivations():
    w, b = nn.Parameter(np.eye(2)), nn.Parameter(np.zeros(2))
    x = np.array([[-1.0, 2.0]])
    _, cache = nn.dense_forward(x, w, b, "relu")
    gx = nn.dense_backward(cache, np.ones((1, 2)), w, b)
    np.testing.assert_array_equal(gx, [[0.0, 1.0]])
    np.testing.assert_array_equal(b.grad, [0.0, 1.0])


@pytest.mark.parametrize("activation", ["relu", "sigmoid", "identity"])
def test_dense_gradients_finite_difference(rng, activation):
    x = rng.normal(size=(4, 3))
    w, b = nn.Parameter(rng.normal(size=(3, 2))), nn.Parameter(rng.normal(size=2))
    up = rng.normal(size=(4, 2))

    def loss():
        return float(np.sum(nn.dense_forward(x, w, b, activation)[0] * up))

    out, cache = nn.dense_forward(x, w, b, activation)
    gx = nn.dense_backward(cache, up, w, b)
    assert max_rel_error(w.grad, central_difference(loss, w.value)) < 1e-4
    assert max_rel_error(b.grad, central_difference(loss, b.value)) < 1e-4
    assert max_rel_error(gx, central_difference(loss, x)) < 1e-4


def test_dense_backward_accumulates(rng):
    x = rng.normal(size=(2, 3))
    w, b = nn.Parameter(rng.normal(size=(3, 2))), nn.Parameter(np.zeros(2))
    _, cache = nn.dense_forward(x, w, b)
    nn.dense_backward(cache, np.ones((2, 2)), w, b)
    once = w.grad.copy()
    nn.dense_backward(cache, np.ones((2, 2)), w, b)
    np.testing.assert_allclose(w.grad, 2 * once)


def test_dense_shape_errors():
    with pytest.raises(DimensionError):
        nn.dense_forward(np.ones((2, 3)), np.ones((2, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        nn.dense_forward(np.ones((2, 3)), np.ones((3, 2)), np.zeros(3))


@settings(max_examples=50)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_kernels_are_deterministic_and_finite(x, w):
    a, _ = nn.dense_forward(x, w, np.zeros(2), "sigmoid")
    b, _ = nn.dense_forward(x, w, np.zeros(2), "sigmoid")
    assert np.all(np.isfinite(a))
    assert a.tobytes() == b.tobytes()


def test_sigmoid_extremes_stay_finite():
    out = nn.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])
