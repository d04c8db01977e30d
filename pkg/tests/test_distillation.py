import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gkt.distillation import client_loss, cross_entropy, kd_loss, kl_divergence, server_loss, temperature_softmax
from gkt.tensor import Tape, Tensor

logit_rows = hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
                        elements=st.floats(-20, 20, allow_nan=False))


def scalar_softmax(z, T=1.0):
    e = [math.exp(v / T) for v in z]
    return [v / sum(e) for v in e]


def scalar_kl(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)


def test_softmax_examples():
    np.testing.assert_allclose(temperature_softmax(np.array([[1.0, 2.0, 3.0]])).data,
                               [[0.09003, 0.24473, 0.66524]], atol=5e-6)
    np.testing.assert_allclose(temperature_softmax(np.zeros((1, 3)), T=7.0).data, [[1 / 3] * 3], rtol=1e-6)
    hot = temperature_softmax(np.array([[1.0, 2.0, 3.0]]), T=1e6).data
    np.testing.assert_allclose(hot, [[1 / 3] * 3], atol=1e-4)


@pytest.mark.parametrize("T", [0.0, -1.0])
def test_temperature_must_be_positive(T):
    with pytest.raises(ValueError, match="positive"):
        temperature_softmax(np.zeros((1, 2)), T)
    with pytest.raises(ValueError, match="positive"):
        kd_loss(np.zeros((1, 2)), np.zeros((1, 2)), T)


def test_kl_example_and_mismatch():
    got = kl_divergence(np.array([[0.5, 0.5]]), Tensor(np.array([[0.9, 0.1]]), dtype=np.float64)).item()
    assert got == pytest.approx(0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1), abs=1e-12)
    assert got == pytest.approx(0.51083, abs=5e-6)
    with pytest.raises(ValueError, match="shape"):
        kl_divergence(np.ones((1, 2)) / 2, Tensor(np.ones((1, 3)) / 3))


def test_cross_entropy_examples():
    assert cross_entropy(np.array([[1.0, 2.0, 3.0]]), [2]).item() == pytest.approx(0.40761, abs=5e-6)
    assert cross_entropy(np.zeros((3, 10)), [0, 4, 9]).item() == pytest.approx(math.log(10), rel=1e-6)
    assert cross_entropy(np.array([[0.0, 80.0]]), [1]).item() < 1e-20
    with pytest.raises(ValueError, match="outside"):
        cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError, match="expected 2 labels"):
        cross_entropy(np.zeros((2, 3)), [0])


def test_server_loss_composition_oracle():
    zs = np.array([[0.2, -1.0, 0.5], [1.5, 0.3, -0.7]])
    zc = np.array([[1.0, 0.0, -1.0], [0.1, 0.2, 0.3]])
    y = [2, 0]
    for T in (1.0, 2.5):
        ce = sum(-math.log(scalar_softmax(zs[i])[y[i]]) for i in range(2)) / 2
        kd = sum(scalar_kl(scalar_softmax(zc[i], T), scalar_softmax(zs[i], T)) for i in range(2)) / 2
        terms = server_loss(Tensor(zs, dtype=np.float64), zc, y, T)
        assert terms.ce.item() == pytest.approx(ce, rel=1e-12)
        assert terms.kd.item() == pytest.approx(kd, rel=1e-12)
        assert terms.total.item() == pytest.approx(ce + kd, rel=1e-12)
        # client side is the mirror image
        mirror = client_loss(Tensor(zc, dtype=np.float64), zs, y, T)
        kd_c = sum(scalar_kl(scalar_softmax(zs[i], T), scalar_softmax(zc[i], T)) for i in range(2)) / 2
        assert mirror.kd.item() == pytest.approx(kd_c, rel=1e-12)


def test_round_one_client_loss_is_pure_ce():
    z = np.array([[0.3, 0.1, -0.2]])
    terms = client_loss(z, None, [1])
    assert terms.kd is None and terms.total is terms.ce
    off = client_loss(z, z + 1.0, [1], use_kd=False)
    assert off.kd is None and off.total.item() == cross_entropy(z, [1]).item()


def test_matched_teacher_reduces_to_ce():
    z = np.random.default_rng(0).normal(size=(6, 5))
    y = np.arange(6) % 5
    for fn in (client_loss, server_loss):
        terms = fn(z, z, y, 2.0)
        assert abs(terms.kd.item()) <= 1e-7
        assert terms.ce.item() == cross_entropy(z, y).item()


def test_teacher_is_detached():
    student = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    teacher = Tensor(np.random.default_rng(2).normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = kd_loss(student, teacher, 2.0)
    tape.backward(loss)
    assert student.grad is not None and teacher.grad is None


@given(logit_rows)
def test_kl_self_is_zero(z):
    p = temperature_softmax(Tensor(z, dtype=np.float64)).data
    assert abs(kl_divergence(p, Tensor(p, dtype=np.float64)).item()) <= 1e-7


@given(logit_rows, st.integers(0, 2**32 - 1))
def test_kl_nonnegative(z, seed):
    p = temperature_softmax(Tensor(z, dtype=np.float64)).data
    q = temperature_softmax(Tensor(np.random.default_rng(seed).normal(scale=3, size=z.shape), dtype=np.float64)).data
    assert kl_divergence(p, Tensor(q, dtype=np.float64)).item() >= -1e-12


@given(logit_rows, st.floats(-50, 50), st.floats(0.5, 10))
def test_softmax_shift_invariance(z, c, T):
    np.testing.assert_allclose(temperature_softmax(Tensor(z + c, dtype=np.float64), T).data,
                               temperature_softmax(Tensor(z, dtype=np.float64), T).data, atol=1e-6)


@given(logit_rows, st.integers(0, 2**32 - 1), st.floats(0.5, 5))
def test_losses_dominate_ce(z, seed, T):
    r = np.random.default_rng(seed)
    y = r.integers(0, z.shape[1], size=len(z))
    other = r.normal(size=z.shape)
    for fn in (client_loss, server_loss):
        terms = fn(Tensor(z, dtype=np.float64), other, y, T)
        assert terms.total.item() >= terms.ce.item() - 1e-9


def test_kl_nonnegative_on_100_pairs():
    r = np.random.default_rng(3)
    for _ in range(100):
        p = r.dirichlet(np.ones(5), size=2)
        q = r.dirichlet(np.ones(5), size=2)
        assert kl_divergence(p, Tensor(q, dtype=np.float64)).item() >= 0
