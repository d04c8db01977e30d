"""Temperature softmax, KL divergence and the two GKT composite losses.

Teacher logits are always treated as constants: whatever is passed as the
teacher is converted to a plain array before use, so no gradient can reach
it. The KD term is added to the cross-entropy with unit weight and no T^2
factor.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from .tensor import Tensor
from .tensor import functional as F


class LossTerms(NamedTuple):
    total: Tensor
    ce: Tensor
    kd: Optional[Tensor]


def _logits(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _teacher(x, dtype) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype)


def _check_temperature(T: float) -> None:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")


def temperature_softmax(logits, T: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / T``; stabilized by max subtraction."""
    _check_temperature(T)
    z = _logits(logits)
    return F.softmax(F.div(z, float(T)) if T != 1.0 else z, axis=-1)


def _teacher_probs(teacher_logits: np.ndarray, T: float) -> tuple[np.ndarray, np.ndarray]:
    z = teacher_logits / T if T != 1.0 else teacher_logits
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return np.exp(logp), logp


def kl_divergence(p, q) -> Tensor:
    """Batch mean of ``sum_i p_i log(p_i / q_i)`` for row-stochastic ``p`` and ``q``.

    ``p`` is the target and never receives a gradient; ``q`` may be a tensor
    on the tape.
    """
    q = _logits(q)
    pd = _teacher(p, q.dtype)
    if pd.shape != q.shape:
        raise ValueError(f"KL shape mismatch: p {pd.shape} vs q {q.shape}")
    plogp = np.where(pd > 0, pd * np.log(np.where(pd > 0, pd, 1.0)), 0.0).astype(q.dtype)
    inner = F.sub(plogp, F.mul(pd, F.log(q)))
    return F.div(F.sum(inner), float(pd.shape[0]))


def kd_loss(student_logits, teacher_logits, T: float = 1.0) -> Tensor:
    """``KL(softmax_T(teacher) || softmax_T(student))`` with the teacher detached."""
    _check_temperature(T)
    student = _logits(student_logits)
    teacher = _teacher(teacher_logits, student.dtype)
    if teacher.shape != student.shape:
        raise ValueError(f"KD shape mismatch: student {student.shape} vs teacher {teacher.shape}")
    p, logp = _teacher_probs(teacher, T)
    logq = F.log_softmax(F.div(student, float(T)) if T != 1.0 else student, axis=-1)
    inner = F.mul(p, F.sub(logp, logq))
    return F.div(F.sum(inner), float(student.shape[0]))


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        bad = y[(y < 0) | (y >= num_classes)][0]
        raise ValueError(f"label {bad} outside [0, {num_classes})")
    return y.astype(np.int64)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-probability of the true class."""
    z = _logits(logits)
    if z.ndim != 2:
        raise ValueError(f"cross_entropy expects (N, C) logits, got {z.shape}")
    n, c = z.shape
    y = _check_labels(labels, n, c)
    onehot = np.zeros((n, c), dtype=z.dtype)
    onehot[np.arange(n), y] = 1.0
    return F.div(F.neg(F.sum(F.mul(onehot, F.log_softmax(z, axis=-1)))), float(n))


def server_loss(server_logits, client_logits, labels, T: float = 1.0, use_kd: bool = True) -> LossTerms:
    """CE(server) + KL(p_client || p_server); the client logits are the teacher."""
    ce = cross_entropy(server_logits, labels)
    if not use_kd or client_logits is None:
        return LossTerms(ce, ce, None)
    kd = kd_loss(server_logits, client_logits, T)
    return LossTerms(F.add(ce, kd), ce, kd)


def client_loss(client_logits, server_logits, labels, T: float = 1.0, use_kd: bool = True) -> LossTerms:
    """CE(client) + KL(p_server || p_client); plain CE while no server logits exist."""
    ce = cross_entropy(client_logits, labels)
    if not use_kd or server_logits is None:
        return LossTerms(ce, ce, None)
    kd = kd_loss(client_logits, server_logits, T)
    return LossTerms(F.add(ce, kd), ce, kd)
