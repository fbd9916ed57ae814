"""Training objectives: batch-based classification, Gram consistency and
self-path distillation, plus their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .exceptions import NumericsError, ShapeError
from .nn import log_softmax, np_log_softmax, softmax
from .tensor import Tensor


def l2_normalize(f: Tensor) -> Tensor:
    norms = T.sqrt(T.sum_(f * f, axis=-1, keepdims=True))
    if (norms.data == 0).any():
        raise NumericsError("cannot L2-normalise a zero-norm feature row")
    return f / norms


def bbc_loss(f_q, f_t, scale: float = 10.0) -> Tensor:
    """In-batch softmax cross-entropy; query ``i`` should pick target ``i``.

    Similarities are scaled cosines, ``scale * <f_q_i/|f_q_i|, f_t_j/|f_t_j|>``.
    """
    f_q, f_t = T.as_tensor(f_q), T.as_tensor(f_t)
    if f_q.ndim != 2 or f_q.shape != f_t.shape:
        raise ShapeError(f"bbc_loss expects matching (B, D) inputs, got {f_q.shape} and {f_t.shape}")
    sims = (l2_normalize(f_q) @ T.swapaxes(l2_normalize(f_t), 0, 1)) * scale
    logp = log_softmax(sims, axis=-1)
    idx = np.arange(f_q.shape[0])
    return -T.mean(logp[idx, idx])


def _gram(f: Tensor) -> Tensor:
    return f @ T.swapaxes(f, 0, 1)


def _frobenius(a: Tensor) -> Tensor:
    return T.sqrt(T.sum_(a * a))


def consistency_loss(f_q, f_t, f_in) -> Tensor:
    """``||G(f_q) - G(f_t)||_F + ||G(f_in) - G(f_t)||_F`` with ``G(f) = f f^T``."""
    f_q, f_t, f_in = T.as_tensor(f_q), T.as_tensor(f_t), T.as_tensor(f_in)
    if not (f_q.ndim == f_t.ndim == f_in.ndim == 2) or not (f_q.shape[0] == f_t.shape[0] == f_in.shape[0]):
        raise ShapeError(f"consistency_loss batch mismatch: {f_q.shape}, {f_t.shape}, {f_in.shape}")
    g_t = _gram(f_t)
    return _frobenius(_gram(f_q) - g_t) + _frobenius(_gram(f_in) - g_t)


def spd_loss(student_logits, teacher_logits, tau: float = 2.0, mask=None) -> Tensor:
    """Self-path distillation, ``tau^2 * KL(p_student || p_teacher)``.

    Logits are ``(B, S, n)``: one softened distribution per routing site.  KL
    is averaged over sites, summed over the queries selected by ``mask`` and
    divided by the full batch size.  The teacher is a constant.
    """
    s = T.as_tensor(student_logits)
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, float)
    if s.shape != t.shape or s.ndim < 2:
        raise ShapeError(f"student logits {s.shape} vs teacher logits {t.shape}")
    log_ps = log_softmax(s * (1.0 / tau), axis=-1)
    ps = softmax(s * (1.0 / tau), axis=-1)
    log_pt = np_log_softmax(t / tau, axis=-1)
    kl = T.sum_(ps * (log_ps - log_pt), axis=-1)  # (B, S)
    per_query = T.mean(kl, axis=-1) if kl.ndim > 1 else kl
    batch = per_query.shape[0] if per_query.ndim else 1
    if mask is not None:
        per_query = per_query * np.asarray(mask, dtype=np.float64)
    return T.sum_(per_query) * (tau * tau / batch)


@dataclass
class LossBreakdown:
    l_bbc: float
    l_cons: float
    l_path: float
    l_total: float
    lam: float
    tau_path: Optional[float] = None
    batch_size: Optional[int] = None
    tensor: Optional[Tensor] = None

    def as_dict(self) -> dict:
        return {"l_bbc": self.l_bbc, "l_cons": self.l_cons, "l_path": self.l_path, "l_total": self.l_total}


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def total_loss(l_bbc, l_cons, l_path, lam: float, tau_path=None, batch_size=None) -> LossBreakdown:
    """``l_bbc + l_cons + lam * l_path``; tensors stay differentiable in ``.tensor``."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    parts = [l_bbc, l_cons] + ([l_path * lam] if lam else [])
    if any(isinstance(x, Tensor) for x in parts):
        total = T.as_tensor(parts[0])
        for x in parts[1:]:
            total = total + x
        value = _value(total)
    else:
        total = None
        value = _value(l_bbc) + _value(l_cons) + lam * _value(l_path)
    return LossBreakdown(_value(l_bbc), _value(l_cons), _value(l_path), value, lam, tau_path, batch_size, total)
