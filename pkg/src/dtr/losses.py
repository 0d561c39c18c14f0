"""Scalar objectives for the disentanglement, reconstruction and compactness steps.

All losses average over the batch. Trade-off weights (alpha, beta, theta)
are applied by the trainer, except in :func:`compactness_loss` whose
contract returns the already weighted objective.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import EPS_LOG, Tensor


@dataclass
class LossReport:
    e_cls_s: float = 0.0
    e_dist: float = 0.0
    e_cls_d: float = 0.0
    e_rec: float = 0.0
    e_g_s: float = 0.0
    e_g_t: float = 0.0
    m_selected: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _labels(labels: Sequence[int], n: int, K: int, what: str) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ag.DimensionError(f"{what}: {y.shape[0]} labels for {n} rows")
    if y.size and (y.min() < 0 or y.max() >= K):
        bad = int(y[(y < 0) | (y >= K)][0])
        raise ValueError(f"{what}: label {bad} outside [0, {K})")
    return y


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    n, K = logits.shape
    y = _labels(labels, n, K, "cross_entropy")
    if n == 0:
        return Tensor(np.array(0.0))
    p = ag.softmax_rows(logits)
    return ag.neg(ag.mean(ag.log(ag.pick(p, y))))


def entropy(p: np.ndarray | Tensor) -> float | np.ndarray:
    """Natural-log entropy of a distribution, or of each row of a matrix."""
    arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    return -(arr * np.log(arr + EPS_LOG)).sum(axis=-1)


def entropy_weight(p: np.ndarray | Tensor) -> float | np.ndarray:
    """``1 + exp(-H(p))``; a plain array, so it never carries gradient."""
    return 1.0 + np.exp(-entropy(p))


def _log_sigmoid_terms(d: Tensor, positive: bool) -> Tensor:
    # log(1 - s(d)) is evaluated as log s(-d) to avoid cancellation for large d
    return ag.log(ag.sigmoid(d if positive else ag.neg(d)))


def _weighted_mean(t: Tensor, w: np.ndarray | None) -> Tensor:
    if t.data.size == 0:
        return Tensor(np.array(0.0))
    flat = t if t.data.ndim == 1 else ag.custom(t, t.data.reshape(-1), lambda g, s=t.shape: g.reshape(s), "flatten")
    if w is not None:
        flat = ag.mul(flat, Tensor(w))
    return ag.mean(flat)


def adversarial_loss_dann(d_src: Tensor, d_tgt: Tensor) -> Tensor:
    """``mean log s(d_src) + mean log(1 - s(d_tgt))`` on pre-sigmoid discriminator outputs."""
    return ag.add(_weighted_mean(_log_sigmoid_terms(d_src, True), None),
                  _weighted_mean(_log_sigmoid_terms(d_tgt, False), None))


def adversarial_loss_cdan_e(d_src: Tensor, d_tgt: Tensor, w_src, w_tgt) -> Tensor:
    w_src = np.asarray(w_src, dtype=np.float64).reshape(-1)
    w_tgt = np.asarray(w_tgt, dtype=np.float64).reshape(-1)
    if w_src.shape[0] != d_src.data.size or w_tgt.shape[0] != d_tgt.data.size:
        raise ag.DimensionError(
            f"adversarial_loss_cdan_e: weights ({w_src.shape[0]}, {w_tgt.shape[0]}) "
            f"vs outputs ({d_src.data.size}, {d_tgt.data.size})")
    return ag.add(_weighted_mean(_log_sigmoid_terms(d_src, True), w_src),
                  _weighted_mean(_log_sigmoid_terms(d_tgt, False), w_tgt))


def domain_classification_loss(domain_logits: Tensor, domain_labels: Sequence[int]) -> Tensor:
    return cross_entropy(domain_logits, domain_labels)


def reconstruction_loss(f_hat: Tensor, f_g: Tensor) -> Tensor:
    """Mean over rows of the squared Euclidean distance."""
    if f_hat.shape != f_g.shape:
        raise ag.DimensionError(f"reconstruction_loss: {list(f_hat.shape)} vs {list(f_g.shape)}")
    n = f_hat.shape[0]
    if n == 0:
        return Tensor(np.array(0.0))
    diff = ag.sub(f_hat, ag.detach(f_g))
    return ag.scale(ag.sum(ag.mul(diff, diff)), 1.0 / n)


def pseudo_label_select(p_target: np.ndarray | Tensor, tau: float) -> list[tuple[int, int]]:
    """Confident target rows as ``(index, argmax)`` pairs, ascending by index."""
    p = p_target.data if isinstance(p_target, Tensor) else np.asarray(p_target, dtype=np.float64)
    if p.shape[0] == 0:
        return []
    conf = p.max(axis=1)
    labels = np.argmax(p, axis=1)
    return [(int(i), int(labels[i])) for i in np.flatnonzero(conf >= tau)]


def compactness_terms(ens, f_g_s: Tensor, y_s: Sequence[int], f_g_t: Tensor,
                      pseudo: Sequence[tuple[int, int]]) -> tuple[Tensor, Tensor | None, int]:
    """Source and target prototype cross-entropies against the frozen ``C_s`` / ``C_t``."""
    w_s = Tensor(ens.C_s.weight.data)
    w_t = Tensor(ens.C_t.weight.data)
    e_s = cross_entropy(ag.linear(f_g_s, w_s), y_s)
    m = len(pseudo)
    if not m:
        return e_s, None, 0
    idx = [i for i, _ in pseudo]
    lab = _labels([c for _, c in pseudo], m, w_t.shape[0], "compactness_loss pseudo labels")
    e_t = cross_entropy(ag.linear(ag.take_rows(f_g_t, idx), w_t), lab)
    return e_s, e_t, m


def combine_compactness(e_s: Tensor, e_t: Tensor | None, gamma: float, theta: float) -> Tensor:
    total = e_s
    if e_t is not None and gamma:
        total = ag.add(e_s, ag.scale(e_t, gamma))
    return ag.scale(total, theta)


def compactness_loss(ens, f_g_s: Tensor, y_s: Sequence[int], f_g_t: Tensor,
                     pseudo: Sequence[tuple[int, int]], gamma: float,
                     theta: float = 1.0) -> tuple[Tensor, int]:
    """``theta * (E_g^s + gamma * E_g^t)`` and the number of selected target rows."""
    e_s, e_t, m = compactness_terms(ens, f_g_s, y_s, f_g_t, pseudo)
    return combine_compactness(e_s, e_t, gamma, theta), m
