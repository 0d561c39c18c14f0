"""DTR training loop and its ablation modes.

One iteration runs, in order: the joint disentanglement update (source
classification, adversarial alignment through gradient reversal, domain
classification), the reconstructor update on detached features, the
periodic prototype refresh, and the G-only compactness update.
"""
from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import MODES, TrainConfig
from .data import Batch, LabeledDataset, sample_batch
from .losses import (
    LossReport,
    adversarial_loss_cdan_e,
    adversarial_loss_dann,
    combine_compactness,
    compactness_terms,
    cross_entropy,
    domain_classification_loss,
    entropy_weight,
    pseudo_label_select,
    reconstruction_loss,
)
from .model import (
    SOURCE_DOMAIN,
    TARGET_DOMAIN,
    NetworkEnsemble,
    PrototypeBank,
    forward_all,
    reconstruct,
    refresh_prototypes,
)
from .nn import SgdState, grad_reverse
from .rng import SplitMix64

log = logging.getLogger(__name__)

ADVERSARIAL = {"dann", "b", "d", "d_r", "dtr"}
DISENTANGLED = {"d", "d_r", "dtr"}
RECONSTRUCTS = {"d_r", "dtr"}


class TrainingDiverged(FloatingPointError):
    def __init__(self, loss: str, step: int, detail: str = ""):
        super().__init__(f"non-finite {loss} at step {step}" + (f": {detail}" if detail else ""))
        self.loss = loss
        self.step = step


def resolve_mode_networks(mode: str) -> set[str]:
    """Parameter groups that receive gradient updates in ``mode``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    groups = {"G", "D_di", "C_di"}
    if mode in ADVERSARIAL:
        groups.add("F_D")
    if mode in DISENTANGLED:
        groups |= {"D_ds", "C_ds"}
    if mode in RECONSTRUCTS:
        groups.add("R")
    return groups


def reversal_coeff(cfg: TrainConfig, progress_step: int) -> float:
    """Gradient-reversal coefficient; ``warmup`` ramps it as ``2 / (1 + exp(-10 p)) - 1``."""
    if cfg.alpha_schedule == "constant":
        return cfg.alpha
    p = progress_step / max(cfg.iterations, 1)
    return cfg.alpha * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)


def is_refresh_step(step: int, r: int) -> bool:
    """``step % r == 1`` on 1-based steps; with r == 1 every step refreshes."""
    return (step - 1) % r == 0


@dataclass
class TrainState:
    ensemble: NetworkEnsemble
    bank: PrototypeBank
    optimizers: dict[str, SgdState]
    rng_source: SplitMix64
    rng_target: SplitMix64
    step: int = 0
    g_compact_optimizer: SgdState | None = None
    recent: list[LossReport] = field(default_factory=list)

    RING = 20

    def remember(self, report: LossReport) -> None:
        self.recent.append(report)
        del self.recent[: -self.RING]


def init_state(cfg: TrainConfig) -> TrainState:
    cfg.validate()
    ens = NetworkEnsemble.create(cfg.dims, SplitMix64(cfg.seed, stream=0), conditional=cfg.mode != "dann")
    total = max(cfg.iterations, 1)
    opt = cfg.optim
    optimizers = {}
    for g in ("G", "D_di", "D_ds", "C_di", "C_ds", "F_D", "R"):
        lr = {"G": opt.lr_g, "F_D": opt.lr_fd}.get(g, opt.lr)
        optimizers[g] = SgdState(ens.group_params(g), lr, opt.momentum, opt.weight_decay, total)
    g_compact = None
    if not cfg.shared_g_optimizer:
        g_compact = SgdState(ens.group_params("G"), opt.lr_g, opt.momentum, opt.weight_decay, total)
    return TrainState(ens, PrototypeBank.empty(cfg.dims), optimizers,
                      SplitMix64(cfg.seed, stream=1), SplitMix64(cfg.seed, stream=2),
                      g_compact_optimizer=g_compact)


@contextlib.contextmanager
def _guard(loss: str, step: int):
    try:
        # overflow is reported through NonFiniteError, not numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            yield
    except ag.NonFiniteError as exc:
        raise TrainingDiverged(loss, step, str(exc)) from None


def _finite(value: float, loss: str, step: int) -> float:
    if not math.isfinite(value):
        raise TrainingDiverged(loss, step)
    return value


def _zero_all(ens: NetworkEnsemble) -> None:
    for _, _, p in ens.named_parameters():
        p.grad = None


def train_step(state: TrainState, src: Batch, tgt: Batch | None, cfg: TrainConfig) -> LossReport:
    mode = cfg.mode
    ens = state.ensemble
    step = state.step + 1
    progress = state.step
    report = LossReport()
    if src.labels is None:
        raise ValueError("source batch must carry labels")
    if mode != "source_only" and (tgt is None or tgt.features.shape[0] == 0):
        raise ValueError(f"mode {mode} needs a non-empty target batch")
    trainable = resolve_mode_networks(mode)

    # (a) forward both domains
    _zero_all(ens)
    with _guard("forward", step):
        bs = forward_all(ens, Tensor(src.features), cfg.detach_p)
        bt = forward_all(ens, Tensor(tgt.features), cfg.detach_p) if tgt is not None else None

    # (b) joint disentanglement update
    with _guard("e_cls_s", step):
        e_cls_s = cross_entropy(bs.logits, src.labels)
    report.e_cls_s = _finite(e_cls_s.item(), "e_cls_s", step)
    loss = e_cls_s
    if mode in ADVERSARIAL:
        coeff = reversal_coeff(cfg, progress)
        with _guard("e_dist", step):
            if mode == "dann":
                d_s = ens.F_D(grad_reverse(bs.f_di, coeff))
                d_t = ens.F_D(grad_reverse(bt.f_di, coeff))
                e_dist = adversarial_loss_dann(d_s, d_t)
            else:
                d_s = ens.F_D(grad_reverse(bs.h_hat, coeff))
                d_t = ens.F_D(grad_reverse(bt.h_hat, coeff))
                e_dist = adversarial_loss_cdan_e(d_s, d_t, entropy_weight(bs.p.data),
                                                 entropy_weight(bt.p.data))
        report.e_dist = _finite(e_dist.item(), "e_dist", step)
        # F_D ascends e_dist; the reversal layer makes everything upstream descend alpha * e_dist
        loss = ag.sub(loss, e_dist)
    if mode in DISENTANGLED:
        with _guard("e_cls_d", step):
            if cfg.cls_d_to_g:
                dl_s, dl_t = bs.domain_logits, bt.domain_logits
            else:
                dl_s = ens.C_ds(ens.D_ds(ag.detach(bs.f_g)))
                dl_t = ens.C_ds(ens.D_ds(ag.detach(bt.f_g)))
            dom = np.concatenate([np.full(src.features.shape[0], SOURCE_DOMAIN),
                                  np.full(tgt.features.shape[0], TARGET_DOMAIN)])
            e_cls_d = domain_classification_loss(ag.concat_rows(dl_s, dl_t), dom)
        report.e_cls_d = _finite(e_cls_d.item(), "e_cls_d", step)
        loss = ag.add(loss, ag.scale(e_cls_d, cfg.beta))
    with _guard("main objective", step):
        ag.backward(loss)
    for g in ("G", "D_di", "C_di", "F_D", "D_ds", "C_ds"):
        if g in trainable:
            state.optimizers[g].step(progress)

    # (c) reconstructor update on detached features
    if mode in RECONSTRUCTS:
        _zero_all(ens)
        with _guard("e_rec", step):
            f_di = Tensor(np.concatenate([bs.f_di.data, bt.f_di.data]))
            f_ds = Tensor(np.concatenate([bs.f_ds.data, bt.f_ds.data]))
            f_g = Tensor(np.concatenate([bs.f_g.data, bt.f_g.data]))
            e_rec = reconstruction_loss(reconstruct(ens, f_di, f_ds), f_g)
            ag.backward(e_rec)
        report.e_rec = _finite(e_rec.item(), "e_rec", step)
        state.optimizers["R"].step(progress)

    if mode == "dtr":
        # (d) prototype refresh
        if is_refresh_step(step, cfg.r):
            refresh_prototypes(ens, state.bank, step)
        # (e) G-only compactness update against the frozen prototype classifiers
        _zero_all(ens)
        with _guard("e_g", step):
            f_g_s = ens.G(Tensor(src.features))
            f_g_t = ens.G(Tensor(tgt.features))
            pseudo = pseudo_label_select(bt.p.data, cfg.tau)
            e_s, e_t, m = compactness_terms(ens, f_g_s, src.labels, f_g_t, pseudo)
            e_g = combine_compactness(e_s, e_t, cfg.gamma, cfg.theta)
            ag.backward(e_g)
        report.e_g_s = _finite(e_s.item(), "e_g_s", step)
        report.e_g_t = _finite(e_t.item() if e_t is not None else 0.0, "e_g_t", step)
        report.m_selected = m
        opt = state.g_compact_optimizer or state.optimizers["G"]
        opt.step(progress)

    state.step = step
    state.remember(report)
    return report


Evaluator = Callable[[TrainState], dict]


def train(cfg: TrainConfig, source: LabeledDataset, target: LabeledDataset,
          evaluator: Evaluator | None = None,
          on_record: Callable[[dict], None] | None = None,
          on_step: Callable[[TrainState, LossReport], None] | None = None) -> tuple[TrainState, list[dict]]:
    """Run ``cfg.iterations`` steps; returns the final state and the logged metrics.

    A record is emitted at every multiple of ``log_interval`` and at the last
    step. ``evaluator`` (which may read sealed target labels) is called at
    multiples of ``eval_interval`` and at the last step, and its output is
    merged into the record. ``on_step`` sees the state after every step.
    """
    cfg.validate()
    if source.labels is None:
        raise ValueError("source dataset must be labelled")
    if source.input_dim != cfg.dims.input_dim or target.input_dim != cfg.dims.input_dim:
        raise ValueError(f"data input_dim ({source.input_dim}, {target.input_dim}) "
                         f"!= dims.input_dim {cfg.dims.input_dim}")
    if source.n and source.labels.max() >= cfg.dims.n_classes:
        raise ValueError(f"source labels exceed dims.n_classes={cfg.dims.n_classes}")
    state = init_state(cfg)
    history: list[dict] = []
    N = cfg.iterations
    for _ in range(N):
        src = sample_batch(source, cfg.batch_size, state.rng_source)
        tgt = sample_batch(target, cfg.batch_size, state.rng_target)
        tgt = Batch(tgt.features, None, "target")
        report = train_step(state, src, tgt, cfg)
        step = state.step
        if on_step is not None:
            on_step(state, report)
        if step % cfg.log_interval == 0 or step == N:
            record = {"step": step, **report.to_dict()}
            if evaluator is not None and (step % cfg.eval_interval == 0 or step == N):
                record.update(evaluator(state))
            history.append(record)
            if on_record is not None:
                on_record(record)
            log.info("step %d %s", step, record)
    return state, history
