"""Accuracy per head, proxy A-distance, prototype distances, PCA and the sweep drivers."""
from __future__ import annotations

import copy
import csv
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import LabeledDataset, SealedLabels
from .losses import cross_entropy
from .model import NetworkEnsemble, PrototypeBank, argmax_rows, forward_all, head_logits
from .nn import SgdState, TwoLayerMLP
from .rng import SplitMix64

PROBE_WIDTH = 16
PROBE_STEPS = 200
PROBE_LR = 0.1
MIN_DOMAIN_SAMPLES = 20


def eval_labels(ds: LabeledDataset) -> np.ndarray:
    """Labels for evaluation, opening the sealed target field if needed."""
    if ds.labels is not None:
        return ds.labels
    if isinstance(ds.sealed, SealedLabels):
        return ds.sealed._values
    raise ValueError(f"dataset {ds.name!r} has no labels, sealed or otherwise")


def accuracy_from_predictions(pred: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(np.asarray(pred) == labels))


def accuracy(ens: NetworkEnsemble, head: str, ds: LabeledDataset) -> float:
    return accuracy_from_predictions(argmax_rows(head_logits(ens, ds.features, head)), eval_labels(ds))


def head_accuracies(ens: NetworkEnsemble, source: LabeledDataset, target: LabeledDataset,
                    heads: Sequence[str] = ("C_di", "C_s", "C_t")) -> dict[str, float]:
    out = {}
    for tag, ds in (("src", source), ("tgt", target)):
        b = forward_all(ens, ds.features)
        y = eval_labels(ds)
        logits = {"C_di": b.logits.data, "C_s": ens.C_s(b.f_g).data, "C_t": ens.C_t(b.f_g).data}
        for h in heads:
            out[f"acc_{tag}_{h}"] = accuracy_from_predictions(argmax_rows(logits[h]), y)
    return out


def make_evaluator(source: LabeledDataset, target: LabeledDataset) -> Callable:
    return lambda state: head_accuracies(state.ensemble, source, target)


# ---------------------------------------------------------------- A-distance

def a_distance(feat_src: np.ndarray, feat_tgt: np.ndarray, seed: int = 0) -> float:
    """``2 (1 - 2 eps)`` from a small domain probe; ``eps`` is folded to ``min(eps, 1 - eps)``.

    The probe is a width-16 two-layer network trained with 200 full-batch
    momentum-SGD steps on a seeded 50/50 split of the pooled samples.
    """
    xs = np.asarray(feat_src, dtype=np.float64)
    xt = np.asarray(feat_tgt, dtype=np.float64)
    if xs.shape[0] < MIN_DOMAIN_SAMPLES or xt.shape[0] < MIN_DOMAIN_SAMPLES:
        raise ValueError(f"a_distance needs >= {MIN_DOMAIN_SAMPLES} samples per domain, "
                         f"got {xs.shape[0]} and {xt.shape[0]}")
    # canonical domain order makes the estimate exactly symmetric in its arguments
    if (xt.shape, xt.tobytes()) < (xs.shape, xs.tobytes()):
        xs, xt = xt, xs
    x = np.concatenate([xs, xt])
    y = np.concatenate([np.ones(xs.shape[0], dtype=np.int64), np.zeros(xt.shape[0], dtype=np.int64)])
    mu, sd = x.mean(axis=0), x.std(axis=0)
    x = (x - mu) / np.where(sd > 0, sd, 1.0)
    rng = SplitMix64(seed, stream=909)
    perm = rng.permutation(x.shape[0])
    half = x.shape[0] // 2
    tr, te = perm[:half], perm[half:]
    probe = TwoLayerMLP.create(x.shape[1], PROBE_WIDTH, 2, rng)
    params = [p for _, p in probe.named_parameters()]
    opt = SgdState(params, PROBE_LR, momentum=0.9, total_steps=PROBE_STEPS)
    xtr = Tensor(x[tr])
    for _ in range(PROBE_STEPS):
        opt.zero_grad()
        ag.backward(cross_entropy(probe(xtr), y[tr]))
        opt.step()
    err = 1.0 - accuracy_from_predictions(argmax_rows(probe(Tensor(x[te])).data), y[te])
    return proxy_a_distance(err)


def proxy_a_distance(test_error: float) -> float:
    eps = min(test_error, 1.0 - test_error)
    return float(min(max(2.0 * (1.0 - 2.0 * eps), 0.0), 2.0))


# ---------------------------------------------------------------- prototype distances

def prototype_distances(ens: NetworkEnsemble, bank: PrototypeBank, ds: LabeledDataset,
                        labels: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean Euclidean distance from ``f_g`` rows to their label's prototype.

    Source data is compared against ``w_s``, target data against ``w_t``.
    Per-class means are NaN for classes absent from ``labels``.
    """
    y = eval_labels(ds) if labels is None else np.asarray(labels, dtype=np.int64)
    protos = bank.w_s if ds.domain == "source" else bank.w_t
    f_g = forward_all(ens, ds.features).f_g.data
    d = np.linalg.norm(f_g - protos[y], axis=1)
    K = protos.shape[0]
    per_class = np.array([d[y == c].mean() if (y == c).any() else np.nan for c in range(K)])
    return float(d.mean()) if d.size else 0.0, per_class


def domain_prototype_distance(ens: NetworkEnsemble, source: LabeledDataset,
                              target: LabeledDataset) -> float:
    """Mean ``||f_ds - w_d||`` over samples whose domain ``C_ds`` classifies correctly."""
    w = ens.C_ds.weight.data
    dists = []
    for ds, dom in ((source, 1), (target, 0)):
        b = forward_all(ens, ds.features)
        ok = argmax_rows(b.domain_logits.data) == dom
        dists.append(np.linalg.norm(b.f_ds.data[ok] - w[dom], axis=1))
    d = np.concatenate(dists)
    return float(d.mean()) if d.size else 0.0


# ---------------------------------------------------------------- PCA

@dataclass
class Projection:
    coords: np.ndarray
    components: np.ndarray
    explained: np.ndarray = field(default_factory=lambda: np.zeros(2))


def _power_iteration(c: np.ndarray, start: np.ndarray, against: list[np.ndarray],
                     tol: float, max_iter: int) -> np.ndarray:
    v = start
    for u in against:
        v = v - (v @ u) * u
    nv = np.linalg.norm(v)
    if nv == 0:
        return v
    v = v / nv
    floor = 1e-12 * max(np.linalg.norm(c), 1e-300)
    for _ in range(max_iter):
        w = c @ v
        for u in against:
            w = w - (w @ u) * u
        nw = np.linalg.norm(w)
        if nw < floor:
            # only rounding noise is left in the deflated space
            return np.zeros_like(v)
        w = w / nw
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    for u in against:
        v = v - (v @ u) * u
    return v / np.linalg.norm(v)


def pca_project(features: np.ndarray, dims: int = 2, tol: float = 1e-9, max_iter: int = 1000) -> Projection:
    """Project mean-centred rows onto the top principal directions (power method + deflation)."""
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if n < 3:
        raise ValueError(f"pca_project needs at least 3 rows, got {n}")
    xc = x - x.mean(axis=0)
    c = xc.T @ xc / n
    total = float(np.trace(c))
    comps: list[np.ndarray] = []
    explained = np.zeros(dims)
    if total <= 1e-300:
        return Projection(np.zeros((n, dims)), np.zeros((dims, d)), explained)
    for k in range(dims):
        # deterministic, generic start vector
        start = np.ones(d) + 0.01 * np.arange(d)
        v = _power_iteration(c, start, comps, tol, max_iter)
        if np.linalg.norm(v) == 0 or float(v @ c @ v) <= 1e-15 * total:
            # residual variance exhausted: pick any unit vector orthogonal to the rest
            for j in range(d):
                e = np.eye(d)[j]
                for u in comps:
                    e = e - (e @ u) * u
                if np.linalg.norm(e) > 1e-6:
                    v = e / np.linalg.norm(e)
                    break
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        explained[k] = max(float(v @ c @ v), 0.0) / total
    w = np.stack(comps)
    return Projection(xc @ w.T, w, explained)


def write_projection_csv(path: str | Path, coords: np.ndarray, labels: np.ndarray, domains: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y", "label", "domain"])
        for (a, b), lab, dom in zip(coords, labels, domains):
            wr.writerow([repr(float(a)), repr(float(b)), int(lab), dom])


# ---------------------------------------------------------------- drivers

@dataclass
class RunResult:
    mode: str
    seed: int
    r: int
    target_acc: float
    source_acc: float
    params: dict[str, np.ndarray] | None = None


def _run_one(args) -> RunResult:
    from .trainer import train  # local: keeps worker import cheap

    cfg, source, target, keep_params = args
    state, _ = train(cfg, source, target.without_seal())
    ens = state.ensemble
    res = RunResult(cfg.mode, cfg.seed, cfg.r, accuracy(ens, "C_di", target),
                    accuracy(ens, "C_di", source))
    if keep_params:
        res.params = ens.snapshot()
    return res


def run_jobs(jobs: list, n_workers: int = 1) -> list[RunResult]:
    if n_workers <= 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_run_one, jobs))


def _stats(values: Sequence[float]) -> dict[str, float]:
    return {
        "mean": float(np.mean(values)),
        "std": float(np.std(values)),
        "median": float(statistics.median(values)),
        "min": float(np.min(values)),
        "max": float(np.max(values)),
    }


def run_sensitivity_sweep(cfg, data_fn: Callable[[int], tuple[LabeledDataset, LabeledDataset]],
                          seeds: Sequence[int], r_values: Sequence[int] = (1, 3, 5, 7, 9),
                          n_workers: int = 1) -> list[dict]:
    """Target accuracy of the ``C_di`` head for each reconstruction interval.

    ``data_fn(seed)`` returns the (source, target) pair for one seed; the
    network seed follows the same value.
    """
    if cfg.mode != "dtr":
        raise ValueError("the sensitivity sweep runs in dtr mode")
    jobs = []
    for r in r_values:
        for s in seeds:
            c = copy.deepcopy(cfg)
            c.r, c.seed = int(r), int(s)
            src, tgt = data_fn(s)
            jobs.append((c, src, tgt, False))
    results = run_jobs(jobs, n_workers)
    rows = []
    for r in r_values:
        accs = [res.target_acc for res in results if res.r == r]
        rows.append({"r": int(r), **_stats(accs), "n_seeds": len(accs),
                     "accs": accs})
    return rows


ABLATION_MODES = (("B", "b"), ("D", "d"), ("D+R", "d_r"), ("DTR", "dtr"))


def non_r_equal(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> bool:
    keys = [k for k in a if not k.startswith("R.")]
    return all(np.array_equal(a[k], b[k]) for k in keys) and set(a) == set(b)


def run_ablation(cfg, data_fn: Callable[[int], tuple[LabeledDataset, LabeledDataset]],
                 seeds: Sequence[int], n_workers: int = 1) -> tuple[list[dict], dict]:
    """Target accuracy for B / D / D+R / DTR plus the structural checks.

    Returns the table rows and a summary with ``d_equals_d_r`` (non-R
    parameters bitwise equal per seed), ``dtr_ge_b_median`` and the logged
    ``b_ge_d_median`` comparison.
    """
    jobs = []
    for _, mode in ABLATION_MODES:
        for s in seeds:
            c = copy.deepcopy(cfg)
            c.mode, c.seed = mode, int(s)
            src, tgt = data_fn(s)
            jobs.append((c, src, tgt, mode in ("d", "d_r")))
    results = run_jobs(jobs, n_workers)
    by_mode = {m: [res for res in results if res.mode == m] for _, m in ABLATION_MODES}
    rows = []
    for label, mode in ABLATION_MODES:
        accs = [res.target_acc for res in by_mode[mode]]
        rows.append({"method": label, "mode": mode, **_stats(accs), "n_seeds": len(accs), "accs": accs})
    per_seed_identity = {}
    for rd, rdr in zip(by_mode["d"], by_mode["d_r"]):
        per_seed_identity[rd.seed] = non_r_equal(rd.params, rdr.params) and rd.target_acc == rdr.target_acc
    med = {row["mode"]: row["median"] for row in rows}
    summary = {
        "d_equals_d_r": all(per_seed_identity.values()),
        "d_equals_d_r_per_seed": per_seed_identity,
        "dtr_ge_b_median": med["dtr"] >= med["b"],
        "b_ge_d_median": med["b"] >= med["d"],
    }
    return rows, summary


def write_table_csv(path: str | Path, rows: list[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(columns)
        for row in rows:
            wr.writerow([row[c] if not isinstance(row[c], float) else f"{row[c]:.6f}" for c in columns])


@dataclass
class EvalReport:
    step: int
    accuracy: dict[str, float]
    a_distance_raw: float
    a_distance_di: float
    mean_proto_dist_src: float
    mean_proto_dist_tgt: float

    def validate(self) -> None:
        for k, v in self.accuracy.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {k}={v} outside [0, 1]")
        for v in (self.a_distance_raw, self.a_distance_di):
            if not 0.0 <= v <= 2.0:
                raise ValueError(f"A-distance {v} outside [0, 2]")


def evaluate(ens: NetworkEnsemble, bank: PrototypeBank, source: LabeledDataset,
             target: LabeledDataset, step: int, seed: int = 0) -> EvalReport:
    f_di_s = forward_all(ens, source.features).f_di.data
    f_di_t = forward_all(ens, target.features).f_di.data
    rep = EvalReport(
        step=step,
        accuracy=head_accuracies(ens, source, target),
        a_distance_raw=a_distance(source.features, target.features, seed),
        a_distance_di=a_distance(f_di_s, f_di_t, seed),
        mean_proto_dist_src=prototype_distances(ens, bank, source)[0],
        mean_proto_dist_tgt=prototype_distances(ens, bank, target)[0],
    )
    rep.validate()
    return rep


def fmt_pct(x: float) -> str:
    return f"{100 * x:.1f}" if math.isfinite(x) else "nan"
