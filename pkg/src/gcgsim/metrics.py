"""Evaluation metrics: MSE (x1e-3), Spearman rho, Kendall tau-b and precision@k."""
from __future__ import annotations

import warnings
from collections import defaultdict
from typing import Sequence

import numpy as np
from scipy import stats


class MetricError(ValueError):
    pass


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise MetricError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise MetricError("empty input")
    return p, t


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def mse_e3(pred, truth) -> float:
    """MSE in units of 1e-3, the way it is usually reported."""
    return 1000.0 * mse(pred, truth)


def _constant(x: np.ndarray) -> bool:
    return bool(np.all(x == x[0]))


def spearman_rho(pred, truth) -> float | None:
    """Pearson correlation of average ranks. ``None`` when either input is constant."""
    p, t = _pair(pred, truth)
    if p.size < 2:
        raise MetricError("rank correlation needs at least 2 items")
    if _constant(p) or _constant(t):
        return None
    rp, rt = stats.rankdata(p), stats.rankdata(t)
    rp -= rp.mean()
    rt -= rt.mean()
    return float(np.dot(rp, rt) / np.sqrt(np.dot(rp, rp) * np.dot(rt, rt)))


def kendall_tau(pred, truth) -> float | None:
    """Tau-b with tie correction. ``None`` when either input is constant."""
    p, t = _pair(pred, truth)
    if p.size < 2:
        raise MetricError("rank correlation needs at least 2 items")
    if _constant(p) or _constant(t):
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return float(stats.kendalltau(p, t, variant="b").statistic)


def top_k(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values; ties go to the smaller index."""
    return np.argsort(-x, kind="stable")[:k]


def precision_at_k(pred, truth, k: int) -> float:
    p, t = _pair(pred, truth)
    if not isinstance(k, (int, np.integer)) or k < 1 or k > p.size:
        raise MetricError(f"k must be in [1, {p.size}], got {k!r}")
    return len(set(top_k(p, k).tolist()) & set(top_k(t, k).tolist())) / k


def _mean(xs: list[float]) -> float | None:
    return float(np.mean(xs)) if xs else None


def ranking_scores(pred, truth, ks=(10, 20)) -> dict | None:
    """rho, tau and p@k for one ranking, or None when the truth is constant.

    A constant prediction against a varying truth carries no ordering
    information and scores rho = tau = 0.
    """
    p, t = _pair(pred, truth)
    if p.size < 2 or _constant(t):
        return None
    rho, tau = spearman_rho(p, t), kendall_tau(p, t)
    out = {"rho": 0.0 if rho is None else rho, "tau": 0.0 if tau is None else tau}
    for k in ks:
        out[f"p_at_{k}"] = precision_at_k(p, t, min(k, p.size))
    return out


def evaluate_query_set(query_ids: Sequence, pred, truth, ks=(10, 20), global_rank: bool = False) -> dict:
    """Metric report over pairs grouped by query.

    MSE is pooled over all pairs. Ranking metrics are computed per query over
    its database scores and averaged, or over the pooled pairs with
    ``global_rank``. Queries whose true similarities are all equal are skipped
    and counted.
    """
    p, t = _pair(pred, truth)
    if len(query_ids) != p.size:
        raise MetricError(f"{len(query_ids)} query ids for {p.size} pairs")
    report = {"mse_e3": mse_e3(p, t)}
    if global_rank:
        groups = {None: np.arange(p.size)}
    else:
        idx = defaultdict(list)
        for n, q in enumerate(query_ids):
            idx[q].append(n)
        groups = {q: np.array(v) for q, v in idx.items()}
    per, skipped = defaultdict(list), 0
    for rows in groups.values():
        scores = ranking_scores(p[rows], t[rows], ks)
        if scores is None:
            skipped += 1
            continue
        for name, v in scores.items():
            per[name].append(v)
    report["rho"] = _mean(per["rho"])
    report["tau"] = _mean(per["tau"])
    for k in ks:
        report[f"p_at_{k}"] = _mean(per[f"p_at_{k}"])
    report["skipped_queries"] = skipped
    return report
