"""Routing diagnostics: usage curves, fallback sweep, tail mass, heatmaps,
specialization probe and post-hoc age calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import tensor as tn
from .router import FALLBACK_FULL, RoutingBatch, select_batch
from .tensor import ContractError


class CalibrationError(ValueError):
    pass


@dataclass
class MetricsReport:
    usage_curve: dict = field(default_factory=dict)  # layer -> sorted percentages
    fallback_rate: dict = field(default_factory=dict)  # T -> rate
    tail_mass: dict = field(default_factory=dict)  # k -> mean tail mass
    heatmap: dict = field(default_factory=dict)  # layer -> (classes, E) matrix
    entropy: dict = field(default_factory=dict)  # layer -> routing entropy


# ------------------------------------------------------------------- usage


def usage_counts(selected: np.ndarray, num_experts: int) -> np.ndarray:
    return np.bincount(np.asarray(selected).ravel(), minlength=num_experts)


def usage_curve(batch: RoutingBatch) -> np.ndarray:
    """Percent of tokens whose selection contains each expert, sorted descending.

    Per-layer convention: with top-k routing the entries sum to 100 * k.
    """
    if len(batch) == 0:
        raise ContractError("usage_curve needs a nonempty dump")
    pct = 100.0 * usage_counts(batch.selected, batch.num_experts) / len(batch)
    return np.sort(pct)[::-1]


def usage_stats(curve: np.ndarray) -> dict:
    """Max share (percent of token-slots) and coefficient of variation."""
    share = curve / curve.sum()
    return {"max_share": float(share.max()), "cv": float(curve.std() / curve.mean())}


def routing_entropy(batch: RoutingBatch) -> float:
    counts = usage_counts(batch.selected, batch.num_experts).astype(float)
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# ----------------------------------------------------------------- fallback


def fallback_rates(scores: np.ndarray, thresholds, k: int) -> list[tuple[float, float]]:
    """Full-fallback rate of fixed score rows for each threshold."""
    out = []
    for T in thresholds:
        _, fb = select_batch(scores, k, float(T))
        out.append((float(T), float(np.mean(fb == FALLBACK_FULL))))
    return out


def collect_scores(model, x: np.ndarray, batch_size: int = 256) -> list[np.ndarray]:
    """Per-layer (tokens, E) eigenbasis scores of a frozen model."""
    per_layer = None
    with tn.no_grad():
        for lo in range(0, len(x), batch_size):
            res = model.forward(x[lo: lo + batch_size])
            if per_layer is None:
                per_layer = [[] for _ in res.routing]
            for i, b in enumerate(res.routing):
                per_layer[i].append(b.scores)
    return [np.concatenate(s) for s in per_layer]


def fallback_sweep(model, x: np.ndarray, thresholds) -> list[tuple[float, float]]:
    """Weights frozen; routing re-run per threshold over every layer's tokens."""
    scores = np.concatenate(collect_scores(model, x))
    return fallback_rates(scores, thresholds, model.config.k)


# ---------------------------------------------------------------- tail mass


def tail_mass(scores, T: float, k: int) -> float:
    """Share of above-threshold weight that falls outside the top-k.

    A = {e : s_e > T}; weights are the clamped scores renormalized on A.
    """
    s = np.asarray(scores, dtype=np.float64)
    A = np.flatnonzero(s > T)
    if A.size <= k:
        return 0.0
    w = np.maximum(s[A], 0.0)
    # fsum is correctly rounded, so the result does not depend on summation order
    total = math.fsum(w)
    if total <= 0.0:
        return 0.0
    order = np.argsort(-s[A], kind="stable")
    return math.fsum(w[order[k:]]) / total


def tail_mass_sweep(scores: np.ndarray, T: float, ks) -> list[tuple[int, float]]:
    return [(int(k), float(np.mean([tail_mass(row, T, k) for row in scores]))) for k in ks]


# ------------------------------------------------------------------ heatmap


def class_expert_heatmap(batch: RoutingBatch, num_classes: int | None = None) -> np.ndarray:
    """Mean dense mixture-weight vector per class: (classes, E)."""
    if batch.labels is None:
        raise ContractError("class_expert_heatmap needs labels in the dump")
    labels = np.asarray(batch.labels, dtype=np.int64)
    C = int(labels.max()) + 1 if num_classes is None else num_classes
    dense = batch.dense_weights()
    out = np.zeros((C, batch.num_experts))
    for c in range(C):
        rows = dense[labels == c]
        if len(rows):
            out[c] = rows.mean(axis=0)
    return out


# --------------------------------------------------------- specialization


def specialization_probe(model, tagged: dict, layer: int = -1) -> list[dict]:
    """Mean eigenbasis score per expert for each tag at one MoE layer.

    `tagged` maps tag -> region-isolated inputs. Rows list the top-2 experts
    (by mean score) with their scores and the full mean-score vector.
    """
    rows = []
    for tag, x in tagged.items():
        scores = collect_scores(model, x)[layer]
        mean = scores.mean(axis=0)
        top = np.argsort(-mean, kind="stable")[:2]
        rows.append({
            "tag": tag,
            "top1": int(top[0]), "score1": float(mean[top[0]]),
            "top2": int(top[1]), "score2": float(mean[top[1]]),
            "mean_scores": mean.tolist(),
        })
    return rows


def specialization_from_dump(batch: RoutingBatch) -> list[dict]:
    """Same rows as `specialization_probe`, grouped by the dump's token labels."""
    if batch.labels is None:
        raise ContractError("specialization needs labels in the dump")
    rows = []
    for tag in np.unique(batch.labels):
        mean = batch.scores[batch.labels == tag].mean(axis=0)
        top = np.argsort(-mean, kind="stable")[:2]
        rows.append({
            "tag": int(tag),
            "top1": int(top[0]), "score1": float(mean[top[0]]),
            "top2": int(top[1]) if len(top) > 1 else -1,
            "score2": float(mean[top[1]]) if len(top) > 1 else float("nan"),
            "mean_scores": mean.tolist(),
        })
    return rows


def matched_dominance(rows: list[dict], matched: dict) -> dict:
    """For each tag, whether its matched expert's mean score beats every other expert."""
    out = {}
    for row in rows:
        e = matched[row["tag"]]
        mean = np.asarray(row["mean_scores"])
        others = np.delete(mean, e)
        out[row["tag"]] = bool(mean[e] > others.max())
    return out


# -------------------------------------------------------------- calibration


def _fit_line(y: np.ndarray, yhat: np.ndarray) -> tuple[float, float]:
    """OLS of yhat on y: returns (intercept, slope)."""
    if np.var(y) == 0.0:
        raise CalibrationError("cannot calibrate: targets have zero variance")
    fit = stats.linregress(y, yhat)
    return float(fit.intercept), float(fit.slope)


def calibration_diagnostics(y: np.ndarray, yhat: np.ndarray) -> dict:
    a, b = _fit_line(y, yhat)
    resid = yhat - y
    corr = float(np.corrcoef(resid, y)[0, 1]) if np.std(resid) > 0 else 0.0
    return {"mae": float(np.mean(np.abs(resid))), "corr": corr, "slope": b, "intercept": a}


def posthoc_calibrate(y_train, yhat_train, yhat_test, y_test=None) -> dict:
    """Fit yhat = a + b*y on train pairs, correct test predictions as (yhat - a) / b."""
    y_train = np.asarray(y_train, dtype=np.float64)
    yhat_train = np.asarray(yhat_train, dtype=np.float64)
    yhat_test = np.asarray(yhat_test, dtype=np.float64)
    if len(np.unique(y_train)) < 2:
        raise CalibrationError("need at least two distinct training targets")
    a, b = _fit_line(y_train, yhat_train)
    if b == 0.0:
        raise CalibrationError("fitted slope is zero; correction undefined")
    corrected = (yhat_test - a) / b
    out = {"a": a, "b": b, "corrected": corrected}
    if y_test is not None:
        y_test = np.asarray(y_test, dtype=np.float64)
        out["raw"] = calibration_diagnostics(y_test, yhat_test)
        out["calibrated"] = calibration_diagnostics(y_test, corrected)
    return out
