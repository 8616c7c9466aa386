"""Eigenbasis-score routing: score, thresholded top-k selection, weights, fusion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .expert import EigenExpert, ExpertBank, expert_forward
from .tensor import EPS, ContractError, DimensionError, Tensor

FALLBACK_NONE, FALLBACK_PARTIAL, FALLBACK_FULL = 0, 1, 2
FALLBACK_NAMES = ("none", "partial", "full")
SCORE_TARGETS = ("attention_context", "learned_vector")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RouterConfig:
    k: int = 2
    T: float = 0.5
    routing_rank: int | None = None
    weight_floor_policy: str = "uniform_fallback"
    score_target: str = "attention_context"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.T < 1.0:
            raise ConfigError(f"T must lie in [0, 1), got {self.T}")
        if self.weight_floor_policy != "uniform_fallback":
            raise ConfigError(f"unknown weight_floor_policy {self.weight_floor_policy!r}")
        if self.score_target not in SCORE_TARGETS:
            raise ConfigError(f"unknown score_target {self.score_target!r}")

    def check(self, E: int) -> None:
        if self.k > E:
            raise ConfigError(f"k={self.k} exceeds the number of experts E={E}")


@dataclass
class RoutingDecision:
    scores: list[float]
    eligible: list[int]
    selected: list[int]
    weights: list[float]
    fallback: str = "none"
    degenerate: bool = False


@dataclass
class RoutingBatch:
    """Routing decisions for N tokens stored as arrays.

    `selected` and `weights` are (N, k) and aligned column by column;
    `fallback` holds FALLBACK_* codes.
    """

    scores: np.ndarray
    selected: np.ndarray
    weights: np.ndarray
    fallback: np.ndarray
    degenerate: np.ndarray
    T: float = 0.5
    labels: np.ndarray | None = field(default=None)

    def __len__(self):
        return self.scores.shape[0]

    @property
    def num_experts(self) -> int:
        return self.scores.shape[1]

    def decision(self, i: int) -> RoutingDecision:
        sc = self.scores[i]
        return RoutingDecision(
            scores=sc.tolist(),
            eligible=np.flatnonzero(sc >= self.T).tolist(),
            selected=self.selected[i].tolist(),
            weights=self.weights[i].tolist(),
            fallback=FALLBACK_NAMES[int(self.fallback[i])],
            degenerate=bool(self.degenerate[i]),
        )

    def dense_weights(self) -> np.ndarray:
        out = np.zeros_like(self.scores)
        np.put_along_axis(out, self.selected, self.weights, axis=1)
        return out

    def fallback_rate(self) -> float:
        return float(np.mean(self.fallback != FALLBACK_NONE)) if len(self) else 0.0

    def to_jsonl(self, layer: int = 0, start_id: int = 0) -> list[str]:
        lines = []
        for i in range(len(self)):
            rec = {
                "token": start_id + i,
                "layer": layer,
                "scores": [float(v) for v in self.scores[i]],
                "selected": [int(v) for v in self.selected[i]],
                "weights": [float(v) for v in self.weights[i]],
                "fallback": FALLBACK_NAMES[int(self.fallback[i])],
                "degenerate": bool(self.degenerate[i]),
            }
            if self.labels is not None:
                rec["label"] = int(self.labels[i])
            lines.append(json.dumps(rec))
        return lines

    @staticmethod
    def concat(batches: list["RoutingBatch"]) -> "RoutingBatch":
        labels = None
        if all(b.labels is not None for b in batches):
            labels = np.concatenate([b.labels for b in batches])
        return RoutingBatch(
            np.concatenate([b.scores for b in batches]),
            np.concatenate([b.selected for b in batches]),
            np.concatenate([b.weights for b in batches]),
            np.concatenate([b.fallback for b in batches]),
            np.concatenate([b.degenerate for b in batches]),
            batches[0].T,
            labels,
        )


# --------------------------------------------------------------- single token


def context_vector(alpha_row, z) -> Tensor:
    """Attention-weighted context: sum_j alpha_j z_j."""
    a = tn.as_tensor(alpha_row)
    z = tn.as_tensor(z)
    if a.data.ndim != 1 or z.data.ndim != 2 or a.shape[0] != z.shape[0]:
        raise DimensionError(f"context_vector shapes {a.shape} and {z.shape} do not agree")
    if np.any(a.data < 0) or abs(a.data.sum() - 1.0) > 1e-6:
        raise ContractError("attention row must be nonnegative and sum to 1")
    return a @ z


def eigenbasis_score(e: EigenExpert, x, c, r: int | None = None) -> tuple[float, bool]:
    """Cosine between x and c after projection onto the expert's leading basis.

    Returns (score, degenerate); degenerate inputs or projections score 0.
    """
    r = e.routing_rank if r is None else r
    if r > e.d:
        raise ConfigError(f"routing rank {r} exceeds d={e.d}")
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    c = np.asarray(getattr(c, "data", c), dtype=np.float64)
    if np.linalg.norm(x) < EPS or np.linalg.norm(c) < EPS:
        return 0.0, True
    xt = tn.l2_normalize(Tensor(x)).data
    ct = tn.l2_normalize(Tensor(c)).data
    basis = e.U.data[:, e.basis_order()[:r]]
    return tn.cosine(basis.T @ xt, basis.T @ ct)


def select_experts(scores, cfg: RouterConfig) -> tuple[list[int], str]:
    """Thresholded top-k with fill-up fallback.

    Eligible experts score >= T. Ties are broken by lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    E = scores.shape[0]
    cfg.check(E)
    order = sorted(range(E), key=lambda e: (-scores[e], e))
    eligible = [e for e in order if scores[e] >= cfg.T]
    if len(eligible) >= cfg.k:
        return eligible[: cfg.k], "none"
    rest = [e for e in order if scores[e] < cfg.T]
    selected = eligible + rest[: cfg.k - len(eligible)]
    return selected, ("partial" if eligible else "full")


def mixture_weights(selected_scores) -> list[float]:
    clamped = [max(float(s), 0.0) for s in selected_scores]
    total = sum(clamped)
    if total <= 0.0:
        return [1.0 / len(clamped)] * len(clamped)
    return [c / total for c in clamped]


def fuse(weights, expert_outputs) -> Tensor:
    if len(weights) != len(expert_outputs):
        raise DimensionError(f"{len(weights)} weights for {len(expert_outputs)} outputs")
    outs = [tn.as_tensor(o) for o in expert_outputs]
    y = outs[0] * weights[0]
    for w, o in zip(weights[1:], outs[1:]):
        y = y + o * w
    return y


def route_token(x, c, bank: ExpertBank, cfg: RouterConfig) -> tuple[Tensor, RoutingDecision]:
    """Route a single token through the bank one expert at a time."""
    x = tn.as_tensor(x)
    cfg.check(len(bank))
    token_degenerate = bool(np.linalg.norm(x.data) < EPS or np.linalg.norm(tn.as_tensor(c).data) < EPS)
    scored = [eigenbasis_score(e, x, c) for e in bank.experts]
    scores = [s for s, _ in scored]
    selected, fallback = select_experts(scores, cfg)
    weights = mixture_weights([scores[e] for e in selected])
    y = fuse(weights, [expert_forward(bank[e], x) for e in selected])
    degenerate = token_degenerate or any(scored[e][1] for e in selected)
    decision = RoutingDecision(
        scores=scores,
        eligible=[e for e in range(len(bank)) if scores[e] >= cfg.T],
        selected=selected,
        weights=weights,
        fallback=fallback,
        degenerate=degenerate,
    )
    return y, decision


# -------------------------------------------------------------------- batched


def score_batch(bank: ExpertBank, x: Tensor, c: Tensor | None,
                target: str = "attention_context") -> tuple[Tensor, np.ndarray]:
    """Differentiable scores for rows of x: (..., d) -> (..., E).

    Also returns a boolean (..., E) mask of degenerate (zero-scored) entries.
    """
    E, r, d = len(bank), bank.routing_rank, bank.d
    lead = x.shape[:-1]
    bases = bank.routing_bases().swapaxes(0, 1).reshape(d, E * r)
    u = (tn.l2_normalize(x) @ bases).reshape(*lead, E, r)
    un = np.sqrt((u.data ** 2).sum(-1))
    if target == "attention_context":
        v = (tn.l2_normalize(c) @ bases).reshape(*lead, E, r)
        vn = np.sqrt((v.data ** 2).sum(-1))
        xn = np.linalg.norm(x.data, axis=-1)[..., None]
        cn = np.linalg.norm(c.data, axis=-1)[..., None]
        degen = (un < EPS) | (vn < EPS) | (xn < EPS) | (cn < EPS)
        v_hat = tn.l2_normalize(v)
    elif target == "learned_vector":
        if bank.targets is None:
            raise ConfigError("learned_vector scoring needs bank targets")
        degen = (un < EPS) | (np.linalg.norm(x.data, axis=-1)[..., None] < EPS)
        v_hat = tn.l2_normalize(bank.targets)
    else:
        raise ConfigError(f"unknown score_target {target!r}")
    cos = (tn.l2_normalize(u) * v_hat).sum(axis=-1)
    cos = tn.clip(cos, -1.0, 1.0)
    return tn.where(degen, 0.0, cos), degen


def select_batch(scores: np.ndarray, k: int, T: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized `select_experts` over rows: returns (selected (N,k), fallback (N,))."""
    scores = np.asarray(scores)
    E = scores.shape[-1]
    if k > E:
        raise ConfigError(f"k={k} exceeds the number of experts E={E}")
    # eligible experts outrank ineligible ones, so filling reduces to global top-k
    order = np.argsort(-scores, axis=-1, kind="stable")
    selected = order[..., :k]
    n_elig = (scores >= T).sum(axis=-1)
    fallback = np.where(n_elig >= k, FALLBACK_NONE,
                        np.where(n_elig > 0, FALLBACK_PARTIAL, FALLBACK_FULL))
    return selected, fallback


def weights_batch(scores: Tensor, selected: np.ndarray) -> Tensor:
    """Clamped, renormalized scores over the selected columns: (N, E) -> (N, k)."""
    picked = tn.take_along(scores, selected, axis=-1)
    clamped = tn.relu(picked)
    total = clamped.sum(axis=-1, keepdims=True)
    empty = total.data <= 0.0
    k = selected.shape[-1]
    return tn.where(empty, 1.0 / k, clamped / tn.where(empty, 1.0, total))


def route_batch(x: Tensor, c: Tensor | None, bank: ExpertBank, cfg: RouterConfig,
                expert_input: Tensor | None = None) -> tuple[Tensor, RoutingBatch]:
    """Route N tokens at once. x, c: (N, d). Returns y (N, d) and the decisions.

    Experts are evaluated densely and combined with the sparse weights, which
    is exactly the sparse mixture since unselected experts get weight zero.
    """
    cfg.check(len(bank))
    scores, degen = score_batch(bank, x, c, cfg.score_target)
    selected, fallback = select_batch(scores.data, cfg.k, cfg.T)
    w = weights_batch(scores, selected)
    outs = bank.forward_all(x if expert_input is None else expert_input)  # (N, E, d)
    picked = tn.take_along(outs, np.broadcast_to(selected[..., None], selected.shape + (bank.d,)), axis=-2)
    y = (w.reshape(*w.shape[:-1], 1, w.shape[-1]) @ picked).reshape(*picked.shape[:-2], bank.d)
    degenerate = np.take_along_axis(degen, selected, axis=-1).any(axis=-1)
    batch = RoutingBatch(scores.data.copy(), selected, w.data.copy(), fallback, degenerate, cfg.T)
    return y, batch
