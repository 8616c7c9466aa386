"""Learned-logit token-choice router with dense experts (comparison arm)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .router import FALLBACK_NONE, ConfigError, RoutingBatch
from .tensor import Tensor


@dataclass
class LogitRouter:
    gate: Tensor  # (E, d)
    k: int = 2
    lbl_coefficient: float = 0.0

    def __post_init__(self):
        if self.k > self.gate.shape[0]:
            raise ConfigError(f"k={self.k} exceeds E={self.gate.shape[0]}")
        if self.lbl_coefficient < 0:
            raise ConfigError("lbl_coefficient must be nonnegative")

    @classmethod
    def init(cls, E: int, d: int, rng: np.random.Generator, k: int = 2, lbl_coefficient: float = 0.0,
             std: float = 0.02) -> "LogitRouter":
        return cls(Tensor(std * rng.standard_normal((E, d)), requires_grad=True), k, lbl_coefficient)

    @property
    def num_experts(self) -> int:
        return self.gate.shape[0]

    def params(self) -> list[Tensor]:
        return [self.gate]


@dataclass
class DenseBank:
    """Plain dense single-layer experts, W: (E, d, d)."""

    W: Tensor
    nonlinearity: str = "gelu"

    @classmethod
    def init(cls, E: int, d: int, rng: np.random.Generator, nonlinearity: str = "gelu") -> "DenseBank":
        # same distribution as an eigen expert at init (U V^T with s = 1)
        mats = []
        for _ in range(E):
            U = tn.qr_orthonormalize(rng.standard_normal((d, d)))
            V = tn.qr_orthonormalize(rng.standard_normal((d, d)))
            mats.append(U @ V.T)
        return cls(Tensor(np.stack(mats), requires_grad=True), nonlinearity)

    def __len__(self):
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def params(self) -> list[Tensor]:
        return [self.W]

    def forward_all(self, x: Tensor) -> Tensor:
        E, d = self.W.shape[0], self.d
        lead = x.shape[:-1]
        h = x.reshape(-1, d) @ self.W.swapaxes(1, 2).swapaxes(0, 1).reshape(d, E * d)
        h = h.reshape(*lead, E, d)
        return tn.gelu(h) if self.nonlinearity == "gelu" else h


def topk_stable(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties to the lower index."""
    return np.argsort(-values, axis=-1, kind="stable")[..., :k]


def logit_route(x, router: LogitRouter) -> tuple[list[int], list[float]]:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    logits = router.gate.data @ x
    selected = topk_stable(logits, router.k)
    sel_logits = logits[selected]
    w = np.exp(sel_logits - sel_logits.max())
    return selected.tolist(), (w / w.sum()).tolist()


def logit_route_batch(x: Tensor, router: LogitRouter, bank: DenseBank,
                      expert_input: Tensor | None = None) -> tuple[Tensor, RoutingBatch, Tensor]:
    """Route rows of x (N, d). Returns (y, decisions, full router probabilities)."""
    logits = x @ router.gate.T  # (N, E)
    probs = tn.softmax(logits, axis=-1)
    selected = topk_stable(logits.data, router.k)
    w = tn.softmax(tn.take_along(logits, selected, axis=-1), axis=-1)
    outs = bank.forward_all(x if expert_input is None else expert_input)
    idx = np.broadcast_to(selected[..., None], selected.shape + (bank.d,))
    picked = tn.take_along(outs, idx, axis=-2)
    y = (w.reshape(*w.shape[:-1], 1, w.shape[-1]) @ picked).reshape(*picked.shape[:-2], bank.d)
    n = selected.shape[0]
    batch = RoutingBatch(
        scores=probs.data.copy(),
        selected=selected,
        weights=w.data.copy(),
        fallback=np.full(n, FALLBACK_NONE),
        degenerate=np.zeros(n, dtype=bool),
        T=0.0,
    )
    return y, batch, probs


def load_balance_loss(probs, top1) -> Tensor:
    """Switch-style auxiliary loss E * sum_e f_e * P_e.

    f_e is the fraction of tokens whose top-1 expert is e and P_e the mean
    router probability of e; differentiable through `probs` when tracked.
    """
    probs = tn.as_tensor(probs)
    n, E = probs.shape
    if n == 0:
        raise ValueError("load_balance_loss needs a nonempty batch")
    f = np.bincount(np.asarray(top1, dtype=np.int64), minlength=E) / n
    P = probs.mean(axis=0)
    return (P * (E * f)).sum()
