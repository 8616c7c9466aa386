"""Eigen-reparameterized experts: W = U diag(s) V^T with orthonormal U, V."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor

NONLINEARITIES = ("identity", "gelu")


def _activate(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return tn.gelu(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown nonlinearity {kind!r}")


@dataclass
class EigenLayer:
    """One (U, s, V) triple."""

    U: Tensor
    s: Tensor
    V: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "EigenLayer":
        U = tn.qr_orthonormalize(rng.standard_normal((d, d)))
        V = tn.qr_orthonormalize(rng.standard_normal((d, d)))
        return cls(Tensor(U, requires_grad=True), Tensor(np.ones(d), requires_grad=True),
                   Tensor(V, requires_grad=True))

    def weight(self) -> Tensor:
        return (self.U * self.s) @ self.V.T

    def apply(self, x: Tensor) -> Tensor:
        # row-vector form of U diag(s) V^T x
        return ((x @ self.V) * self.s) @ self.U.T

    def penalty(self) -> Tensor:
        d = self.U.shape[0]
        eye = np.eye(d)
        pu = tn.square(self.U.T @ self.U - eye).sum()
        pv = tn.square(self.V.T @ self.V - eye).sum()
        return pu + pv

    def params(self) -> list[Tensor]:
        return [self.U, self.s, self.V]


@dataclass
class EigenExpert:
    """An expert whose every weight matrix lives in the eigen parameterization.

    `layers` holds one triple for the default single-layer expert, or two for
    the MLP variant (GELU between them, `nonlinearity` after the last).
    `kind` is "free" or "region:<tag>".
    """

    layers: list[EigenLayer]
    routing_rank: int
    kind: str = "free"
    nonlinearity: str = "gelu"

    def __post_init__(self):
        d = self.d
        if not 1 <= self.routing_rank <= d:
            raise ValueError(f"routing_rank must be in [1, {d}], got {self.routing_rank}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, routing_rank: int | None = None,
             n_layers: int = 1, kind: str = "free", nonlinearity: str = "gelu") -> "EigenExpert":
        layers = [EigenLayer.init(d, rng) for _ in range(n_layers)]
        r = routing_rank if routing_rank is not None else max(1, d // 4)
        return cls(layers, r, kind, nonlinearity)

    @property
    def d(self) -> int:
        return self.layers[0].U.shape[0]

    @property
    def U(self) -> Tensor:
        return self.layers[0].U

    @property
    def s(self) -> Tensor:
        return self.layers[0].s

    @property
    def V(self) -> Tensor:
        return self.layers[0].V

    @property
    def region(self) -> str | None:
        return self.kind.split(":", 1)[1] if self.kind.startswith("region:") else None

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def basis_order(self) -> np.ndarray:
        """Column indices of U sorted by descending |s|; ties keep lower index."""
        return np.argsort(-np.abs(self.s.data), kind="stable")

    def routing_basis(self) -> Tensor:
        """Leading `routing_rank` columns of U (differentiable in U)."""
        return tn.take(self.U, self.basis_order()[: self.routing_rank], axis=1)


def expert_weight(e: EigenExpert, layer: int = 0) -> Tensor:
    return e.layers[layer].weight()


def expert_forward(e: EigenExpert, x) -> Tensor:
    x = tn.as_tensor(x)
    if x.shape[-1] != e.d:
        raise DimensionError(f"expert expects length-{e.d} input, got {x.shape[-1]}")
    h = x
    for i, layer in enumerate(e.layers):
        h = layer.apply(h)
        h = _activate(h, "gelu" if i < len(e.layers) - 1 else e.nonlinearity)
    return h


def ortho_penalty(e: EigenExpert) -> Tensor:
    total = e.layers[0].penalty()
    for layer in e.layers[1:]:
        total = total + layer.penalty()
    return total


def reorthogonalize(e: EigenExpert) -> EigenExpert:
    """QR-project every U and V back onto the orthonormal matrices, in place."""
    for layer in e.layers:
        layer.U.data = tn.qr_orthonormalize(layer.U.data)
        layer.V.data = tn.qr_orthonormalize(layer.V.data)
    return e


def drift(e: EigenExpert) -> float:
    """max over triples of ||U^T U - I||_F and ||V^T V - I||_F."""
    worst = 0.0
    for layer in e.layers:
        eye = np.eye(layer.U.shape[0])
        for m in (layer.U.data, layer.V.data):
            worst = max(worst, float(np.linalg.norm(m.T @ m - eye)))
    return worst


@dataclass
class ExpertBank:
    experts: list[EigenExpert]
    # per-expert learned routing targets, used only with score_target="learned_vector"
    targets: Tensor | None = field(default=None)

    def __post_init__(self):
        if not self.experts:
            raise ValueError("an expert bank needs at least one expert")
        d, r = self.experts[0].d, self.experts[0].routing_rank
        if any(e.d != d or e.routing_rank != r for e in self.experts):
            raise ValueError("all experts in a bank must share d and routing_rank")

    @classmethod
    def init(cls, E: int, d: int, rng: np.random.Generator, routing_rank: int | None = None,
             n_layers: int = 1, nonlinearity: str = "gelu", regions: tuple = (),
             learned_targets: bool = False) -> "ExpertBank":
        experts = []
        for i in range(E):
            kind = f"region:{regions[i]}" if i < len(regions) else "free"
            experts.append(EigenExpert.init(d, rng, routing_rank, n_layers, kind, nonlinearity))
        targets = None
        if learned_targets:
            r = experts[0].routing_rank
            targets = Tensor(rng.standard_normal((E, r)), requires_grad=True)
        return cls(experts, targets)

    def __len__(self):
        return len(self.experts)

    def __getitem__(self, i) -> EigenExpert:
        return self.experts[i]

    @property
    def d(self) -> int:
        return self.experts[0].d

    @property
    def routing_rank(self) -> int:
        return self.experts[0].routing_rank

    def params(self) -> list[Tensor]:
        ps = [p for e in self.experts for p in e.params()]
        if self.targets is not None:
            ps.append(self.targets)
        return ps

    def forward_all(self, x: Tensor) -> Tensor:
        """Every expert on every row of x: (..., d) -> (..., E, d).

        Uses the materialized weights, one matmul per layer for the whole bank.
        """
        d, E = self.d, len(self.experts)
        lead = x.shape[:-1]
        h = x.reshape(-1, d)
        n_layers = len(self.experts[0].layers)
        for li in range(n_layers):
            W = tn.stack([e.layers[li].weight() for e in self.experts], axis=0)  # (E, d, d)
            if li == 0:
                h = h @ W.swapaxes(1, 2).swapaxes(0, 1).reshape(d, E * d)
                h = h.reshape(-1, E, d)
            else:
                h = (h.swapaxes(0, 1) @ W.swapaxes(1, 2)).swapaxes(0, 1)
            act = "gelu" if li < n_layers - 1 else self.experts[0].nonlinearity
            h = _activate(h, act)
        return h.reshape(*lead, E, d)

    def routing_bases(self) -> Tensor:
        """(E, d, r) stack of per-expert routing bases."""
        return tn.stack([e.routing_basis() for e in self.experts], axis=0)

    def penalty(self) -> Tensor:
        total = ortho_penalty(self.experts[0])
        for e in self.experts[1:]:
            total = total + ortho_penalty(e)
        return total

    def reorthogonalize(self) -> None:
        for e in self.experts:
            reorthogonalize(e)
