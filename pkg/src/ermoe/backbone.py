"""Toy ViT backbone with eigen-routed (or logit-routed) MoE blocks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .baselines import DenseBank, LogitRouter, logit_route_batch
from .expert import ExpertBank
from .router import RouterConfig, RoutingBatch, route_batch
from .tensor import DimensionError, Tensor


@dataclass
class ModelConfig:
    depth: int = 4
    heads: int = 2
    d: int = 32
    E: int = 8
    k: int = 2
    T: float = 0.5
    lam: float = 5e-5
    routing_rank: int | None = None
    router: str = "eigen"  # "eigen" | "logit"
    lbl_coef: float = 0.0  # logit router only
    score_target: str = "attention_context"
    route_input: str = "pre_attention"  # or "attention_output"
    expert_layers: int = 1
    nonlinearity: str = "gelu"
    regions: tuple = ()
    head: str = "classifier"  # "classifier" | "age"
    num_classes: int = 8
    age_bins: tuple = ()
    tau: float = 1.0
    n_patches: int = 4
    patch_dim: int = 16

    def __post_init__(self):
        self.regions = tuple(self.regions)
        self.age_bins = tuple(float(a) for a in self.age_bins)
        for name in ("depth", "heads", "d", "E", "k", "n_patches", "patch_dim", "expert_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.k > self.E:
            raise ValueError(f"k={self.k} exceeds E={self.E}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.lam < 0 or self.lbl_coef < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.router not in ("eigen", "logit"):
            raise ValueError(f"unknown router {self.router!r}")
        if self.route_input not in ("pre_attention", "attention_output"):
            raise ValueError(f"unknown route_input {self.route_input!r}")
        if self.head not in ("classifier", "age"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "age" and not self.age_bins:
            raise ValueError("age head needs age_bins")
        if len(self.regions) > self.E:
            raise ValueError("more region experts than experts")
        self.router_config()  # validates T and score_target

    @property
    def rank(self) -> int:
        return self.routing_rank if self.routing_rank is not None else max(1, self.d // 4)

    def router_config(self) -> RouterConfig:
        return RouterConfig(k=self.k, T=self.T, routing_rank=self.rank, score_target=self.score_target)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["regions"] = list(self.regions)
        out["age_bins"] = list(self.age_bins)
        return out


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(B, H, W, C) or (B, H, W, D, C) -> (B, n_patches, p^k * C), row-major patch order."""
    images = np.asarray(images, dtype=np.float64)
    spatial = images.shape[1:-1]
    if len(spatial) not in (2, 3):
        raise DimensionError(f"expected 2-D or 3-D inputs with channels, got shape {images.shape}")
    if any(n % p for n in spatial):
        raise DimensionError(f"spatial dims {spatial} are not divisible by patch size {p}")
    B, C = images.shape[0], images.shape[-1]
    grid = [n // p for n in spatial]
    shape = [B]
    for g in grid:
        shape += [g, p]
    x = images.reshape(*shape, C)
    nd = len(spatial)
    # (B, g1, p, g2, p, [g3, p], C) -> (B, g1, g2, [g3], p, p, [p], C)
    perm = [0] + [1 + 2 * i for i in range(nd)] + [2 + 2 * i for i in range(nd)] + [1 + 2 * nd]
    x = x.transpose(perm)
    return x.reshape(B, int(np.prod(grid)), p ** nd * C)


@dataclass
class PatchTokenizer:
    W: Tensor
    b: Tensor
    pos: Tensor
    cls: Tensor

    @classmethod
    def init(cls, n_patches: int, patch_dim: int, d: int, rng: np.random.Generator) -> "PatchTokenizer":
        return cls(
            Tensor(rng.standard_normal((patch_dim, d)) / math.sqrt(patch_dim), requires_grad=True),
            Tensor(np.zeros(d), requires_grad=True),
            Tensor(0.02 * rng.standard_normal((n_patches + 1, d)), requires_grad=True),
            # unit scale like the patch embeddings; a near-zero CLS would sit at
            # the degenerate edge of the routing normalization
            Tensor(rng.standard_normal(d), requires_grad=True),
        )

    def params(self) -> dict:
        return {"W": self.W, "b": self.b, "pos": self.pos, "cls": self.cls}

    def __call__(self, patches) -> Tensor:
        patches = tn.as_tensor(patches)
        B, n, pd = patches.shape
        if pd != self.W.shape[0] or n + 1 != self.pos.shape[0]:
            raise DimensionError(f"tokenizer expects (B, {self.pos.shape[0] - 1}, {self.W.shape[0]}) "
                                 f"patches, got {patches.shape}")
        emb = patches @ self.W + self.b
        cls = self.cls.reshape(1, 1, -1) * np.ones((B, 1, 1))
        return tn.concat([cls, emb], axis=1) + self.pos


def tokenize(tokenizer: PatchTokenizer, patches) -> Tensor:
    return tokenizer(patches)


@dataclass
class AttentionOutput:
    z: Tensor  # (B, n, d), residual included
    alpha: Tensor  # (B, n, n), head-averaged


@dataclass
class Attention:
    ln_g: Tensor
    ln_b: Tensor
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    bo: Tensor
    heads: int

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator) -> "Attention":
        def w():
            return Tensor(rng.standard_normal((d, d)) / math.sqrt(d), requires_grad=True)

        return cls(Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True),
                   w(), w(), w(), w(), Tensor(np.zeros(d), requires_grad=True), heads)

    def params(self) -> dict:
        return {"ln_g": self.ln_g, "ln_b": self.ln_b, "Wq": self.Wq, "Wk": self.Wk,
                "Wv": self.Wv, "Wo": self.Wo, "bo": self.bo}

    def __call__(self, tokens: Tensor) -> AttentionOutput:
        B, n, d = tokens.shape
        H = self.heads
        dh = d // H
        h = tn.layer_norm(tokens, self.ln_g, self.ln_b)

        def split(t):
            return t.reshape(B, n, H, dh).swapaxes(1, 2)  # (B, H, n, dh)

        q, k, v = split(h @ self.Wq), split(h @ self.Wk), split(h @ self.Wv)
        att = tn.softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
        mixed = (att @ v).swapaxes(1, 2).reshape(B, n, d)
        z = tokens + (mixed @ self.Wo + self.bo)
        return AttentionOutput(z=z, alpha=att.mean(axis=1))


def attention_block(attn: Attention, tokens) -> AttentionOutput:
    return attn(tn.as_tensor(tokens))


@dataclass
class MoEBlock:
    attn: Attention
    bank: ExpertBank | DenseBank
    router: RouterConfig | LogitRouter
    route_input: str = "pre_attention"

    def params(self) -> dict:
        out = {f"attention.{k}": v for k, v in self.attn.params().items()}
        if isinstance(self.bank, ExpertBank):
            for i, e in enumerate(self.bank.experts):
                for j, layer in enumerate(e.layers):
                    out[f"experts.{i}.{j}.U"] = layer.U
                    out[f"experts.{i}.{j}.s"] = layer.s
                    out[f"experts.{i}.{j}.V"] = layer.V
            if self.bank.targets is not None:
                out["router.targets"] = self.bank.targets
        else:
            out["experts.W"] = self.bank.W
            out["router.gate"] = self.router.gate
        return out

    def __call__(self, tokens: Tensor):
        """Returns (block output, routing decisions, router probs or None)."""
        B, n, d = tokens.shape
        att = self.attn(tokens)
        x = tokens if self.route_input == "pre_attention" else att.z
        x_flat = x.reshape(B * n, d)
        if isinstance(self.bank, ExpertBank):
            c = (att.alpha @ att.z).reshape(B * n, d)
            y, decisions = route_batch(x_flat, c, self.bank, self.router)
            probs = None
        else:
            y, decisions, probs = logit_route_batch(x_flat, self.router, self.bank)
        return att.z + y.reshape(B, n, d), decisions, probs


def ermoe_block(block: MoEBlock, tokens):
    out, decisions, _ = block(tn.as_tensor(tokens))
    return out, decisions


def age_expectation(logits, bins, tau: float) -> tuple[Tensor, Tensor]:
    """p = softmax(g / tau); age = sum_b bins_b p_b (batched over leading dims)."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    p = tn.softmax(tn.as_tensor(logits), axis=-1, temperature=tau)
    return p, (p * np.asarray(bins, dtype=np.float64)).sum(axis=-1)


def age_expectation_head(h, W, b, bins, tau: float) -> tuple[Tensor, Tensor]:
    logits = tn.as_tensor(h) @ tn.as_tensor(W) + tn.as_tensor(b)
    return age_expectation(logits, bins, tau)


@dataclass
class ForwardResult:
    output: Tensor  # logits (classifier) or predicted age (age head)
    probs: Tensor | None  # age-bin probabilities for the age head
    routing: list[RoutingBatch]
    router_probs: list = field(default_factory=list)
    features: Tensor | None = None


class Model:
    """Tokenizer -> depth x MoE block -> final norm on CLS -> head."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        c = config
        self.tokenizer = PatchTokenizer.init(c.n_patches, c.patch_dim, c.d, rng)
        self.blocks = []
        for _ in range(c.depth):
            attn = Attention.init(c.d, c.heads, rng)
            if c.router == "eigen":
                bank = ExpertBank.init(c.E, c.d, rng, c.rank, c.expert_layers, c.nonlinearity,
                                       c.regions, learned_targets=c.score_target == "learned_vector")
                router = c.router_config()
            else:
                bank = DenseBank.init(c.E, c.d, rng, c.nonlinearity)
                router = LogitRouter.init(c.E, c.d, rng, c.k, c.lbl_coef)
            self.blocks.append(MoEBlock(attn, bank, router, c.route_input))
        self.norm_g = Tensor(np.ones(c.d), requires_grad=True)
        self.norm_b = Tensor(np.zeros(c.d), requires_grad=True)
        n_out = c.num_classes if c.head == "classifier" else len(c.age_bins)
        self.head_W = Tensor(rng.standard_normal((c.d, n_out)) / math.sqrt(c.d), requires_grad=True)
        self.head_b = Tensor(np.zeros(n_out), requires_grad=True)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [(f"tokenizer.{k}", v) for k, v in self.tokenizer.params().items()]
        for i, blk in enumerate(self.blocks):
            out += [(f"blocks.{i}.{k}", v) for k, v in blk.params().items()]
        out += [("head.norm_g", self.norm_g), ("head.norm_b", self.norm_b),
                ("head.W", self.head_W), ("head.b", self.head_b)]
        return out

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params())

    def expert_banks(self) -> list[ExpertBank]:
        return [b.bank for b in self.blocks if isinstance(b.bank, ExpertBank)]

    def ortho_penalty(self) -> Tensor:
        banks = self.expert_banks()
        if not banks:
            return Tensor(0.0)
        total = banks[0].penalty()
        for b in banks[1:]:
            total = total + b.penalty()
        return total

    def reorthogonalize(self) -> None:
        for bank in self.expert_banks():
            bank.reorthogonalize()

    def set_threshold(self, T: float) -> None:
        for blk in self.blocks:
            if isinstance(blk.router, RouterConfig):
                blk.router = RouterConfig(blk.router.k, T, blk.router.routing_rank,
                                          blk.router.weight_floor_policy, blk.router.score_target)

    def set_topk(self, k: int) -> None:
        for blk in self.blocks:
            if isinstance(blk.router, RouterConfig):
                blk.router = RouterConfig(k, blk.router.T, blk.router.routing_rank,
                                          blk.router.weight_floor_policy, blk.router.score_target)
            else:
                blk.router.k = k

    def embed(self, patches) -> Tensor:
        return self.tokenizer(patches)

    def forward(self, patches) -> ForwardResult:
        tokens = self.tokenizer(patches)
        routing, router_probs = [], []
        for blk in self.blocks:
            tokens, decisions, probs = blk(tokens)
            routing.append(decisions)
            router_probs.append(probs)
        cls = tn.take(tokens, np.array([0]), axis=1).reshape(tokens.shape[0], self.config.d)
        h = tn.layer_norm(cls, self.norm_g, self.norm_b)
        if self.config.head == "classifier":
            logits = h @ self.head_W + self.head_b
            return ForwardResult(logits, None, routing, router_probs, h)
        p, age = age_expectation_head(h, self.head_W, self.head_b, self.config.age_bins, self.config.tau)
        return ForwardResult(age, p, routing, router_probs, h)

    def block_inputs(self, patches) -> list[np.ndarray]:
        """Token representations entering each block, (B, n, d) per block."""
        with tn.no_grad():
            tokens = self.tokenizer(patches)
            seen = []
            for blk in self.blocks:
                seen.append(tokens.data.copy())
                tokens, _, _ = blk(tokens)
        return seen


def _unit_rows(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=1, keepdims=True)
    return a / np.where(n > 0, n, 1.0)


def warm_start_regions(model: Model, tagged: dict) -> None:
    """Warm-start region experts on region-isolated inputs.

    For every block, the leading routing columns of a region expert's U are
    set to the directions where that region's tokens and their attention
    contexts agree most: the top eigenvectors of the symmetrized
    cross-covariance of the unit-normalized (token, context) pairs. The other
    columns are completed to an orthonormal basis. `tagged` maps region
    tag -> (B, n_patches, patch_dim) inputs.
    """
    r, d = model.config.rank, model.config.d
    for bi, blk in enumerate(model.blocks):
        if not isinstance(blk.bank, ExpertBank):
            continue
        for e in blk.bank.experts:
            tag = e.region
            if tag is None or tag not in tagged:
                continue
            x = model.block_inputs(tagged[tag])[bi]
            with tn.no_grad():
                att = blk.attn(Tensor(x))
                c = (att.alpha @ att.z).data
                if model.config.route_input == "attention_output":
                    x = att.z.data
            X, C = _unit_rows(x.reshape(-1, d)), _unit_rows(c.reshape(-1, d))
            w, vecs = np.linalg.eigh(0.5 * (X.T @ C + C.T @ X))
            lead = vecs[:, np.argsort(-w, kind="stable")[:r]]
            order = e.basis_order()
            U = e.U.data.copy()
            # keep the old trailing directions, minus their overlap with the new subspace
            rest = U[:, order[r:]]
            rest = rest - lead @ (lead.T @ rest)
            full = tn.qr_orthonormalize(np.concatenate([lead, rest], axis=1))
            U_new = np.empty_like(U)
            U_new[:, order] = full
            e.U.data = U_new
            # the routing basis is picked by |s|; with s all equal it reshuffles
            # after the first few steps, so give the warm directions a clear lead
            s = e.s.data.copy()
            s[order[:r]] = 2.0 * np.abs(s).max()
            e.s.data = s
