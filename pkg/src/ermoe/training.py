"""Loss assembly, AdamW with warmup+cosine, the training loop and harnesses."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .backbone import Model, ModelConfig
from .baselines import load_balance_loss
from .expert import drift
from .router import FALLBACK_FULL, RoutingBatch
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # (N, n_patches, patch_dim)
    y: np.ndarray  # (N,) int labels or float targets
    tags: np.ndarray | None = None

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], None if self.tags is None else self.tags[idx])

    def split(self, val_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        perm = np.random.default_rng(seed).permutation(len(self))
        n_val = max(1, int(round(val_fraction * len(self))))
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    base_lr: float | None = None  # None: 1e-4 * batch_size / 256
    weight_decay: float = 0.05
    warmup_epochs: float = 5
    label_smoothing: float = 0.1
    reortho_every: int = 100
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_steps: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.base_lr is not None and self.base_lr <= 0:
            raise ValueError("base_lr must be positive")

    @property
    def lr(self) -> float:
        return self.base_lr if self.base_lr is not None else 1e-4 * self.batch_size / 256


@dataclass
class LossBreakdown:
    task: Tensor
    ortho: Tensor
    total: Tensor
    lam: float
    lbl: Tensor | None = None


def smoothed_cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float) -> Tensor:
    n, C = logits.shape
    target = np.full((n, C), smoothing / C)
    target[np.arange(n), labels] += 1.0 - smoothing
    return -(tn.log_softmax(logits, axis=-1) * target).sum() * (1.0 / n)


def task_loss(model: Model, result, y: np.ndarray, smoothing: float) -> Tensor:
    if model.config.head == "classifier":
        return smoothed_cross_entropy(result.output, np.asarray(y, dtype=np.int64), smoothing)
    return tn.absolute(result.output - np.asarray(y, dtype=np.float64)).mean()


def total_loss(model: Model, x: np.ndarray, y: np.ndarray, smoothing: float = 0.1,
               result=None) -> tuple[LossBreakdown, object]:
    """task + lam * sum of ortho penalties (+ lbl_coef * LBL for logit routers)."""
    if len(x) == 0:
        raise ContractError("total_loss needs a nonempty batch")
    if result is None:
        result = model.forward(x)
    task = task_loss(model, result, y, smoothing)
    lam = model.config.lam
    ortho = model.ortho_penalty()
    total = task + ortho * lam
    lbl = None
    if model.config.router == "logit":
        terms = [load_balance_loss(p, d.selected[:, 0]) for p, d in zip(result.router_probs, result.routing)]
        lbl = terms[0]
        for t in terms[1:]:
            lbl = lbl + t
        lbl = lbl * (1.0 / len(terms))
        if model.config.lbl_coef > 0:
            total = total + lbl * model.config.lbl_coef
    return LossBreakdown(task, ortho, total, lam, lbl), result


# ----------------------------------------------------------------- optimizer


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup (step 1 -> base/warmup) then cosine decay to zero."""
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    t = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimizerState:
    base_lr: float
    weight_decay: float = 0.05
    warmup_steps: int = 0
    total_steps: int = 1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    label_smoothing: float = 0.1
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        return lr_at(self.step_count, self.base_lr, self.warmup_steps, self.total_steps)


def decays(name: str, p: Tensor) -> bool:
    """Decoupled decay on matrices only (no biases, norms, or coefficient vectors)."""
    return p.data.ndim >= 2


def step(named_params: list[tuple[str, Tensor]], state: OptimizerState, grads: dict) -> float:
    """One AdamW update in place. Returns the learning rate used."""
    for name, p in named_params:
        g = grads.get(p)
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.step_count += 1
    lr = state.current_lr()
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step_count
    bc2 = 1.0 - b2 ** state.step_count
    for name, p in named_params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if state.weight_decay and decays(name, p):
            p.data = p.data * (1.0 - lr * state.weight_decay)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return lr


# -------------------------------------------------------------- train loop


def routing_entropy(batches: list[RoutingBatch]) -> float:
    """Mean over layers of the entropy (nats) of the expert-usage distribution."""
    ents = []
    for b in batches:
        counts = np.bincount(b.selected.ravel(), minlength=b.num_experts).astype(float)
        p = counts / counts.sum()
        nz = p[p > 0]
        ents.append(float(-(nz * np.log(nz)).sum()))
    return float(np.mean(ents)) if ents else 0.0


def full_fallback_rate(batches: list[RoutingBatch]) -> float:
    if not batches:
        return 0.0
    return float(np.mean(np.concatenate([b.fallback == FALLBACK_FULL for b in batches])))


METRIC_FIELDS = ("epoch", "step", "lr", "task_loss", "ortho_loss", "fallback_rate", "usage_entropy",
                 "val_loss", "max_drift")


def make_optimizer(model: Model, cfg: TrainConfig, n_train: int) -> OptimizerState:
    steps_per_epoch = max(1, math.ceil(n_train / cfg.batch_size))
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    return OptimizerState(
        base_lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        warmup_steps=int(round(cfg.warmup_epochs * steps_per_epoch)),
        total_steps=total,
        betas=cfg.betas,
        eps=cfg.adam_eps,
        label_smoothing=cfg.label_smoothing,
    )


def evaluate(model: Model, data: Dataset, batch_size: int = 256, smoothing: float | None = None) -> dict:
    """Validation metrics: combined loss, task loss, accuracy or MAE."""
    if smoothing is None:
        smoothing = 0.1 if model.config.head == "classifier" else 0.0
    task_sum, correct, abs_err, routing = 0.0, 0, 0.0, []
    with tn.no_grad():
        for lo in range(0, len(data), batch_size):
            xb, yb = data.x[lo: lo + batch_size], data.y[lo: lo + batch_size]
            loss, res = total_loss(model, xb, yb, smoothing)
            task_sum += loss.task.item() * len(xb)
            if model.config.head == "classifier":
                correct += int((res.output.data.argmax(-1) == yb).sum())
            else:
                abs_err += float(np.abs(res.output.data - yb).sum())
            routing.append(res.routing)
        ortho = model.ortho_penalty().item()
    n = len(data)
    task = task_sum / n
    out = {"task_loss": task, "ortho_loss": ortho, "val_loss": task + model.config.lam * ortho}
    if model.config.head == "classifier":
        out["accuracy"] = correct / n
    else:
        out["mae"] = abs_err / n
    layers = [RoutingBatch.concat([r[i] for r in routing]) for i in range(len(routing[0]))]
    out["fallback_rate"] = full_fallback_rate(layers)
    out["usage_entropy"] = routing_entropy(layers)
    return out


def train(model: Model, data: Dataset, cfg: TrainConfig, val: Dataset | None = None,
          on_step=None, eval_every_epoch: bool = True) -> list[dict]:
    """Minibatch training; one metrics row per epoch.

    Shuffling uses a generator seeded from cfg.seed, so a run is a pure
    function of (model init, data, cfg).
    """
    smoothing = cfg.label_smoothing if model.config.head == "classifier" else 0.0
    state = make_optimizer(model, cfg, len(data))
    named = model.named_params()
    rng = np.random.default_rng(cfg.seed + 1)
    rows = []
    eigen = model.config.router == "eigen"
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(data))
        task_acc, ortho_acc, n_seen, routing, max_drift = 0.0, 0.0, 0, [], 0.0
        for lo in range(0, len(data), cfg.batch_size):
            if state.step_count >= state.total_steps:
                break
            idx = perm[lo: lo + cfg.batch_size]
            loss, res = total_loss(model, data.x[idx], data.y[idx], smoothing)
            grads = tn.backward(loss.total, [p for _, p in named])
            lr = step(named, state, grads)
            if eigen:
                max_drift = max(max_drift, max(drift(e) for b in model.expert_banks() for e in b.experts))
                if cfg.reortho_every and state.step_count % cfg.reortho_every == 0:
                    model.reorthogonalize()
            task_acc += loss.task.item() * len(idx)
            ortho_acc += loss.ortho.item() * len(idx)
            n_seen += len(idx)
            routing.append(res.routing)
            if on_step is not None:
                on_step(state, loss, res)
        if n_seen == 0:
            break
        layers = [RoutingBatch.concat([r[i] for r in routing]) for i in range(len(routing[0]))]
        row = {
            "epoch": epoch + 1,
            "step": state.step_count,
            "lr": lr,
            "task_loss": task_acc / n_seen,
            "ortho_loss": ortho_acc / n_seen,
            "fallback_rate": full_fallback_rate(layers),
            "usage_entropy": routing_entropy(layers),
            "val_loss": float("nan"),
            "max_drift": max_drift,
        }
        if val is not None and eval_every_epoch:
            row["val_loss"] = evaluate(model, val, smoothing=smoothing)["val_loss"]
        log.info("epoch %d step %d task %.4f val %.4f", row["epoch"], row["step"], row["task_loss"],
                 row["val_loss"])
        rows.append(row)
    return rows


# ---------------------------------------------------------------- gradcheck


def param_group(name: str) -> str:
    """tokenizer / attention / experts.U|s|V|W / router / head."""
    parts = name.split(".")
    if parts[0] == "tokenizer":
        return "tokenizer"
    if parts[0] == "head":
        return "head"
    kind = parts[2]
    if kind == "experts":
        return f"experts.{parts[-1]}"
    return kind


def relative_error(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck(model: Model, x: np.ndarray, y: np.ndarray, h: float = 1e-5, floor_ratio: float = 1e-3,
              smoothing: float | None = None, groups: set | None = None) -> dict:
    """Compare tape gradients with central differences for every parameter entry.

    Returns {"groups": {group: max relative error}, "max": overall max,
    "count": entries checked}. Within a group the denominator
    max(|analytic|, |numeric|) is floored at `floor_ratio` times the group's
    largest gradient magnitude, so entries whose gradient sits below the
    central-difference noise are judged on the group's scale.
    """
    if smoothing is None:
        smoothing = 0.1 if model.config.head == "classifier" else 0.0
    named = model.named_params()
    loss, _ = total_loss(model, x, y, smoothing)
    analytic = tn.backward(loss.total, [p for _, p in named])

    def f() -> float:
        with tn.no_grad():
            return total_loss(model, x, y, smoothing)[0].total.item()

    pairs: dict = {}
    for name, p in named:
        group = param_group(name)
        if groups is not None and group not in groups:
            continue
        flat = p.data.reshape(-1)
        fd = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * h)
        a_list, n_list = pairs.setdefault(group, ([], []))
        a_list.append(analytic[p].reshape(-1))
        n_list.append(fd)
    report, count = {}, 0
    for group, (a_list, n_list) in pairs.items():
        a, n = np.concatenate(a_list), np.concatenate(n_list)
        floor = max(1e-12, floor_ratio * float(max(np.abs(a).max(), np.abs(n).max())))
        report[group] = float(relative_error(a, n, floor).max())
        count += a.size
    return {"groups": report, "max": max(report.values()) if report else 0.0, "count": count}


def gradcheck_config() -> ModelConfig:
    """d=8, M=2, E=4, n=5 tokens (4 patches + CLS)."""
    return ModelConfig(depth=2, heads=2, d=8, E=4, k=2, T=0.5, lam=5e-5, n_patches=4, patch_dim=6,
                       num_classes=3)


def gradcheck_model(config: ModelConfig, seed: int, batch: int = 3) -> dict:
    """Build a model, push it off the orthonormal manifold, and gradcheck it.

    The perturbation makes the ortho term and its gradient nonzero so that
    the penalty path is exercised too.
    """
    model = Model(config, seed)
    rng = np.random.default_rng(seed + 7)
    for bank in model.expert_banks():
        for e in bank.experts:
            for layer in e.layers:
                layer.U.data = layer.U.data + 0.05 * rng.standard_normal(layer.U.shape)
                layer.V.data = layer.V.data + 0.05 * rng.standard_normal(layer.V.shape)
                layer.s.data = layer.s.data + 0.3 * rng.standard_normal(layer.s.shape)
    x = rng.standard_normal((batch, config.n_patches, config.patch_dim))
    if config.head == "classifier":
        y = rng.integers(0, config.num_classes, size=batch)
    else:
        y = rng.uniform(min(config.age_bins), max(config.age_bins), size=batch)
    return gradcheck(model, x, y)


# ------------------------------------------------------------- lambda sweep


def lambda_sweep(values, model_config: ModelConfig, train_cfg: TrainConfig, train_data: Dataset,
                 val_data: Dataset) -> list[dict]:
    """Independent runs per lambda on the same seed and data; final validation loss."""
    if not values:
        raise ValueError("lambda_sweep needs at least one value")
    rows = []
    for lam in values:
        cfg = ModelConfig(**{**model_config.to_dict(), "lam": float(lam)})
        model = Model(cfg, train_cfg.seed)
        train(model, train_data, train_cfg, eval_every_epoch=False)
        ev = evaluate(model, val_data)
        rows.append({"lambda": float(lam), "val_loss": ev["val_loss"], "task_loss": ev["task_loss"],
                     "ortho_loss": ev["ortho_loss"]})
    return rows
