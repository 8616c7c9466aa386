"""File formats: TensorFile, checkpoints, run configs, synthetic data, dumps, CSV."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .backbone import Model, ModelConfig, patchify
from .router import FALLBACK_NAMES, RoutingBatch
from .training import Dataset, TrainConfig


class FormatError(ValueError):
    pass


class ConfigFileError(ValueError):
    pass


# ------------------------------------------------------------- atomic write


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- TensorFile

MAGIC = b"ERT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def tensor_to_bytes(arr, dtype_code: int = 1) -> bytes:
    arr = np.asarray(getattr(arr, "data", arr))
    if dtype_code not in _DTYPES:
        raise FormatError(f"unknown dtype code {dtype_code}")
    head = MAGIC + struct.pack("<BI", dtype_code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[dtype_code]).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TensorFile at `offset`; returns (array as float64, end offset)."""
    if len(buf) - offset < 9:
        raise FormatError("truncated tensor header")
    if buf[offset: offset + 4] != MAGIC:
        raise FormatError("bad tensor magic")
    code, rank = struct.unpack_from("<BI", buf, offset + 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 9
    if len(buf) - pos < 4 * rank:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = int(np.prod(dims, dtype=np.int64)) * _DTYPES[code].itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"tensor payload truncated: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=_DTYPES[code], count=nbytes // _DTYPES[code].itemsize, offset=pos)
    return arr.reshape(dims).astype(np.float64), pos + nbytes


def write_tensor(path, arr, dtype_code: int = 1) -> None:
    atomic_write(path, tensor_to_bytes(arr, dtype_code))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr


# --------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"ERCK"
CKPT_VERSION = 1


def config_hash(model_config: ModelConfig) -> str:
    blob = json.dumps(model_config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def checkpoint_bytes(model: Model) -> bytes:
    cfg_json = json.dumps({"model": model.config.to_dict(), "seed": model.seed}, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", CKPT_VERSION))
    out.write(config_hash(model.config).encode("ascii"))
    out.write(struct.pack("<I", len(cfg_json)))
    out.write(cfg_json)
    named = model.named_params()
    out.write(struct.pack("<I", len(named)))
    for name, p in named:
        nb = name.encode()
        blob = tensor_to_bytes(p.data)
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        out.write(struct.pack("<Q", len(blob)))
        out.write(blob)
    return out.getvalue()


def save_checkpoint(model: Model, path) -> None:
    atomic_write(path, checkpoint_bytes(model))


def load_checkpoint(path, expected: ModelConfig | None = None, force: bool = False) -> Model:
    """Rebuild a model from a checkpoint.

    With `expected`, a config-hash mismatch raises unless `force`.
    """
    buf = Path(path).read_bytes()

    def need(pos, n, what):
        if len(buf) - pos < n:
            raise FormatError(f"checkpoint truncated in {what}")

    need(0, 72, "header")
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    stored_hash = buf[8:72].decode("ascii")
    pos = 72
    need(pos, 4, "config length")
    (clen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    need(pos, clen, "config")
    meta = json.loads(buf[pos: pos + clen])
    pos += clen
    cfg = ModelConfig(**meta["model"])
    if config_hash(cfg) != stored_hash:
        raise FormatError("checkpoint config does not match its stored hash")
    if expected is not None and config_hash(expected) != stored_hash and not force:
        raise FormatError("checkpoint was written for a different model config (use --force to override)")
    model = Model(cfg, meta["seed"])
    params = dict(model.named_params())
    need(pos, 4, "tensor count")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if count != len(params):
        raise FormatError(f"checkpoint holds {count} tensors, model expects {len(params)}")
    for _ in range(count):
        need(pos, 2, "tensor name")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, nlen + 8, "tensor name")
        name = buf[pos: pos + nlen].decode()
        pos += nlen
        (blen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        need(pos, blen, f"tensor {name}")
        arr, end = tensor_from_bytes(buf[: pos + blen], pos)
        if end != pos + blen:
            raise FormatError(f"tensor {name} length mismatch")
        pos = end
        if name not in params or params[name].shape != arr.shape:
            raise FormatError(f"unexpected tensor {name} with shape {arr.shape}")
        params[name].data = arr.copy()
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint")
    return model


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    num_classes: int = 8
    tokens_per_sample: int = 16
    d: int = 32
    subspace_rank: int = 4
    noise_sigma: float = 0.1
    samples: int = 1024
    seed: int = 0
    token_jitter: float = 0.3

    def __post_init__(self):
        if self.subspace_rank > self.d:
            raise ConfigFileError(f"subspace_rank {self.subspace_rank} exceeds d={self.d}")
        if min(self.num_classes, self.tokens_per_sample, self.d, self.subspace_rank, self.samples) < 1:
            raise ConfigFileError("synthetic spec sizes must be positive")
        if self.noise_sigma < 0 or self.token_jitter < 0:
            raise ConfigFileError("noise levels must be nonnegative")


def class_bases(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    return np.stack([tn.qr_orthonormalize(rng.standard_normal((spec.d, spec.subspace_rank)))
                     for _ in range(spec.num_classes)])


def synthesize(spec: SyntheticSpec, only_class: int | None = None, samples: int | None = None,
               seed_offset: int = 0) -> Dataset:
    """Tokens of a sample share a class subspace and a sample-level coefficient.

    token_j = B_c (a + jitter * g_j) + sigma * n_j. `only_class` draws
    class-isolated inputs (the probe's analog of region-isolated volumes).
    """
    bases = class_bases(spec)
    rng = np.random.default_rng([spec.seed, 1 + seed_offset])
    n = spec.samples if samples is None else samples
    if only_class is None:
        labels = rng.permutation(np.arange(n) % spec.num_classes)
    else:
        labels = np.full(n, only_class)
    a = rng.standard_normal((n, 1, spec.subspace_rank))
    g = rng.standard_normal((n, spec.tokens_per_sample, spec.subspace_rank))
    coeffs = a + spec.token_jitter * g
    x = np.einsum("ndr,ntr->ntd", bases[labels], coeffs)
    x = x + spec.noise_sigma * rng.standard_normal(x.shape)
    return Dataset(x, labels.astype(np.int64), labels.astype(np.int64))


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Dataset:
    data = synthesize(spec)
    out = Path(out_dir)
    write_tensor(out / "x.ert", data.x)
    write_tensor(out / "y.ert", data.y)
    atomic_write(out / "spec.json", (json.dumps(dataclasses.asdict(spec), sort_keys=True, indent=2) + "\n").encode())
    return data


def load_dataset(path, patch_size: int | None = None) -> Dataset:
    """Read x.ert / y.ert from a directory; images (N,H,W[,D],C) are patchified."""
    path = Path(path)
    x = read_tensor(path / "x.ert")
    y = read_tensor(path / "y.ert")
    if x.ndim in (4, 5):
        if patch_size is None:
            raise ConfigFileError("image data needs data.patch_size")
        x = patchify(x, patch_size)
    if x.ndim != 3:
        raise FormatError(f"expected (N, tokens, dim) or image data, got shape {x.shape}")
    if y.shape != (x.shape[0],):
        raise FormatError("label count does not match sample count")
    labels = y.astype(np.int64) if np.all(y == np.round(y)) else y
    return Dataset(x, labels, labels if labels.dtype == np.int64 else None)


# -------------------------------------------------------------- run config

_ROUTER_KEYS = {"kind": "router", "k": "k", "T": "T", "routing_rank": "routing_rank",
                "score_target": "score_target", "lbl_coef": "lbl_coef"}


@dataclass
class DataConfig:
    kind: str = "synthetic"  # "synthetic" | "tensorfile"
    path: str | None = None
    patch_size: int | None = None
    val_fraction: float = 0.2
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("synthetic", "tensorfile"):
            raise ConfigFileError(f"unknown data kind {self.kind!r}")
        if self.kind == "tensorfile" and not self.path:
            raise ConfigFileError("tensorfile data needs a path")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigFileError("val_fraction must lie in (0, 1)")
        _strict(SyntheticSpec, self.synth, "data.synth")
        SyntheticSpec(**self.synth)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**self.synth)


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    outputs: str = "runs"

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def to_dict(self) -> dict:
        m = self.model.to_dict()
        router = {key: m.pop(attr) for key, attr in _ROUTER_KEYS.items()}
        t = dataclasses.asdict(self.train)
        t["betas"] = list(t["betas"])
        return {"model": m, "router": router, "train": t, "data": dataclasses.asdict(self.data),
                "outputs": {"dir": self.outputs}}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _strict(cls, d: dict, section: str) -> None:
    if not isinstance(d, dict):
        raise ConfigFileError(f"section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigFileError(f"unknown keys in {section}: {sorted(unknown)}")


def parse_config(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigFileError("config must be a JSON object")
    unknown = set(d) - {"model", "router", "train", "data", "outputs"}
    if unknown:
        raise ConfigFileError(f"unknown top-level keys: {sorted(unknown)}")
    model = dict(d.get("model", {}))
    _strict(ModelConfig, model, "model")
    router = d.get("router", {})
    if not isinstance(router, dict):
        raise ConfigFileError("section 'router' must be an object")
    bad = set(router) - set(_ROUTER_KEYS)
    if bad:
        raise ConfigFileError(f"unknown keys in router: {sorted(bad)}")
    for key, val in router.items():
        model[_ROUTER_KEYS[key]] = val
    train = d.get("train")
    if not isinstance(train, dict) or "seed" not in train:
        raise ConfigFileError("train.seed is mandatory")
    _strict(TrainConfig, train, "train")
    data = d.get("data", {})
    _strict(DataConfig, data, "data")
    outputs = d.get("outputs", {})
    if not isinstance(outputs, dict) or set(outputs) - {"dir"}:
        raise ConfigFileError("outputs accepts only 'dir'")
    try:
        return RunConfig(ModelConfig(**model), TrainConfig(**train), DataConfig(**data),
                         outputs.get("dir", "runs"))
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{path}: {exc}") from exc
    return parse_config(raw)


def run_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """(train, validation) split of the configured dataset."""
    if cfg.data.kind == "synthetic":
        data = synthesize(cfg.data.synthetic_spec())
    else:
        data = load_dataset(cfg.data.path, cfg.data.patch_size)
    return data.split(cfg.data.val_fraction, cfg.train.seed)


# ------------------------------------------------------------- dumps, CSV


def write_routing_dump(path, layers: list[RoutingBatch]) -> None:
    lines = []
    for li, batch in enumerate(layers):
        lines.extend(batch.to_jsonl(layer=li))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_routing_dump(path) -> list[RoutingBatch]:
    """JSON-lines dump -> one RoutingBatch per layer (token order preserved)."""
    per_layer: dict = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                per_layer.setdefault(int(rec.get("layer", 0)), []).append(rec)
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{n}: {exc}") from exc
    if not per_layer:
        raise FormatError(f"{path}: empty routing dump")
    out = []
    for layer in sorted(per_layer):
        recs = per_layer[layer]
        has_labels = all("label" in r for r in recs)
        out.append(RoutingBatch(
            scores=np.array([r["scores"] for r in recs], dtype=np.float64),
            selected=np.array([r["selected"] for r in recs], dtype=np.int64),
            weights=np.array([r["weights"] for r in recs], dtype=np.float64),
            fallback=np.array([FALLBACK_NAMES.index(r["fallback"]) for r in recs]),
            degenerate=np.array([bool(r.get("degenerate", False)) for r in recs]),
            labels=np.array([r["label"] for r in recs]) if has_labels else None,
        ))
    return out


def csv_text(rows: list[dict], fields=None, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        for line in header_comment.splitlines():
            buf.write(f"# {line}\n")
    fields = list(fields or (rows[0].keys() if rows else []))
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})
    return buf.getvalue()


def write_csv(path, rows: list[dict], fields=None, header_comment: str | None = None) -> None:
    atomic_write(path, csv_text(rows, fields, header_comment).encode())


def read_csv(path) -> list[dict]:
    with open(path) as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))
