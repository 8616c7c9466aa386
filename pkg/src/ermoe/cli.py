"""Command-line front end: train, eval, gradcheck, sweep, analyze, synth.

Exit codes: 0 success, 1 runtime failure (including a failed gradcheck),
2 usage error (bad flags, unknown config keys).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from . import tensor as tn
from .backbone import Model
from .io import (ConfigFileError, FormatError, SyntheticSpec, generate_synthetic, load_checkpoint,
                 load_config, read_csv, read_routing_dump, run_data, save_checkpoint, write_csv,
                 write_routing_dump)
from .router import RoutingBatch
from .training import (METRIC_FIELDS, evaluate, gradcheck_config, gradcheck_model,
                       lambda_sweep, train)

GRADCHECK_TOL = 1e-5
USAGE_NOTE = ("per-layer convention: each layer's percentages count tokens whose selection contains "
              "the expert, so they sum to 100*k within a layer")
TAILMASS_NOTE = ("tail mass = sum of weight on A outside the top-k / sum of weight on A, A = {e : s_e > T}; "
                 "non-increasing in k under this definition")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad value list {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty value list")
    return vals


def _run_paths(cfg) -> dict:
    h = cfg.hash()
    out = Path(cfg.outputs)
    return {
        "metrics": out / f"metrics_{h}.csv",
        "checkpoint": out / f"checkpoint_{h}.erck",
        "dump": out / f"routing_{h}.jsonl",
        "predictions": out / f"predictions_{h}.csv",
    }


def _routing_with_labels(model: Model, data, batch_size: int = 256) -> list[RoutingBatch]:
    """Per-layer routing over a dataset; every token carries its sample's label."""
    per_layer = None
    n_tok = model.config.n_patches + 1
    with tn.no_grad():
        for lo in range(0, len(data), batch_size):
            xb = data.x[lo: lo + batch_size]
            res = model.forward(xb)
            labels = None
            if data.y.dtype.kind in "iu":
                labels = np.repeat(data.y[lo: lo + batch_size], n_tok)
            if per_layer is None:
                per_layer = [[] for _ in res.routing]
            for i, b in enumerate(res.routing):
                per_layer[i].append(dataclasses.replace(b, labels=labels))
    return [RoutingBatch.concat(b) for b in per_layer]


def _predictions(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with tn.no_grad():
        for lo in range(0, len(x), batch_size):
            res = model.forward(x[lo: lo + batch_size])
            pred = res.output.data
            out.append(pred.argmax(-1) if model.config.head == "classifier" else pred)
    return np.concatenate(out)


def _trained_model(cfg, ckpt=None, force=False):
    train_set, val_set = run_data(cfg)
    if ckpt:
        return load_checkpoint(ckpt, cfg.model, force), train_set, val_set
    model = Model(cfg.model, cfg.train.seed)
    train(model, train_set, cfg.train, eval_every_epoch=False)
    return model, train_set, val_set


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    paths = _run_paths(cfg)
    train_set, val_set = run_data(cfg)
    model = Model(cfg.model, cfg.train.seed)
    rows = train(model, train_set, cfg.train, val_set)
    write_csv(paths["metrics"], rows, METRIC_FIELDS)
    save_checkpoint(model, paths["checkpoint"])
    write_routing_dump(paths["dump"], _routing_with_labels(model, val_set))
    last = rows[-1] if rows else {}
    print(f"trained {last.get('step', 0)} steps; val_loss {last.get('val_loss', float('nan')):.6f}")
    for key in ("metrics", "checkpoint", "dump"):
        print(f"{key}: {paths[key]}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = load_checkpoint(args.ckpt, cfg.model, args.force)
    train_set, val_set = run_data(cfg)
    ev = evaluate(model, val_set)
    metric = "accuracy" if "accuracy" in ev else "mae"
    print(f"{metric} {ev[metric]:.6f}")
    print(f"val_loss {ev['val_loss']:.6f}")
    rows = []
    for split, data in (("train", train_set), ("val", val_set)):
        pred = _predictions(model, data.x)
        rows += [{"split": split, "y": float(y), "yhat": float(p)} for y, p in zip(data.y, pred)]
    path = _run_paths(cfg)["predictions"]
    write_csv(path, rows, ("split", "y", "yhat"))
    print(f"predictions: {path}")
    return 0


def cmd_gradcheck(args) -> int:
    config = load_config(args.config).model if args.config else gradcheck_config()
    report = gradcheck_model(config, args.seed)
    for group, err in sorted(report["groups"].items()):
        print(f"{group:12s} max rel err {err:.3e}")
    ok = report["max"] < args.tol
    print(f"max rel err {report['max']:.3e} over {report['count']} entries: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    h = cfg.hash()
    out_dir = Path(args.out or cfg.outputs)
    if args.param == "lambda":
        if args.ckpt:
            raise UsageError("--ckpt does not apply to a lambda sweep (each value trains its own model)")
        train_set, val_set = run_data(cfg)
        rows = lambda_sweep(args.values, cfg.model, cfg.train, train_set, val_set)
        fields = ("lambda", "val_loss", "task_loss", "ortho_loss")
        note = "one independent run per lambda; same seed, data and schedule"
    else:
        if cfg.model.router != "eigen":
            raise UsageError(f"--param {args.param} sweeps need the eigen router")
        model, _, val_set = _trained_model(cfg, args.ckpt, args.force)
        if args.param == "threshold":
            rates = analysis.fallback_sweep(model, val_set.x, args.values)
            rows = [{"T": T, "fallback_rate": r} for T, r in rates]
            fields = ("T", "fallback_rate")
            note = "weights frozen; full-fallback rate over all layers' validation tokens"
        else:
            ks = [int(v) for v in args.values]
            if any(k != v for k, v in zip(ks, args.values)) or min(ks) < 1:
                raise UsageError("top-k values must be positive integers")
            scores = np.concatenate(analysis.collect_scores(model, val_set.x))
            rows = [{"k": k, "tail_mass": m}
                    for k, m in analysis.tail_mass_sweep(scores, cfg.model.T, ks)]
            fields = ("k", "tail_mass")
            note = TAILMASS_NOTE
    path = out_dir / f"sweep_{args.param}_{h}.csv"
    write_csv(path, rows, fields, note)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def _usage_rows(layers, threshold):
    rows = []
    for li, b in enumerate(layers):
        curve = analysis.usage_curve(b)
        st = analysis.usage_stats(curve)
        for rank, pct in enumerate(curve):
            rows.append({"layer": li, "rank": rank, "percent": float(pct),
                         "max_share": st["max_share"], "cv": st["cv"]})
    return rows, ("layer", "rank", "percent", "max_share", "cv"), USAGE_NOTE


def _heatmap_rows(layers, threshold):
    rows = []
    for li, b in enumerate(layers):
        hm = analysis.class_expert_heatmap(b)
        for c, vec in enumerate(hm):
            rows.append({"layer": li, "class": c, **{f"e{e}": float(v) for e, v in enumerate(vec)}})
    E = layers[0].num_experts
    return rows, ("layer", "class") + tuple(f"e{e}" for e in range(E)), "mean dense mixture weight per class"


def _tailmass_rows(layers, threshold):
    scores = np.concatenate([b.scores for b in layers])
    ks = range(1, scores.shape[1] + 1)
    rows = [{"k": k, "tail_mass": m} for k, m in analysis.tail_mass_sweep(scores, threshold, ks)]
    return rows, ("k", "tail_mass"), f"{TAILMASS_NOTE}; T={threshold}"


def _fallback_rows(layers, threshold):
    scores = np.concatenate([b.scores for b in layers])
    k = layers[0].selected.shape[1]
    thresholds = [round(0.1 * i, 1) for i in range(10)]
    rows = [{"T": T, "fallback_rate": r} for T, r in analysis.fallback_rates(scores, thresholds, k)]
    return rows, ("T", "fallback_rate"), "full-fallback rate from the dumped scores"


def _specialize_rows(layers, threshold):
    rows = []
    for li, b in enumerate(layers):
        for r in analysis.specialization_from_dump(b):
            rows.append({"layer": li, **{k: v for k, v in r.items() if k != "mean_scores"}})
    return rows, ("layer", "tag", "top1", "score1", "top2", "score2"), "mean eigenbasis score by token label"


ANALYZERS = {
    "usage": _usage_rows,
    "heatmap": _heatmap_rows,
    "tailmass": _tailmass_rows,
    "fallback": _fallback_rows,
    "specialize": _specialize_rows,
}


def _calibrate_rows(path):
    recs = read_csv(path)
    try:
        split = np.array([r["split"] for r in recs])
        y = np.array([float(r["y"]) for r in recs])
        yhat = np.array([float(r["yhat"]) for r in recs])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: expected split,y,yhat columns") from exc
    tr, te = split == "train", split == "val"
    res = analysis.posthoc_calibrate(y[tr], yhat[tr], yhat[te], y[te])
    rows = []
    for stage in ("raw", "calibrated"):
        rows.append({"stage": stage, "a": res["a"], "b": res["b"], **res[stage]})
    return rows, ("stage", "a", "b", "mae", "corr", "slope", "intercept"), "OLS of yhat on y fitted on the train split"


def cmd_analyze(args) -> int:
    dump = Path(args.dump)
    digest = hashlib.sha256(dump.read_bytes()).hexdigest()[:12]
    if args.metric == "calibrate":
        rows, fields, note = _calibrate_rows(dump)
    else:
        layers = read_routing_dump(dump)
        rows, fields, note = ANALYZERS[args.metric](layers, args.threshold)
    path = Path(args.out) / f"{args.metric}_{digest}.csv"
    write_csv(path, rows, fields, note)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_synth(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{args.spec}: {exc}") from exc
    known = {f.name for f in dataclasses.fields(SyntheticSpec)}
    if not isinstance(raw, dict) or set(raw) - known:
        raise ConfigFileError(f"unknown synthetic spec keys: {sorted(set(raw) - known)}")
    data = generate_synthetic(SyntheticSpec(**raw), args.out)
    print(f"wrote {len(data)} samples to {args.out}")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ermoe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model from a run config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy or MAE of a checkpoint on the held-out split")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--force", action="store_true", help="accept a checkpoint with a different config hash")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="tape gradients vs central differences")
    s.add_argument("--config", help="run config whose model section is checked (default: d=8 toy)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", help="threshold / top-k / lambda sweeps")
    s.add_argument("--config", required=True)
    s.add_argument("--param", required=True, choices=("threshold", "topk", "lambda"))
    s.add_argument("--values", required=True, type=_floats, help="comma-separated values")
    s.add_argument("--ckpt", help="use a trained checkpoint instead of training first")
    s.add_argument("--force", action="store_true")
    s.add_argument("--out", help="output directory (default: the config's outputs dir)")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("analyze", help="analyses of a routing dump")
    s.add_argument("--dump", required=True, help="routing dump (.jsonl); predictions CSV for calibrate")
    s.add_argument("--metric", required=True, choices=tuple(ANALYZERS) + ("calibrate",))
    s.add_argument("--threshold", type=float, default=0.5, help="T for tail mass")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("synth", help="generate a synthetic subspace dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", default="data")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigFileError, UsageError) as exc:
        print(f"ermoe {args.command}: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError, ValueError, RuntimeError, tn.ContractError) as exc:
        print(f"ermoe {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
