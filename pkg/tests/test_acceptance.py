"""Acceptance checks, one per criterion.

Run under pytest (one test per criterion), or directly with
`python tests/test_acceptance.py` to print one PASS/FAIL line per criterion.
"""

from __future__ import annotations

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from ermoe import tensor as tn
from ermoe.analysis import (matched_dominance, posthoc_calibrate, specialization_probe, tail_mass,
                            usage_curve, usage_stats)
from ermoe.backbone import Model, ModelConfig, age_expectation_head, warm_start_regions
from ermoe.cli import main as cli_main
from ermoe.expert import ExpertBank, EigenExpert, drift, expert_forward, expert_weight, ortho_penalty
from ermoe.io import SyntheticSpec, read_csv, synthesize
from ermoe.router import RouterConfig, RoutingBatch, route_batch, route_token
from ermoe.tensor import Tensor
from ermoe.training import TrainConfig, gradcheck_config, gradcheck_model, train

# desk-scale recipe for the balance / fallback criteria: E=8, k=2, T=0.5
DESK_MODEL = dict(depth=4, heads=2, d=32, E=8, k=2, T=0.5, n_patches=16, patch_dim=32, num_classes=8)
DESK_SYNTH = dict(num_classes=8, tokens_per_sample=16, d=32, subspace_rank=4, samples=1024)
DESK_TRAIN = dict(epochs=30, batch_size=64, base_lr=1e-3)

# smaller toy used by the sweep and determinism criteria
TOY_MODEL = dict(depth=2, heads=2, d=16, E=8, k=2, T=0.5, n_patches=8, patch_dim=16, num_classes=8)
TOY_SYNTH = dict(num_classes=8, tokens_per_sample=8, d=16, subspace_rank=2, samples=1024)
TOY_TRAIN = dict(epochs=10, batch_size=64, base_lr=1e-3)


def _write_config(path: Path, model: dict, synth: dict, train_cfg: dict, seed: int, out: Path,
                  router: dict | None = None) -> Path:
    m = {k: v for k, v in model.items() if k not in ("k", "T")}
    r = {"kind": "eigen", "k": model["k"], "T": model["T"], **(router or {})}
    cfg = {"model": m, "router": r, "train": {**train_cfg, "seed": seed},
           "data": {"kind": "synthetic", "synth": {**synth, "seed": seed}}, "outputs": {"dir": str(out)}}
    path.write_text(json.dumps(cfg, indent=2))
    return path


def _val_routing(model: Model, x: np.ndarray) -> list[RoutingBatch]:
    with tn.no_grad():
        res = model.forward(x)
    return res.routing


# ------------------------------------------------------------------ checks


def check_1_gradients():
    t0 = time.perf_counter()
    report = gradcheck_model(gradcheck_config(), seed=0)
    dt = time.perf_counter() - t0
    needed = {"tokenizer", "attention", "experts.U", "experts.s", "experts.V", "head"}
    groups = report["groups"]
    ok = needed <= set(groups) and report["max"] < 1e-5 and dt < 60
    worst = max(groups, key=groups.get)
    return ok, f"max rel err {report['max']:.2e} (worst group {worst}) over {len(groups)} groups, {dt:.1f}s"


def check_2_orthogonality():
    cfg = gradcheck_config()
    model = Model(cfg, seed=0)
    fresh = max(ortho_penalty(e).item() for b in model.expert_banks() for e in b.experts)
    # push every basis well off the manifold, then project back
    rng = np.random.default_rng(1)
    for b in model.expert_banks():
        for e in b.experts:
            e.U.data = e.U.data + 0.3 * rng.standard_normal(e.U.shape)
            e.V.data = e.V.data + 0.3 * rng.standard_normal(e.V.shape)
    model.reorthogonalize()
    after = max(drift(e) for b in model.expert_banks() for e in b.experts)

    # 2000-step toy run: d=8, M=2, E=4, n=5 tokens; toy-scale schedule (bs 64, lr by the 1e-4*bs/256 rule)
    spec = SyntheticSpec(num_classes=cfg.num_classes, tokens_per_sample=cfg.n_patches, d=cfg.patch_dim,
                         subspace_rank=2, samples=1024, seed=0)
    data = synthesize(spec)
    model = Model(cfg, seed=0)
    assert cfg.lam == 5e-5
    tc = TrainConfig(epochs=10_000, batch_size=64, seed=0, reortho_every=100, max_steps=2000)
    worst = []
    train(model, data, tc, on_step=lambda state, loss, res: worst.append(
        max(drift(e) for b in model.expert_banks() for e in b.experts)), eval_every_epoch=False)
    max_drift = max(worst)
    ok = fresh < 1e-18 and after < 1e-10 and len(worst) == 2000 and max_drift <= 1e-2
    return ok, (f"fresh penalty {fresh:.1e}; post-QR drift {after:.1e}; "
                f"max drift over {len(worst)} steps {max_drift:.3e} (bound 1e-2)")


def check_3_routing_invariants(n_instances: int = 10_000):
    rng = np.random.default_rng(3)
    problems = []
    for i in range(n_instances):
        E = int(rng.integers(1, 9))
        d = int(rng.integers(2, 13))
        r = int(rng.integers(1, d + 1))
        k = int(rng.integers(1, E + 1))
        T = float(rng.uniform(0, 1))
        bank = ExpertBank.init(E, d, rng, routing_rank=r)
        for e in bank.experts:
            e.s.data = rng.standard_normal(d)
        x = rng.standard_normal(d)
        c = rng.standard_normal(d) if i % 10 else x.copy()
        if i % 97 == 0:
            x = np.zeros(d)
        _, dec = route_token(x, c, bank, RouterConfig(k=k, T=T, routing_rank=r))
        sc = np.array(dec.scores)
        sel = dec.selected
        w = np.array(dec.weights)
        elig = {e for e in range(E) if sc[e] >= T}
        expect = "none" if len(elig) >= k else ("full" if not elig else "partial")
        order = sorted(range(E), key=lambda e: (-sc[e], e))
        if not np.all((sc >= -1) & (sc <= 1)):
            problems.append((i, "score range"))
        if len(sel) != min(k, E) or len(set(sel)) != len(sel):
            problems.append((i, "selection size"))
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            problems.append((i, "weights"))
        if dec.fallback != expect:
            problems.append((i, "fallback flag"))
        # eligible experts outrank the rest, so the selection is the stable top-k
        if sel != order[:k]:
            problems.append((i, "selection order"))
        if expect == "partial" and not elig <= set(sel):
            problems.append((i, "partial keeps eligible"))
        if not np.any(x):
            if not dec.degenerate or dec.fallback != ("full" if T > 0 else "none"):
                problems.append((i, "degenerate token"))

    # full-rank degeneracy: r = d with orthonormal U gives one score for every expert
    spread = 0.0
    for _ in range(1000):
        E, d = int(rng.integers(2, 9)), int(rng.integers(2, 13))
        bank = ExpertBank.init(E, d, rng, routing_rank=d)
        x, c = rng.standard_normal(d), rng.standard_normal(d)
        _, dec = route_token(x, c, bank, RouterConfig(k=1, T=0.5, routing_rank=d))
        ref = float(np.dot(x, c) / (np.linalg.norm(x) * np.linalg.norm(c)))
        spread = max(spread, float(np.max(np.abs(np.array(dec.scores) - ref))))
    ok = not problems and spread < 1e-12
    return ok, f"{n_instances} instances, {len(problems)} violations; full-rank score spread {spread:.1e}"


def check_4_oracles():
    rng = np.random.default_rng(4)
    # factored expert vs materialized W
    e1 = 0.0
    for n_layers in (1, 2):
        for nl in ("identity", "gelu"):
            e = EigenExpert.init(6, rng, n_layers=n_layers, nonlinearity=nl)
            for layer in e.layers:
                layer.s.data = rng.standard_normal(6)
            x = rng.standard_normal(6)
            h = x
            for j, layer in enumerate(e.layers):
                h = expert_weight(e, j).data @ h
                if j < len(e.layers) - 1 or nl == "gelu":
                    h = tn.gelu(Tensor(h)).data
            e1 = max(e1, float(np.max(np.abs(expert_forward(e, x).data - h))))
    # route_token vs dense all-experts mixture restricted to the selection
    e2 = 0.0
    for _ in range(200):
        bank = ExpertBank.init(4, 8, rng, routing_rank=2)
        for e in bank.experts:
            e.s.data = rng.standard_normal(8)
        x, c = rng.standard_normal(8), rng.standard_normal(8)
        y, dec = route_token(x, c, bank, RouterConfig(k=2, T=0.3, routing_rank=2))
        dense = np.stack([expert_forward(e, x).data for e in bank.experts])
        full_w = np.zeros(4)
        full_w[dec.selected] = dec.weights
        e2 = max(e2, float(np.max(np.abs(y.data - full_w @ dense))))
        # batched path agrees with the single-token path
        yb, _ = route_batch(Tensor(x[None]), Tensor(c[None]), bank,
                                RouterConfig(k=2, T=0.3, routing_rank=2))
        e2 = max(e2, float(np.max(np.abs(yb.data[0] - y.data))))
    # tail mass vs brute-force enumeration
    tm_bad = 0
    for _ in range(2000):
        E = int(rng.integers(1, 9))
        s = np.round(rng.uniform(-1, 1, E), 2)
        T, k = float(rng.choice([0.0, 0.2, 0.5])), int(rng.integers(1, 9))
        A = [e for e in range(E) if s[e] > T]
        if len(A) <= k:
            expect = 0.0
        else:
            wts = {e: max(s[e], 0.0) for e in A}
            total = math.fsum(wts.values())
            top = sorted(A, key=lambda e: (-s[e], e))[:k]
            expect = 0.0 if total == 0 else math.fsum(wts[e] for e in A if e not in top) / total
        tm_bad += tail_mass(s, T, k) != expect
    # usage curve vs counting
    us_bad = 0
    for _ in range(300):
        E, n = int(rng.integers(1, 9)), int(rng.integers(1, 60))
        k = int(rng.integers(1, E + 1))
        sel = np.stack([rng.permutation(E)[:k] for _ in range(n)])
        b = RoutingBatch(np.zeros((n, E)), sel, np.full((n, k), 1.0 / k), np.zeros(n, int),
                         np.zeros(n, bool))
        counts = [sum(int(e in row) for row in sel.tolist()) for e in range(E)]
        expect = sorted((100.0 * c / n for c in counts), reverse=True)
        us_bad += not np.array_equal(usage_curve(b), np.array(expect))
    ok = e1 < 1e-12 and e2 < 1e-12 and tm_bad == 0 and us_bad == 0
    return ok, (f"expert {e1:.1e}; route/dense {e2:.1e}; tail-mass mismatches {tm_bad}; "
                f"usage mismatches {us_bad}")


def check_5_fallback_sweep(tmp: Path):
    t0 = time.perf_counter()
    cfg = _write_config(tmp / "desk.json", DESK_MODEL, DESK_SYNTH, DESK_TRAIN, seed=0, out=tmp / "run5")
    values = ",".join(f"{0.1 * i:.1f}" for i in range(10))
    rc = cli_main(["sweep", "--config", str(cfg), "--param", "threshold", "--values", values])
    dt = time.perf_counter() - t0
    rows = read_csv(next((tmp / "run5").glob("sweep_threshold_*.csv")))
    rates = [float(r["fallback_rate"]) for r in rows]
    mono = all(b >= a for a, b in zip(rates, rates[1:]))
    ok = rc == 0 and len(rows) == 10 and rates[0] == 0.0 and mono and dt < 300
    return ok, (f"rate@T=0 {rates[0]:.4f}; non-decreasing {mono}; rate@T=0.9 {rates[-1]:.3f}; "
                f"{len(rows)} rows; {dt:.0f}s")


def check_6_tail_mass():
    rng = np.random.default_rng(6)
    bad_mono = bad_zero = 0
    for _ in range(500):
        scores = rng.uniform(-1, 1, (32, 8))
        T = float(rng.uniform(0, 0.9))
        for row in scores:
            tms = [tail_mass(row, T, k) for k in range(1, 9)]
            bad_mono += any(b > a for a, b in zip(tms, tms[1:]))
            n_a = int(np.sum(row > T))
            bad_zero += any(tms[k - 1] != 0.0 for k in range(max(n_a, 1), 9))
    ok = bad_mono == 0 and bad_zero == 0
    return ok, f"16000 score vectors x k=1..8: {bad_mono} monotonicity, {bad_zero} k>=|A| violations"


def _arm_stats(router: str, seed: int):
    spec = SyntheticSpec(**DESK_SYNTH, seed=seed)
    tr, va = synthesize(spec).split(0.2, seed)
    model = Model(ModelConfig(**DESK_MODEL, router=router, lbl_coef=0.0), seed)
    train(model, tr, TrainConfig(**DESK_TRAIN, seed=seed), eval_every_epoch=False)
    stats = [usage_stats(usage_curve(b)) for b in _val_routing(model, va.x)]
    return np.mean([s["max_share"] for s in stats]), np.mean([s["cv"] for s in stats])


def check_7_load_balance():
    t0 = time.perf_counter()
    eig = np.array([_arm_stats("eigen", s) for s in range(3)])
    logit = np.array([_arm_stats("logit", s) for s in range(3)])
    dt = time.perf_counter() - t0
    (em, ec), (lm, lc) = eig.mean(0), logit.mean(0)
    ok = em < lm and ec < lc and dt < 900
    return ok, (f"max share ERMoE {em:.3f} vs logit {lm:.3f}; CV ERMoE {ec:.3f} vs logit {lc:.3f}; "
                f"3 seeds, {dt:.0f}s")


def check_8_specialization():
    tags = ("a", "b", "c")
    matched = {t: i for i, t in enumerate(tags)}
    lines, ok = [], True
    for seed in range(3):
        spec = SyntheticSpec(num_classes=3, tokens_per_sample=8, d=16, subspace_rank=2, samples=600, seed=seed)
        data = synthesize(spec)
        tagged = {t: synthesize(spec, only_class=i, samples=100, seed_offset=99).x for i, t in enumerate(tags)}
        cfg = ModelConfig(depth=2, heads=2, d=16, E=8, k=2, n_patches=8, patch_dim=16, num_classes=3,
                          regions=tags)
        untrained = matched_dominance(specialization_probe(Model(cfg, seed), tagged), matched)
        model = Model(cfg, seed)
        warm_start_regions(model, tagged)
        train(model, data, TrainConfig(epochs=15, batch_size=64, seed=seed, base_lr=1e-3), eval_every_epoch=False)
        rows = specialization_probe(model, tagged)
        trained = matched_dominance(rows, matched)
        ok &= all(trained.values()) and not all(untrained.values())
        margin = min(r["mean_scores"][matched[r["tag"]]] - max(np.delete(r["mean_scores"], matched[r["tag"]]))
                     for r in rows)
        lines.append(f"seed {seed}: trained {sum(trained.values())}/3, untrained {sum(untrained.values())}/3, "
                     f"min margin {margin:+.3f}")
    return ok, "; ".join(lines)


def check_9_age_and_calibration():
    bins = [10.0, 20.0, 30.0]
    h = np.array([1.0])
    W0, b0 = np.zeros((1, 3)), np.zeros(3)
    _, uniform = age_expectation_head(h, W0, b0, bins, 1.0)
    _, sat = age_expectation_head(h, W0, np.array([20.0, 0.0, 0.0]), bins, 1.0)
    _, cold = age_expectation_head(h, W0, np.array([0.3, 0.5, 0.6]), bins, 1e-3)
    y = np.linspace(40, 90, 50)
    res = posthoc_calibrate(y, 2 * y + 3, 2 * y + 3, y)
    cal = res["calibrated"]
    ok = (uniform.item() == 20.0 and abs(sat.item() - 10.0) < 1e-6 and abs(cold.item() - 30.0) < 1e-4
          and abs(res["a"] - 3) < 1e-9 and abs(res["b"] - 2) < 1e-9
          and abs(cal["slope"] - 1) < 1e-9 and abs(cal["intercept"]) < 1e-9)
    return ok, (f"uniform {uniform.item():.6f}; saturated {sat.item():.8f}; tau=1e-3 {cold.item():.6f}; "
                f"(a,b)=({res['a']:.12f},{res['b']:.12f}); slope {cal['slope']:.12f}, "
                f"intercept {cal['intercept']:.1e}")


def check_10_lambda_sweep(tmp: Path):
    losses = {}
    for seed in range(3):
        out = tmp / f"run10_{seed}"
        cfg = _write_config(tmp / f"toy10_{seed}.json", TOY_MODEL, TOY_SYNTH, TOY_TRAIN, seed=seed, out=out)
        rc = cli_main(["sweep", "--config", str(cfg), "--param", "lambda", "--values", "0,1e-6,5e-5,1e-3,1e-1"])
        assert rc == 0
        rows = read_csv(next(out.glob("sweep_lambda_*.csv")))
        for r in rows:
            losses.setdefault(float(r["lambda"]), []).append(float(r["val_loss"]))
    mean = {lam: float(np.mean(v)) for lam, v in losses.items()}
    ok = len(mean) == 5 and mean[1e-1] > mean[5e-5]
    per_seed = ", ".join(f"{a - b:+.4f}" for a, b in zip(losses[1e-1], losses[5e-5]))
    curve = " ".join(f"{lam:g}:{v:.4f}" for lam, v in sorted(mean.items()))
    return ok, f"mean val loss {curve}; (1e-1 minus 5e-5) per seed {per_seed}"


def check_11_determinism(tmp: Path):
    toy = {**TOY_TRAIN, "epochs": 3}
    outs = []
    for run in ("a", "b"):
        cfg = _write_config(tmp / f"det_{run}.json", TOY_MODEL, TOY_SYNTH, toy, seed=7, out=tmp / "det")
        # same config text, so both runs target the same hashed names; move the first aside
        assert cli_main(["train", "--config", str(cfg)]) == 0
        files = sorted((tmp / "det").iterdir())
        outs.append({f.name: f.read_bytes() for f in files})
        for f in files:
            f.unlink()
    same = outs[0].keys() == outs[1].keys() and all(outs[0][k] == outs[1][k] for k in outs[0])
    kinds = sorted(name.split("_")[0] for name in outs[0])
    return same, f"files {kinds} byte-identical across two runs: {same}"


# ------------------------------------------------------------------ pytest


def _report(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def test_criterion_01_gradients():
    _report(1, *check_1_gradients())


def test_criterion_02_orthogonality():
    _report(2, *check_2_orthogonality())


def test_criterion_03_routing_invariants():
    _report(3, *check_3_routing_invariants())


def test_criterion_04_oracles():
    _report(4, *check_4_oracles())


def test_criterion_05_fallback_sweep(tmp_path):
    _report(5, *check_5_fallback_sweep(tmp_path))


def test_criterion_06_tail_mass():
    _report(6, *check_6_tail_mass())


def test_criterion_07_load_balance():
    _report(7, *check_7_load_balance())


def test_criterion_08_specialization():
    _report(8, *check_8_specialization())


def test_criterion_09_age_and_calibration():
    _report(9, *check_9_age_and_calibration())


def test_criterion_10_lambda_sweep(tmp_path):
    _report(10, *check_10_lambda_sweep(tmp_path))


def test_criterion_11_determinism(tmp_path):
    _report(11, *check_11_determinism(tmp_path))


if __name__ == "__main__":
    import tempfile

    failed = 0
    with tempfile.TemporaryDirectory() as d:
        tmp = Path(d)
        checks = [check_1_gradients, check_2_orthogonality, check_3_routing_invariants, check_4_oracles,
                  lambda: check_5_fallback_sweep(tmp), check_6_tail_mass, check_7_load_balance,
                  check_8_specialization, check_9_age_and_calibration, lambda: check_10_lambda_sweep(tmp),
                  lambda: check_11_determinism(tmp)]
        for n, check in enumerate(checks, 1):
            ok, detail = check()
            failed += not ok
            print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
    sys.exit(1 if failed else 0)
