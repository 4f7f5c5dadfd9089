"""Acceptance criteria, each run at its stated tolerance.

Every test records a verdict line that conftest prints after the session, and
then asserts it. The directional criteria (4 to 8) share one cache of runs so a
configuration that appears in several criteria is trained once.
"""

import time
from functools import lru_cache

import numpy as np
import pytest

from conftest import record
from fedlex.__main__ import main
from fedlex.guidance import GuidanceMatrix, aggregate_global, modulate, normalize_local
from fedlex.nn import Batch, MlpModel, backward, finite_diff_grad, forward_loss
from fedlex.orchestrator import build_federation, metrics_csv, run_experiment
from fedlex.config import RoundConfig

SEEDS = range(5)

# synthetic 10-class data, two classes per client, protocol at its published values
DIRECTIONAL = RoundConfig(
    dataset="synthetic", classes=10, dim=32, per_class=200, separation=3.0,
    partition="pathological", classes_per_client=2,
    C=20, K=5, B=50, E=1, eta=0.0003, R=100, C_exp=20, E_exp=150,
)


@lru_cache(maxsize=None)
def history(cfg: RoundConfig):
    return tuple(run_experiment(cfg))


def final_acc(cfg: RoundConfig) -> float:
    return history(cfg)[-1].mean_acc


def variant(cfg: RoundConfig, name: str, **changes) -> RoundConfig:
    agg = {"Prox": "prox", "AvgM": "avgm"}[name.removeprefix("FedLEx").removeprefix("Fed")]
    return cfg.replace(aggregator=agg, fedlex=name.startswith("FedLEx"), **changes)


def seed_accs(name: str, **changes) -> np.ndarray:
    return np.array([final_acc(variant(DIRECTIONAL, name, seed=s, **changes)) for s in SEEDS])


def fmt(values) -> str:
    return "[" + ", ".join(f"{v:.2f}" for v in values) + "]"


def verdict(number: int, passed: bool, detail: str) -> None:
    record(number, bool(passed), detail)
    assert passed, detail


# --- exact criteria ---------------------------------------------------------


def test_criterion_01_gradient_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(20):
        model = MlpModel.create((2, 4, 3), seed=[2024, k])
        batch = Batch(rng.standard_normal((6, 2)), rng.integers(0, 3, size=6))
        g = backward(model, forward_loss(model, batch)[1]).values
        fd = finite_diff_grad(model, batch, 1e-5).values
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(1e-8, np.abs(g) + np.abs(fd)))))
    elapsed = time.perf_counter() - start
    verdict(1, worst < 1e-4 and elapsed < 5, f"max rel err {worst:.2e} (< 1e-4), {elapsed:.2f}s (< 5s)")


def test_criterion_02_guidance_math():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    layout = (("b0", 0, (12,)),)
    worst = {"normalize": 0.0, "aggregate": 0.0, "modulate": 0.0}
    in_range = True
    for _ in range(100):
        k = int(rng.integers(1, 6))
        raws = [rng.exponential(size=12) * rng.uniform(1e-6, 1e3) for _ in range(k)]
        locals_ = [normalize_local(GuidanceMatrix(r, layout)) for r in raws]
        scaled = []
        for r in raws:
            lo, hi = min(r), max(r)
            scaled.append([(x - lo) / (hi - lo) for x in r])
        for got, want in zip(locals_, scaled):
            worst["normalize"] = max(worst["normalize"], float(np.max(np.abs(got.values - want))))
        g = aggregate_global(locals_)
        mean = [sum(col) / k for col in zip(*scaled)]
        worst["aggregate"] = max(worst["aggregate"], float(np.max(np.abs(g.values - mean))))
        in_range &= bool(np.all((g.values >= 0) & (g.values <= 1)))
        grad = rng.standard_normal(12) * 10
        out = modulate(GuidanceMatrix(grad, layout), g)
        product = [a * b for a, b in zip(grad.tolist(), g.values.tolist())]
        worst["modulate"] = max(worst["modulate"], float(np.max(np.abs(out.values - product))))
    elapsed = time.perf_counter() - start
    ok = all(v <= 1e-12 for v in worst.values()) and in_range and elapsed < 5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, ok, f"max abs err {detail} (<= 1e-12), G in [0,1]: {in_range}, {elapsed:.2f}s (< 5s)")


def test_criterion_03_reduction_identity():
    start = time.perf_counter()
    desk = RoundConfig(C=10, K=5, R=20, C_exp=10, dataset="synthetic")
    mismatched = []
    for agg in ("avgm", "sgd", "opt", "prox"):
        base = metrics_csv(run_experiment(desk.replace(aggregator=agg, fedlex=False)))
        ones = metrics_csv(run_experiment(desk.replace(aggregator=agg, fedlex=True, force_ones_guidance=True)))
        if base != ones:
            mismatched.append(agg)
    elapsed = time.perf_counter() - start
    verdict(3, not mismatched and elapsed < 120,
            f"CSV mismatches: {mismatched or 'none'} over avgm/sgd/opt/prox, {elapsed:.1f}s (< 120s)")


# --- directional criteria ---------------------------------------------------


@pytest.mark.slow
def test_criterion_04_non_iid_gain():
    start = time.perf_counter()
    gains = {}
    for lex, base in (("FedLExProx", "FedProx"), ("FedLExAvgM", "FedAvgM")):
        a, b = seed_accs(lex), seed_accs(base)
        gains[lex] = (a.mean(), b.mean(), a.mean() - b.mean())
    elapsed = time.perf_counter() - start
    ok = all(g >= 3.0 for _, _, g in gains.values()) and elapsed < 900
    detail = "; ".join(f"{k} {a:.2f} vs {b:.2f} (gain {g:+.2f})" for k, (a, b, g) in gains.items())
    verdict(4, ok, f"{detail}; need gain >= 3 each, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_05_client_count_resilience():
    # every client explores at each scale, as in criterion 4
    drops = {}
    for name in ("FedLExProx", "FedProx"):
        drops[name] = seed_accs(name, C=10, C_exp=1.0) - seed_accs(name, C=40, C_exp=1.0)
    wins = int(np.sum(drops["FedLExProx"] < drops["FedProx"]))
    verdict(5, wins >= 4, f"C=10 to C=40 drop, FedLExProx {fmt(drops['FedLExProx'])} vs FedProx "
                          f"{fmt(drops['FedProx'])}; smaller in {wins}/5 seeds (need >= 4)")


@pytest.mark.slow
def test_criterion_06_variance_reduction():
    fractions = []
    for s in SEEDS:
        lex = {m.round: m.sigma2_dw for m in history(variant(DIRECTIONAL, "FedLExAvgM", seed=s))}
        base = {m.round: m.sigma2_dw for m in history(variant(DIRECTIONAL, "FedAvgM", seed=s))}
        rounds = [r for r in base if r > 10]
        fractions.append(np.mean([lex[r] < base[r] for r in rounds]))
    verdict(6, min(fractions) >= 0.8,
            f"fraction of rounds 11..100 with lower variance per seed {fmt(fractions)} (need >= 0.80 each)")


@pytest.mark.slow
def test_criterion_07_dirichlet_monotonicity():
    alphas = (0.05, 0.3, 0.6)
    lex = {a: seed_accs("FedLExProx", partition="dirichlet", alpha=a) for a in alphas}
    base = {a: seed_accs("FedProx", partition="dirichlet", alpha=a) for a in alphas}
    means = [lex[a].mean() for a in alphas]
    monotone = all(x <= y for x, y in zip(means, means[1:]))
    wins = {a: int(np.sum(lex[a] > base[a])) for a in alphas}
    ok = monotone and all(w >= 4 for w in wins.values())
    verdict(7, ok, f"FedLExProx seed means {fmt(means)} non-decreasing: {monotone}; "
                   f"seeds beating FedProx {wins} (need >= 4 at every alpha)")


@pytest.mark.slow
def test_criterion_08_ablation_shape():
    fractions = {f: seed_accs("FedLExProx", C_exp=f).mean() for f in (0.25, 0.5, 0.75, 1.0)}
    close = abs(fractions[0.25] - fractions[1.0]) <= 5.0
    epochs = {e: seed_accs("FedLExProx", E_exp=e).mean() for e in (50, 150, 300)}
    m50, m150, m300 = epochs[50], epochs[150], epochs[300]
    saturating = m50 <= m150 <= m300 and (m300 - m150) < (m150 - m50)
    verdict(8, close and saturating,
            f"C_exp sweep {fmt(fractions.values())} (0.25 vs 1.0 within 5: {close}); "
            f"E_exp 50/150/300 {fmt(epochs.values())} (non-decreasing, shrinking step: {saturating})")


# --- accounting and reproducibility ------------------------------------------


ACCOUNTING = [
    RoundConfig(C=10, K=5, R=6, C_exp=10, E_exp=5, aggregator="avg", fedlex=True),
    RoundConfig(C=20, K=3, R=4, C_exp=0.25, E_exp=3, aggregator="prox", fedlex=True, hidden=(32,)),
    RoundConfig(C=8, K=8, R=5, aggregator="avgm", fedlex=False, classes=5, dim=16, per_class=80),
]


def test_criterion_09_payload_accounting():
    problems = []
    for cfg in ACCOUNTING:
        rows = run_experiment(cfg)
        w = build_federation(cfg).model.params.nbytes
        g = w if cfg.fedlex else 0
        if cfg.fedlex:
            explore, rows = rows[0], rows[1:]
            if (explore.bytes_up, explore.bytes_down) != (cfg.explorers * g, 0):
                problems.append(f"{cfg.variant} exploration {explore.bytes_up}")
        up = sum(m.bytes_up for m in rows)
        down = sum(m.bytes_down for m in rows)
        if up != cfg.K * w * cfg.R or down != cfg.K * w * cfg.R + cfg.K * g * cfg.R or len(rows) != cfg.R:
            problems.append(f"{cfg.variant} up {up} down {down}")
    verdict(9, not problems, f"closed forms hold for {len(ACCOUNTING)} configs; mismatches: {problems or 'none'}")


def test_criterion_10_manifest_rerun(tmp_path):
    differing = []
    for i, cfg in enumerate(ACCOUNTING):
        first = tmp_path / f"first-{i}"
        run_experiment(cfg, first)
        assert main(["run", str(first / "manifest.json"), "--out", str(tmp_path / f"again-{i}")]) == 0
        for name in ("metrics.csv", "manifest.json"):
            if (first / name).read_bytes() != (tmp_path / f"again-{i}" / name).read_bytes():
                differing.append(f"{cfg.variant}/{name}")
    verdict(10, not differing, f"{len(ACCOUNTING)} manifests re-run; differing files: {differing or 'none'}")
