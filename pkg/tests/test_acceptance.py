"""Acceptance gate.  Each test is one criterion and prints one PASS/FAIL line in the summary.

The benchmark for criteria 5-8 is the default configuration of ``graphmia.cli``
(synthetic citation graph, spurious-feature shift with different seeds for the
shadow and target halves), fixed before any results were looked at.
"""
import time

import numpy as np
import pytest

from graphmia.augment import AugmentConfig, augment_once, build_environments
from graphmia.backbones import BackboneConfig, init_params
from graphmia.cli import build_bundle, parse_config, run_experiment
from graphmia.data import synthetic_citation_graph
from graphmia.diffcore import Tape
from graphmia.graph import Graph, split_disjoint
from graphmia.metrics import auc
from graphmia.objectives import ShadowLossConfig, irm_gradient, mm_rex, v_rex
from graphmia.pipeline import (VARIANTS, AttackModel, TargetModel, TrainedModel, infer_membership,
                               query_set, run_pipeline, shadow_objective, _seed)

from _oracles import central_diff, make_graph, max_rel_err, pair_auc, population_variance

SEEDS = range(5)


@pytest.fixture
def criterion(record_property):
    def record(number, title, detail):
        record_property("criterion", number)
        record_property("title", title)
        record_property("detail", detail)
    return record


@pytest.fixture(scope="module")
def benchmark():
    cfg = parse_config("")
    bundle = build_bundle(cfg)
    results = {v: [run_pipeline(bundle, cfg.pipeline_config(v), seed=s) for s in SEEDS] for v in VARIANTS}
    return bundle, results


def mean_acc(results, variant):
    return float(np.mean([r.report.accuracy for r in results[variant]]))


# ---------------------------------------------------------------------- 1

def test_c1_gradients_match_finite_differences(criterion):
    worst, cases = 0.0, 0
    loss = ShadowLossConfig(alpha=0.5, beta1=1.0, xi=0.01)
    for kind in ("GCN", "SGC", "GAT"):
        cfg = BackboneConfig(kind, layers=2, hidden=3, heads=2 if kind == "GAT" else 1, K=2)
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            n = int(rng.integers(5, 21))
            g = make_graph(seed, n=n, f=3, C=3, p=0.3)
            train = np.sort(rng.choice(n, max(2, n // 2), replace=False))
            envs = build_environments(g, 2, AugmentConfig(0.2, 0.2, seed=seed))
            params = init_params(cfg, g.f, g.C, seed)

            def total(tapes):
                objs = []
                for e, env in enumerate(envs):
                    obj, leaves = shadow_objective(params, cfg, env, g.y, train, loss, tapes[e],
                                                   stochastic=True, rng=np.random.default_rng(seed))
                    objs.append((obj, leaves))
                return objs

            tapes = [Tape(), Tape()]
            analytic = {k: np.zeros_like(v) for k, v in params.items()}
            for tape, (obj, leaves) in zip(tapes, total(tapes)):
                grads = tape.backward(obj)
                for k, leaf in leaves.items():
                    analytic[k] += grads[leaf]
            names = list(params)
            numeric = central_diff(lambda: sum(o.value[0, 0] for o, _ in total([Tape(), Tape()])),
                                   [params[k] for k in names])
            for k, num in zip(names, numeric):
                worst = max(worst, max_rel_err(analytic[k], num))
            cases += 1
    criterion(1, "gradient correctness", f"max relative error {worst:.2e} over {cases} backbone/seed cases "
              f"(tolerance 1e-4)")
    assert worst < 1e-4


# ---------------------------------------------------------------------- 2

def _mm_rex_oracle(risks, lam):
    # maximum of the affine objective over the vertices of the constrained simplex
    M = len(risks)
    return max((1 - (M - 1) * lam) * r + lam * (sum(risks) - r) for r in risks)


def _ce_at_scale(w, Z, y):
    s = w * Z
    s = s - s.max(axis=1, keepdims=True)
    return float(np.mean(np.log(np.exp(s).sum(axis=1)) - s[np.arange(len(y)), y]))


def test_c2_objective_oracles(criterion):
    rng = np.random.default_rng(0)
    rex_err = 0.0
    for _ in range(1000):
        M = int(rng.integers(2, 11))
        risks = list(rng.random(M) * 3)
        beta2 = float(rng.random() * 10)
        lam = float(rng.random() / M)
        oracle_v = beta2 * population_variance(risks) + sum(risks)
        tape = Tape()
        tape_v = v_rex([tape.const(r) for r in risks], beta2).value[0, 0]
        tape_m = mm_rex([tape.const(r) for r in risks], lam).value[0, 0]
        oracle_m = _mm_rex_oracle(risks, lam)
        rex_err = max(rex_err, abs(v_rex(risks, beta2) - oracle_v), abs(tape_v - oracle_v),
                      abs(mm_rex(risks, lam) - oracle_m), abs(tape_m - oracle_m))
    irm_err = 0.0
    for _ in range(100):
        n, C = (int(x) for x in rng.integers(2, 30, size=2))
        Z = rng.standard_normal((n, C)) * 2
        y = rng.integers(0, C, n)
        rows = np.sort(rng.choice(n, int(rng.integers(1, n + 1)), replace=False))
        g = irm_gradient(Tape().leaf(Z), y, rows).value[0, 0]
        w = np.array([[1.0]])
        (fd,) = central_diff(lambda: _ce_at_scale(w[0, 0], Z[rows], y[rows]), [w])
        irm_err = max(irm_err, abs(g - fd[0, 0]))
    criterion(2, "objective oracles", f"risk-extrapolation max abs error {rex_err:.1e} (tol 1e-12); "
              f"IRM gradient vs finite difference {irm_err:.1e} (tol 1e-6)")
    assert rex_err <= 1e-12 and irm_err <= 1e-6


# ---------------------------------------------------------------------- 3

def test_c3_auc_matches_pair_counting(criterion):
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        truth = rng.integers(0, 2, n)
        truth[rng.choice(n, 2, replace=False)] = [0, 1]
        scores = rng.integers(0, int(rng.integers(2, 50)), n) / 7.0
        mismatches += auc(scores, truth) != pair_auc(scores.tolist(), truth.tolist())
    criterion(3, "AUC oracle", f"{mismatches} of 100 score sets differ from pair counting")
    assert mismatches == 0


# ---------------------------------------------------------------------- 4

def test_c4_augmentation_statistics(criterion):
    rng = np.random.default_rng(0)
    base = synthetic_citation_graph(n=2708, C=7, f=1433, avg_degree=3.9, seed=0)
    # strictly non-zero features, so every zero after masking is a masked entry
    g = Graph(base.n, base.edges, 1.0 + rng.random((base.n, base.f)), base.y, base.C)
    worst = 0.0
    for p in (0.1, 0.3):
        cfg = AugmentConfig(mask_rate=p, drop_rate=p, seed=1)
        for t in range(100):
            env = augment_once(g, cfg, t)
            kept = len(env.edges) / g.num_edges
            masked = float(np.mean(env.X == 0))
            worst = max(worst, abs(kept - (1 - p)), abs(masked - p))
    criterion(4, "augmentation statistics", f"worst deviation {worst:.4f} over 200 trials on a "
              f"{g.n}-node, {g.num_edges}-edge, {g.f}-feature graph (tol 0.02)")
    assert worst <= 0.02


# ---------------------------------------------------------------------- 5

def test_c5_null_attacks(criterion, benchmark):
    bundle, results = benchmark
    tg = bundle.target
    cfg = parse_config("").pipeline_config("full")
    random_aucs, constant_aucs = [], []
    for seed, res in zip(SEEDS, results["full"]):
        t_split = split_disjoint(tg, cfg.target_train_fraction, _seed(seed, 12).generate_state(1)[0])
        nodes, truth = query_set(t_split, _seed(seed, 13))
        backbone = res.target.config
        untrained = TargetModel(TrainedModel(init_params(backbone, tg.f, tg.C, _seed(seed, 99)), backbone))
        scores, _ = infer_membership(res.attack, untrained, tg, nodes)
        random_aucs.append(auc(scores, truth))
        scores, _ = infer_membership(AttackModel.zeros(res.attack.k, 8), res.target, tg, nodes)
        constant_aucs.append(auc(scores, truth))
    r, c = float(np.mean(random_aucs)), float(np.mean(constant_aucs))
    criterion(5, "null attacks", f"untrained target mean AUC {r:.4f} "
              f"(per seed {', '.join(f'{a:.3f}' for a in random_aucs)}); constant attack mean AUC {c:.4f}")
    assert abs(r - 0.5) <= 0.05 and abs(c - 0.5) <= 0.05


# ---------------------------------------------------------------------- 6

def test_c6_full_attack_beats_baseline(criterion, benchmark):
    _, results = benchmark
    full, base = mean_acc(results, "full"), mean_acc(results, "baseline")
    gap = float(np.mean([r.target_train_acc - r.target_test_acc for r in results["full"]]))
    criterion(6, "full attack vs baseline", f"attack accuracy {full:.4f} vs {base:.4f} "
              f"(margin {100 * (full - base):+.2f} points, need >= +2); target train-test gap {gap:.4f} "
              f"(need >= 0.15); AUC {np.mean([r.report.auc for r in results['full']]):.4f} vs "
              f"{np.mean([r.report.auc for r in results['baseline']]):.4f}")
    assert gap >= 0.15
    assert full - base >= 0.02


# ---------------------------------------------------------------------- 7

def test_c7_ablation_ordering(criterion, benchmark):
    _, results = benchmark
    full = mean_acc(results, "full")
    ablations = {v: mean_acc(results, v) for v in ("no-irm", "no-gib", "no-rex")}
    inversions = [v for v, acc in ablations.items() if acc > full]
    criterion(7, "ablation ordering", f"full {full:.4f}; " +
              ", ".join(f"{v} {a:.4f}" for v, a in ablations.items()) +
              f"; {len(inversions)} inversion(s) (fails at 2)")
    assert len(inversions) < 2


# ---------------------------------------------------------------------- 8

def test_c8_deterministic_csv(criterion, tmp_path):
    cfg = parse_config("[experiment]\nseeds = 0\nvariants = full\n")
    for name in ("a", "b"):
        run_experiment(cfg, tmp_path / name)
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    criterion(8, "determinism", f"metrics.csv byte-identical across two runs: {a == b} ({len(a)} bytes)")
    assert a == b


# ---------------------------------------------------------------------- 9

def _step_time(n, layers, kind="GCN", reps=5):
    g = synthetic_citation_graph(n=n, C=5, f=256, avg_degree=4.0, seed=0)
    cfg = BackboneConfig(kind, layers=layers, hidden=64)
    envs = build_environments(g, 2, AugmentConfig(seed=0))
    params = init_params(cfg, g.f, g.C, 0)
    train = np.arange(0, n, 2)
    best = np.inf
    for _ in range(reps):
        start = time.perf_counter()
        tape = Tape()
        obj, _ = shadow_objective(params, cfg, envs[0], g.y, train, ShadowLossConfig(), tape,
                                  stochastic=True, rng=np.random.default_rng(0))
        tape.backward(obj)
        best = min(best, time.perf_counter() - start)
    return best


def test_c9_linear_time_scaling(criterion):
    ratios = {
        "GCN n 2000->4000": _step_time(4000, 2) / _step_time(2000, 2),
        "SGC n 2000->4000": _step_time(4000, 2, "SGC") / _step_time(2000, 2, "SGC"),
        "GCN L 2->4": _step_time(3000, 4) / _step_time(3000, 2),
    }
    criterion(9, "complexity", ", ".join(f"{k}: x{v:.2f}" for k, v in ratios.items()) + " (limit x2.5)")
    assert all(r < 2.5 for r in ratios.values())
