import numpy as np
import pytest

from graphmia.augment import AugmentConfig, build_environments, original_environment
from graphmia.backbones import BackboneConfig
from graphmia.data import synthetic_citation_graph
from graphmia.diffcore import ContractError, Tape
from graphmia.graph import Graph, SplitGraph, split_disjoint
from graphmia.objectives import RExConfig, ShadowLossConfig
from graphmia.pipeline import (AttackDataset, AttackModel, OptimConfig, PipelineConfig, TrainingError,
                               attack_loss, build_attack_dataset, evaluate_attack, infer_membership,
                               posterior_features, query_set, run_pipeline, train_attack, train_shadow,
                               train_target)

SMALL = BackboneConfig(hidden=8)


def separable_graph(seed=0, n=20):
    """Two classes, class-indicative features with noise, mostly intra-class edges."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = np.eye(2)[y] + 0.3 * rng.standard_normal((n, 2))
    same = [(u, v) for u in range(n) for v in range(u + 1, n) if y[u] == y[v] and rng.random() < 0.3]
    return Graph(n, same + [(0, 1)], X, y, 2, "sep")


def test_identical_environments_have_identical_losses():
    g = separable_graph()
    split = split_disjoint(g, 0.5, 0)
    envs = build_environments(g, 2, AugmentConfig(mask_rate=0.0, drop_rate=0.0, seed=3))
    model = train_shadow(g, split, envs, SMALL, ShadowLossConfig(), OptimConfig(), 5, seed=1)
    for a, b in model.env_history:
        assert a == b


def test_shadow_fits_separable_graph():
    g = separable_graph()
    split = split_disjoint(g, 0.5, 0)
    envs = build_environments(g, 2, AugmentConfig(seed=1))
    model = train_shadow(g, split, envs, SMALL, ShadowLossConfig(), OptimConfig(), 200, seed=0)
    assert model.history[-1] < model.history[0]
    env = original_environment(g)
    assert model.accuracy(g, split.train) >= 0.9
    assert model.posteriors(env.X, env.adj).shape == (20, 2)


def test_shadow_is_deterministic():
    g = separable_graph()
    split = split_disjoint(g, 0.5, 0)
    envs = build_environments(g, 2, AugmentConfig(seed=1))
    a, b = (train_shadow(g, split, envs, SMALL, ShadowLossConfig(), OptimConfig(), 20, seed=4)
            for _ in range(2))
    assert a.params.equals(b.params)


def test_divergence_reports_epoch():
    g = separable_graph()
    split = split_disjoint(g, 0.5, 0)
    # one Adam step of size 1e300 makes the second layer overflow
    with pytest.raises(TrainingError, match="epoch 1") as exc:
        train_target(g, split, SMALL, OptimConfig(lr=1e300), 5)
    assert exc.value.epoch == 1


class FixedShadow:
    """Stand-in whose posteriors are fixed rows, independent of inputs."""

    def __init__(self, post):
        self.post = np.asarray(post, dtype=float)

    def posteriors(self, X, adj):
        return self.post


def test_attack_dataset_counting():
    g = separable_graph()
    split = SplitGraph(np.arange(5), np.arange(5, 10))
    envs = [original_environment(g)] * 2
    ds = build_attack_dataset(FixedShadow(np.full((20, 2), 0.5)), envs, split)
    assert len(ds) == 20 and ds.membership.sum() == 10
    assert sorted(set(ds.env.tolist())) == [0, 1]


def test_attack_dataset_balances_by_downsampling():
    g = separable_graph()
    split = SplitGraph(np.arange(12), np.arange(12, 16))
    ds = build_attack_dataset(FixedShadow(np.full((20, 2), 0.5)), [original_environment(g)], split)
    assert ds.membership.sum() == 4 and len(ds) == 8


def test_attack_dataset_rejects_empty_side():
    g = separable_graph()
    with pytest.raises(ContractError):
        build_attack_dataset(FixedShadow(np.full((20, 2), 0.5)), [original_environment(g)],
                             SplitGraph(np.arange(5), np.array([], dtype=np.int64)))


def test_posterior_features_sort_truncate_pad():
    assert np.array_equal(posterior_features([[0.1, 0.7, 0.2]], 2), [[0.7, 0.2]])
    assert np.array_equal(posterior_features([[0.3, 0.7]], 3), [[0.7, 0.3, 0.0]])


def test_zero_rex_weight_is_plain_summed_ce():
    rng = np.random.default_rng(0)
    feats = rng.random((12, 2))
    ds = AttackDataset(feats, np.array([1, 0] * 6), np.repeat([0, 1, 2], 4), np.arange(12))
    model = AttackModel.init(2, 5, 7)
    loss, _, _ = attack_loss(model, ds, RExConfig(beta2=0.0), Tape())
    W1, b1, W2, b2 = (model.params.weights[k] for k in ("W1", "b1", "W2", "b2"))
    z = np.maximum(feats @ W1 + b1, 0) @ W2 + b2
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(12), ds.membership]
    expected = sum(nll[ds.env == e].mean() for e in range(3))
    assert loss.value[0, 0] == pytest.approx(expected, rel=1e-12)


def test_attack_separates_separable_records():
    rng = np.random.default_rng(1)
    m = np.array([1, 0] * 20)
    feats = np.where(m[:, None] == 1, [0.95, 0.05], [0.6, 0.4]) + 0.02 * rng.standard_normal((40, 2))
    ds = AttackDataset(feats, m, np.arange(40) % 2, np.arange(40))
    attack = train_attack(ds, RExConfig(beta2=1.0), 16, OptimConfig(), 200, seed=0)
    assert attack.history[-1] < attack.history[0]
    assert np.array_equal((attack.scores(feats) > 0.5).astype(int), m)
    again = train_attack(ds, RExConfig(beta2=1.0), 16, OptimConfig(), 200, seed=0)
    assert attack.params.equals(again.params)


def test_attack_needs_two_environments():
    ds = AttackDataset(np.zeros((4, 2)), np.array([1, 0, 1, 0]), np.zeros(4, int), np.arange(4))
    with pytest.raises(ContractError, match="M >= 2"):
        train_attack(ds, RExConfig(), 4, OptimConfig(), 1)
    train_attack(ds, RExConfig(), 4, OptimConfig(), 1, allow_single_environment=True)


def _target():
    g = separable_graph()
    split = split_disjoint(g, 0.5, 0)
    return g, split, train_target(g, split, BackboneConfig(hidden=8, bottleneck=False), OptimConfig(), 200)


def test_target_fits_and_is_deterministic():
    g, split, t = _target()
    assert t.accuracy(g, split.train) >= 0.9
    assert t.params.equals(_target()[2].params)


def test_zero_attack_scores_half_and_labels_nonmember():
    g, split, t = _target()
    scores, labels = infer_membership(AttackModel.zeros(2, 4), t, g, np.arange(20))
    assert np.all(scores == 0.5) and np.all(labels == 0)


def test_inference_scores_in_unit_interval_and_consistent():
    g, split, t = _target()
    attack = AttackModel.init(2, 8, 0)
    nodes = np.array([0, 1, 2, 0])
    scores, labels = infer_membership(attack, t, g, nodes)
    assert np.all((scores >= 0) & (scores <= 1)) and scores[0] == scores[3]
    with pytest.raises(ContractError, match="k=3"):
        infer_membership(attack, t, g, nodes, k=3)


def test_evaluate_attack_length_mismatch():
    with pytest.raises(ContractError):
        evaluate_attack([0.1, 0.9], [0, 1], [0, 1, 1])


def test_query_set_is_balanced_and_uses_split():
    split = SplitGraph(np.arange(3), np.arange(3, 10))
    nodes, truth = query_set(split, 0)
    assert truth.sum() == 3 and len(nodes) == 6
    assert set(nodes[truth == 0]) <= set(range(3, 10))


def test_overfit_target_has_generalization_gap():
    g = synthetic_citation_graph(n=600, f=200, topic_purity=0.2, homophily=0.6, seed=3)
    split = split_disjoint(g, 0.3, 0)
    t = train_target(g, split, BackboneConfig(hidden=64, bottleneck=False), OptimConfig(), 200)
    assert t.accuracy(g, split.train) - t.accuracy(g, split.test) >= 0.15


def _tiny_bundle():
    from graphmia.data import ShiftConfig, spurious_benchmark
    base = synthetic_citation_graph(n=120, f=40, seed=0)
    return spurious_benchmark(base, ShiftConfig(dims=4), shadow_seed=1, target_seed=2)


@pytest.mark.parametrize("variant", ["full", "no-irm", "no-gib", "no-rex", "baseline"])
def test_run_pipeline_variants_are_deterministic(variant):
    cfg = PipelineConfig(backbone=BackboneConfig(hidden=8), M=2, shadow_epochs=5, target_epochs=5,
                         attack_epochs=5, attack_hidden=4, variant=variant)
    a = run_pipeline(_tiny_bundle(), cfg, seed=1)
    b = run_pipeline(_tiny_bundle(), cfg, seed=1)
    assert a.report == b.report and a.variant == variant
    assert 0.0 <= a.report.auc <= 1.0


def test_baseline_variant_resolves_to_plain_training():
    cfg = PipelineConfig(variant="baseline").resolved()
    assert cfg.M == 1 and cfg.shadow_loss.alpha == 0 and cfg.shadow_loss.beta1 == 0
    assert cfg.rex.beta2 == 0 and not cfg.stochastic
