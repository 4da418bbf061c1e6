"""Shadow training, attack dataset construction, attack training and inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import metrics
from .augment import AugmentConfig, EnvironmentSet, build_environments, original_environment
from .backbones import BackboneConfig, ModelParams, forward, glorot, init_params, posteriors_for
from .data import DatasetBundle
from .diffcore import ContractError, NumericError, Tape
from .graph import Graph, SplitGraph, normalize_adjacency, split_disjoint
from .objectives import (RExConfig, ShadowLossConfig, attack_ce, erm_risk, gib_loss, irm_penalty,
                         irm_total, shadow_total, v_rex)

log = logging.getLogger(__name__)

VARIANTS = ("full", "no-irm", "no-gib", "no-rex", "baseline")


class TrainingError(RuntimeError):
    def __init__(self, what: str, epoch: int, cause: Exception):
        super().__init__(f"{what} diverged at epoch {epoch}: {cause}")
        self.epoch = epoch


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    method: str = "adam"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ContractError(f"optimizer must be 'sgd' or 'adam', got {self.method!r}")
        if self.lr <= 0:
            raise ContractError(f"learning rate must be > 0, got {self.lr}")


class Optimizer:
    """Full-batch gradient descent with momentum, or Adam."""

    def __init__(self, config: OptimConfig):
        self.config = config
        self.state: dict[str, list[np.ndarray]] = {}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        c = self.config
        self.t += 1
        for name, w in params.items():
            g = grads[name]
            if c.weight_decay:
                g = g + c.weight_decay * w
            if c.method == "sgd":
                (v,) = self.state.setdefault(name, [np.zeros_like(w)])
                v *= c.momentum
                v += g
                w -= c.lr * v
            else:
                m, s = self.state.setdefault(name, [np.zeros_like(w), np.zeros_like(w)])
                m *= 0.9
                m += 0.1 * g
                s *= 0.999
                s += 0.001 * g * g
                mhat = m / (1 - 0.9 ** self.t)
                shat = s / (1 - 0.999 ** self.t)
                w -= c.lr * mhat / (np.sqrt(shat) + 1e-8)


@dataclass(frozen=True)
class PipelineConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    M: int = 4
    shadow_loss: ShadowLossConfig = field(default_factory=ShadowLossConfig)
    rex: RExConfig = field(default_factory=RExConfig)
    shadow_optim: OptimConfig = field(default_factory=OptimConfig)
    target_optim: OptimConfig = field(default_factory=OptimConfig)
    attack_optim: OptimConfig = field(default_factory=OptimConfig)
    shadow_epochs: int = 200
    target_epochs: int = 200
    attack_epochs: int = 200
    attack_hidden: int = 64
    top_k: int = 2
    shadow_train_fraction: float = 0.5
    target_train_fraction: float = 0.5
    variant: str = "full"
    seed: int = 0

    def __post_init__(self):
        for name in ("shadow_epochs", "target_epochs", "attack_epochs"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.top_k < 1 or self.attack_hidden < 1:
            raise ContractError("top_k and attack_hidden must be >= 1")

    def resolved(self) -> "PipelineConfig":
        """Apply the variant's overrides to the loss configuration."""
        sl, rex, M = self.shadow_loss, self.rex, self.M
        if self.variant == "no-irm":
            sl = replace(sl, beta1=0.0)
        elif self.variant == "no-gib":
            sl = replace(sl, alpha=0.0)
        elif self.variant == "no-rex":
            rex = replace(rex, beta2=0.0)
        elif self.variant == "baseline":
            sl = ShadowLossConfig(alpha=0.0, beta1=0.0, xi=sl.xi)
            rex = replace(rex, beta2=0.0)
            M = 1
        return replace(self, shadow_loss=sl, rex=rex, M=M)

    @property
    def stochastic(self) -> bool:
        return self.backbone.bottleneck and self.shadow_loss.alpha > 0


def _seed(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) for p in parts])


# ------------------------------------------------------------------ models

@dataclass
class TrainedModel:
    params: ModelParams
    config: BackboneConfig
    history: list[float] = field(default_factory=list)
    env_history: list[list[float]] = field(default_factory=list)

    def posteriors(self, X: np.ndarray, adj) -> np.ndarray:
        return posteriors_for(self.params, self.config, X, adj)

    def accuracy(self, graph: Graph, nodes) -> float:
        post = self.posteriors(graph.X, normalize_adjacency(graph))
        nodes = np.asarray(nodes)
        return float(np.mean(post[nodes].argmax(axis=1) == graph.y[nodes]))


ShadowModel = TrainedModel


class TargetModel:
    """Black-box victim: only posteriors for a graph are observable."""

    def __init__(self, model: TrainedModel):
        self._model = model

    def posteriors_for(self, graph: Graph) -> np.ndarray:
        return self._model.posteriors(graph.X, normalize_adjacency(graph))

    @property
    def history(self) -> list[float]:
        return self._model.history

    def accuracy(self, graph: Graph, nodes) -> float:
        return self._model.accuracy(graph, nodes)

    @property
    def params(self) -> ModelParams:
        return self._model.params

    @property
    def config(self) -> BackboneConfig:
        return self._model.config


def _check_split(graph: Graph, split: SplitGraph) -> None:
    for side in (split.train, split.test):
        if len(side) == 0:
            raise ContractError("split has an empty side")
        if np.max(side) >= graph.n or np.min(side) < 0:
            raise ContractError("split node index out of range")
    if np.intersect1d(split.train, split.test).size:
        raise ContractError("train and test node sets overlap")


def shadow_objective(params: ModelParams, backbone: BackboneConfig, env, y, train,
                     loss: ShadowLossConfig, tape: Tape, stochastic: bool = False, rng=None):
    """One environment's ``alpha * GIB + (1 - alpha) * IRM`` on ``tape``; returns (loss, leaves)."""
    out = forward(params, backbone, env.X, env.adj, tape, stochastic=stochastic, rng=rng)
    risk = erm_risk(out.logits, y, train)
    pen = irm_penalty(out.logits, y, train) if loss.beta1 > 0 else tape.const(0.0)
    irm = irm_total([risk], [pen], loss.beta1)
    gib = gib_loss(risk, out.mu, out.logvar, loss.xi) if loss.alpha > 0 else risk
    return shadow_total(gib, irm, loss.alpha), out.leaves


def train_shadow(graph: Graph, split: SplitGraph, envs: EnvironmentSet | list,
                 backbone: BackboneConfig, loss: ShadowLossConfig, optim: OptimConfig,
                 epochs: int, seed: int = 0, stochastic: Optional[bool] = None) -> ShadowModel:
    """Minimize ``alpha * GIB + (1 - alpha) * IRM`` summed over environments.

    The objective is additive across environments, so each environment gets
    its own tape and the per-environment gradients are summed.  The
    reparameterization noise is shared across environments within an epoch.
    """
    _check_split(graph, split)
    if stochastic is None:
        stochastic = backbone.bottleneck and loss.alpha > 0
    params = init_params(backbone, graph.f, graph.C, _seed(seed, 1))
    opt = Optimizer(optim)
    model = ShadowModel(params, backbone)
    for epoch in range(epochs):
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        total, env_losses = 0.0, []
        noise_seed = _seed(seed, 2, epoch)
        try:
            for env in envs:
                tape = Tape()
                rng = np.random.default_rng(noise_seed) if stochastic else None
                obj, leaves = shadow_objective(params, backbone, env, graph.y, split.train, loss, tape,
                                               stochastic=stochastic, rng=rng)
                g = tape.backward(obj)
                for name, leaf in leaves.items():
                    grads[name] += g[leaf]
                value = float(obj.value[0, 0])
                env_losses.append(value)
                total += value
        except NumericError as exc:
            raise TrainingError("shadow training", epoch, exc) from exc
        if not np.isfinite(total):
            raise TrainingError("shadow training", epoch, NumericError("non-finite loss"))
        model.history.append(total)
        model.env_history.append(env_losses)
        opt.step(params, grads)
    log.debug("shadow loss %.4f -> %.4f", model.history[0], model.history[-1])
    return model


def train_target(graph: Graph, split: SplitGraph, backbone: BackboneConfig, optim: OptimConfig,
                 epochs: int, seed: int = 0) -> TargetModel:
    """Plain cross-entropy training on the unaugmented target graph."""
    _check_split(graph, split)
    params = init_params(backbone, graph.f, graph.C, _seed(seed, 3))
    adj = normalize_adjacency(graph)
    opt = Optimizer(optim)
    model = TrainedModel(params, backbone)
    for epoch in range(epochs):
        tape = Tape()
        try:
            out = forward(params, backbone, graph.X, adj, tape)
            risk = erm_risk(out.logits, graph.y, split.train)
            g = tape.backward(risk)
        except NumericError as exc:
            raise TrainingError("target training", epoch, exc) from exc
        model.history.append(float(risk.value[0, 0]))
        opt.step(params, {k: g[v] for k, v in out.leaves.items()})
    return TargetModel(model)


# ----------------------------------------------------------------- attack

def posterior_features(post: np.ndarray, k: int) -> np.ndarray:
    """Descending-sorted posterior rows, truncated or zero-padded to width ``k``."""
    post = np.asarray(post, dtype=np.float64)
    ranked = -np.sort(-post, axis=1)
    if ranked.shape[1] >= k:
        return np.ascontiguousarray(ranked[:, :k])
    return np.hstack([ranked, np.zeros((ranked.shape[0], k - ranked.shape[1]))])


@dataclass
class AttackDataset:
    features: np.ndarray
    membership: np.ndarray
    env: np.ndarray
    node: np.ndarray

    def __len__(self) -> int:
        return len(self.membership)

    @property
    def environments(self) -> np.ndarray:
        return np.unique(self.env)


def balanced_members(split: SplitGraph, seed) -> tuple[np.ndarray, np.ndarray]:
    """Downsample the larger side of the split so both sides have equal size."""
    rng = np.random.default_rng(seed)
    members, others = np.asarray(split.train), np.asarray(split.test)
    k = min(len(members), len(others))
    if len(members) > k:
        members = np.sort(rng.choice(members, k, replace=False))
    if len(others) > k:
        others = np.sort(rng.choice(others, k, replace=False))
    return members, others


def build_attack_dataset(shadow: ShadowModel, envs, split: SplitGraph, k: int = 2,
                         seed: int = 0) -> AttackDataset:
    """Member (train) and non-member (test) records from every environment's posteriors."""
    if len(split.train) == 0 or len(split.test) == 0:
        raise ContractError("attack dataset needs both members and non-members")
    members, others = balanced_members(split, _seed(seed, 4))
    nodes = np.concatenate([members, others])
    label = np.concatenate([np.ones(len(members), np.int64), np.zeros(len(others), np.int64)])
    feats, labels, env_ids, node_ids = [], [], [], []
    for e, env in enumerate(envs):
        post = shadow.posteriors(env.X, env.adj)
        feats.append(posterior_features(post[nodes], k))
        labels.append(label)
        env_ids.append(np.full(len(nodes), e))
        node_ids.append(nodes)
    return AttackDataset(np.vstack(feats), np.concatenate(labels), np.concatenate(env_ids),
                         np.concatenate(node_ids))


@dataclass
class AttackModel:
    """One-hidden-layer ReLU MLP over ``k`` posterior features with two-class output."""

    params: ModelParams
    k: int
    history: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, k: int, hidden: int, seed) -> "AttackModel":
        rng = np.random.default_rng(seed)
        return cls(ModelParams({"W1": glorot(rng, k, hidden), "b1": np.zeros((1, hidden)),
                                "W2": glorot(rng, hidden, 2), "b2": np.zeros((1, 2))}), k)

    @classmethod
    def zeros(cls, k: int, hidden: int) -> "AttackModel":
        return cls(ModelParams({"W1": np.zeros((k, hidden)), "b1": np.zeros((1, hidden)),
                                "W2": np.zeros((hidden, 2)), "b2": np.zeros((1, 2))}), k)

    def logits(self, tape: Tape, features: np.ndarray):
        if features.ndim != 2 or features.shape[1] != self.k:
            raise ContractError(f"attack model expects {self.k} features, got shape {features.shape}")
        leaves = self.params.to_tape(tape)
        ones = tape.const(np.ones((features.shape[0], 1)))
        h = tape.relu(tape.add(tape.matmul(tape.const(features), leaves["W1"]),
                               tape.matmul(ones, leaves["b1"])))
        out = tape.add(tape.matmul(h, leaves["W2"]), tape.matmul(ones, leaves["b2"]))
        return out, leaves

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Membership probability (class-1 posterior) per feature row."""
        tape = Tape()
        out, _ = self.logits(tape, np.asarray(features, dtype=np.float64))
        return tape.softmax(out).value[:, 1].copy()


def attack_loss(model: AttackModel, dataset: AttackDataset, rex: RExConfig, tape: Tape):
    out, leaves = model.logits(tape, dataset.features)
    risks = []
    for e in dataset.environments:
        rows = np.flatnonzero(dataset.env == e)
        risks.append(attack_ce(tape.take_rows(out, rows), dataset.membership[rows]))
    return v_rex(risks, rex.beta2), risks, leaves


def train_attack(dataset: AttackDataset, rex: RExConfig, hidden: int, optim: OptimConfig,
                 epochs: int, seed: int = 0, allow_single_environment: bool = False) -> AttackModel:
    """Minimize ``beta2 * Var(R_e) + sum R_e`` over the environments of ``dataset``."""
    if len(dataset.environments) < 2 and not allow_single_environment:
        raise ContractError("risk extrapolation needs records from >= 2 environments; use M >= 2")
    model = AttackModel.init(dataset.features.shape[1], hidden, _seed(seed, 5))
    opt = Optimizer(optim)
    for epoch in range(epochs):
        tape = Tape()
        try:
            loss, _, leaves = attack_loss(model, dataset, rex, tape)
            g = tape.backward(loss)
        except NumericError as exc:
            raise TrainingError("attack training", epoch, exc) from exc
        model.history.append(float(loss.value[0, 0]))
        opt.step(model.params, {k: g[v] for k, v in leaves.items()})
    return model


def infer_membership(attack: AttackModel, target: TargetModel, graph: Graph, nodes,
                     k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Membership scores in [0, 1] and labels (score > 0.5) for the query nodes."""
    k = attack.k if k is None else k
    if k != attack.k:
        raise ContractError(f"query transform uses k={k} but the attack model was trained with k={attack.k}")
    nodes = np.asarray(nodes, dtype=np.int64)
    post = target.posteriors_for(graph)[nodes]
    scores = attack.scores(posterior_features(post, k))
    return scores, (scores > metrics.THRESHOLD).astype(np.int64)


def evaluate_attack(scores, labels, truth, seed: int | None = None) -> metrics.MetricsReport:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    if not scores.size == labels.size == truth.size:
        raise ContractError(f"length mismatch: {scores.size} scores, {labels.size} labels, {truth.size} truths")
    rep = metrics.report(scores, truth, seed)
    if rep.accuracy != metrics.accuracy(labels, truth):
        raise ContractError("labels are not the 0.5-thresholded scores")
    return rep


# --------------------------------------------------------------- end to end

@dataclass
class RunResult:
    seed: int
    variant: str
    report: metrics.MetricsReport
    target_train_acc: float
    target_test_acc: float
    shadow_train_acc: float
    shadow_test_acc: float
    shadow: ShadowModel
    target: TargetModel
    attack: AttackModel


def query_set(split: SplitGraph, seed) -> tuple[np.ndarray, np.ndarray]:
    """All target train nodes plus an equal-size sample of test nodes, with ground truth."""
    rng = np.random.default_rng(seed)
    members = np.asarray(split.train)
    others = np.asarray(split.test)
    if len(others) > len(members):
        others = np.sort(rng.choice(others, len(members), replace=False))
    nodes = np.concatenate([members, others])
    truth = np.concatenate([np.ones(len(members), np.int64), np.zeros(len(others), np.int64)])
    return nodes, truth


def run_pipeline(bundle: DatasetBundle, config: PipelineConfig, seed: int | None = None) -> RunResult:
    """Shadow training, attack training, target training and attack evaluation for one seed."""
    cfg = config.resolved()
    seed = cfg.seed if seed is None else seed
    shadow_g, target_g = bundle.shadow, bundle.target

    s_split = split_disjoint(shadow_g, cfg.shadow_train_fraction, _seed(seed, 10).generate_state(1)[0])
    if cfg.M == 1:
        envs = [original_environment(shadow_g)]
    else:
        aug = replace(cfg.augment, seed=int(_seed(seed, 11).generate_state(1)[0]))
        envs = build_environments(shadow_g, cfg.M, aug)
    shadow = train_shadow(shadow_g, s_split, envs, cfg.backbone, cfg.shadow_loss, cfg.shadow_optim,
                          cfg.shadow_epochs, seed=seed, stochastic=cfg.stochastic)
    dataset = build_attack_dataset(shadow, envs, s_split, cfg.top_k, seed=seed)
    attack = train_attack(dataset, cfg.rex, cfg.attack_hidden, cfg.attack_optim, cfg.attack_epochs,
                          seed=seed, allow_single_environment=cfg.M == 1)

    t_split = split_disjoint(target_g, cfg.target_train_fraction, _seed(seed, 12).generate_state(1)[0])
    target_backbone = replace(cfg.backbone, bottleneck=False)
    target = train_target(target_g, t_split, target_backbone, cfg.target_optim, cfg.target_epochs,
                          seed=seed)
    nodes, truth = query_set(t_split, _seed(seed, 13))
    scores, labels = infer_membership(attack, target, target_g, nodes)
    rep = evaluate_attack(scores, labels, truth, seed)

    s_adj = normalize_adjacency(shadow_g)
    s_post = shadow.posteriors(shadow_g.X, s_adj)
    s_pred = s_post.argmax(axis=1)
    return RunResult(
        seed, cfg.variant, rep,
        target.accuracy(target_g, t_split.train), target.accuracy(target_g, t_split.test),
        float(np.mean(s_pred[s_split.train] == shadow_g.y[s_split.train])),
        float(np.mean(s_pred[s_split.test] == shadow_g.y[s_split.test])),
        shadow, target, attack,
    )
