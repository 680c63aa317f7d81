"""Multi-stage label-private training (LP-MST).

The data is split into ``T`` label-independent parts. Stage ``t`` asks the
model from stage ``t-1`` for a prior on each of its examples, randomizes each
true label once with RRWithPrior, and trains on all randomized labels seen so
far. Since each true label is read by exactly one randomizer and the parts
are disjoint, the whole run is ``eps``-label-DP.

Two refinements are on by default: stage ``t`` warm-starts from the previous
model, and labels from earlier stages are only reused when they fall in the
previous model's top-k predictions, with ``k`` the rounded mean ``k*`` of the
current stage.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from labelrand import mechanisms
from labelrand.errors import (
    InputDomainError,
    ParameterError,
    PrivacyLedgerError,
    TrainingDivergenceError,
)
from labelrand.priors import temperature_scale
from labelrand.seeding import keyed_rng, keyed_uniform

logger = logging.getLogger(__name__)

SPLIT_ATOL = 1e-9


@dataclass(frozen=True)
class StagePlan:
    T: int
    splits: tuple
    seed: int = 0

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ParameterError(f"stage count must be >= 1, got {self.T!r}")
        splits = tuple(float(s) for s in self.splits)
        if len(splits) != self.T:
            raise ParameterError(f"{len(splits)} splits given for T={self.T} stages")
        if any(not s > 0 for s in splits) or abs(sum(splits) - 1.0) > SPLIT_ATOL:
            raise ParameterError(f"splits must be positive and sum to 1, got {splits}")
        object.__setattr__(self, "splits", splits)

    @classmethod
    def default(cls, T: int, seed: int = 0) -> "StagePlan":
        """(0.65, 0.35) for two stages, equal parts otherwise."""
        if T == 2:
            return cls(2, (0.65, 0.35), seed)
        return cls(T, tuple([1.0 / T] * T), seed)


def _split_sizes(n: int, splits: Sequence[float]) -> list:
    raw = [n * s for s in splits]
    sizes = [math.floor(r) for r in raw]
    # Largest remainder; earlier stages win ties.
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def partition(ids: Sequence, plan: StagePlan, rng: np.random.Generator) -> list:
    """Randomly splits ``ids`` into ``plan.T`` disjoint lists.

    The result depends on the set of ids and ``rng`` only, never on labels
    or on the order ids are listed in.
    """
    ids = list(ids)
    if not ids:
        raise InputDomainError("cannot partition an empty id list")
    if len(set(ids)) != len(ids):
        raise InputDomainError("ids must be unique")
    canonical = sorted(ids, key=lambda i: (type(i).__name__, str(i)))
    perm = rng.permutation(len(canonical))
    shuffled = [canonical[i] for i in perm]
    parts, start = [], 0
    for size in _split_sizes(len(shuffled), plan.splits):
        parts.append(shuffled[start : start + size])
        start += size
    return parts


class StageLedger:
    """Records which stage consumed each example's true label.

    ``consume`` is the only way to mark an id, and it refuses a second call
    for the same id. The check and the mark happen under one lock.
    """

    def __init__(self):
        self._stage_of = {}
        self._lock = threading.Lock()

    def consume(self, example_id, stage: int) -> None:
        with self._lock:
            if example_id in self._stage_of:
                raise PrivacyLedgerError(
                    f"label of example {example_id!r} already consumed in stage "
                    f"{self._stage_of[example_id]}; refusing reuse in stage {stage}"
                )
            self._stage_of[example_id] = stage

    def stage_of(self, example_id) -> Optional[int]:
        return self._stage_of.get(example_id)

    def is_consumed(self, example_id) -> bool:
        return example_id in self._stage_of

    def __len__(self):
        return len(self._stage_of)


class ProbabilisticModel(Protocol):
    num_classes: int

    def predict_logits(self, X: np.ndarray) -> np.ndarray:
        ...


@dataclass
class UniformModel:
    """The trivial model: equal logits for every class."""

    num_classes: int

    def predict_logits(self, X):
        return np.zeros((np.asarray(X).shape[0], self.num_classes))


@dataclass
class SoftmaxModel:
    weights: np.ndarray  # (d, K)
    bias: np.ndarray  # (K,)

    @property
    def num_classes(self) -> int:
        return self.bias.shape[0]

    @classmethod
    def zeros(cls, d: int, K: int) -> "SoftmaxModel":
        return cls(np.zeros((d, K)), np.zeros(K))

    def copy(self) -> "SoftmaxModel":
        return SoftmaxModel(self.weights.copy(), self.bias.copy())

    def predict_logits(self, X):
        return np.asarray(X, dtype=float) @ self.weights + self.bias

    def predict_proba(self, X):
        return temperature_scale(self.predict_logits(X), 1.0)

    def predict(self, X):
        return np.argmax(self.predict_logits(X), axis=1)

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


@dataclass
class TrainConfig:
    """Hyperparameters of the built-in softmax learner and the prior step.

    ``lr_schedule`` is ``"constant"``, ``"cosine"`` or ``"inverse_sqrt"``.
    ``mixup_alpha = 0`` disables mixup.
    """

    epochs: int = 10
    learning_rate: float = 0.1
    lr_schedule: str = "cosine"
    l2: float = 1e-2
    mixup_alpha: float = 0.0
    temperature: float = 0.1
    batch_size: int = 128

    def __post_init__(self):
        if self.epochs < 0 or int(self.epochs) != self.epochs:
            raise ParameterError("epochs must be a nonnegative integer")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine", "inverse_sqrt"):
            raise ParameterError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.l2 < 0:
            raise ParameterError("l2 must be nonnegative")
        if self.mixup_alpha < 0:
            raise ParameterError("mixup_alpha must be nonnegative")
        if not self.temperature > 0:
            raise ParameterError("temperature must be positive")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")

    def lr_at(self, step: int, total: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        if self.lr_schedule == "cosine":
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * step / max(total, 1)))
        return self.learning_rate / math.sqrt(1.0 + step)


def softmax_learner_train(
    X,
    y,
    config: TrainConfig,
    num_classes: int,
    init: Optional[SoftmaxModel] = None,
    rng: Optional[np.random.Generator] = None,
) -> SoftmaxModel:
    """Multinomial logistic regression by mini-batch SGD.

    Minimizes mean cross-entropy plus ``l2/2 * ||W||^2``. With
    ``config.mixup_alpha > 0`` each batch is mixed with a shuffled copy of
    itself using one ``lam ~ Beta(alpha, alpha)`` for inputs and one-hot
    targets alike.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise InputDomainError(f"expected X (n, d) and y (n,), got {X.shape} and {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise InputDomainError(f"labels must lie in [0, {num_classes})")
    rng = rng if rng is not None else np.random.default_rng(0)
    n, d = X.shape
    if init is not None:
        if init.weights.shape != (d, num_classes):
            raise InputDomainError(
                f"init weights {init.weights.shape} incompatible with ({d}, {num_classes})"
            )
        model = init.copy()
    else:
        model = SoftmaxModel.zeros(d, num_classes)
    if n == 0 or config.epochs == 0:
        return model

    targets = np.eye(num_classes)[y]
    batches_per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * batches_per_epoch
    step = 0
    W, b = model.weights, model.bias
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, tb = X[idx], targets[idx]
            if config.mixup_alpha > 0:
                lam = rng.beta(config.mixup_alpha, config.mixup_alpha)
                mate = rng.permutation(idx.size)
                xb = lam * xb + (1.0 - lam) * xb[mate]
                tb = lam * tb + (1.0 - lam) * tb[mate]
            logits = xb @ W + b
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            resid = (probs - tb) / idx.size
            lr = config.lr_at(step, total)
            W -= lr * (xb.T @ resid + config.l2 * W)
            b -= lr * resid.sum(axis=0)
            step += 1
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise TrainingDivergenceError("softmax learner produced non-finite weights")
    return model


def cross_entropy(model: SoftmaxModel, X, y) -> float:
    logits = model.predict_logits(X)
    logits = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(logits).sum(axis=1))
    return float(np.mean(logz - logits[np.arange(len(y)), np.asarray(y)]))


@dataclass
class RandomizedStage:
    """Randomized labels produced by one stage.

    ``rows`` index the feature matrix, ``ids`` are the matching example ids.
    """

    stage: int
    rows: np.ndarray
    ids: list
    y_tilde: np.ndarray
    k_star: np.ndarray
    draws: np.ndarray

    @property
    def mean_k_star(self) -> float:
        return float(np.mean(self.k_star)) if self.k_star.size else float("nan")


def run_stage(
    stage_index: int,
    X,
    labels,
    rows: Sequence[int],
    ids: Sequence,
    prior_model: ProbabilisticModel,
    eps,
    ledger: StageLedger,
    temperature: float,
    seed: int,
) -> RandomizedStage:
    """Randomizes the labels of one stage with RRWithPrior.

    ``labels[r]`` is read exactly once per row ``r``, and only after the
    ledger has accepted the example id. The uniform variate for each example
    is keyed by ``(seed, id)``.
    """
    e = mechanisms.as_epsilon(eps)
    rows = np.asarray(rows, dtype=int)
    X = np.asarray(X, dtype=float)
    if rows.size == 0:
        empty = np.zeros(0, dtype=int)
        return RandomizedStage(stage_index, rows, [], empty, empty, np.zeros(0))
    priors = temperature_scale(prior_model.predict_logits(X[rows]), temperature)
    y_tilde = np.empty(rows.size, dtype=int)
    k_star = np.empty(rows.size, dtype=int)
    draws = np.empty(rows.size)
    for j, (r, example_id) in enumerate(zip(rows, ids)):
        plan = mechanisms.rrp_plan(priors[j], e)
        table = mechanisms.top_k_table(priors[j], plan.k_star, e)
        ledger.consume(example_id, stage_index)
        y = labels[int(r)]
        mechanisms.LabelSpace(table.shape[0]).check(y)
        u = keyed_uniform(seed, "rr", example_id)
        y_tilde[j] = mechanisms.inverse_cdf(table[int(y)], u)
        k_star[j] = plan.k_star
        draws[j] = u
    return RandomizedStage(stage_index, rows, list(ids), y_tilde, k_star, draws)


def filter_reused(X, y_tilde, model: ProbabilisticModel, k: int) -> np.ndarray:
    """Boolean mask keeping examples whose label is in the model's top-k."""
    if int(k) != k or k < 1:
        raise ParameterError(f"k must be a positive integer, got {k!r}")
    y_tilde = np.asarray(y_tilde, dtype=int)
    if y_tilde.size == 0:
        return np.zeros(0, dtype=bool)
    logits = model.predict_logits(np.asarray(X, dtype=float))
    order = np.argsort(-logits, axis=1, kind="stable")[:, : int(k)]
    return np.any(order == y_tilde[:, None], axis=1)


@dataclass
class StageReport:
    stage: int
    n_queried: int
    mean_k_star: float
    filter_k: Optional[int]
    n_reused: int
    n_train: int

    def as_dict(self) -> dict:
        return {
            "stage": self.stage,
            "n_queried": self.n_queried,
            "mean_k_star": self.mean_k_star,
            "filter_k": self.filter_k,
            "n_reused": self.n_reused,
            "n_train": self.n_train,
        }


@dataclass
class MstReport:
    stages: list = field(default_factory=list)
    randomized: list = field(default_factory=list)
    models: list = field(default_factory=list)
    epsilon_spent: float = 0.0


Learner = Callable[..., SoftmaxModel]


def lp_mst(
    X,
    labels,
    plan: StagePlan,
    eps,
    config: TrainConfig,
    num_classes: int,
    learner: Learner = softmax_learner_train,
    ids: Optional[Sequence] = None,
    warm_start: bool = True,
    reuse: bool = True,
    filter_k: Optional[int] = None,
    ledger: Optional[StageLedger] = None,
):
    """Runs multi-stage label-private training.

    Args:
      X: ``(n, d)`` public features.
      labels: true labels, indexable by row. Each entry is read once.
      plan: stage count, split fractions and seed.
      eps: per-label privacy budget (float or PrivacyBudget with delta = 0).
      config: learner and temperature settings.
      num_classes: label count ``K``.
      learner: ``learner(X, y, config, num_classes, init=..., rng=...)``.
      ids: example ids (default ``0..n-1``), used for the ledger and for
        per-example randomness.
      warm_start: initialise stage ``t`` from the stage ``t-1`` model.
      reuse: train on earlier stages' labels, filtered by top-k membership.
      filter_k: fixed ``k`` for the reuse filter; default is the rounded mean
        ``k*`` of the current stage.
      ledger: optional externally owned ledger.

    Returns:
      ``(model, report)``.
    """
    e = mechanisms.as_epsilon(eps)
    if not e > 0:
        raise ParameterError("multi-stage training needs epsilon > 0")
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    ids = list(range(n)) if ids is None else list(ids)
    if len(ids) != n:
        raise InputDomainError("ids must align with feature rows")
    row_of = {example_id: r for r, example_id in enumerate(ids)}
    if len(row_of) != n:
        raise InputDomainError("ids must be unique")
    ledger = ledger if ledger is not None else StageLedger()

    parts = partition(ids, plan, keyed_rng(plan.seed, "partition"))
    prior_model: ProbabilisticModel = UniformModel(num_classes)
    model = None
    report = MstReport(epsilon_spent=e)
    for t, part in enumerate(parts, start=1):
        rows = [row_of[i] for i in part]
        stage = run_stage(
            t, X, labels, rows, part, prior_model, e, ledger, config.temperature, plan.seed
        )
        report.randomized.append(stage)

        train_rows, train_y = [stage.rows], [stage.y_tilde]
        k_used, n_reused = None, 0
        if reuse and t > 1:
            k_used = filter_k if filter_k is not None else max(1, int(round(stage.mean_k_star)))
            for earlier in report.randomized[:-1]:
                keep = filter_reused(X[earlier.rows], earlier.y_tilde, prior_model, k_used)
                train_rows.append(earlier.rows[keep])
                train_y.append(earlier.y_tilde[keep])
                n_reused += int(keep.sum())
        train_rows = np.concatenate(train_rows)
        train_y = np.concatenate(train_y)

        init = model if (warm_start and model is not None) else None
        model = learner(
            X[train_rows],
            train_y,
            config,
            num_classes,
            init=init,
            rng=keyed_rng(plan.seed, "train", t),
        )
        report.models.append(model)
        report.stages.append(
            StageReport(t, len(part), stage.mean_k_star, k_used, n_reused, int(train_rows.size))
        )
        logger.info(
            "stage %d: %d queried, mean k* %.3f, %d reused, %d trained",
            t, len(part), stage.mean_k_star, n_reused, train_rows.size,
        )
        prior_model = model
    return model, report


def stage_agreement(report: MstReport, true_labels) -> list:
    """Per-stage fraction of randomized labels equal to the true label.

    Evaluation only: this reads the true labels a second time and must not
    feed into anything released.
    """
    true_labels = np.asarray(true_labels)
    return [
        float(np.mean(s.y_tilde == true_labels[s.rows])) if s.rows.size else float("nan")
        for s in report.randomized
    ]
