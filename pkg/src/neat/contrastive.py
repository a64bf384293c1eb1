"""Noise-contrastive regularization.

Builds positive/negative key sets for clean and noisy queries from a FIFO
memory bank of projected keys, evaluates the temperature-scaled InfoNCE term
with its analytic query-side gradient, and provides the alternative
strategies (plain contrastive, supervised contrastive, pseudo-labels) used
for comparisons. Keys are constants: gradients flow only through the query.
"""

import warnings
from collections import deque
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigurationError

STRATEGIES = ("NCL", "CL", "SCL")
PSEUDO_LABEL_MODES = ("PL_H", "PL_S", "PL_K")


@dataclass(eq=False)
class ProjectedKey:
    z: np.ndarray  # unit vector
    category: int
    clean_flag: bool
    instance_id: int


@dataclass(eq=False)
class ContrastiveQuery:
    """One instance's view-1 projection plus its constant second-view key."""

    instance_id: int
    category: int
    z: np.ndarray
    z_second: np.ndarray | None = None


class MemoryBank:
    """FIFO queue of projected keys; eviction is strictly oldest-first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigurationError("memory bank capacity must be positive")
        self.capacity = capacity
        self._queue: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._queue)

    def enqueue(self, key: ProjectedKey) -> None:
        self._queue.append(key)

    def extend(self, keys) -> None:
        for key in keys:
            self._queue.append(key)

    def keys(self) -> list:
        """Snapshot in insertion order (oldest first)."""
        return list(self._queue)


@dataclass
class KeySets:
    positives: list
    negatives: list


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    neighbors: int = 16
    strategy: str = "NCL"
    open_set_mode: bool = False
    lambda_r: float = 1.0

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.neighbors < 1:
            raise ConfigurationError("neighbors must be positive")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown contrastive strategy {self.strategy!r}")
        if self.lambda_r < 0:
            raise ConfigurationError("lambda_r must be nonnegative")


class KnnResult(NamedTuple):
    keys: list
    shortfall: bool


def knn(query: np.ndarray, bank: MemoryBank, B: int,
        exclude_id: int | None = None,
        restrict: Callable | None = None) -> KnnResult:
    """B keys maximizing inner product with the query.

    Keys sharing `exclude_id` are never returned; `restrict` filters further.
    Ties break toward older (earlier-inserted) keys. Fewer than B eligible
    keys returns them all with `shortfall` set.
    """
    eligible = [k for k in bank.keys()
                if (exclude_id is None or k.instance_id != exclude_id)
                and (restrict is None or restrict(k))]
    if not eligible:
        return KnnResult([], True)
    sims = np.array([k.z @ query for k in eligible])
    order = np.argsort(-sims, kind="stable")
    picked = [eligible[i] for i in order[:B]]
    return KnnResult(picked, len(picked) < B)


def build_key_sets(query: ContrastiveQuery, split, bank: MemoryBank,
                   cfg: ContrastiveConfig) -> KeySets:
    """Positive/negative keys for one query under the configured strategy.

    NCL: clean queries pull same-category clean keys (plus the second view)
    and push same-category noisy keys and different-category clean keys;
    noisy queries pull their B nearest neighbors plus the second view and
    push everything else. CL uses only the second view as positive. SCL runs
    on clean queries and clean keys alone; noisy queries get empty sets and
    are skipped by the batch loss.
    """
    clean = bool(split.clean_mask[query.instance_id])
    others = [k for k in bank.keys() if k.instance_id != query.instance_id]

    if cfg.strategy == "CL":
        if query.z_second is None:
            raise ConfigurationError("CL requires the query's second view")
        return KeySets([_second_view_key(query, clean)], others)

    if cfg.strategy == "SCL":
        if not clean:
            return KeySets([], [])
        pos = [k for k in others if k.clean_flag and k.category == query.category]
        neg = [k for k in others if k.clean_flag and k.category != query.category]
        if query.z_second is not None:
            pos.append(_second_view_key(query, clean))
        return KeySets(pos, neg)

    if clean:
        pos = [k for k in others if k.clean_flag and k.category == query.category]
        neg = [k for k in others
               if (not k.clean_flag and k.category == query.category)
               or (k.clean_flag and k.category != query.category)]
        if query.z_second is not None:
            pos.append(_second_view_key(query, clean))
        return KeySets(pos, neg)

    if query.z_second is None:
        raise ConfigurationError("a noisy query requires its second view")
    restrict = (lambda k: not k.clean_flag) if cfg.open_set_mode else None
    nearest = knn(query.z, bank, cfg.neighbors, exclude_id=query.instance_id,
                  restrict=restrict).keys
    chosen = set(map(id, nearest))
    neg = [k for k in others if id(k) not in chosen]
    return KeySets(nearest + [_second_view_key(query, clean)], neg)


def _second_view_key(query: ContrastiveQuery, clean: bool) -> ProjectedKey:
    return ProjectedKey(z=query.z_second, category=query.category,
                        clean_flag=clean, instance_id=query.instance_id)


def info_nce(z_q: np.ndarray, sets: KeySets, temperature: float):
    """Temperature-scaled InfoNCE over P against P+N.

    Returns (loss, gradient wrt z_q); keys are constants. The loss is the
    negative mean log-probability of each positive under the softmax over
    all keys, so it is always >= 0.
    """
    if not sets.positives:
        raise ConfigurationError("info_nce requires at least one positive key")
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    keys = np.stack([k.z for k in sets.positives + sets.negatives])
    n_pos = len(sets.positives)
    logits = keys @ z_q / temperature
    peak = logits.max()
    log_norm = peak + np.log(np.exp(logits - peak).sum())
    loss = float(log_norm - logits[:n_pos].mean())
    softmax = np.exp(logits - log_norm)
    grad = (softmax @ keys - keys[:n_pos].mean(axis=0)) / temperature
    return loss, grad


@dataclass
class BatchLossResult:
    loss: float
    grads: dict          # instance_id -> gradient wrt that query's z
    n_clean_evaluated: int
    n_noisy_evaluated: int
    n_skipped: int


def ncl_batch_loss(queries, split, bank: MemoryBank, cfg: ContrastiveConfig,
                   update_bank: bool = True) -> BatchLossResult:
    """Contrastive loss of a batch: separate means over the clean and noisy
    queries (single mean for CL/SCL), scaled by lambda_r.

    Queries with an empty positive set contribute nothing and shrink their
    mean's denominator. The bank is updated after evaluation by enqueuing the
    batch's second-view keys in ascending instance-id order.
    """
    cfg.validate()
    ordered = sorted(queries, key=lambda q: q.instance_id)
    per_query = []  # (query, clean, loss, grad)
    n_skipped = 0
    if cfg.lambda_r > 0:
        for query in ordered:
            sets = build_key_sets(query, split, bank, cfg)
            if not sets.positives:
                n_skipped += 1
                continue
            loss, grad = info_nce(query.z, sets, cfg.temperature)
            per_query.append((query, bool(split.clean_mask[query.instance_id]), loss, grad))

    if cfg.strategy == "NCL":
        groups = {True: [], False: []}
        for query, clean, loss, grad in per_query:
            groups[clean].append((query, loss, grad))
        total = 0.0
        grads: dict = {}
        counts = {True: len(groups[True]), False: len(groups[False])}
        for clean_side, members in groups.items():
            if not members:
                continue
            total += sum(loss for _, loss, _ in members) / counts[clean_side]
            for query, _, grad in members:
                grads[query.instance_id] = cfg.lambda_r * grad / counts[clean_side]
        n_clean, n_noisy = counts[True], counts[False]
    else:
        total = 0.0
        grads = {}
        n_eval = len(per_query)
        if n_eval:
            total = sum(loss for _, _, loss, _ in per_query) / n_eval
            for query, _, _, grad in per_query:
                grads[query.instance_id] = cfg.lambda_r * grad / n_eval
        n_clean = sum(1 for _, clean, _, _ in per_query if clean)
        n_noisy = n_eval - n_clean

    if cfg.lambda_r > 0 and not per_query and ordered:
        warnings.warn("contrastive batch had no evaluable queries; L_r = 0")

    if update_bank:
        for query in ordered:
            if query.z_second is not None:
                bank.enqueue(_second_view_key(
                    query, bool(split.clean_mask[query.instance_id])))

    return BatchLossResult(loss=cfg.lambda_r * total, grads=grads,
                           n_clean_evaluated=n_clean, n_noisy_evaluated=n_noisy,
                           n_skipped=n_skipped)


def pseudo_label(mode: str, prediction: np.ndarray | None = None,
                 query_x: np.ndarray | None = None,
                 reference_x: np.ndarray | None = None,
                 reference_labels: np.ndarray | None = None,
                 num_categories: int | None = None,
                 k: int = 64) -> np.ndarray:
    """Label distribution for an estimated-noisy instance.

    PL_H: one-hot argmax of the model prediction. PL_S: the prediction
    itself. PL_K: normalized label-vote histogram of the k nearest reference
    members in clip-feature space (all of them, with a warning, if the
    reference set is smaller than k).
    """
    if mode not in PSEUDO_LABEL_MODES:
        raise ConfigurationError(f"unknown pseudo-label mode {mode!r}")
    if mode in ("PL_H", "PL_S"):
        if prediction is None:
            raise ConfigurationError(f"{mode} requires a model prediction")
        prediction = np.asarray(prediction, dtype=np.float64)
        if mode == "PL_S":
            return prediction.copy()
        out = np.zeros_like(prediction)
        out[int(np.argmax(prediction))] = 1.0
        return out

    if query_x is None or reference_x is None or reference_labels is None \
            or num_categories is None:
        raise ConfigurationError("PL_K requires the query embedding, the reference "
                                 "embeddings/labels, and the category count")
    reference_x = np.asarray(reference_x, dtype=np.float64)
    reference_labels = np.asarray(reference_labels)
    if reference_x.shape[0] == 0:
        raise ConfigurationError("PL_K requires a nonempty reference set")
    if reference_x.shape[0] < k:
        warnings.warn(f"PL_K: reference set smaller than {k}, voting over all of it")
        k = reference_x.shape[0]
    sims = reference_x @ np.asarray(query_x, dtype=np.float64)
    nearest = np.argsort(-sims, kind="stable")[:k]
    votes = np.bincount(reference_labels[nearest], minlength=num_categories)
    return votes / votes.sum()
