"""Channel truncation and clean/noisy splitting.

Per category: score channels from a reference set, keep the top-b, compare
each truncated instance to the clean prototype by inner product, and fit a
two-component mixture to the similarities. The posterior of the low-mean
component is the per-instance noise probability; thresholding it yields the
clean/noisy partition for the round.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import gmm
from .datagen import Dataset
from .errors import ConfigurationError, InsufficientDataError, UndefinedOracleError
from .rng import substream

SCORE_MODES = ("ave", "var", "img")
SLICE_MODES = ("top", "middle", "bottom")

VARIANCE_FLOOR = 1e-12  # Fisher-ratio denominator floor


@dataclass(frozen=True)
class CategoryScore:
    """Channel-count histogram and the chosen channel subset for one category."""

    category: int
    counts: np.ndarray    # (d,) top-b event counts
    selected: np.ndarray  # (b,) channel indices, count-descending / index-ascending


@dataclass(frozen=True)
class OracleScore:
    """Per-channel Fisher ratio computed from the true clean/noisy split."""

    psi: np.ndarray
    mu_clean: np.ndarray
    sigma_clean: np.ndarray
    mu_noisy: np.ndarray
    sigma_noisy: np.ndarray

    def top(self, b: int) -> np.ndarray:
        return rank_channels(self.psi)[:b]


@dataclass
class ReferenceSet:
    """Per-category instance-id lists used to score channels."""

    per_category: dict

    @classmethod
    def full(cls, data: Dataset) -> "ReferenceSet":
        return cls({a: np.flatnonzero(data.noisy_label == a) for a in range(data.K)})

    @classmethod
    def from_clean_mask(cls, data: Dataset, clean_mask: np.ndarray) -> "ReferenceSet":
        return cls({a: np.flatnonzero((data.noisy_label == a) & clean_mask)
                    for a in range(data.K)})

    @classmethod
    def anchors(cls, data: Dataset, per_category: int) -> "ReferenceSet":
        """First `per_category` truly clean ids of each category (fixed anchor set)."""
        mask = data.true_clean_mask()
        out = {}
        for a in range(data.K):
            ids = np.flatnonzero((data.noisy_label == a) & mask)
            out[a] = ids[:per_category]
        return cls(out)

    def for_category(self, a: int) -> np.ndarray:
        return np.asarray(self.per_category.get(a, np.empty(0, dtype=np.int64)),
                          dtype=np.int64)


@dataclass
class SplitEstimate:
    """Per-instance noise posterior and the clean/noisy partition."""

    noise_posterior: np.ndarray  # (M,) in [0, 1]
    clean_mask: np.ndarray       # (M,) bool, posterior < threshold
    threshold: float
    similarity: np.ndarray       # (M,) inner product with the category prototype
    selections: dict = field(default_factory=dict)  # category -> CategoryScore
    warnings: list = field(default_factory=list)

    @property
    def clean_count(self) -> int:
        return int(self.clean_mask.sum())


def clip_embeddings(features: np.ndarray) -> np.ndarray:
    """Clip-level representation: L2-normalized temporal mean of the frames."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
        return _normalize_rows(x.mean(axis=1))[0]
    return _normalize_rows(x.mean(axis=1))


def instance_score(frames: np.ndarray, mode: str) -> np.ndarray:
    """Per-channel score of one instance's (T, d) frame block."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise InsufficientDataError("instance_score needs a nonempty (T, d) frame block")
    _check_mode(mode)
    if mode == "img" and frames.shape[0] != 1:
        raise ConfigurationError("img score mode requires exactly one frame")
    return _batch_scores(frames[None], mode)[0]


def _batch_scores(features: np.ndarray, mode: str) -> np.ndarray:
    if mode == "ave":
        return features.mean(axis=1)
    if mode == "var":
        mean = features.mean(axis=1, keepdims=True)
        return ((features - mean) ** 2).mean(axis=1)
    if features.shape[1] != 1:
        raise ConfigurationError("img score mode requires exactly one frame")
    return features[:, 0, :]


def category_score(data: Dataset, omega: ReferenceSet, a: int, b: int, mode: str,
                   slice_mode: str = "top") -> CategoryScore:
    """Histogram of top-b instance-score events over the category's reference set.

    An empty reference entry falls back to every instance labeled `a`.
    `slice_mode` picks the top / centered-middle / bottom b channels of the
    count ranking (top is the standard selection).
    """
    _check_mode(mode)
    if slice_mode not in SLICE_MODES:
        raise ConfigurationError(f"unknown slice mode {slice_mode!r}")
    d = data.d
    if not 1 <= b <= d:
        raise ConfigurationError(f"b must be in [1, {d}], got {b}")
    ids = omega.for_category(a)
    if ids.size == 0:
        ids = np.flatnonzero(data.noisy_label == a)
    if ids.size == 0:
        raise InsufficientDataError(f"category {a} has no instances")

    phi = _batch_scores(np.asarray(data.features[ids], dtype=np.float64), mode)
    top = np.argsort(-phi, axis=1, kind="stable")[:, :b]
    counts = np.bincount(top.ravel(), minlength=d)
    ranking = rank_channels(counts)
    if slice_mode == "top":
        selected = ranking[:b]
    elif slice_mode == "middle":
        start = (d - b) // 2
        selected = ranking[start:start + b]
    else:
        selected = ranking[d - b:]
    return CategoryScore(category=a, counts=counts, selected=selected)


def rank_channels(scores: np.ndarray) -> np.ndarray:
    """All channels ordered by score descending, ties to the lower index."""
    d = scores.shape[0]
    return np.lexsort((np.arange(d), -np.asarray(scores, dtype=np.float64)))


def fisher_ratio(clean_x: np.ndarray, noisy_x: np.ndarray) -> OracleScore:
    """Elementwise (mu_c - mu_u)^2 / (sigma_c^2 + sigma_u^2 + floor) over rows."""
    clean_x = np.atleast_2d(np.asarray(clean_x, dtype=np.float64))
    noisy_x = np.atleast_2d(np.asarray(noisy_x, dtype=np.float64))
    if clean_x.shape[0] == 0 or noisy_x.shape[0] == 0:
        raise UndefinedOracleError("both sides of the true split must be nonempty")
    mu_c, mu_u = clean_x.mean(axis=0), noisy_x.mean(axis=0)
    var_c, var_u = clean_x.var(axis=0), noisy_x.var(axis=0)
    psi = (mu_c - mu_u) ** 2 / (var_c + var_u + VARIANCE_FLOOR)
    return OracleScore(psi=psi, mu_clean=mu_c, sigma_clean=np.sqrt(var_c),
                       mu_noisy=mu_u, sigma_noisy=np.sqrt(var_u))


def oracle_score(data: Dataset, true_clean_mask: np.ndarray, a: int) -> OracleScore:
    """Fisher channel ranking for category `a` from the true split.

    Operates on clip-level representations; raises UndefinedOracleError when
    the category lacks a clean or a noisy instance.
    """
    labeled = data.noisy_label == a
    clean_ids = np.flatnonzero(labeled & true_clean_mask)
    noisy_ids = np.flatnonzero(labeled & ~true_clean_mask)
    if clean_ids.size == 0 or noisy_ids.size == 0:
        raise UndefinedOracleError(
            f"category {a}: true split has an empty side "
            f"({clean_ids.size} clean / {noisy_ids.size} noisy)")
    x = clip_embeddings(data.features[np.concatenate([clean_ids, noisy_ids])])
    return fisher_ratio(x[:clean_ids.size], x[clean_ids.size:])


def truncate(x: np.ndarray, selection) -> np.ndarray:
    """Keep the selected channels (in stored order) and L2-renormalize.

    A zero vector after truncation becomes the uniform vector 1/sqrt(b).
    """
    selected = selection.selected if isinstance(selection, CategoryScore) else selection
    selected = np.asarray(selected, dtype=np.int64)
    w = np.asarray(x, dtype=np.float64)[..., selected]
    return _normalize_rows(np.atleast_2d(w))[0] if w.ndim == 1 else _normalize_rows(w)


def _normalize_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    dim = rows.shape[-1]
    fallback = np.full(dim, 1.0 / np.sqrt(dim))
    return np.where(norms > 1e-12, rows / np.where(norms > 1e-12, norms, 1.0), fallback)


def clean_prototype(data: Dataset, clean_mask: np.ndarray, selection, a: int) -> np.ndarray:
    """L2-normalized mean truncated feature of the category's estimated clean set.

    With an empty clean set, keeps the half of the category most similar to
    the all-instance mean and averages those instead.
    """
    labeled = np.flatnonzero(data.noisy_label == a)
    if labeled.size == 0:
        raise InsufficientDataError(f"category {a} has no instances")
    x = clip_embeddings(data.features[labeled])
    w = truncate(x, selection)
    clean_rows = np.flatnonzero(clean_mask[labeled])
    if clean_rows.size == 0:
        provisional = _normalize_rows(w.mean(axis=0, keepdims=True))[0]
        sims = w @ provisional
        keep = np.argsort(-sims, kind="stable")[:max(1, (labeled.size + 1) // 2)]
        return _normalize_rows(w[keep].mean(axis=0, keepdims=True))[0]
    return _normalize_rows(w[clean_rows].mean(axis=0, keepdims=True))[0]


def split(data: Dataset, omega: ReferenceSet, b: int, mode: str, xi: float = 0.5,
          method: str = "ct", selections: dict | None = None,
          slice_mode: str = "top") -> SplitEstimate:
    """One noise-detection round over the whole dataset.

    `omega` is the previous round's clean set (the full dataset on round one).
    `selections` overrides the scored channel choice per category (oracle
    mode); `method="pca"` replaces truncation with a per-category projection
    onto `b` principal directions. Categories whose similarity mixture is
    degenerate are marked all-clean for the round and recorded in `warnings`.
    """
    if method not in ("ct", "pca"):
        raise ConfigurationError(f"unknown split method {method!r}")
    M = data.M
    posterior = np.zeros(M)
    similarity = np.zeros(M)
    chosen: dict = {}
    notes: list = []
    x_all = clip_embeddings(data.features)

    for a in range(data.K):
        ids = np.flatnonzero(data.noisy_label == a)
        if ids.size == 0:
            continue
        omega_ids = omega.for_category(a)
        if omega_ids.size == 0:
            omega_ids = ids
        omega_mask = np.zeros(M, dtype=bool)
        omega_mask[omega_ids] = True

        if method == "pca":
            w = _normalize_rows(pca_project(x_all[ids], b))
            proto = _prototype_from_rows(w, omega_mask[ids])
        else:
            if selections is not None and a in selections:
                sel = selections[a]
                sel = sel.selected if isinstance(sel, CategoryScore) else np.asarray(sel)
                chosen[a] = CategoryScore(category=a, counts=np.zeros(data.d, dtype=np.int64),
                                          selected=np.asarray(sel, dtype=np.int64))
            else:
                chosen[a] = category_score(data, omega, a, b, mode, slice_mode)
            w = truncate(x_all[ids], chosen[a])
            proto = clean_prototype(data, omega_mask, chosen[a], a)
        sims = w @ proto
        similarity[ids] = sims

        degenerate = ids.size < 4
        if not degenerate:
            params = gmm.fit(sims)
            degenerate = params.degenerate
        if degenerate:
            posterior[ids] = 0.0
            notes.append(f"category {a}: degenerate similarity mixture, kept all clean")
        else:
            p_noise, _ = gmm.posterior(params, sims)
            posterior[ids] = p_noise

    return SplitEstimate(noise_posterior=posterior, clean_mask=posterior < xi,
                         threshold=float(xi), similarity=similarity,
                         selections=chosen, warnings=notes)


def _prototype_from_rows(w: np.ndarray, member_rows: np.ndarray) -> np.ndarray:
    if member_rows.any():
        return _normalize_rows(w[member_rows].mean(axis=0, keepdims=True))[0]
    provisional = _normalize_rows(w.mean(axis=0, keepdims=True))[0]
    sims = w @ provisional
    keep = np.argsort(-sims, kind="stable")[:max(1, (w.shape[0] + 1) // 2)]
    return _normalize_rows(w[keep].mean(axis=0, keepdims=True))[0]


def kmeans_init_omega(data: Dataset, a: int, seed: int = 0) -> np.ndarray:
    """Binary k-means over the category's clip features; returns the larger
    cluster's ids (ties go to the cluster holding the smallest id)."""
    ids = np.flatnonzero(data.noisy_label == a)
    if ids.size < 2:
        return ids
    x = clip_embeddings(data.features[ids])
    if np.allclose(x, x[0]):
        return ids
    rng = substream(seed, "kmeans", a)
    centers = x[rng.choice(ids.size, size=2, replace=False)].copy()
    assign = np.zeros(ids.size, dtype=np.int64)
    for _ in range(50):
        dists = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new_assign = np.argmin(dists, axis=1)
        for c in range(2):
            members = new_assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                far = np.argmax(dists[:, 1 - c])
                centers[c] = x[far]
                new_assign[far] = c
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    sizes = np.bincount(assign, minlength=2)
    if sizes[0] == sizes[1]:
        winner = int(assign[0])  # ids is ascending, so row 0 holds the smallest id
    else:
        winner = int(np.argmax(sizes))
    return ids[assign == winner]


def pca_project(features: np.ndarray, b: int) -> np.ndarray:
    """Mean-centered projection onto the top-b principal directions.

    Directions come from power iteration with deflation (200 iterations,
    tol 1e-8, re-orthogonalized against earlier directions). Directions past
    the matrix rank are zero-padded with a warning.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientDataError("pca_project needs at least 2 rows")
    n, d = x.shape
    if not 1 <= b <= d:
        raise ConfigurationError(f"b must be in [1, {d}], got {b}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / n
    components = np.zeros((b, d))
    lead = None
    for j in range(b):
        prev = components[:j]
        v = substream(0, "pca-start", j).standard_normal(d)
        if j:
            v -= (prev @ v) @ prev
        norm = np.linalg.norm(v)
        if norm < 1e-15:
            warnings.warn(f"pca_project: rank < {b}, zero-padding from direction {j}")
            break
        v /= norm
        for _ in range(200):
            nv = cov @ v
            if j:
                nv -= (prev @ nv) @ prev
            norm = np.linalg.norm(nv)
            if norm < 1e-15:
                break
            nv /= norm
            if nv @ v < 0:
                nv = -nv
            step = np.linalg.norm(nv - v)
            v = nv
            if step < 1e-8:
                break
        lam = float(v @ cov @ v)
        if lead is None:
            lead = max(lam, 1e-300)
        if lam <= 1e-12 * max(lead, 1.0):
            warnings.warn(f"pca_project: rank < {b}, zero-padding from direction {j}")
            break
        components[j] = v
        cov = cov - lam * np.outer(v, v)
    return xc @ components.T


def export_split_csv(split_est: SplitEstimate, data: Dataset, path,
                     with_truth: bool = True) -> None:
    """Write the split as CSV (instance_id, category, similarity,
    noise_posterior, clean_mask[, true_clean])."""
    truth = data.true_clean_mask() if with_truth else None
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["instance_id", "category", "similarity", "noise_posterior", "clean_mask"]
        if truth is not None:
            header.append("true_clean")
        writer.writerow(header)
        for i in range(data.M):
            row = [i, int(data.noisy_label[i]), f"{split_est.similarity[i]:.9g}",
                   f"{split_est.noise_posterior[i]:.9g}", int(split_est.clean_mask[i])]
            if truth is not None:
                row.append(int(truth[i]))
            writer.writerow(row)


def _check_mode(mode: str) -> None:
    if mode not in SCORE_MODES:
        raise ConfigurationError(f"unknown score mode {mode!r}")
