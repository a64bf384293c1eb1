"""Two-component 1-D Gaussian mixture fitting by EM.

Produces the per-point noise posteriors that the clean/noisy splitter
thresholds. Fitting is fully deterministic: means start at the 25th/75th
percentiles, both variances at the overall variance, weights at 0.5/0.5.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateModelError, InsufficientDataError

VARIANCE_FLOOR = 1e-6
LL_TOL = 1e-6
MAX_ITER = 100
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GmmParams:
    """Fitted mixture, components sorted by mean ascending.

    `degenerate` is set when the two components collapsed onto each other
    (|mu2 - mu1| < 1e-3) or one of them starved (weight < 0.02); callers must
    not ask a degenerate fit for posteriors.
    """

    weights: tuple[float, float]
    means: tuple[float, float]
    variances: tuple[float, float]
    degenerate: bool
    log_likelihoods: tuple[float, ...] = field(repr=False, default=())

    @property
    def n_iter(self) -> int:
        return len(self.log_likelihoods)


def _log_pdf(values, mean, var):
    return -0.5 * (_LOG_2PI + np.log(var) + (values - mean) ** 2 / var)


def _log_joint(values, weights, means, variances):
    # (n, 2) log of weight_k * N(value | mean_k, var_k)
    out = np.empty((values.size, 2))
    for k in range(2):
        out[:, k] = np.log(weights[k]) + _log_pdf(values, means[k], variances[k])
    return out


def fit(values) -> GmmParams:
    """Fit the 2-component mixture to a list of reals (needs >= 4 points)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 4:
        raise InsufficientDataError(f"GMM fit needs at least 4 points, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise ValueError("GMM fit requires finite values")

    means = np.percentile(values, [25.0, 75.0]).astype(np.float64)
    overall_var = max(float(np.var(values)), VARIANCE_FLOOR)
    variances = np.array([overall_var, overall_var])
    weights = np.array([0.5, 0.5])

    history: list[float] = []
    prev_ll = -np.inf
    for _ in range(MAX_ITER):
        log_joint = _log_joint(values, weights, means, variances)
        log_norm = _logsumexp_rows(log_joint)
        ll = float(np.sum(log_norm))
        history.append(ll)

        resp = np.exp(log_joint - log_norm[:, None])  # (n, 2)
        counts = resp.sum(axis=0)
        # A fully starved component keeps its parameters for this round.
        for k in range(2):
            if counts[k] > 0:
                means[k] = float(resp[:, k] @ values) / counts[k]
                variances[k] = max(
                    float(resp[:, k] @ (values - means[k]) ** 2) / counts[k],
                    VARIANCE_FLOOR,
                )
        weights = counts / values.size
        weights = np.clip(weights, 1e-12, None)
        weights = weights / weights.sum()

        if ll - prev_ll < LL_TOL and np.isfinite(prev_ll):
            break
        prev_ll = ll

    order = np.argsort(means, kind="stable")
    weights, means, variances = weights[order], means[order], variances[order]
    degenerate = bool(abs(means[1] - means[0]) < 1e-3 or weights.min() < 0.02)
    return GmmParams(
        weights=(float(weights[0]), float(weights[1])),
        means=(float(means[0]), float(means[1])),
        variances=(float(variances[0]), float(variances[1])),
        degenerate=degenerate,
        log_likelihoods=tuple(history),
    )


def posterior(params: GmmParams, value) -> tuple:
    """Bayes posterior (p_low, p_high) of the two components at `value`.

    Component "low" is the one with the smaller mean. Accepts a scalar or an
    array; the two outputs always sum to 1 elementwise.
    """
    if params.degenerate:
        raise DegenerateModelError("posterior undefined for a degenerate mixture")
    values = np.asarray(value, dtype=np.float64)
    log_joint = _log_joint(values.ravel(), np.array(params.weights),
                           np.array(params.means), np.array(params.variances))
    post = np.exp(log_joint - _logsumexp_rows(log_joint)[:, None])
    p_low = post[:, 0].reshape(values.shape)
    p_high = post[:, 1].reshape(values.shape)
    if values.ndim == 0:
        return float(p_low), float(p_high)
    return p_low, p_high


def _logsumexp_rows(log_values):
    peak = log_values.max(axis=1)
    return peak + np.log(np.exp(log_values - peak[:, None]).sum(axis=1))
