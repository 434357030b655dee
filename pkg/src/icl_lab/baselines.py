"""Ridge-regression baselines and the oracle used to adjust losses.

Every predictor here maps a :class:`TaskBatch` to an array of query
predictions. Evaluation losses are half squared errors, the convention in
which the reference tables are reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .linalg import NonFinite
from .tasks import DegenerateDesign, TaskBatch, TaskSequence, as_batch, batch_stats, compute_stats

EVAL_SCALE = 0.5


def eval_loss(pred, y_t):
    """Half mean squared error."""
    err = np.asarray(pred) - np.asarray(y_t)
    return EVAL_SCALE * float(np.mean(err * err))


def ridge_weights(seq: TaskSequence, sigma2):
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    st = compute_stats(seq) if sigma2 == 0 else None
    if st is not None:
        return st.w_star
    Sigma = seq.x.T @ seq.x
    alpha = seq.x.T @ seq.y
    try:
        return linalg.cholesky_solve(Sigma + sigma2 * np.eye(seq.d), alpha)
    except linalg.NotPositiveDefinite as exc:
        raise DegenerateDesign(str(exc)) from exc


def ridge_predict(seq: TaskSequence, sigma2) -> float:
    """Query prediction of the ridge solution ``(Sigma + sigma2 I)^-1 alpha``."""
    return float(ridge_weights(seq, sigma2) @ seq.x_t)


def adarr_estimate(seq: TaskSequence) -> float:
    """Unbiased residual variance ``rho / (n - d)``, floored at zero."""
    st = compute_stats(seq)
    return max(0.0, st.rho / (seq.n - seq.d))


class RidgeCache:
    """Per-sequence spectra of ``Sigma`` so ridge predictions cost O(d) per sigma2.

    With ``Sigma = V diag(e) V^T`` the ridge prediction is
    ``sum_k (V^T x_t)_k (V^T alpha)_k / (e_k + sigma2)``.
    """

    def __init__(self, batch: TaskBatch):
        self.batch = batch
        Sigma, alpha, lam = batch_stats(batch)
        e, V = linalg.batched_eigh(Sigma)
        if np.any(e <= 0):
            raise DegenerateDesign("singular design in batch")
        self.e = e
        self.va = np.einsum("bij,bi->bj", V, alpha)
        self.vx = np.einsum("bij,bi->bj", V, batch.x_t)
        n, d = batch.n, batch.d
        # rho = lam - alpha^T Sigma^-1 alpha
        rho = lam - np.sum(self.va ** 2 / e, axis=1)
        self.rho = np.maximum(rho, 0.0)
        self.sigma2_est = self.rho / (n - d) if n > d else np.full(len(batch), np.inf)
        self._num = self.va * self.vx

    def predict(self, sigma2):
        sigma2 = np.asarray(sigma2, dtype=np.float64)
        if sigma2.ndim == 0:
            return np.sum(self._num / (self.e + sigma2), axis=1)
        return np.sum(self._num / (self.e + sigma2[:, None]), axis=1)

    def sq_err(self, sigma2):
        err = self.predict(sigma2) - self.batch.y_t
        return err * err


def oracle_predict(batch: TaskBatch):
    """Ridge with the true per-sequence noise variance."""
    Sigma, alpha, _ = batch_stats(batch)
    w = linalg.batched_ridge_solve(Sigma, alpha, batch.sigma ** 2)
    return np.einsum("bd,bd->b", w, batch.x_t)


def oracle_loss(eval_set) -> float:
    batch = as_batch(eval_set)
    return eval_loss(oracle_predict(batch), batch.y_t)


@dataclass
class BaselineSpec:
    """``kind`` is one of oracle, const_rr, ada_rr, tuned_rr, iterative_ada_rr."""

    kind: str
    sigma2: float = 0.0
    threshold: float = math.inf
    multiplier: float = 1.0
    steps: int = 100
    step_size: float = 0.01
    extra: dict = field(default_factory=dict)

    KINDS = ("oracle", "const_rr", "ada_rr", "tuned_rr", "iterative_ada_rr")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown baseline {self.kind!r}")
        for name in ("sigma2", "threshold", "multiplier", "step_size"):
            value = getattr(self, name)
            if math.isnan(value) or value < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def name(self):
        return {"oracle": "Oracle", "const_rr": "ConstRR", "ada_rr": "AdaRR",
                "tuned_rr": "TunedRR", "iterative_ada_rr": "IterAdaRR"}[self.kind]

    def tuned_params(self):
        if self.kind == "const_rr":
            return {"sigma2": self.sigma2}
        if self.kind == "tuned_rr":
            return {"threshold": self.threshold, "multiplier": self.multiplier}
        if self.kind == "iterative_ada_rr":
            return {"steps": self.steps, "step_size": self.step_size}
        return {}

    def predict(self, batch: TaskBatch):
        batch = as_batch(batch)
        if self.kind == "oracle":
            return oracle_predict(batch)
        if self.kind == "iterative_ada_rr":
            return iterative_adarr_batch(batch, self.steps, self.step_size)
        Sigma, alpha, _ = batch_stats(batch)
        if self.kind == "const_rr":
            sigma2 = np.full(len(batch), self.sigma2)
        else:
            sigma2 = adarr_sigma2_batch(batch)
            if self.kind == "tuned_rr":
                sigma2 = np.minimum(self.threshold, self.multiplier * sigma2)
        w = linalg.batched_ridge_solve(Sigma, alpha, sigma2)
        return np.einsum("bd,bd->b", w, batch.x_t)

    __call__ = predict


def adarr_sigma2_batch(batch: TaskBatch):
    n, d = batch.n, batch.d
    Sigma, alpha, _ = batch_stats(batch)
    w = linalg.batched_ridge_solve(Sigma, alpha, 0.0)
    r = batch.y - np.einsum("bnd,bd->bn", batch.x, w)
    return np.maximum(0.0, np.sum(r * r, axis=1) / (n - d))


def _golden(f, lo, hi, iters=60):
    inv_phi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def const_rr_grid(sigma_max, points=200):
    upper = (sigma_max + 1.0) ** 2
    return np.concatenate([[0.0], np.logspace(-4, math.log10(upper), points - 1)])


def tune_const_rr(tune_set, sigma_max=None, points=200) -> float:
    """Constant sigma2 minimizing the evaluation loss on ``tune_set``.

    A log grid over ``[0, (sigma_max+1)^2]`` is followed by golden-section
    refinement between the neighbours of the best grid point; ties go to the
    smaller value.
    """
    batch = as_batch(tune_set)
    cache = RidgeCache(batch)
    if sigma_max is None:
        sigma_max = float(np.max(batch.sigma))
    grid = const_rr_grid(sigma_max, points)
    losses = np.array([cache.sq_err(s).mean() for s in grid])
    k = int(np.argmin(losses))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    if hi > lo:
        best, best_loss = _golden(lambda s: cache.sq_err(s).mean(), lo, hi)
        # only move off the grid for a real improvement, so exact ties and
        # round-off keep the smaller grid value
        floor = 1e-12 * float(np.mean(batch.y_t ** 2))
        if best_loss < losses[k] - floor:
            return float(best)
    return float(grid[k])


def _tuned_loss(cache, est, threshold, multiplier):
    return cache.sq_err(np.minimum(threshold, multiplier * est)).mean()


def tune_tuned_rr(tune_set, sigma_max=None, points=50):
    """Threshold and multiplier for the capped noise estimate ``min(t, m*est)``.

    A ``points x points`` grid (which contains ``t = inf, m = 1``, i.e. AdaRR)
    is searched, then refined once on a finer grid spanning the neighbours of
    the best cell. Ties go to the smaller threshold, then smaller multiplier.
    """
    batch = as_batch(tune_set)
    cache = RidgeCache(batch)
    est = cache.sigma2_est
    if sigma_max is None:
        sigma_max = float(np.max(batch.sigma))
    upper = 4.0 * (sigma_max + 1.0) ** 2
    thresholds = np.concatenate([np.logspace(-2, math.log10(upper), points - 1), [math.inf]])
    multipliers = np.unique(np.concatenate([np.linspace(0.05, 2.5, points - 1), [1.0]]))

    def search(ts, ms):
        best = (math.inf, math.inf, math.inf)
        for t in ts:
            for m in ms:
                loss = _tuned_loss(cache, est, t, m)
                if loss < best[0]:
                    best = (loss, t, m)
        return best

    loss, t, m = search(thresholds, multipliers)
    i = int(np.searchsorted(thresholds, t))
    j = int(np.searchsorted(multipliers, m))
    m_lo, m_hi = multipliers[max(j - 1, 0)], multipliers[min(j + 1, len(multipliers) - 1)]
    fine_m = np.linspace(m_lo, m_hi, points)
    if math.isinf(t):
        fine_t = np.array([math.inf])
    else:
        t_lo = thresholds[max(i - 1, 0)]
        t_hi = thresholds[min(i + 1, len(thresholds) - 2)]
        fine_t = np.linspace(t_lo, t_hi, points)
    fine = search(fine_t, fine_m)
    if fine[0] < loss:
        loss, t, m = fine
    return float(t), float(m)


def iterative_adarr(seq: TaskSequence, steps, step_size) -> float:
    """AdaRR without matrix inversion.

    ``steps`` gradient steps on the least-squares objective give fitted values
    for the noise estimate; ``steps`` more on the ridge objective with that
    estimate give the weights.
    """
    return float(iterative_adarr_batch(as_batch(seq), steps, step_size)[0])


def _gd_solve(Sigma, alpha, shift, steps, step_size):
    """``steps`` gradient steps on ``0.5 w^T (Sigma + shift I) w - alpha^T w`` from zero.

    For a convergent step size the update norms never grow, so growth between
    the first and last update flags divergence even while values are finite.
    """
    w = np.zeros_like(alpha)
    first = last = None
    for _ in range(steps):
        delta = step_size * (alpha - np.einsum("bij,bj->bi", Sigma, w) - shift[:, None] * w)
        w = w + delta
        last = np.linalg.norm(delta, axis=1)
        if first is None:
            first = last
    if steps and (not np.all(np.isfinite(w)) or np.any(last > first * (1 + 1e-9) + 1e-300)):
        raise NonFinite("iterative AdaRR diverged; reduce step_size")
    return w


def iterative_adarr_batch(batch: TaskBatch, steps, step_size):
    if steps < 0:
        raise ValueError("steps must be >= 0")
    n, d = batch.n, batch.d
    Sigma, alpha, _ = batch_stats(batch)
    zero = np.zeros(len(batch))
    with np.errstate(over="ignore", invalid="ignore"):
        w = _gd_solve(Sigma, alpha, zero, steps, step_size)
        r = batch.y - np.einsum("bnd,bd->bn", batch.x, w)
        sigma2 = np.maximum(0.0, np.sum(r * r, axis=1) / (n - d))
        v = _gd_solve(Sigma, alpha, sigma2, steps, step_size)
    return np.einsum("bd,bd->b", v, batch.x_t)
