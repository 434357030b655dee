"""Noisy linear-regression episodes for in-context learning.

An episode holds ``n`` labelled examples ``(x_i, y_i)`` sharing one weight
vector and one noise level, plus a query ``x_t`` whose clean target ``y_t`` is
kept aside. Batches of episodes are stored as stacked arrays; a single
:class:`TaskSequence` is the unbatched view.

Random streams are keyed by ``(seed, index)`` through ``numpy``'s
``SeedSequence`` so that an evaluation set is the same bytes no matter which
model consumes it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import linalg

OLS_JITTER = 1e-10


class DegenerateDesign(linalg.NotPositiveDefinite):
    """The design matrix of an episode is numerically singular."""


@dataclass(frozen=True)
class NoiseDistribution:
    """Per-sequence label noise level ``sigma``.

    ``kind`` is one of ``"fixed"``, ``"uniform"`` (``sigma ~ U(0, sigma_max)``)
    or ``"categorical"`` (uniform over ``levels``).
    """

    kind: str
    sigma: float = 0.0
    sigma_max: float = 0.0
    levels: tuple = ()

    def __post_init__(self):
        if self.kind == "fixed":
            if not self.sigma >= 0:
                raise ValueError("fixed noise needs sigma >= 0")
        elif self.kind == "uniform":
            if not self.sigma_max > 0:
                raise ValueError("uniform noise needs sigma_max > 0")
        elif self.kind == "categorical":
            if not self.levels or any(not s >= 0 for s in self.levels):
                raise ValueError("categorical noise needs non-empty levels >= 0")
            object.__setattr__(self, "levels", tuple(float(s) for s in self.levels))
        else:
            raise ValueError(f"unknown noise kind {self.kind!r}")

    @classmethod
    def fixed(cls, sigma):
        return cls("fixed", sigma=float(sigma))

    @classmethod
    def uniform(cls, sigma_max):
        return cls("uniform", sigma_max=float(sigma_max))

    @classmethod
    def categorical(cls, levels):
        return cls("categorical", levels=tuple(levels))

    @property
    def upper(self):
        """Largest noise level the distribution can produce."""
        if self.kind == "fixed":
            return self.sigma
        if self.kind == "uniform":
            return self.sigma_max
        return max(self.levels)

    def contains(self, sigma):
        """Whether ``sigma`` lies in the support (used to mark in-distribution)."""
        if self.kind == "fixed":
            return bool(np.isclose(sigma, self.sigma))
        if self.kind == "uniform":
            return 0.0 <= sigma <= self.sigma_max
        return any(np.isclose(sigma, s) for s in self.levels)

    def draw(self, rng, size=None):
        if self.kind == "fixed":
            return np.full(size, self.sigma) if size is not None else self.sigma
        if self.kind == "uniform":
            return rng.uniform(0.0, self.sigma_max, size)
        return rng.choice(np.asarray(self.levels), size)

    @property
    def label(self):
        if self.kind == "fixed":
            return f"fixed{self.sigma:g}"
        if self.kind == "uniform":
            return f"uniform{self.sigma_max:g}"
        return "cat" + "-".join(f"{s:g}" for s in self.levels)

    def to_dict(self):
        if self.kind == "fixed":
            return {"kind": "fixed", "sigma": self.sigma}
        if self.kind == "uniform":
            return {"kind": "uniform", "sigma_max": self.sigma_max}
        return {"kind": "categorical", "levels": list(self.levels)}

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        kind = data.pop("kind")
        if kind == "categorical":
            data["levels"] = tuple(data["levels"])
        return cls(kind, **data)


@dataclass
class TaskSequence:
    """One episode: ``x`` is (n, d), ``y`` is (n,), ``x_t`` and ``w_true`` are (d,)."""

    x: np.ndarray
    y: np.ndarray
    x_t: np.ndarray
    y_t: float
    w_true: np.ndarray
    sigma: float

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    def to_json(self):
        return json.dumps({
            "x": self.x.tolist(), "y": self.y.tolist(), "x_t": self.x_t.tolist(),
            "y_t": float(self.y_t), "w_true": self.w_true.tolist(), "sigma": float(self.sigma),
        })

    @classmethod
    def from_json(cls, line):
        data = json.loads(line)
        return cls(np.array(data["x"], dtype=np.float64).reshape(len(data["y"]), -1),
                   np.array(data["y"], dtype=np.float64),
                   np.array(data["x_t"], dtype=np.float64), float(data["y_t"]),
                   np.array(data["w_true"], dtype=np.float64), float(data["sigma"]))


@dataclass
class TaskBatch:
    """A stack of episodes with a leading batch axis on every field."""

    x: np.ndarray       # (B, n, d)
    y: np.ndarray       # (B, n)
    x_t: np.ndarray     # (B, d)
    y_t: np.ndarray     # (B,)
    w_true: np.ndarray  # (B, d)
    sigma: np.ndarray   # (B,)

    def __len__(self):
        return self.x.shape[0]

    @property
    def n(self):
        return self.x.shape[1]

    @property
    def d(self):
        return self.x.shape[2]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return TaskSequence(self.x[idx], self.y[idx], self.x_t[idx],
                                float(self.y_t[idx]), self.w_true[idx], float(self.sigma[idx]))
        return TaskBatch(self.x[idx], self.y[idx], self.x_t[idx], self.y_t[idx],
                         self.w_true[idx], self.sigma[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def stack(cls, seqs: Sequence[TaskSequence]):
        seqs = list(seqs)
        return cls(np.stack([s.x for s in seqs]), np.stack([s.y for s in seqs]),
                   np.stack([s.x_t for s in seqs]), np.array([s.y_t for s in seqs]),
                   np.stack([s.w_true for s in seqs]), np.array([s.sigma for s in seqs]))

    @classmethod
    def concat(cls, batches: Iterable["TaskBatch"]):
        batches = list(batches)
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("x", "y", "x_t", "y_t", "w_true", "sigma")))


def as_batch(tasks):
    if isinstance(tasks, TaskBatch):
        return tasks
    if isinstance(tasks, TaskSequence):
        return TaskBatch.stack([tasks])
    return TaskBatch.stack(tasks)


def substream(seed, *index):
    """Generator for the ``(seed, *index)`` substream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, index)]))


def sample_task(rng, d, n, noise: NoiseDistribution) -> TaskSequence:
    """Draw one episode from ``rng``."""
    return sample_batch(rng, 1, d, n, noise)[0]


def sample_batch(rng, size, d, n, noise: NoiseDistribution) -> TaskBatch:
    if d < 1 or n < 1:
        raise ValueError("need d >= 1 and n >= 1")
    sigma = np.asarray(noise.draw(rng, size), dtype=np.float64)
    w = rng.standard_normal((size, d))
    x = rng.standard_normal((size, n, d))
    x_t = rng.standard_normal((size, d))
    xi = rng.standard_normal((size, n))
    y = np.einsum("bnd,bd->bn", x, w) + sigma[:, None] * xi
    y_t = np.einsum("bd,bd->b", x_t, w)
    return TaskBatch(x, y, x_t, y_t, w, sigma)


def make_eval_set(seed, size, d, n, noise: NoiseDistribution, block=10_000) -> TaskBatch:
    """Deterministic evaluation set assembled from ``(seed, block)`` substreams.

    The content depends only on ``(seed, size, d, n, noise, block)``.
    """
    parts = []
    for k, start in enumerate(range(0, size, block)):
        parts.append(sample_batch(substream(seed, k), min(block, size - start), d, n, noise))
    return TaskBatch.concat(parts)


def dump_jsonl(tasks, path):
    with open(path, "w") as fh:
        for seq in as_batch(tasks):
            fh.write(seq.to_json() + "\n")


def load_jsonl(path):
    with open(path) as fh:
        return [TaskSequence.from_json(line) for line in fh if line.strip()]


@dataclass
class SequenceStats:
    Sigma: np.ndarray
    alpha: np.ndarray
    lam: float
    w_star: np.ndarray
    residuals: np.ndarray
    rho: float


def compute_stats(seq: TaskSequence) -> SequenceStats:
    """Gram matrix, moments, OLS fit and residuals of one episode."""
    if seq.n <= seq.d:
        raise ValueError(f"need n > d for a unique OLS fit (n={seq.n}, d={seq.d})")
    Sigma = seq.x.T @ seq.x
    alpha = seq.x.T @ seq.y
    try:
        w_star = linalg.cholesky_solve(Sigma, alpha, jitter=OLS_JITTER)
    except linalg.NotPositiveDefinite as exc:
        raise DegenerateDesign(str(exc)) from exc
    r = seq.y - seq.x @ w_star
    return SequenceStats(Sigma, alpha, float(seq.y @ seq.y), w_star, r, float(r @ r))


def batch_stats(batch: TaskBatch):
    """Vectorized ``(Sigma, alpha, lam)`` for a batch."""
    Sigma = np.einsum("bni,bnj->bij", batch.x, batch.x)
    alpha = np.einsum("bni,bn->bi", batch.x, batch.y)
    lam = np.einsum("bn,bn->b", batch.y, batch.y)
    return Sigma, alpha, lam
