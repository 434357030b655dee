"""Mixed-noise in-context loss, exact gradients, and the Adam training loop."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .linalg import NonFinite
from .model import VARIANTS, ModelParams, apply_layer, gram, input_tokens
from .tasks import NoiseDistribution, TaskBatch, as_batch, sample_batch, substream


class TrainingDiverged(RuntimeError):
    pass


def icl_loss(params: ModelParams, batch) -> float:
    """Mean squared error of the query prediction over the batch."""
    return loss_and_grad(params, batch, need_grad=False)[0]


def grad(params: ModelParams, batch) -> ModelParams:
    """Exact gradient of :func:`icl_loss`, laid out like ``params``."""
    return loss_and_grad(params, batch)[1]


def loss_and_grad(params: ModelParams, batch, need_grad=True):
    batch = as_batch(batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    n = batch.n
    B = len(batch)
    Z = input_tokens(batch)
    saved = []
    for layer in params.layers:
        Z_next, G, Mid = apply_layer(layer, Z, n)
        saved.append((Z, G, Mid))
        Z = Z_next
    pred = -Z[:, -1, -1]
    if not np.all(np.isfinite(Z)):
        raise NonFinite("forward pass produced NaN or Inf")
    err = pred - batch.y_t
    loss = float(np.mean(err * err))
    if not need_grad:
        return loss, None

    Zbar = np.zeros_like(Z)
    Zbar[:, -1, -1] = -2.0 * err / B
    grads = []
    for layer, (Z, G, Mid) in zip(reversed(params.layers), reversed(saved)):
        # Z_next = Z + Z Mid^T
        Mbar = np.swapaxes(Zbar, 1, 2) @ Z
        Zbar = Zbar + Zbar @ Mid
        layer_grad, Gbar = layer.middle_vjp(G, Mbar)
        Zn = Z[:, :n]
        Zbar[:, :n] += Zn @ (Gbar + np.swapaxes(Gbar, 1, 2))
        grads.append(layer_grad)
    g = ModelParams(params.variant, params.d, grads[::-1], params.heads)
    if not np.all(np.isfinite(g.to_vector())):
        raise NonFinite("gradient contains NaN or Inf")
    return loss, g


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, g):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self):
        return (self.m.copy(), self.v.copy(), self.t)

    def restore(self, state):
        self.m, self.v, self.t = state[0].copy(), state[1].copy(), state[2]


def clip_by_global_norm(g, max_norm):
    norm = float(np.linalg.norm(g))
    if max_norm and norm > max_norm:
        g = g * (max_norm / norm)
    return g, norm


@dataclass
class TrainConfig:
    variant: str = "diag"
    layers: int = 3
    d: int = 10
    n: int = 20
    noise: NoiseDistribution = field(default_factory=lambda: NoiseDistribution.uniform(5.0))
    batch_size: int = 512
    iterations: int = 50_000
    learning_rate: float = 1e-3
    seed: int = 0
    heads: int = 1
    grad_clip: float = 1.0
    init_scale: float = 1e-3
    lr_decay_to: float = 0.01      # final lr as a fraction of the initial one (cosine)
    backoff_factor: float = 0.5
    max_retries: int = 8
    checkpoint_every: int = 500
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseDistribution.from_dict(self.noise)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("layers", "d", "n", "batch_size", "iterations", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n <= self.d:
            raise ValueError("need n > d")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.backoff_factor < 1:
            raise ValueError("backoff_factor must lie in (0, 1)")

    def to_dict(self):
        out = asdict(self)
        out["noise"] = self.noise.to_dict()
        return out

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainReport:
    params: ModelParams
    curve: list            # (iteration, train_loss, lr, grad_norm)
    divergences: list      # (iteration, lr_before, lr_after)
    wallclock: float

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "train_loss", "lr", "grad_norm"])
            for row in self.curve:
                writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


def _schedule(config: TrainConfig, it, base_lr):
    if config.lr_decay_to == 1.0:
        return base_lr
    frac = it / max(config.iterations - 1, 1)
    scale = config.lr_decay_to + (1 - config.lr_decay_to) * 0.5 * (1 + np.cos(np.pi * frac))
    return base_lr * scale


def train(config: TrainConfig, callback=None) -> TrainReport:
    """Adam on fresh batches drawn from the ``(seed, iteration)`` substreams.

    A non-finite loss or gradient rolls back to the last checkpoint and scales
    the learning rate by ``backoff_factor``; after ``max_retries`` rollbacks
    :class:`TrainingDiverged` is raised.
    """
    start = time.perf_counter()
    init_rng = substream(config.seed, 0)
    params = ModelParams.init(config.variant, config.d, config.layers, init_rng,
                              config.init_scale, config.heads)
    theta = params.to_vector()
    opt = Adam(theta.size, config.learning_rate)
    base_lr = config.learning_rate
    checkpoint = (0, theta.copy(), opt.state())
    curve = []
    divergences = []
    it = 0
    while it < config.iterations:
        batch = sample_batch(substream(config.seed, 1, it), config.batch_size,
                             config.d, config.n, config.noise)
        try:
            loss, g = loss_and_grad(params.with_vector(theta), batch)
            gvec, gnorm = clip_by_global_norm(g.to_vector(), config.grad_clip)
            opt.lr = _schedule(config, it, base_lr)
            new_theta = opt.step(theta, gvec)
            if not np.all(np.isfinite(new_theta)):
                raise NonFinite("parameters became non-finite")
        except NonFinite:
            if len(divergences) >= config.max_retries:
                raise TrainingDiverged(f"diverged {len(divergences)} times; last at iteration {it}")
            new_base = base_lr * config.backoff_factor
            divergences.append((it, base_lr, new_base))
            base_lr = new_base
            it, theta, state = checkpoint
            theta = theta.copy()
            opt.restore(state)
            curve = [row for row in curve if row[0] < it]
            continue
        theta = new_theta
        if it % config.log_every == 0 or it == config.iterations - 1:
            curve.append((it, loss, opt.lr, gnorm))
            if callback is not None:
                callback(it, loss)
        it += 1
        if it % config.checkpoint_every == 0:
            checkpoint = (it, theta.copy(), opt.state())
    final = params.with_vector(theta)
    final.meta = {"seed": config.seed, "training_config_hash": config.digest()}
    return TrainReport(final, curve, divergences, time.perf_counter() - start)
