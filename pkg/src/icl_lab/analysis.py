"""Reverse-engineering tools for trained and constructed linear transformers.

* The implicit linear model ``(M, u, w, a)`` carried by every layer, computed
  by the four-term recursion and checked against the real token states.
* The diagonal-model closed form of that recursion (with the residual energy
  ``rho``), which exposes the momentum-like structure.
* Constructions: a GD++ schedule that solves least squares in
  ``O(log kappa + log log 1/eps)`` layers, and a two-layer model whose
  ``w_yy`` rescaling reproduces ridge regression for two noise levels.
* Evaluation helpers: adjusted loss, per-variance profiles, per-layer readouts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .baselines import EVAL_SCALE, BaselineSpec, oracle_predict
from .model import DiagLayer, GDppLayer, ModelParams, forward, gram, input_tokens, layer_predictions
from .model import predict as model_predict
from .model import single_head_constraint_residual
from .tasks import (NoiseDistribution, TaskBatch, TaskSequence, as_batch, compute_stats,
                    make_eval_set, sample_task, substream)


class InvalidRange(ValueError):
    pass


class SingularSystem(ValueError):
    pass


# Implicit linear model -----------------------------------------------------

@dataclass
class ImplicitState:
    M: np.ndarray
    u: np.ndarray
    w: np.ndarray
    a: float

    def to_json(self):
        return {"M": self.M.tolist(), "u": self.u.tolist(), "w": self.w.tolist(), "a": self.a}


@dataclass
class MiddleBlock:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    dscalar: float


def middle_block(layer, tokens, n) -> MiddleBlock:
    """Blocks of ``sum_k P_k (sum_j e_j e_j^T) Q_k`` for one episode's tokens."""
    Mid = layer.middle(gram(tokens[None], n))[0]
    d = Mid.shape[0] - 1
    return MiddleBlock(Mid[:d, :d], Mid[:d, d], Mid[d, :d], float(Mid[d, d]))


def implicit_step(state: ImplicitState, blk: MiddleBlock) -> ImplicitState:
    # x' = (I + A) x + b y with y = a y0 - <w, x0>, hence the minus on b w^T
    I = np.eye(len(state.u))
    return ImplicitState(
        M=(I + blk.A) @ state.M - np.outer(blk.b, state.w),
        u=(I + blk.A) @ state.u + state.a * blk.b,
        w=(1 + blk.dscalar) * state.w - state.M.T @ blk.c,
        a=(1 + blk.dscalar) * state.a + float(blk.c @ state.u),
    )


def initial_state(d) -> ImplicitState:
    return ImplicitState(np.eye(d), np.zeros(d), np.zeros(d), 1.0)


def implicit_trajectory(params: ModelParams, seq: TaskSequence):
    """``[state_0, ..., state_L]`` with each middle block read off the true tokens."""
    _, trace = forward(params, seq, keep_trace=True)
    states = [initial_state(seq.d)]
    for layer, tokens in zip(params.layers, trace):
        states.append(implicit_step(states[-1], middle_block(layer, tokens, seq.n)))
    for s in states:
        linalg.check_finite(s.M, "implicit M")
        linalg.check_finite(s.w, "implicit w")
    return states


def reconstruct_tokens(states, seq: TaskSequence):
    """Token arrays ``(n+1, d+1)`` for every layer, rebuilt from the raw inputs."""
    out = []
    for s in states:
        Z = np.empty((seq.n + 1, seq.d + 1))
        Z[:seq.n, :seq.d] = seq.x @ s.M.T + np.outer(seq.y, s.u)
        Z[:seq.n, seq.d] = s.a * seq.y - seq.x @ s.w
        Z[seq.n, :seq.d] = s.M @ seq.x_t
        Z[seq.n, seq.d] = -float(s.w @ seq.x_t)
        out.append(Z)
    return out


def reconstruction_error(params: ModelParams, seq: TaskSequence) -> float:
    """Largest token discrepancy, relative to the largest token entry per layer."""
    _, trace = forward(params, seq, keep_trace=True)
    rebuilt = reconstruct_tokens(implicit_trajectory(params, seq), seq)
    err = 0.0
    for Z, R in zip(trace, rebuilt):
        err = max(err, float(np.max(np.abs(Z - R)) / max(np.max(np.abs(Z)), 1e-300)))
    return err


def dump_trajectory(states, path):
    with open(path, "w") as fh:
        json.dump([s.to_json() for s in states], fh)


def diag_implicit_update_check(params: ModelParams, seq: TaskSequence) -> float:
    """Max deviation between the diagonal closed-form (u, w) updates and the
    generic recursion, relative to the size of the generic values."""
    if params.variant == "gdpp":
        params = ModelParams("diag", params.d, [l.as_diag() for l in params.layers])
    if params.variant != "diag":
        raise ValueError("closed-form check applies to diagonal models")
    st = compute_stats(seq)
    Sigma, w_star, rho = st.Sigma, st.w_star, st.rho
    _, trace = forward(params, seq, keep_trace=True)
    states = implicit_trajectory(params, seq)
    dev = 0.0
    for layer, tokens, s, nxt in zip(params.layers, trace, states, states[1:]):
        Xl = tokens[:seq.n, :seq.d]
        yl = tokens[:seq.n, seq.d]
        Sigma_l = Xl.T @ Xl
        lam_l = float(yl @ yl)
        # x_i^l = (M + u w*^T) x_i + r_i u, since y_i = <w*, x_i> + r_i
        K = s.M + np.outer(s.u, w_star)
        grad_term = K @ Sigma @ (s.a * w_star - s.w)
        u_next = ((1 + layer.w_xy * s.a ** 2 * rho) * s.u + layer.w_xx * Sigma_l @ s.u
                  + s.a * layer.w_xy * grad_term)
        w_next = ((1 + layer.w_yy * lam_l) * s.w - layer.w_yx * s.M.T @ grad_term
                  - s.a * rho * layer.w_yx * s.M.T @ s.u)
        scale = max(np.max(np.abs(nxt.u)), np.max(np.abs(nxt.w)), 1.0)
        dev = max(dev, float(np.max(np.abs(u_next - nxt.u)) / scale),
                  float(np.max(np.abs(w_next - nxt.w)) / scale))
    return dev


def random_instance(rng, variant, max_layers=7, heads=None, max_d=5):
    """A random ``(params, seq)`` pair for exercising the representation results.

    Parameters are scaled by the size of the Gram matrix so that ``L`` stacked
    layers stay at moderate magnitude rather than overflowing (each layer is
    cubic in the tokens).
    """
    d = int(rng.integers(1, max_d + 1))
    n = d + int(rng.integers(1, 10))
    sigma = float(rng.uniform(0, 2))
    seq = sample_task(rng, d, n, NoiseDistribution.fixed(sigma))
    L = int(rng.integers(1, max_layers + 1))
    if heads is None:
        heads = int(rng.integers(1, 4)) if variant == "full" else 1
    scale = 0.5 / (n * (d + 1 + sigma ** 2) * heads)
    if variant == "full":
        # P and Q multiply, so each gets roughly the square root
        scale = math.sqrt(scale / (d + 1))
    return ModelParams.init(variant, d, L, rng, scale, heads), seq


# Quadratic probe -----------------------------------------------------------

def quadratic_probe(params: ModelParams, n=2000, d=10, trials=20, seed=0, target="quadratic"):
    """Cosine similarity between each layer's example labels and a target.

    Episodes are noise free (``y = w^T x``). ``target="quadratic"`` compares
    with ``x_i(1)^2``; ``target="linear"`` with ``<w, x_i>``. Returns an array
    of shape ``(trials, L)``.
    """
    out = np.empty((trials, params.L))
    for t in range(trials):
        rng = substream(seed, t)
        w = rng.standard_normal(d)
        x = rng.standard_normal((n, d))
        x_t = rng.standard_normal(d)
        seq = TaskSequence(x, x @ w, x_t, float(x_t @ w), w, 0.0)
        y_star = x[:, 0] ** 2 if target == "quadratic" else x @ w
        Z = input_tokens(as_batch(seq))
        for l, layer in enumerate(params.layers):
            Z = Z + Z @ np.swapaxes(layer.middle(gram(Z, n)), 1, 2)
            # cosine is scale free; renormalize so deep random models stay finite
            Z = Z / np.max(np.abs(Z))
            y = Z[0, :n, d]
            out[t, l] = abs(y @ y_star) / (np.linalg.norm(y) * np.linalg.norm(y_star))
    return out


# GD++ second-order construction ------------------------------------------

def condition_map(lo, hi):
    """One preconditioning step with ``gamma = 1/(3 hi)`` on the interval [lo, hi].

    ``f(x) = x (1 - gamma x)^2`` is nondecreasing on ``[0, hi]`` for this
    gamma, so the interval endpoints map to the new endpoints.
    """
    gamma = 1.0 / (3.0 * hi)
    return lo * (1 - gamma * lo) ** 2, hi * (1 - gamma * hi) ** 2, gamma


def condition_ratio_after(kappa):
    """Condition number after one step: ``kappa (4/9) / (1 - 1/(3 kappa))^2``."""
    return kappa * (4.0 / 9.0) / (1.0 - 1.0 / (3.0 * kappa)) ** 2


@dataclass
class GDppSchedule:
    """Per layer ``(gamma, eta)``: the layer uses ``w_xx = -gamma, w_yx = -eta``."""

    steps: list = field(default_factory=list)
    kappa: float = 1.0
    eps: float = 0.0

    def __len__(self):
        return len(self.steps)

    def to_params(self, d) -> ModelParams:
        return ModelParams("gdpp", d, [GDppLayer(-g, -e) for g, e in self.steps])


def gdpp_schedule(kappa, eps, lower=1.0) -> GDppSchedule:
    """Layers that precondition until the spectrum on ``[lower, lower*kappa]``
    has condition number ``<= 1 + eps/(2 kappa)``, then take one gradient step
    of size ``1/lower'`` (the reciprocal of the shrunken lower edge)."""
    if not kappa >= 1:
        raise InvalidRange("kappa must be >= 1")
    if not 0 < eps < 1:
        raise InvalidRange("eps must lie in (0, 1)")
    if not lower > 0:
        raise InvalidRange("lower eigenvalue must be positive")
    lo, hi = lower, lower * kappa
    target = 1 + eps / (2 * kappa)
    steps = []
    while hi / lo > target:
        lo, hi, gamma = condition_map(lo, hi)
        steps.append((gamma, 0.0))
        if len(steps) > 10_000:
            raise InvalidRange("schedule did not terminate")
    steps.append((0.0, 1.0 / lo))
    return GDppSchedule(steps, kappa, eps)


def gdpp_step_bound(kappa, eps):
    """Layer budget ``4 (log2 kappa + log2 log2 (1/eps) + 2)``."""
    return 4 * (math.log2(kappa) + math.log2(math.log2(1 / eps)) + 2)


def run_gdpp_solver(seq: TaskSequence, eps):
    """Least-squares query prediction from a constructed GD++ network.

    Returns ``(prediction, steps_used)``.
    """
    lo, hi = linalg.sym_eig_range(seq.x.T @ seq.x)
    if not lo > 0:
        raise linalg.NotPositiveDefinite("Sigma is singular")
    schedule = gdpp_schedule(hi / lo, eps, lo)
    pred, _ = forward(schedule.to_params(seq.d), seq)
    return pred, len(schedule)


# Adaptive rescaling --------------------------------------------------------

def adaptive_scaling_construct(sigma1, sigma2, n) -> ModelParams:
    """Two diagonal layers (``w_yx`` then ``w_yy``) matching ridge at two noise levels.

    With ``A = -w_yx`` and ``B = n A w_yy`` the implicit weight after layer 2
    tends to ``(A + sigma^2 B) alpha``; solving ``A + sigma_k^2 B = 1/(1+sigma_k^2)``
    for both levels fixes the layer parameters. The sign of ``w_yx`` follows the
    negated readout.
    """
    s1, s2 = float(sigma1) ** 2, float(sigma2) ** 2
    if min(sigma1, sigma2) < 0:
        raise ValueError("noise levels must be >= 0")
    if s1 == s2:
        raise SingularSystem("the two noise levels coincide")
    B = (1 / (1 + s1) - 1 / (1 + s2)) / (s1 - s2)
    A = 1 / (1 + s1) - s1 * B
    return ModelParams("diag", 0, [DiagLayer(w_yx=-A), DiagLayer(w_yy=B / (n * A))])


def adaptive_scaling_error(sigma, n, d=10, sigma_pair=(1.0, 3.0), trials=20, seed=0):
    """Mean relative gap between the constructed model's implicit ``w^2`` and
    the ridge solution, with covariates drawn from ``N(0, I/n)``."""
    model = adaptive_scaling_construct(*sigma_pair, n)
    model = ModelParams("diag", d, model.layers)
    errs = []
    for t in range(trials):
        rng = substream(seed, int(n), t)
        w = rng.standard_normal(d)
        x = rng.standard_normal((n, d)) / math.sqrt(n)
        x_t = rng.standard_normal(d) / math.sqrt(n)
        y = x @ w + sigma * rng.standard_normal(n)
        seq = TaskSequence(x, y, x_t, float(x_t @ w), w, sigma)
        w2 = implicit_trajectory(model, seq)[-1].w
        ridge = linalg.cholesky_solve(x.T @ x + sigma ** 2 * np.eye(d), x.T @ y)
        errs.append(np.linalg.norm(w2 - ridge) / np.linalg.norm(ridge))
    return float(np.mean(errs))


# Step-size adaptation ------------------------------------------------------

def stepsize_effect_probe(w_xy, w_yx, seq: TaskSequence):
    """``(measured, predicted)`` scale of a ``w_xy`` layer followed by a GD step.

    ``measured`` is the two-layer query output divided by the output of the
    gradient step alone; ``predicted`` is ``1 + w_xy * rho``.
    """
    two = ModelParams("diag", seq.d, [DiagLayer(w_xy=w_xy), DiagLayer(w_yx=w_yx)])
    one = ModelParams("diag", seq.d, [DiagLayer(w_yx=w_yx)])
    measured = forward(two, seq)[0] / forward(one, seq)[0]
    return float(measured), 1.0 + w_xy * compute_stats(seq).rho


# Evaluation ----------------------------------------------------------------

def as_predictor(obj):
    if isinstance(obj, ModelParams):
        return lambda batch: model_predict(obj, batch)
    if isinstance(obj, BaselineSpec):
        return obj.predict
    if callable(obj):
        return obj
    raise TypeError(f"cannot predict with {type(obj).__name__}")


def adjusted_terms(pred, batch: TaskBatch, oracle=None):
    """Per-sequence ``0.5[(pred - y_t)^2 - (oracle - y_t)^2]``."""
    if oracle is None:
        oracle = oracle_predict(batch)
    return EVAL_SCALE * ((pred - batch.y_t) ** 2 - (oracle - batch.y_t) ** 2)


def adjusted_loss_sem(predictor, eval_set, oracle=None):
    batch = as_batch(eval_set)
    terms = adjusted_terms(as_predictor(predictor)(batch), batch, oracle)
    sem = float(np.std(terms, ddof=1) / math.sqrt(len(terms))) if len(terms) > 1 else 0.0
    return float(np.mean(terms)), sem


def adjusted_loss(predictor, eval_set, oracle=None) -> float:
    """Predictor loss minus oracle loss on the same sequences."""
    return adjusted_loss_sem(predictor, eval_set, oracle)[0]


@dataclass
class ProfilePoint:
    sigma: float
    adjusted_loss: float
    sem: float


def default_sigma_grid(sigma_max, points=21):
    return np.linspace(0.0, sigma_max + 1.0, points)


def per_variance_profile(predictor, sigma_grid, n_eval, seed=0, d=10, n=20):
    """Adjusted loss at each fixed noise level.

    Every grid point reuses the same ``(w, x, xi)`` draws, scaled by sigma,
    and every predictor called with the same seed sees the same sequences.
    """
    pred_fn = as_predictor(predictor)
    points = []
    for sigma in sigma_grid:
        batch = make_eval_set(seed, n_eval, d, n, NoiseDistribution.fixed(float(sigma)))
        mean, sem = adjusted_loss_sem(pred_fn, batch)
        points.append(ProfilePoint(float(sigma), mean, sem))
    return points


@dataclass
class EvalReport:
    adjusted_loss: float
    sem: float
    per_layer: list            # adjusted loss of the readout after layers 0..L
    single_head_residuals: list | None = None
    profile: list | None = None

    def to_json(self):
        return {"adjusted_loss": self.adjusted_loss, "sem": self.sem, "per_layer": self.per_layer,
                "single_head_residuals": self.single_head_residuals,
                "profile": None if self.profile is None else [vars(p) for p in self.profile]}


def evaluate_model(params: ModelParams, eval_set, profile_grid=None, profile_n=10_000, seed=0):
    batch = as_batch(eval_set)
    oracle = oracle_predict(batch)
    readouts = layer_predictions(params, batch)
    per_layer = [float(np.mean(adjusted_terms(r, batch, oracle))) for r in readouts]
    terms = adjusted_terms(readouts[-1], batch, oracle)
    residuals = None
    if params.variant == "diag":
        residuals = [single_head_constraint_residual(layer) for layer in params.layers]
    profile = None
    if profile_grid is not None:
        profile = per_variance_profile(params, profile_grid, profile_n, seed, batch.d, batch.n)
    return EvalReport(float(np.mean(terms)), float(np.std(terms, ddof=1) / math.sqrt(len(terms))),
                      per_layer, residuals, profile)
