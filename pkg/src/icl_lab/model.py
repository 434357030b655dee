"""Multi-layer linear self-attention over regression tokens.

Tokens are ``e_i = (x_i, y_i)`` for the ``n`` examples followed by the query
``(x_t, 0)``. A layer maps every token (query included) through

    e_i <- e_i + Mid e_i,    Mid = sum_k P_k G Q_k,    G = sum_{j<=n} e_j e_j^T

so the query is updated but never attended to. The prediction is the negated
y-slot of the query after the last layer.

Three parametrizations share this update:

* ``FullLayer``: H heads of dense (d+1)x(d+1) matrices ``P``, ``Q``.
* ``DiagLayer``: the four scalars ``w_xx, w_xy, w_yx, w_yy``; ``Mid`` is ``G``
  with its blocks scaled by those scalars.
* ``GDppLayer``: ``w_xx`` and ``w_yx`` only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .linalg import NonFinite
from .tasks import TaskBatch, TaskSequence, as_batch

VARIANTS = ("full", "diag", "gdpp")


@dataclass
class FullLayer:
    P: np.ndarray  # (H, d+1, d+1)
    Q: np.ndarray  # (H, d+1, d+1)

    @property
    def heads(self):
        return self.P.shape[0]

    def middle(self, G):
        out = 0.0
        for P, Q in zip(self.P, self.Q):
            out = out + P @ G @ Q
        return out

    def middle_vjp(self, G, Mbar):
        """Return ``(layer_grad, G_bar)`` for a cotangent ``Mbar`` of ``middle(G)``."""
        dP = np.empty_like(self.P)
        dQ = np.empty_like(self.Q)
        Gbar = 0.0
        for k, (P, Q) in enumerate(zip(self.P, self.Q)):
            GQ = G @ Q
            PG = P @ G
            dP[k] = np.einsum("bij,bkj->ik", Mbar, GQ)
            dQ[k] = np.einsum("bji,bjk->ik", PG, Mbar)
            Gbar = Gbar + P.T @ Mbar @ Q.T
        return FullLayer(dP, dQ), Gbar

    def to_vector(self):
        return np.concatenate([self.P.ravel(), self.Q.ravel()])

    @classmethod
    def from_vector(cls, v, d, heads):
        D = d + 1
        m = heads * D * D
        return cls(v[:m].reshape(heads, D, D).copy(), v[m:2 * m].reshape(heads, D, D).copy())

    @staticmethod
    def size(d, heads):
        return 2 * heads * (d + 1) ** 2

    def to_json(self):
        return {"P": self.P.tolist(), "Q": self.Q.tolist()}

    @classmethod
    def from_json(cls, data):
        return cls(np.array(data["P"], dtype=np.float64), np.array(data["Q"], dtype=np.float64))


@dataclass
class DiagLayer:
    w_xx: float = 0.0
    w_xy: float = 0.0
    w_yx: float = 0.0
    w_yy: float = 0.0

    def mask(self, d):
        W = np.full((d + 1, d + 1), self.w_xx)
        W[:d, d] = self.w_xy
        W[d, :d] = self.w_yx
        W[d, d] = self.w_yy
        return W

    def middle(self, G):
        return self.mask(G.shape[-1] - 1) * G

    def middle_vjp(self, G, Mbar):
        d = G.shape[-1] - 1
        prod = Mbar * G
        grad = DiagLayer(prod[:, :d, :d].sum(), prod[:, :d, d].sum(),
                         prod[:, d, :d].sum(), prod[:, d, d].sum())
        return grad, self.mask(d) * Mbar

    def to_vector(self):
        return np.array([self.w_xx, self.w_xy, self.w_yx, self.w_yy])

    @classmethod
    def from_vector(cls, v, d=None, heads=None):
        return cls(*map(float, v[:4]))

    @staticmethod
    def size(d=None, heads=None):
        return 4

    def to_json(self):
        return [self.w_xx, self.w_xy, self.w_yx, self.w_yy]

    @classmethod
    def from_json(cls, data):
        return cls(*map(float, data))


@dataclass
class GDppLayer:
    w_xx: float = 0.0
    w_yx: float = 0.0

    def as_diag(self):
        return DiagLayer(self.w_xx, 0.0, self.w_yx, 0.0)

    def middle(self, G):
        return self.as_diag().middle(G)

    def middle_vjp(self, G, Mbar):
        grad, Gbar = self.as_diag().middle_vjp(G, Mbar)
        return GDppLayer(grad.w_xx, grad.w_yx), Gbar

    def to_vector(self):
        return np.array([self.w_xx, self.w_yx])

    @classmethod
    def from_vector(cls, v, d=None, heads=None):
        return cls(float(v[0]), float(v[1]))

    @staticmethod
    def size(d=None, heads=None):
        return 2

    def to_json(self):
        return [self.w_xx, self.w_yx]

    @classmethod
    def from_json(cls, data):
        return cls(*map(float, data))


LAYER_TYPES = {"full": FullLayer, "diag": DiagLayer, "gdpp": GDppLayer}


@dataclass
class ModelParams:
    variant: str
    d: int
    layers: list
    heads: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        cls = LAYER_TYPES[self.variant]
        if any(not isinstance(layer, cls) for layer in self.layers):
            raise TypeError(f"all layers of a {self.variant} model must be {cls.__name__}")
        if self.variant == "full" and self.layers:
            self.heads = self.layers[0].heads

    @property
    def L(self):
        return len(self.layers)

    def to_vector(self):
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([layer.to_vector() for layer in self.layers])

    def with_vector(self, v):
        """Same layout as ``self`` with entries taken from the flat vector ``v``."""
        v = np.asarray(v, dtype=np.float64)
        if v.size != self.to_vector().size:
            raise ValueError("vector length does not match the parameter layout")
        return ModelParams.from_vector(self.variant, self.d, v, self.heads, dict(self.meta))

    @classmethod
    def from_vector(cls, variant, d, v, heads=1, meta=None):
        layer_cls = LAYER_TYPES[variant]
        size = layer_cls.size(d, heads)
        if v.size % size:
            raise ValueError("vector length is not a whole number of layers")
        layers = [layer_cls.from_vector(v[i:i + size], d, heads) for i in range(0, v.size, size)]
        return cls(variant, d, layers, heads, meta or {})

    @classmethod
    def zeros(cls, variant, d, L, heads=1):
        return cls.from_vector(variant, d, np.zeros(LAYER_TYPES[variant].size(d, heads) * L), heads)

    @classmethod
    def init(cls, variant, d, L, rng, scale=0.01, heads=1):
        """I.i.d. ``N(0, scale^2)`` entries in every parameter slot."""
        size = LAYER_TYPES[variant].size(d, heads)
        return cls.from_vector(variant, d, scale * rng.standard_normal(size * L), heads)

    def to_json(self, **meta):
        payload = {"variant": self.variant, "d": self.d, "H": self.heads,
                   "layers": [layer.to_json() for layer in self.layers]}
        payload.update(self.meta)
        payload.update(meta)
        return payload

    @classmethod
    def from_json(cls, data):
        data = dict(data)
        variant = data.pop("variant")
        d = data.pop("d")
        heads = data.pop("H", 1)
        layers = [LAYER_TYPES[variant].from_json(x) for x in data.pop("layers")]
        return cls(variant, d, layers, heads, data)

    def save(self, path, **meta):
        with open(path, "w") as fh:
            json.dump(self.to_json(**meta), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def digest(self):
        return hashlib.sha256(self.to_vector().tobytes()).hexdigest()


def diag_to_full(layer: DiagLayer, d) -> FullLayer:
    """Two-head dense layer realizing the four diagonal scalars exactly."""
    D = d + 1
    P = np.zeros((2, D, D))
    Q = np.zeros((2, D, D))
    P[0, :d, :d] = layer.w_xx * np.eye(d)
    P[0, d, d] = layer.w_yx
    Q[0, :d, :d] = np.eye(d)
    P[1, :d, :d] = layer.w_xy * np.eye(d)
    P[1, d, d] = layer.w_yy
    Q[1, d, d] = 1.0
    return FullLayer(P, Q)


def to_full(params: ModelParams) -> ModelParams:
    if params.variant == "full":
        return params
    diag = [layer.as_diag() if isinstance(layer, GDppLayer) else layer for layer in params.layers]
    return ModelParams("full", params.d, [diag_to_full(layer, params.d) for layer in diag], 2)


def to_diag(params: ModelParams) -> ModelParams:
    if params.variant == "diag":
        return params
    if params.variant != "gdpp":
        raise ValueError("only GD++ models embed into the diagonal parametrization")
    return ModelParams("diag", params.d, [layer.as_diag() for layer in params.layers])


def single_head_constraint_residual(layer: DiagLayer) -> float:
    """``w_xx*w_yy - w_xy*w_yx``; zero iff one head can realize the layer."""
    return layer.w_xx * layer.w_yy - layer.w_xy * layer.w_yx


def input_tokens(batch: TaskBatch):
    """Layer-0 token array of shape (B, n+1, d+1); the query's y-slot is 0."""
    B, n, d = batch.x.shape
    Z = np.zeros((B, n + 1, d + 1))
    Z[:, :n, :d] = batch.x
    Z[:, :n, d] = batch.y
    Z[:, n, :d] = batch.x_t
    return Z


def gram(Z, n):
    Zn = Z[:, :n]
    return np.swapaxes(Zn, 1, 2) @ Zn


def apply_layer(layer, Z, n):
    G = gram(Z, n)
    Mid = layer.middle(G)
    return Z + Z @ np.swapaxes(Mid, 1, 2), G, Mid


def propagate(params: ModelParams, Z, n, keep_trace=False):
    """Run the layers on a raw token array; returns the final tokens and optional trace."""
    trace = [Z] if keep_trace else None
    for layer in params.layers:
        Z = apply_layer(layer, Z, n)[0]
        if keep_trace:
            trace.append(Z)
    if not np.all(np.isfinite(Z)):
        raise NonFinite("forward pass produced NaN or Inf")
    return Z, trace


def forward(params: ModelParams, seq, keep_trace=False):
    """Predict the query target of one episode or a batch.

    Returns ``(prediction, trace)``. ``trace`` is ``None`` unless requested, in
    which case it is the list of token arrays for layers ``0..L`` (with a
    leading batch axis for batch input).
    """
    single = isinstance(seq, TaskSequence)
    batch = as_batch(seq)
    if batch.d != params.d:
        raise ValueError(f"model expects d={params.d}, episode has d={batch.d}")
    Z, trace = propagate(params, input_tokens(batch), batch.n, keep_trace)
    pred = -Z[:, -1, -1]
    if single:
        return float(pred[0]), ([t[0] for t in trace] if trace is not None else None)
    return pred, trace


def predict(params: ModelParams, batch: TaskBatch, chunk=10_000):
    """Batched predictions, processed in chunks to bound memory."""
    out = np.empty(len(batch))
    for start in range(0, len(batch), chunk):
        out[start:start + chunk] = forward(params, batch[start:start + chunk])[0]
    return out


def layer_predictions(params: ModelParams, batch: TaskBatch, chunk=10_000):
    """Readout ``-y_query`` after every layer: array of shape (L+1, B)."""
    out = np.empty((params.L + 1, len(batch)))
    for start in range(0, len(batch), chunk):
        part = batch[start:start + chunk]
        Z = input_tokens(part)
        out[0, start:start + chunk] = -Z[:, -1, -1]
        for l, layer in enumerate(params.layers, 1):
            Z = apply_layer(layer, Z, part.n)[0]
            out[l, start:start + chunk] = -Z[:, -1, -1]
    if not np.all(np.isfinite(out)):
        raise NonFinite("forward pass produced NaN or Inf")
    return out
