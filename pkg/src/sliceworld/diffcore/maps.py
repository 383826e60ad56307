"""Composable parametric maps built on the tape.

Kinds: affine, mlp2 (one hidden layer), layernorm, cross_attention
(learnable query over a token set), causal_cell (gated recurrent cell).
A MapHandle binds a MapSpec to a name prefix inside a ParamStore.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatchError, ValidationError
from . import tape
from .store import ParamStore, init_uniform
from .tape import Var, as_var

KINDS = ("affine", "mlp2", "layernorm", "cross_attention", "causal_cell")
ACTIVATIONS = ("tanh", "relu", "identity")
LN_EPS = 1e-5


@dataclass(frozen=True)
class MapSpec:
    kind: str
    input_dim: int
    output_dim: int
    hidden_dim: int | None = None
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown map kind '{self.kind}'")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValidationError("map dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation '{self.activation}'")
        if self.kind == "layernorm" and self.input_dim != self.output_dim:
            raise ValidationError("layernorm requires input_dim == output_dim")

    def resolved_hidden(self) -> int:
        return self.hidden_dim or max(self.input_dim, self.output_dim)


def _activate(x: Var, name: str) -> Var:
    if name == "tanh":
        return tape.tanh(x)
    if name == "relu":
        return tape.relu(x)
    return x


def layer_norm(x: Var, gamma: Var, beta: Var) -> Var:
    """Normalize over the last axis, then affine rescale."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    y = xc * (var + LN_EPS) ** -0.5
    return y * gamma + beta


class MapHandle:
    """One named map instance: owns parameter groups `<name>/<tensor>`."""

    def __init__(self, spec: MapSpec, name: str):
        self.spec = spec
        self.name = name

    def group(self, tensor: str) -> str:
        return f"{self.name}/{tensor}"

    def init(self, store: ParamStore, rng: np.random.Generator):
        s = self.spec
        hid = s.resolved_hidden()
        if s.kind == "affine":
            store.create(self.group("W"), init_uniform(rng, (s.output_dim, s.input_dim), s.input_dim))
            store.create(self.group("b"), init_uniform(rng, (s.output_dim,), s.input_dim))
        elif s.kind == "mlp2":
            store.create(self.group("W1"), init_uniform(rng, (hid, s.input_dim), s.input_dim))
            store.create(self.group("b1"), init_uniform(rng, (hid,), s.input_dim))
            store.create(self.group("W2"), init_uniform(rng, (s.output_dim, hid), hid))
            store.create(self.group("b2"), init_uniform(rng, (s.output_dim,), hid))
        elif s.kind == "layernorm":
            store.create(self.group("g"), np.ones(s.input_dim))
            store.create(self.group("b"), np.zeros(s.input_dim))
        elif s.kind == "cross_attention":
            store.create(self.group("q"), init_uniform(rng, (hid,), hid))
            store.create(self.group("Wk"), init_uniform(rng, (hid, s.input_dim), s.input_dim))
            store.create(self.group("Wv"), init_uniform(rng, (hid, s.input_dim), s.input_dim))
            store.create(self.group("ln_g"), np.ones(hid))
            store.create(self.group("ln_b"), np.zeros(hid))
            store.create(self.group("We"), init_uniform(rng, (s.output_dim, hid), hid))
            store.create(self.group("be"), init_uniform(rng, (s.output_dim,), hid))
        elif s.kind == "causal_cell":
            for gate in ("z", "c"):
                store.create(self.group(f"W{gate}"), init_uniform(rng, (hid, s.input_dim), s.input_dim))
                store.create(self.group(f"U{gate}"), init_uniform(rng, (hid, hid), hid))
                store.create(self.group(f"b{gate}"), init_uniform(rng, (hid,), hid))
            if hid != s.output_dim:
                raise ValidationError("causal_cell output_dim must equal hidden_dim")
        return self

    def group_names(self) -> list[str]:
        tensors = {
            "affine": ("W", "b"),
            "mlp2": ("W1", "b1", "W2", "b2"),
            "layernorm": ("g", "b"),
            "cross_attention": ("q", "Wk", "Wv", "ln_g", "ln_b", "We", "be"),
            "causal_cell": ("Wz", "Uz", "bz", "Wc", "Uc", "bc"),
        }[self.spec.kind]
        return [self.group(t) for t in tensors]

    # -- forward -------------------------------------------------------------

    def __call__(self, params: dict[str, Var], x) -> Var:
        return forward(self, params, x)


def forward(handle: MapHandle, params: dict[str, Var], x) -> Var:
    """Evaluate a map on a tape input; deterministic, shape-checked."""
    s = handle.spec
    x = as_var(x)
    if s.kind in ("affine", "mlp2", "layernorm", "causal_cell") and x.shape[-1] != s.input_dim:
        raise ShapeMismatchError(handle.name,
                                 f"expected last dim {s.input_dim}, got {x.shape}")
    p = lambda t: params[handle.group(t)]

    if s.kind == "affine":
        return x @ p("W").T + p("b")

    if s.kind == "mlp2":
        hidden = _activate(x @ p("W1").T + p("b1"), s.activation)
        return hidden @ p("W2").T + p("b2")

    if s.kind == "layernorm":
        return layer_norm(x, p("g"), p("b"))

    if s.kind == "cross_attention":
        return _cross_attention(handle, params, x)

    if s.kind == "causal_cell":
        return _causal_scan(handle, params, x)

    raise ValidationError(f"unknown kind {s.kind}")


def _cross_attention(handle: MapHandle, params, tokens: Var) -> Var:
    """Learnable-query attention over a token set, then LN and affine.

    ``tokens`` is (M, d_in) or batched (..., M, d_in); M >= 1. The output
    drops the token axis: (..., d_out).
    """
    s = handle.spec
    if tokens.shape[-1] != s.input_dim:
        raise ShapeMismatchError(handle.name,
                                 f"expected last dim {s.input_dim}, got {tokens.shape}")
    if tokens.ndim < 2 or tokens.shape[-2] < 1:
        raise ValidationError(f"{handle.name}: needs at least one token")
    p = lambda t: params[handle.group(t)]
    hid = s.resolved_hidden()
    keys = tokens @ p("Wk").T                       # (..., M, hid)
    values = tokens @ p("Wv").T
    scores = (keys * p("q")).sum(axis=-1) * (1.0 / np.sqrt(hid))
    weights = tape.softmax(scores, axis=-1)         # (..., M)
    pooled = (values * weights.reshape(weights.shape + (1,))).sum(axis=-2)
    normed = layer_norm(pooled, p("ln_g"), p("ln_b"))
    return normed @ p("We").T + p("be")


def _causal_scan(handle: MapHandle, params, xs: Var) -> Var:
    """Update-gate recurrence over (T, d_in): h_t = (1-z)*h_{t-1} + z*c.

    h_0 is zero; position t sees inputs 1..t only.
    """
    p = lambda t: params[handle.group(t)]
    hid = handle.spec.resolved_hidden()
    # Input projections for all steps at once; the loop is state-only.
    zx = xs @ p("Wz").T + p("bz")                   # (T, hid)
    cx = xs @ p("Wc").T + p("bc")
    uz_t = p("Uz").T
    uc_t = p("Uc").T
    h = tape.as_var(np.zeros((1, hid)))
    rows = []
    for t in range(xs.shape[0]):
        z = tape.sigmoid(zx[t:t + 1] + h @ uz_t)
        c = tape.tanh(cx[t:t + 1] + h @ uc_t)
        h = (1.0 - z) * h + z * c
        rows.append(h)
    return tape.concat(rows, axis=0)
