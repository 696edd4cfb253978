"""Ingredients of the recursive layer ``h_t = phi(g * (A(x_t) h_{t-1}) + b(x_t))``.

Every function here works on :class:`~statetrack.autodiff.Tensor` values (or
plain arrays) and is vectorised over leading axes, so the network evaluates the
input-dependent parts for a whole sequence at once and only the state update
runs step by step.

Complex lanes are stored as interleaved real pairs ``(re, im)``; a complex
diagonal transition acts on them as 2x2 rotation-scaling blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError

TRANSITIONS = (
    "diag_contractive",
    "diag_signed",
    "diag_complex_damped",
    "diag_complex_unitary",
    "diag_complex_unitary_nostep",
    "dense_linear",
)
COMPLEX_TRANSITIONS = ("diag_complex_damped", "diag_complex_unitary", "diag_complex_unitary_nostep")
STEPPED_TRANSITIONS = ("diag_contractive", "diag_signed", "diag_complex_damped", "diag_complex_unitary")
GATES = ("none", "token", "state")
ACTIVATIONS = ("identity", "tanh", "relu", "max_pair", "min_pair", "groupsort2", "layernorm", "sphere")
PAIR_ACTIVATIONS = ("max_pair", "min_pair", "groupsort2")
INJECTIONS = ("linear", "mamba_euler", "mamba3_trapezoid")

LAYERNORM_EPS = 1e-5
SPHERE_MIN_NORM = 1e-12
DT_INIT = 0.5  # softplus(dt_bias) at init


@dataclass(frozen=True)
class TransitionSpec:
    kind: str
    state_dim: int

    def __post_init__(self):
        if self.kind not in TRANSITIONS:
            raise ConfigError(f"unknown transition {self.kind!r}; choose from {TRANSITIONS}")
        if self.kind in COMPLEX_TRANSITIONS and self.state_dim % 2:
            raise ConfigError(f"{self.kind} needs an even state_dim, got {self.state_dim}")

    @property
    def lanes(self) -> int:
        return self.state_dim // 2 if self.kind in COMPLEX_TRANSITIONS else self.state_dim


@dataclass(frozen=True)
class GateSpec:
    kind: str = "none"

    def __post_init__(self):
        if self.kind not in GATES:
            raise ConfigError(f"unknown gate {self.kind!r}; choose from {GATES}")


@dataclass(frozen=True)
class ActivationSpec:
    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.kind!r}; choose from {ACTIVATIONS}")


@dataclass(frozen=True)
class InjectionSpec:
    kind: str = "linear"

    def __post_init__(self):
        if self.kind not in INJECTIONS:
            raise ConfigError(f"unknown injection {self.kind!r}; choose from {INJECTIONS}")


class Factor(NamedTuple):
    """The transition ``A(x_t)``: a real diagonal, a complex diagonal (re, im) or a dense matrix."""

    diag: ad.Tensor | None = None
    re: ad.Tensor | None = None
    im: ad.Tensor | None = None
    dense: ad.Tensor | None = None


# ---------------------------------------------------------------- initialisation


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rng, n: int, gain: float = 1.0) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return gain * q * np.sign(np.diag(r))


def init_transition(spec: TransitionSpec, d_model: int, rng) -> dict[str, np.ndarray]:
    n = spec.lanes
    p: dict[str, np.ndarray] = {}
    if spec.kind == "dense_linear":
        p["W_h"] = orthogonal(rng, spec.state_dim)
        return p
    if spec.kind in ("diag_contractive", "diag_signed", "diag_complex_damped"):
        # A = -exp(A_log), log-spaced in [-1, -1e-2]
        p["A_log"] = np.log(np.geomspace(1e-2, 1.0, n))
    if spec.kind in STEPPED_TRANSITIONS:
        p["W_dt"] = _uniform(rng, (n, d_model), d_model)
        p["dt_bias"] = np.full(n, math.log(math.expm1(DT_INIT)))
    if spec.kind == "diag_complex_damped":
        p["W_theta"] = _uniform(rng, (n, d_model), d_model)
        p["b_theta"] = np.zeros(n)
    elif spec.kind == "diag_complex_unitary":
        p["W_omega"] = _uniform(rng, (n, d_model), d_model)
        p["b_omega"] = np.zeros(n)
    elif spec.kind == "diag_complex_unitary_nostep":
        p["W_lam"] = _uniform(rng, (n, d_model), d_model)
        p["b_lam"] = np.zeros(n)
    return p


def init_injection(spec: InjectionSpec, trans: TransitionSpec, d_model: int, rng) -> dict[str, np.ndarray]:
    d = trans.state_dim
    if spec.kind == "linear":
        return {"W_x": _uniform(rng, (d, d_model), d_model), "b_h": np.zeros(d)}
    p = {"W_B": _uniform(rng, (d, d_model), d_model)}
    if spec.kind == "mamba3_trapezoid":
        p["W_mix"] = _uniform(rng, (trans.lanes, d_model), d_model)
        p["b_mix"] = np.zeros(trans.lanes)
    return p


def init_gate(spec: GateSpec, d_state: int, d_model: int, rng) -> dict[str, np.ndarray]:
    if spec.kind == "none":
        return {}
    p = {"W_g": _uniform(rng, (d_state, d_model), d_model), "b_g": np.zeros(d_state)}
    if spec.kind == "state":
        p["U_g"] = _uniform(rng, (d_state, d_state), d_state)
    return p


# ---------------------------------------------------------------- transition


def step_size(params, u) -> ad.Tensor:
    """``softplus(dt_bias + W_dt u)``, one step size per lane."""
    return ad.softplus(ad.linear(u, params["W_dt"], params["dt_bias"]))


def transition_factor(spec: TransitionSpec, params, u) -> Factor:
    """Evaluate ``A(u)`` for inputs ``u`` of shape ``(..., d_model)``."""
    kind = spec.kind
    if kind == "dense_linear":
        return Factor(dense=ad.as_tensor(params["W_h"]))
    if kind in ("diag_contractive", "diag_signed"):
        A = ad.scale(ad.exp(params["A_log"]), -1.0)
        alpha = ad.exp(ad.mul(step_size(params, u), A))
        if kind == "diag_signed":
            alpha = ad.add(ad.scale(alpha, 2.0), -1.0)
        _check_factor(kind, alpha.value)
        return Factor(diag=alpha)
    if kind == "diag_complex_damped":
        dt = step_size(params, u)
        mag = ad.exp(ad.mul(dt, ad.scale(ad.exp(params["A_log"]), -1.0)))
        angle = ad.mul(dt, ad.linear(u, params["W_theta"], params["b_theta"]))
        re, im = ad.mul(mag, ad.cos(angle)), ad.mul(mag, ad.sin(angle))
    elif kind == "diag_complex_unitary":
        angle = ad.mul(step_size(params, u), ad.linear(u, params["W_omega"], params["b_omega"]))
        re, im = ad.cos(angle), ad.sin(angle)
    else:  # diag_complex_unitary_nostep
        angle = ad.linear(u, params["W_lam"], params["b_lam"])
        re, im = ad.cos(angle), ad.sin(angle)
    _check_factor(kind, re.value)
    _check_factor(kind, im.value)
    return Factor(re=re, im=im)


def _check_factor(kind: str, v: np.ndarray) -> None:
    if not np.isfinite(v).all():
        bad = np.argwhere(~np.isfinite(v))[0]
        raise NumericError(f"{kind}: non-finite transition factor at lane {int(bad[-1])} (index {tuple(int(i) for i in bad)})")


def apply_factor(factor: Factor, h) -> ad.Tensor:
    if factor.dense is not None:
        return ad.linear(h, factor.dense)
    if factor.diag is not None:
        return ad.mul(factor.diag, h)
    return ad.rotate(h, factor.re, factor.im)


def apply_transition(spec: TransitionSpec, params, u, h) -> np.ndarray:
    """``A(u) h`` for a single step (or a batch of steps)."""
    return apply_factor(transition_factor(spec, params, u), h).value


def factor_matrix(spec: TransitionSpec, params, u) -> np.ndarray:
    """Dense ``d x d`` matrix of ``A(u)`` for one input vector ``u``."""
    f = transition_factor(spec, params, np.asarray(u, dtype=float))
    if f.dense is not None:
        return np.array(f.dense.value)
    if f.diag is not None:
        return np.diag(f.diag.value)
    d = spec.state_dim
    M = np.zeros((d, d))
    for k, (c, s) in enumerate(zip(f.re.value, f.im.value)):
        M[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = [[c, -s], [s, c]]
    return M


def factor_moduli(spec: TransitionSpec, params, u) -> np.ndarray:
    """Per-lane modulus of ``A(u)`` for the diagonal kinds."""
    f = transition_factor(spec, params, u)
    if f.diag is not None:
        return np.abs(f.diag.value)
    if f.re is not None:
        return np.hypot(f.re.value, f.im.value)
    raise ValueError("dense transitions have no per-lane modulus")


# ---------------------------------------------------------------- injection


def injection_sequence(spec: InjectionSpec, trans: TransitionSpec, params, u, factor: Factor | None = None) -> ad.Tensor:
    """``b(x_t)`` for a whole sequence ``u`` of shape ``(B, T, d_model)``.

    ``mamba3_trapezoid`` blends the current and the previous input (the previous
    one carried through ``e^{dt A}``), so it needs the sequence and the factor.
    """
    if spec.kind == "linear":
        return ad.linear(u, params["W_x"], params["b_h"])
    Bx = ad.linear(u, params["W_B"])
    dt = step_size(params, u)
    if trans.kind in COMPLEX_TRANSITIONS:
        dt = ad.repeat_lanes(dt)
    current = ad.mul(dt, Bx)
    if spec.kind == "mamba_euler":
        return current
    if factor is None:
        factor = transition_factor(trans, params, u)
    mix = ad.sigmoid(ad.linear(u, params["W_mix"], params["b_mix"]))
    if trans.kind in COMPLEX_TRANSITIONS:
        mix = ad.repeat_lanes(mix)
    carried = ad.mul(dt, apply_factor(factor, ad.shift_right(Bx, axis=-2)))
    return ad.add(ad.mul(ad.add(ad.scale(mix, -1.0), 1.0), carried), ad.mul(mix, current))


# ---------------------------------------------------------------- gate


def gate_input(spec: GateSpec, params, u) -> ad.Tensor | None:
    if spec.kind == "none":
        return None
    return ad.linear(u, params["W_g"], params["b_g"])


def gate_step(spec: GateSpec, params, pre, h_prev) -> ad.Tensor | None:
    if spec.kind == "none":
        return None
    if spec.kind == "token":
        return ad.sigmoid(pre)
    return ad.sigmoid(ad.add(pre, ad.linear(h_prev, params["U_g"])))


def apply_gate(spec: GateSpec, params, u, h_prev) -> np.ndarray:
    """Gate vector ``g(h_{t-1}, x_t)``; all ones when the layer is ungated."""
    h_prev = np.asarray(h_prev, dtype=float)
    if spec.kind == "none":
        return np.ones_like(h_prev)
    return gate_step(spec, params, gate_input(spec, params, np.asarray(u, dtype=float)), h_prev).value


# ---------------------------------------------------------------- activation


def activate(kind: str, z) -> ad.Tensor:
    if kind == "identity":
        return ad.as_tensor(z)
    if kind == "tanh":
        return ad.tanh(z)
    if kind == "relu":
        return ad.relu(z)
    if kind == "max_pair":
        return ad.pair_select(z, larger_first=True)
    if kind in ("min_pair", "groupsort2"):
        return ad.pair_select(z, larger_first=False)
    if kind == "layernorm":
        return ad.layernorm(z, LAYERNORM_EPS)
    if kind == "sphere":
        return ad.sphere(z, SPHERE_MIN_NORM)
    raise ConfigError(f"unknown activation {kind!r}")


def apply_activation(spec: ActivationSpec | str, z) -> np.ndarray:
    kind = spec.kind if isinstance(spec, ActivationSpec) else spec
    return activate(kind, np.asarray(z, dtype=float)).value


def activation_jacobian(spec: ActivationSpec | str, z) -> np.ndarray:
    """Exact ``d phi / d z`` at a single pre-activation vector ``z``."""
    kind = spec.kind if isinstance(spec, ActivationSpec) else spec
    z = np.asarray(z, dtype=float)
    d = z.shape[-1]
    if kind == "identity":
        return np.eye(d)
    if kind == "tanh":
        return np.diag(1.0 - np.tanh(z) ** 2)
    if kind == "relu":
        return np.diag((z > 0).astype(float))
    if kind in PAIR_ACTIVATIONS:
        if d % 2:
            raise ValueError("pair operators need an even dimension")
        lo, hi = z[0::2], z[1::2]
        swap = hi > lo if kind == "max_pair" else hi < lo
        J = np.zeros((d, d))
        for i, s in enumerate(swap):
            a, b = 2 * i, 2 * i + 1
            if s:
                J[a, b] = J[b, a] = 1.0
            else:
                J[a, a] = J[b, b] = 1.0
        return J
    if kind == "layernorm":
        mu = z.mean()
        sigma = math.sqrt(((z - mu) ** 2).mean() + LAYERNORM_EPS)
        pt = (z - mu) / sigma
        return (np.eye(d) - np.ones((d, d)) / d - np.outer(pt, pt) / d) / sigma
    if kind == "sphere":
        n = float(np.linalg.norm(z))
        if n < SPHERE_MIN_NORM:
            raise NumericError("sphere projection of a (near) zero vector")
        hh = z / n
        return (np.eye(d) - np.outer(hh, hh)) / n
    raise ConfigError(f"unknown activation {kind!r}")
