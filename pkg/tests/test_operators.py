import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from statetrack.errors import ConfigError, NumericError
from statetrack.operators import (
    ACTIVATIONS, PAIR_ACTIVATIONS, TRANSITIONS, ActivationSpec, GateSpec, InjectionSpec, TransitionSpec,
    activation_jacobian, apply_activation, apply_gate, apply_transition, factor_matrix, factor_moduli,
    init_gate, init_injection, init_transition, injection_sequence,
)

from helpers import away_from_ties, fd_jacobian, rel_err, tape_jacobian

DM = 6


def _params(kind, d=8, seed=0, spread=1.0):
    rng = np.random.default_rng(seed)
    spec = TransitionSpec(kind, d)
    p = init_transition(spec, DM, rng)
    # scramble every block so the ranges are tested away from the init
    return spec, {k: v + spread * rng.standard_normal(v.shape) for k, v in p.items()}


@pytest.mark.parametrize("kind", [k for k in TRANSITIONS if k != "dense_linear"])
def test_factor_ranges_over_many_draws(kind):
    mods, signed = [], []
    for s in range(200):  # 200 parameter draws x 50 inputs
        spec, p = _params(kind, seed=s, spread=0.3)
        u = np.random.default_rng(1000 + s).standard_normal((50, DM))
        m = factor_moduli(spec, p, u)
        mods.append(m)
        if kind in ("diag_contractive", "diag_signed"):
            signed.append(np.stack([np.diag(factor_matrix(spec, p, x)) for x in u[:5]]))
    m = np.concatenate(mods)
    if kind == "diag_contractive":
        vals = np.concatenate(signed)
        assert (vals > 0).all() and (vals < 1).all()
    elif kind == "diag_signed":
        vals = np.concatenate(signed)
        assert (vals > -1).all() and (vals < 1).all()
        assert (vals < 0).any()
    elif kind == "diag_complex_damped":
        assert (m < 1).all()
    else:
        assert np.abs(m - 1).max() <= 1e-12


def test_dense_transition_is_input_independent():
    spec, p = _params("dense_linear")
    u1, u2 = np.ones(DM), -np.ones(DM)
    assert np.array_equal(factor_matrix(spec, p, u1), factor_matrix(spec, p, u2))
    h = np.arange(8.0)
    assert np.allclose(apply_transition(spec, p, u1, h), p["W_h"] @ h, atol=1e-15)


def test_contractive_small_step_limit():
    spec, p = _params("diag_contractive")
    p["W_dt"][:] = 0.0
    p["dt_bias"][:] = -40.0  # softplus -> 4e-18
    h = np.linspace(-1, 1, 8)
    assert np.abs(apply_transition(spec, p, np.ones(DM), h) - h).max() < 1e-15


def test_simple_aussm_three_turns_return():
    spec = TransitionSpec("diag_complex_unitary_nostep", 2)
    # one lane, angle 2 pi/3 per unit token
    p = {"W_lam": np.array([[2 * math.pi / 3]]), "b_lam": np.zeros(1)}
    h = np.array([1.0, 0.0])
    for _ in range(3):
        h = apply_transition(spec, p, np.array([1.0]), h)
    assert np.abs(h - [1.0, 0.0]).max() <= 1e-12


def test_complex_kinds_need_even_dim():
    with pytest.raises(ConfigError):
        TransitionSpec("diag_complex_unitary", 3)
    with pytest.raises(ConfigError):
        TransitionSpec("diag_wobbly", 4)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_factor_names_lane():
    spec, p = _params("diag_contractive", d=4)
    p["dt_bias"][2] = np.nan
    with pytest.raises(NumericError, match="lane 2"):
        apply_transition(spec, p, np.zeros(DM), np.ones(4))


# ---------------------------------------------------------------- activations


def test_activation_examples():
    assert np.array_equal(apply_activation("tanh", np.zeros(4)), np.zeros(4))
    assert apply_activation("groupsort2", [3, 1, -2, 5]).tolist() == [1, 3, -2, 5]
    assert apply_activation("min_pair", [3, 1, -2, 5]).tolist() == [1, 3, -2, 5]
    assert apply_activation("max_pair", [3, 1, -2, 5]).tolist() == [3, 1, 5, -2]
    z = np.random.default_rng(0).standard_normal(16) * 3 + 1
    y = apply_activation("layernorm", z)
    assert abs(y.mean()) < 1e-12
    assert abs(y.var() - 1) < 1e-5
    s = apply_activation(ActivationSpec("sphere"), z)
    assert abs(np.linalg.norm(s) - 1) < 1e-14


def test_sphere_rejects_zero():
    with pytest.raises(NumericError):
        apply_activation("sphere", np.zeros(4))
    with pytest.raises(NumericError):
        activation_jacobian("sphere", np.full(4, 1e-14))


def test_pair_ops_need_even_dim():
    with pytest.raises(ValueError):
        apply_activation("groupsort2", np.ones(3))


def test_tanh_jacobian_at_zero_is_identity():
    assert np.array_equal(activation_jacobian("tanh", np.zeros(5)), np.eye(5))


@pytest.mark.parametrize("kind", ACTIVATIONS)
def test_jacobian_matches_finite_differences(kind):
    rng = np.random.default_rng(5)
    for _ in range(5):
        z = away_from_ties(rng, 8)
        J = activation_jacobian(kind, z)
        assert rel_err(J, fd_jacobian(lambda v: apply_activation(kind, v), z)) <= 1e-6
        assert rel_err(tape_jacobian(kind, z), J) <= 1e-12


@pytest.mark.parametrize("kind", PAIR_ACTIVATIONS)
def test_pair_jacobians_are_permutations(kind):
    rng = np.random.default_rng(2)
    for _ in range(20):
        J = activation_jacobian(kind, rng.standard_normal(8))
        assert set(np.unique(J)) <= {0.0, 1.0}
        assert (J.sum(0) == 1).all() and (J.sum(1) == 1).all()


def test_pair_tie_keeps_order():
    J = activation_jacobian("groupsort2", np.array([0.3, 0.3]))
    assert np.array_equal(J, np.eye(2))


def test_layernorm_tape_matches_closed_form():
    rng = np.random.default_rng(9)
    for d in (4, 8, 33):
        z = rng.standard_normal(d) * 2
        mu = z.mean()
        sigma = math.sqrt(((z - mu) ** 2).mean() + 1e-5)
        pt = (z - mu) / sigma
        closed = (np.eye(d) - np.ones((d, d)) / d - np.outer(pt, pt) / d) / sigma
        assert np.abs(tape_jacobian("layernorm", z) - closed).max() <= 1e-9


def test_sphere_jacobian_closed_form():
    z = np.array([3.0, -4.0, 0.0, 12.0])
    n = 13.0
    hh = z / n
    assert np.abs(activation_jacobian("sphere", z) - (np.eye(4) - np.outer(hh, hh)) / n).max() < 1e-15


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_groupsort_sorts_each_pair(vals):
    y = apply_activation("groupsort2", vals)
    assert (y[0::2] <= y[1::2]).all()
    assert sorted(y.tolist()) == sorted(vals)


# ---------------------------------------------------------------- gates


def _gate(kind, seed=0, d=6):
    rng = np.random.default_rng(seed)
    p = init_gate(GateSpec(kind), d, DM, rng)
    return GateSpec(kind), {k: v + rng.standard_normal(v.shape) for k, v in p.items()}


def test_gate_none_is_ones():
    spec, p = _gate("none")
    assert np.array_equal(apply_gate(spec, p, np.ones(DM), np.arange(6.0)), np.ones(6))


def test_token_gate_ignores_state():
    spec, p = _gate("token")
    u = np.linspace(-1, 1, DM)
    g1 = apply_gate(spec, p, u, np.zeros(6))
    g2 = apply_gate(spec, p, u, np.full(6, 9.0))
    assert np.array_equal(g1, g2)
    assert ((g1 > 0) & (g1 < 1)).all()


def test_state_gate_depends_on_state():
    spec, p = _gate("state")
    u = np.linspace(-1, 1, DM)
    h = np.linspace(0, 1, 6)
    diff = np.abs(apply_gate(spec, p, u, h) - apply_gate(spec, p, u, h + 0.1)).max()
    assert diff > 1e-9


def test_unknown_specs_rejected():
    for cls in (GateSpec, ActivationSpec, InjectionSpec):
        with pytest.raises(ConfigError):
            cls("bogus")


# ---------------------------------------------------------------- injection


def test_mamba3_reduces_to_euler_when_mix_is_one():
    rng = np.random.default_rng(4)
    trans = TransitionSpec("diag_complex_damped", 4)
    p = init_transition(trans, DM, rng)
    p.update(init_injection(InjectionSpec("mamba3_trapezoid"), trans, DM, rng))
    p["W_mix"][:] = 0.0
    p["b_mix"][:] = 60.0  # sigmoid == 1.0 in f64
    u = rng.standard_normal((2, 5, DM))
    trap = injection_sequence(InjectionSpec("mamba3_trapezoid"), trans, p, u).value
    euler = injection_sequence(InjectionSpec("mamba_euler"), trans, p, u).value
    assert np.abs(trap - euler).max() == 0.0


def test_mamba3_uses_previous_input():
    rng = np.random.default_rng(4)
    trans = TransitionSpec("diag_complex_damped", 4)
    p = init_transition(trans, DM, rng)
    p.update(init_injection(InjectionSpec("mamba3_trapezoid"), trans, DM, rng))
    u = rng.standard_normal((1, 4, DM))
    u2 = u.copy()
    u2[0, 1] += 1.0
    a = injection_sequence(InjectionSpec("mamba3_trapezoid"), trans, p, u).value
    b = injection_sequence(InjectionSpec("mamba3_trapezoid"), trans, p, u2).value
    assert np.abs(a[0, 2] - b[0, 2]).max() > 1e-6
    assert np.array_equal(a[0, 0], b[0, 0])
