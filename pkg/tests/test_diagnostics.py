import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from statetrack.diagnostics import (
    NEVER, CrossingEntry, analyze_crossings, crossing_time, probe_perturbation, probe_separation, probe_subspace,
    q_at, restricted_spectral_radius, return_word_gain, separation_from_states, token_factors, word_gains,
)
from statetrack.groups import build_group, enumerate_return_words, sample_batch
from statetrack.network import ModelConfig, decode_nearest_centroid, init_stack
from statetrack.theory import c2_involution

rng0 = np.random.default_rng(0)


def _paired(dev):
    """Stack deviations with their negatives so every class mean is exact."""
    return np.concatenate([dev, -dev], axis=0)


def _clusters(C, labels, dev):
    return C[labels] + dev


# ---------------------------------------------------------------- separation


def test_two_class_hand_geometry():
    T, half = 7, 20
    labels = np.tile(np.repeat([0, 1], half // 2)[:, None], (2, T))
    dev = _paired(np.full((half, T, 1), 0.1))
    H = _clusters(np.array([[1.0], [-1.0]]), labels, dev)
    sep = separation_from_states(H, labels, 2, np.eye(1))
    assert np.abs(sep.q_readout - 0.05).max() <= 1e-15
    assert np.abs(sep.M_latent - 2.0).max() <= 1e-15
    assert not sep.flagged.any() and not sep.collapse.any()


def test_identical_states_flag_collapse():
    labels = np.tile([[0], [1]], (10, 4))
    sep = separation_from_states(np.ones((20, 4, 3)), labels, 2, np.eye(3))
    assert sep.collapse.all()
    assert np.isnan(sep.q_readout).all() and np.isnan(sep.q_latent).all()


def test_underpopulated_class_is_flagged():
    labels = np.zeros((12, 3), dtype=int)
    labels[:3, 1] = 1  # only 3 members of class 1 at step 2
    labels[:6, 2] = 1
    H = rng0.normal(size=(12, 3, 2)) + 5 * labels[..., None]
    sep = separation_from_states(H, labels, 2, np.eye(2), min_count=5)
    assert list(sep.flagged) == [True, True, False]
    assert np.isnan(sep.q_readout[:2]).all() and np.isfinite(sep.q_readout[2])


def test_readout_space_uses_w_out():
    labels = np.tile([[0], [1]], (10, 2))
    dev = _paired(rng0.normal(size=(10, 2, 3)))
    C = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    H = _clusters(C, labels, dev)
    W = np.array([[2.0, 0.0, 0.0]])
    sep = separation_from_states(H, labels, 2, W)
    assert np.abs(sep.M_readout - 2.0).max() <= 1e-12
    assert np.abs(sep.R_readout - 2 * np.abs(dev[..., 0]).mean(axis=0)).max() <= 1e-12


def test_c2_involution_keeps_q_constant():
    tr = c2_involution([1.0, 0.5], [-1.0, 0.0])
    rng = np.random.default_rng(3)
    n, T = 100, 40
    tokens = rng.integers(0, 2, size=(n, T))
    delta = rng.normal(scale=0.05, size=(n, 2))
    H = np.zeros((2 * n, T, 2))
    labels = np.zeros((2 * n, T), dtype=int)
    for i in range(n):
        for sign, row in ((1, i), (-1, n + i)):
            h, g = tr.codebook[0] + sign * delta[i], 0
            for t in range(T):
                h = tr.apply((tokens[i, t],), g, h)
                g = tr.group.table[g, tokens[i, t]]
                H[row, t], labels[row, t] = h, g
    sep = separation_from_states(H, labels, 2, np.array([[1.0, 1.0]]), min_count=1)
    q = sep.q_latent[~sep.flagged]
    assert q.size > 30
    assert np.ptp(q) <= 1e-12
    assert q[0] == pytest.approx(np.linalg.norm(delta, axis=1).mean() / np.linalg.norm(tr.codebook[0] - tr.codebook[1]), rel=1e-12)


def test_csv_one_row_per_step_quantity_space():
    labels = np.tile([[0], [1]], (10, 3))
    sep = separation_from_states(rng0.normal(size=(20, 3, 2)), labels, 2, np.eye(2))
    lines = sep.to_csv().splitlines()
    assert lines[0] == "t,quantity,space,value"
    assert len(lines) == 1 + 3 * 3 * 2
    assert len({tuple(l.split(",")[:3]) for l in lines[1:]}) == 18


def test_probe_separation_on_model():
    stack = init_stack(ModelConfig.from_preset("tanh_rnn", 2, d_model=8, d_state=4), 0)
    sep = probe_separation(stack, build_group("C2"), n=40, T_max=16)
    assert sep.states.shape == (40, 16, 8)  # residual stream
    assert sep.counts.sum(axis=1).tolist() == [40] * 16


# ---------------------------------------------------------------- nearest-centroid sufficiency


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_bounded_deviations_decode_exactly(G, seed):
    rng = np.random.default_rng(seed)
    d = 4
    C = rng.normal(size=(G, d)) * 3
    M = min(np.linalg.norm(C[a] - C[b]) for a in range(G) for b in range(a))
    dirs = rng.normal(size=(500, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = rng.integers(0, G, size=500)
    H = C[labels] + dirs * rng.uniform(0, 0.499 * M, size=(500, 1))
    assert np.array_equal(decode_nearest_centroid(C, H), labels)


# ---------------------------------------------------------------- subspace


def _plane_data(inside: bool, seed=0):
    rng = np.random.default_rng(seed)
    d, T, half = 6, 5, 30
    basis = np.linalg.qr(rng.normal(size=(d, d)))[0]
    plane, normal = basis[:, :2], basis[:, 2:]
    C = np.array([[0.0, 0.0], [1.0, 0.0], [0.3, 1.2]]) @ plane.T + 0.7 * normal[:, 0]
    labels = np.tile((np.arange(half) % 3)[:, None], (2, T))
    coeff = rng.normal(scale=0.1, size=(half, T, 2 if inside else d - 2))
    dev = _paired(coeff @ (plane if inside else normal).T)
    return separation_from_states(C[labels] + dev, labels, 3, np.eye(d), min_count=5), dev


def test_subspace_inside_span():
    sub = probe_subspace(_plane_data(True)[0])
    assert sub.r_err_perp.max() <= 1e-9
    assert sub.r_err_U.min() > 1e-3
    assert not sub.flagged.any()


def test_subspace_orthogonal():
    sub = probe_subspace(_plane_data(False)[0])
    assert sub.r_err_U.max() <= 1e-9
    assert sub.r_err_perp.min() > 1e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5))
def test_pythagoras_random_traces(seed, G):
    rng = np.random.default_rng(seed)
    n, T, d = 40, 6, 7
    labels = rng.integers(0, G, size=(n, T))
    H = rng.normal(size=(n, T, d)) * rng.uniform(0.1, 10)
    sub = probe_subspace(separation_from_states(H, labels, G, np.eye(d), min_count=1))
    assert sub.pythagoras_residual() <= 1e-9
    pop = np.sqrt(sub.dev_sq.mean(axis=0))
    assert np.abs(pop ** 2 - sub.r_err_U ** 2 - sub.r_err_perp ** 2).max() <= 1e-9


def test_subspace_basis_orthonormal():
    sep, _ = _plane_data(True)
    sub = probe_subspace(sep)
    for V in sub.bases:
        assert np.abs(V @ V.T - np.eye(2)).max() <= 1e-12


def test_subspace_requires_states():
    sep, _ = _plane_data(True)
    sep.states = None
    with pytest.raises(ValueError):
        probe_subspace(sep)


# ---------------------------------------------------------------- perturbation


def test_zero_sigma_rejected():
    stack = init_stack(ModelConfig.from_preset("tanh_rnn", 2, d_model=8, d_state=4), 0)
    with pytest.raises(ValueError):
        probe_perturbation(stack, build_group("C2"), n=4, T=10, t0=3, sigma=0.0)


def test_pca_projection_is_contraction():
    stack = init_stack(ModelConfig.from_preset("tanh_rnn", 2, d_model=8, d_state=6), 1)
    tr = probe_perturbation(stack, build_group("C2"), n=30, T=40, t0=5)
    assert tr.ratios[:, 0].tolist() == [1.0] * 30
    assert (np.linalg.norm(tr.pca_proj, axis=-1) <= tr.norms * (1 + 1e-12)).all()
    assert np.abs(tr.pca_basis @ tr.pca_basis.T - np.eye(2)).max() <= 1e-12
    assert tr.rho_step == pytest.approx(tr.median[-1] ** (1 / 35), rel=1e-14)


# ---------------------------------------------------------------- crossings


def test_linear_q_crosses_at_fifty():
    t = np.arange(1, 201)
    assert crossing_time(t, 0.01 * t) == 50.0


def test_never_crossing_sentinel():
    t = np.arange(1, 101)
    assert crossing_time(t, np.full(100, 0.3)) is None
    rep = analyze_crossings([CrossingEntry("a", t, np.full(100, 0.3), 64)])
    assert rep.to_dict()["models"][0]["t_cross"] == NEVER == "∞"
    assert rep.pearson_r is None and "omitted" in rep.notice


def test_nan_steps_are_ignored():
    t = np.arange(1, 6)
    assert crossing_time(t, [np.nan, 0.9, 0.1, 0.6, 0.7]) == 2.0
    assert math.isnan(q_at(t, [np.nan] * 5, 3))
    assert q_at(t, [0.0, 1.0, 2.0, 3.0, 4.0], 2.5) == 1.5


def test_constructed_ensemble_is_perfectly_correlated():
    t = np.arange(1, 3001, dtype=float)
    entries = [CrossingEntry(f"m{k}", t, t / (2 * tc), int(3 * tc)) for k, tc in enumerate([40, 90, 150, 400, 700])]
    rep = analyze_crossings(entries)
    assert rep.t_cross == [40.0, 90.0, 150.0, 400.0, 700.0]
    assert rep.pearson_r == pytest.approx(1.0, abs=1e-12)
    assert rep.n_pairs == 5
    assert rep.median_q_at_mp == pytest.approx(1.5, abs=1e-12)


def test_cap_filter_and_bootstrap():
    t = np.arange(1, 1001, dtype=float)
    entries = [CrossingEntry(f"m{k}", t, 0.002 * t * (1 + k), 32 * (k + 1), min_mp=64) for k in range(6)]
    rep = analyze_crossings(entries, seed=1)
    assert rep.n_pairs == 5
    lo, hi = rep.median_q_ci
    assert lo <= rep.median_q_at_mp <= hi
    assert analyze_crossings(entries, seed=1).to_dict() == rep.to_dict()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=20, max_size=20), st.lists(st.floats(0, 0.5), min_size=20, max_size=20),
       st.floats(0.05, 0.95))
def test_crossing_time_monotone(q, bump, tau):
    t = np.arange(1, 21)
    a = crossing_time(t, q, tau)
    b = crossing_time(t, np.add(q, bump), tau)
    assert a is None or (b is not None and b <= a)


# ---------------------------------------------------------------- gain


def test_involution_gain_is_one():
    tr = c2_involution([1.0, 0.0, 2.0], [-1.0, 0.5, 0.0])
    Q = tr.subspace.basis
    g = word_gains(tr.A, [(1, 1), (1,), (0, 1, 1)], Q)
    assert np.abs(g - 1.0).max() <= 1e-12


def test_contractive_diagonal_bound():
    rng = np.random.default_rng(4)
    d = 6
    factors = [np.diag(rng.uniform(-0.9, 0.9, d)) for _ in range(3)]
    words = enumerate_return_words(build_group("C3"), 5)
    Q = np.linalg.qr(rng.normal(size=(d, 2)))[0].T
    g = word_gains(factors, words, Q)
    assert all(v <= 0.9 ** len(w) + 1e-15 for v, w in zip(g, words))


def test_dense_gain_matches_eigensolver():
    rng = np.random.default_rng(5)
    d = 5
    factors = [rng.normal(size=(d, d)) / 2 for _ in range(3)]
    Q = np.linalg.qr(rng.normal(size=(d, 2)))[0].T
    words = enumerate_return_words(build_group("C3"), 4)
    g = word_gains(factors, words, Q)
    for v, w in zip(g, words):
        A = np.linalg.multi_dot([factors[x] for x in reversed(w)] + [np.eye(d)])
        oracle = np.abs(scipy.linalg.eigvals(Q @ A @ Q.T)).max()
        assert abs(v - oracle) <= 1e-9 * max(1.0, oracle)


def test_return_word_gain_on_affine_stack():
    stack = init_stack(ModelConfig.from_preset("linear_rnn", 2, d_model=8, d_state=4), 2)
    rep = return_word_gain(stack, build_group("C2"), 4)
    assert not rep.linearized
    W = stack.params["blocks.0.W_h"]
    assert all(np.array_equal(F, W) for F in token_factors(stack))
    for w, g in zip(rep.words, rep.gains):
        oracle = np.abs(scipy.linalg.eigvals(rep.basis @ np.linalg.matrix_power(W, len(w)) @ rep.basis.T)).max()
        assert abs(g - oracle) <= 1e-9


def test_return_word_gain_linearizes_nonlinear_stack():
    stack = init_stack(ModelConfig.from_preset("tanh_rnn", 2, d_model=8, d_state=4), 2)
    rep = return_word_gain(stack, build_group("C2"), 2)
    assert rep.linearized and len(rep.gains) == 3 and np.isfinite(rep.gains).all()
    assert rep.to_csv().splitlines()[0] == "word,gain"


def test_restricted_radius_empty_basis():
    assert restricted_spectral_radius(np.eye(3), np.zeros((0, 3))) == 0.0
