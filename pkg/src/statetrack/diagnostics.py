"""Probes on frozen checkpoints: perturbation recovery, separation ratio q(t),
symbolic-subspace decomposition, threshold crossings and return-word gain."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import autodiff as ad
from .groups import GroupSpec, enumerate_return_words, sample_batch
from .network import LN_EPS, ModelStack, forward, forward_with_state_override
from .operators import activate, activation_jacobian, factor_matrix, step_size

NEVER = "∞"
COLLAPSE_TOL = 1e-12


def _tidy_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------- perturbation


@dataclass
class PerturbationTrace:
    steps: np.ndarray  # t0..T (1-based)
    norms: np.ndarray  # (n, len(steps))
    ratios: np.ndarray
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    rho_step: float
    pca_basis: np.ndarray  # (2, d_state)
    pca_proj: np.ndarray  # (n, len(steps), 2)
    t0: int
    sigma: float

    def to_csv(self) -> str:
        rows = []
        for j, t in enumerate(self.steps):
            for name, arr in (("median_ratio", self.median), ("q25_ratio", self.q25), ("q75_ratio", self.q75)):
                rows.append((int(t), name, float(arr[j])))
        return _tidy_csv(["t", "quantity", "value"], rows)

    def summary(self) -> dict:
        return {"t0": self.t0, "sigma": self.sigma, "T": int(self.steps[-1]), "n": int(self.norms.shape[0]), "rho_step": self.rho_step}


def perturbation_from_states(clean: np.ndarray, pert: np.ndarray, t0: int, sigma: float = float("nan")) -> PerturbationTrace:
    """Build the trace from clean and perturbed block-1 states of shape ``(n, T, d)``."""
    T = clean.shape[1]
    e = pert[:, t0 - 1 :] - clean[:, t0 - 1 :]
    norms = np.linalg.norm(e, axis=-1)
    if (norms[:, 0] == 0).any():
        raise ValueError("zero perturbation at t0")
    ratios = norms / norms[:, :1]
    ratios[:, 0] = 1.0
    med = np.median(ratios, axis=0)
    q25, q75 = np.percentile(ratios, [25, 75], axis=0)
    rho = float(med[-1] ** (1.0 / (T - t0))) if T > t0 else float("nan")
    e0 = e[:, 0] - e[:, 0].mean(axis=0)
    _, _, vt = np.linalg.svd(e0, full_matrices=False)
    basis = vt[:2]
    if basis.shape[0] < 2:
        basis = np.vstack([basis, np.zeros((2 - basis.shape[0], basis.shape[1]))])
    proj = e @ basis.T
    return PerturbationTrace(np.arange(t0, T + 1), norms, ratios, med, q25, q75, rho, basis, proj, t0, sigma)


def probe_perturbation(stack: ModelStack, group: GroupSpec, n: int = 200, T: int = 200, t0: int = 20, sigma: float = 1e-2, seed: int = 0) -> PerturbationTrace:
    """Inject N(0, sigma^2) noise into the block-1 operator state at step ``t0`` and track the error."""
    if not sigma > 0:
        raise ValueError("sigma must be positive; a zero injection is vacuous")
    if not 1 <= t0 < T:
        raise ValueError("need 1 <= t0 < T")
    rng = np.random.default_rng([seed, 31])
    batch = sample_batch(group, n, T, [seed, 30])
    clean = forward(stack, batch.tokens).hidden[0]
    noise = rng.normal(0.0, sigma, size=(n, stack.config.d_state))
    pert = forward_with_state_override(stack, batch.tokens, t0, noise=noise).hidden[0]
    return perturbation_from_states(clean, pert, t0, sigma)


# ---------------------------------------------------------------- separation


@dataclass
class SeparationTrace:
    steps: np.ndarray  # 1..T
    counts: np.ndarray  # (T, |G|)
    centroids: np.ndarray  # (T, |G|, d)
    R_readout: np.ndarray
    M_readout: np.ndarray
    q_readout: np.ndarray
    R_latent: np.ndarray
    M_latent: np.ndarray
    q_latent: np.ndarray
    flagged: np.ndarray  # under-populated class at that step
    collapse: np.ndarray  # M = 0 at that step
    min_count: int
    states: np.ndarray | None = field(default=None, repr=False)  # (n, T, d)
    labels: np.ndarray | None = field(default=None, repr=False)  # (n, T)
    W_out: np.ndarray | None = field(default=None, repr=False)

    def q(self, space: str = "readout") -> np.ndarray:
        return self.q_readout if space == "readout" else self.q_latent

    def to_csv(self) -> str:
        rows = []
        for j, t in enumerate(self.steps):
            for space in ("readout", "latent"):
                for name in ("R", "M", "q"):
                    rows.append((int(t), name, space, float(getattr(self, f"{name}_{space}")[j])))
        return _tidy_csv(["t", "quantity", "space", "value"], rows)


def _pairwise_min(C: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Min pairwise distance between kept rows of ``C`` (T, G, d); inf when fewer than two."""
    diff = C[:, :, None, :] - C[:, None, :, :]
    D = np.sqrt((diff * diff).sum(axis=-1))
    G = C.shape[1]
    mask = keep[:, :, None] & keep[:, None, :] & ~np.eye(G, dtype=bool)[None]
    D = np.where(mask, D, np.inf)
    return D.reshape(D.shape[0], -1).min(axis=1)


def separation_from_states(H: np.ndarray, labels: np.ndarray, n_classes: int, W_out: np.ndarray, min_count: int = 5) -> SeparationTrace:
    """Time-current centroids and R/M/q in readout (through ``W_out``) and latent space."""
    H = np.asarray(H, dtype=float)
    labels = np.asarray(labels)
    with np.errstate(over="ignore", invalid="ignore"):  # runaway states give inf spreads, hence NaN q
        return _separation(H, labels, n_classes, np.asarray(W_out, dtype=float), min_count)


def _separation(H, labels, n_classes, W_out, min_count) -> SeparationTrace:
    n, T, _ = H.shape
    onehot = np.zeros((n, T, n_classes))
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    counts = onehot.sum(axis=0)  # (T, G)
    sums = np.einsum("ntg,ntd->tgd", onehot, H)
    C = sums / np.maximum(counts, 1)[..., None]
    populated = counts >= min_count
    flagged = ~populated.all(axis=1)
    own = np.take_along_axis(C, labels.T[..., None], axis=1)  # (T, n, d)
    dev = H - own.transpose(1, 0, 2)
    member_ok = np.take_along_axis(populated, labels.T, axis=1).T  # (n, T)
    w = member_ok / np.maximum(member_ok.sum(axis=0), 1)
    R_lat = (np.linalg.norm(dev, axis=-1) * w).sum(axis=0)
    R_read = (np.linalg.norm(dev @ W_out.T, axis=-1) * w).sum(axis=0)
    M_lat = _pairwise_min(C, populated)
    M_read = _pairwise_min(C @ W_out.T, populated)
    collapse = (M_read <= COLLAPSE_TOL) | (M_lat <= COLLAPSE_TOL)
    with np.errstate(divide="ignore", invalid="ignore"):
        q_read = np.where(flagged | (M_read <= COLLAPSE_TOL) | ~np.isfinite(M_read), np.nan, R_read / M_read)
        q_lat = np.where(flagged | (M_lat <= COLLAPSE_TOL) | ~np.isfinite(M_lat), np.nan, R_lat / M_lat)
    return SeparationTrace(np.arange(1, T + 1), counts.astype(np.int64), C, R_read, M_read, q_read, R_lat, M_lat, q_lat,
                           flagged, collapse, min_count, H, labels, W_out)


def probe_separation(stack: ModelStack, group: GroupSpec, n: int = 200, T_max: int = 512, min_count: int = 5, seed: int = 0) -> SeparationTrace:
    """Separation statistics of the residual stream read by ``W_out`` on fresh rollouts."""
    batch = sample_batch(group, n, T_max, [seed, 40])
    stream = forward(stack, batch.tokens).residual_stream
    return separation_from_states(stream, batch.labels, group.order, stack.readout, min_count)


# ---------------------------------------------------------------- subspace


@dataclass
class SubspaceTrace:
    steps: np.ndarray
    bases: np.ndarray  # (T, k, d)
    r_err_U: np.ndarray
    r_err_perp: np.ndarray
    r_sep: np.ndarray
    q_U: np.ndarray
    q_perp: np.ndarray
    flagged: np.ndarray
    par_sq: np.ndarray = field(repr=False)  # (n, T) per-rollout ||P_U delta||^2
    perp_sq: np.ndarray = field(repr=False)  # (n, T) ||delta - P_U delta||^2
    dev_sq: np.ndarray = field(repr=False)  # (n, T) ||delta||^2

    def pythagoras_residual(self) -> float:
        """Largest ``| ||P delta||^2 + ||delta_perp||^2 - ||delta||^2 |`` over rollouts and steps."""
        return float(np.abs(self.par_sq + self.perp_sq - self.dev_sq).max())

    def to_csv(self) -> str:
        rows = []
        for j, t in enumerate(self.steps):
            for name in ("r_err_U", "r_err_perp", "r_sep", "q_U", "q_perp"):
                rows.append((int(t), name, float(getattr(self, name)[j])))
        return _tidy_csv(["t", "quantity", "value"], rows)


def subspace_basis(centroids: np.ndarray, k: int, rel_tol: float = 1e-10) -> tuple[np.ndarray, bool]:
    """Top-``k`` right singular vectors of the centred centroid matrix and a rank-deficiency flag."""
    Cc = centroids - centroids.mean(axis=0)
    _, s, vt = np.linalg.svd(Cc, full_matrices=False)
    deficient = bool(s.size < k or (s[:k] <= rel_tol * max(s[0], 1e-300)).any())
    return vt[:k], deficient


def probe_subspace(sep: SeparationTrace, n_classes: int | None = None) -> SubspaceTrace:
    """Split within-class deviations into their symbolic-subspace and orthogonal parts."""
    if sep.states is None:
        raise ValueError("separation trace carries no states")
    H, labels = sep.states, sep.labels
    n, T, d = H.shape
    G = n_classes or sep.centroids.shape[1]
    k = G - 1
    bases = np.zeros((T, k, d))
    flagged = sep.flagged.copy()
    par_sq = np.zeros((n, T))
    perp_sq = np.zeros((n, T))
    dev_sq = np.zeros((n, T))
    for t in range(T):
        pop = sep.counts[t] >= sep.min_count
        if pop.sum() < 2:
            flagged[t] = True
            continue
        V, deficient = subspace_basis(sep.centroids[t][pop], k)
        flagged[t] |= deficient or pop.sum() < G
        bases[t, : V.shape[0]] = V
        V = bases[t]
        dev = H[:, t] - sep.centroids[t][labels[:, t]]
        coef = dev @ V.T
        perp = dev - coef @ V
        par_sq[:, t] = (coef * coef).sum(axis=1)
        perp_sq[:, t] = (perp * perp).sum(axis=1)
        dev_sq[:, t] = (dev * dev).sum(axis=1)
    r_U = np.sqrt(par_sq.mean(axis=0))
    r_perp = np.sqrt(perp_sq.mean(axis=0))
    r_sep = sep.M_latent
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = ~flagged & (r_sep > COLLAPSE_TOL) & np.isfinite(r_sep)
        q_U = np.where(ok, r_U / r_sep, np.nan)
        q_perp = np.where(ok, r_perp / r_sep, np.nan)
    return SubspaceTrace(sep.steps, bases, r_U, r_perp, r_sep, q_U, q_perp, flagged, par_sq, perp_sq, dev_sq)


# ---------------------------------------------------------------- crossings


@dataclass
class CrossingEntry:
    name: str
    steps: np.ndarray
    q: np.ndarray
    mp: int
    min_mp: int = 0  # the run enters the correlation only when mp >= min_mp


@dataclass
class CrossingReport:
    tau: float
    names: list[str]
    t_cross: list[float | None]  # None = never crossed
    mp: list[int]
    q_at_mp: list[float]
    pearson_r: float | None
    pearson_p: float | None
    n_pairs: int
    median_q_at_mp: float | None
    median_q_ci: tuple[float, float] | None
    notice: str = ""

    def to_dict(self) -> dict:
        def num(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else v
        return {
            "tau": self.tau,
            "models": [
                {"name": n, "t_cross": NEVER if t is None else t, "mp": m, "q_at_mp": num(q)}
                for n, t, m, q in zip(self.names, self.t_cross, self.mp, self.q_at_mp)
            ],
            "pearson_r": self.pearson_r, "pearson_p": self.pearson_p, "n_pairs": self.n_pairs,
            "median_q_at_mp": num(self.median_q_at_mp),
            "median_q_at_mp_ci95": None if self.median_q_ci is None else list(self.median_q_ci),
            "notice": self.notice,
        }

    def to_csv(self) -> str:
        rows = [(n, NEVER if t is None else t, m, q) for n, t, m, q in zip(self.names, self.t_cross, self.mp, self.q_at_mp)]
        return _tidy_csv(["model", "t_cross", "mp", "q_at_mp"], rows)


def crossing_time(steps, q, tau: float = 0.5) -> float | None:
    """First recorded step with ``q >= tau`` (NaN steps ignored); ``None`` if never."""
    q = np.asarray(q, dtype=float)
    hit = np.flatnonzero(np.nan_to_num(q, nan=-np.inf) >= tau)
    return None if hit.size == 0 else float(np.asarray(steps)[hit[0]])


def q_at(steps, q, t: float) -> float:
    """``q`` at step ``t`` by linear interpolation over finite recorded values."""
    steps = np.asarray(steps, dtype=float)
    q = np.asarray(q, dtype=float)
    ok = np.isfinite(q)
    if not ok.any() or t < steps[ok][0] or t > steps[ok][-1]:
        return float("nan")
    return float(np.interp(t, steps[ok], q[ok]))


def analyze_crossings(entries: list[CrossingEntry], tau: float = 0.5, min_mp: int = 0, n_boot: int = 1000, seed: int = 0) -> CrossingReport:
    """T_cross per model, Pearson r of (log T_cross, log mp) and a bootstrap CI of median q at mp.

    Only models with a finite T_cross, mp > 0 and mp at least both ``min_mp``
    and the entry's own ``min_mp`` enter the correlation.
    """
    names, tc, mps, qmp, caps = [], [], [], [], []
    for e in entries:
        caps.append(max(int(e.min_mp), min_mp))
        names.append(e.name)
        tc.append(crossing_time(e.steps, e.q, tau))
        mps.append(int(e.mp))
        qmp.append(q_at(e.steps, e.q, e.mp) if e.mp > 0 else float("nan"))
    pairs = [(t, m) for t, m, c in zip(tc, mps, caps) if t is not None and t > 0 and m > 0 and m >= c]
    notice = ""
    r = p = None
    if len(pairs) < 3:
        notice = f"correlation omitted: {len(pairs)} finite pairs (need 3)"
    else:
        x = np.log([a for a, _ in pairs])
        y = np.log([b for _, b in pairs])
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            notice = "correlation omitted: constant coordinate"
        else:
            res = stats.pearsonr(x, y)
            r, p = float(res.statistic), float(res.pvalue)
    finite_q = np.array([v for v in qmp if np.isfinite(v)])
    med = ci = None
    if finite_q.size:
        med = float(np.median(finite_q))
        rng = np.random.default_rng([seed, 50])
        boots = np.median(rng.choice(finite_q, size=(n_boot, finite_q.size), replace=True), axis=1)
        lo, hi = np.percentile(boots, [2.5, 97.5])
        ci = (float(lo), float(hi))
    return CrossingReport(tau, names, tc, mps, qmp, r, p, len(pairs), med, ci, notice)


# ---------------------------------------------------------------- return-word gain


@dataclass
class GainReport:
    words: list[tuple[int, ...]]
    gains: np.ndarray
    linearized: bool
    basis: np.ndarray

    @property
    def median(self) -> float:
        return float(np.median(self.gains)) if self.gains.size else float("nan")

    def to_csv(self) -> str:
        rows = [(" ".join(map(str, w)), float(g)) for w, g in zip(self.words, self.gains)]
        return _tidy_csv(["word", "gain"], rows)


def restricted_spectral_radius(A: np.ndarray, basis: np.ndarray) -> float:
    """Spectral radius of ``Q A Q^T`` for an orthonormal row basis ``Q``."""
    B = basis @ A @ basis.T
    return float(np.abs(np.linalg.eigvals(B)).max()) if B.size else 0.0


def word_gains(factors, words, basis: np.ndarray) -> np.ndarray:
    """Gain of each word given per-token linear factors ``factors[x]`` (d x d)."""
    out = np.empty(len(words))
    d = basis.shape[1]
    for i, w in enumerate(words):
        A = np.eye(d)
        for x in w:
            A = factors[x] @ A
        out[i] = restricted_spectral_radius(A, basis)
    return out


def _block1_inputs(stack: ModelStack) -> np.ndarray:
    """Normalised block-1 input ``u_x`` for every token (it depends on the token alone)."""
    cfg = stack.config
    P = stack.params
    ids = np.arange(cfg.n_tokens)
    if cfg.embedding == "onehot":
        E = np.eye(cfg.n_tokens, cfg.d_model)
    else:
        E = P["embed"][ids]
    return ad.layernorm(E, LN_EPS).value * P["blocks.0.ln_g"] + P["blocks.0.ln_b"]


def _block1_params(stack: ModelStack) -> dict:
    return {k[len("blocks.0."):]: v for k, v in stack.params.items() if k.startswith("blocks.0.")}


def token_factors(stack: ModelStack) -> list[np.ndarray]:
    """Per-token linear part of the block-1 update (gate folded in for token gates)."""
    layer = stack.config.layer()
    bp = _block1_params(stack)
    U = _block1_inputs(stack)
    out = []
    for u in U:
        A = factor_matrix(layer.transition, bp, u)
        if layer.gate.kind == "token":
            A = _sigmoid(bp["W_g"] @ u + bp["b_g"])[:, None] * A
        out.append(A)
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def step_jacobian(stack: ModelStack, token: int, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Block-1 update at state ``h`` for one token, and its exact state Jacobian.

    Injection is taken as the single-token (Euler/linear) term; the trapezoid
    carry does not depend on the state, so the Jacobian is unaffected.
    """
    layer = stack.config.layer()
    bp = _block1_params(stack)
    u = _block1_inputs(stack)[token]
    A = factor_matrix(layer.transition, bp, u)
    Ah = A @ h
    if layer.injection.kind == "linear":
        b = bp["W_x"] @ u + bp["b_h"]
    else:
        dt = step_size(bp, u).value
        if layer.transition.lanes != layer.state_dim:
            dt = np.repeat(dt, 2)
        b = dt * (bp["W_B"] @ u)
    if layer.gate.kind == "none":
        z = Ah + b
        D = A
    else:
        pre = bp["W_g"] @ u + bp["b_g"]
        if layer.gate.kind == "state":
            pre = pre + bp["U_g"] @ h
        g = _sigmoid(pre)
        z = g * Ah + b
        D = g[:, None] * A
        if layer.gate.kind == "state":
            D = D + (Ah * g * (1 - g))[:, None] * bp["U_g"]
    J = activation_jacobian(layer.activation, z) @ D
    return activate(layer.activation.kind, z).value, J


def empirical_state_basis(stack: ModelStack, group: GroupSpec, n: int = 400, T: int = 32, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Top ``|G|-1`` directions of the block-1 state centroids at the last step of fresh rollouts."""
    batch = sample_batch(group, n, T, [seed, 60])
    H = forward(stack, batch.tokens).hidden[0][:, -1]
    C = np.stack([H[batch.labels[:, -1] == g].mean(axis=0) if (batch.labels[:, -1] == g).any() else np.zeros(H.shape[1]) for g in range(group.order)])
    V, _ = subspace_basis(C, group.order - 1)
    return V, C


def return_word_gain(stack: ModelStack, group: GroupSpec, max_word_len: int = 4, *, basis: np.ndarray | None = None, seed: int = 0, max_words: int | None = 20000) -> GainReport:
    """Spectral radius on the empirical symbolic subspace of each return word's composed map.

    Affine first blocks use their exact per-token factors. Otherwise the update
    is linearised along the word's trajectory from every class centroid, the
    median over start classes is reported and the result is flagged.
    """
    words = enumerate_return_words(group, max_word_len)
    if max_words is not None:
        words = words[:max_words]
    if basis is None:
        basis, centroids = empirical_state_basis(stack, group, seed=seed)
    else:
        centroids = None
    if not words:
        return GainReport([], np.zeros(0), False, basis)
    if stack.config.is_affine:
        return GainReport(words, word_gains(token_factors(stack), words, basis), False, basis)
    if centroids is None:
        _, centroids = empirical_state_basis(stack, group, seed=seed)
    gains = np.empty(len(words))
    for i, w in enumerate(words):
        per_start = []
        for c in centroids:
            h = c.copy()
            A = np.eye(h.size)
            for x in w:
                h, J = step_jacobian(stack, x, h)
                A = J @ A
            per_start.append(restricted_spectral_radius(A, basis))
        gains[i] = float(np.median(per_start))
    return GainReport(words, gains, True, basis)
