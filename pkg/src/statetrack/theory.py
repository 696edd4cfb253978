"""Exact affine trackers and numerical checks of neutrality, transport and error budgets.

A tracker maps every group element ``g`` to a codebook vector ``c_g`` and every
token ``x`` to an affine update with ``F_x(c_g) = c_{g.x}``. For S3 the layered
tracker's rotation depends on the sign lane, which a word fixes once the start
element is known, so its composed maps are formed per start element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .groups import GroupSpec, build_group, enumerate_return_words

EXACT_TOL = 1e-12


def rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


# ---------------------------------------------------------------- subspace


@dataclass(frozen=True)
class SymbolicSubspace:
    basis: np.ndarray  # (dim, d) orthonormal rows

    @property
    def dim(self) -> int:
        return int(self.basis.shape[0])

    @classmethod
    def from_codebook(cls, codebook: np.ndarray, rel_tol: float = 1e-10) -> "SymbolicSubspace":
        """Orthonormal basis of ``span{c_g - c_h}``."""
        C = np.asarray(codebook, dtype=float)
        D = C[1:] - C[0]
        if not D.size:
            return cls(np.zeros((0, C.shape[1])))
        _, s, vt = np.linalg.svd(D, full_matrices=False)
        rank = int((s > rel_tol * max(s[0], 1e-300)).sum())
        return cls(vt[:rank])

    def project(self, v: np.ndarray) -> np.ndarray:
        return (v @ self.basis.T) @ self.basis

    def residual(self, v: np.ndarray) -> float:
        v = np.asarray(v, dtype=float)
        return float(np.abs(v - self.project(v)).max())

    def sample(self, rng, scale: float = 1.0) -> np.ndarray:
        return scale * rng.standard_normal(self.dim) @ self.basis


# ---------------------------------------------------------------- trackers


@dataclass
class ExactTracker:
    group: GroupSpec
    codebook: np.ndarray  # (|G|, d)
    A: list[np.ndarray] = field(default_factory=list)  # per token (plain trackers)
    b: list[np.ndarray] = field(default_factory=list)
    layered: bool = False
    parity: tuple[int, ...] = ()  # S3 layered: C2 indicator p_x
    turns: tuple[int, ...] = ()  # S3 layered: C3 indicator q_x

    @property
    def dim(self) -> int:
        return int(self.codebook.shape[1])

    @property
    def subspace(self) -> SymbolicSubspace:
        return SymbolicSubspace.from_codebook(self.codebook)

    def _branch(self, start: int) -> float:
        return 1.0 if self.codebook[start, 0] > 0 else -1.0

    def word_map(self, word, start: int) -> tuple[np.ndarray, np.ndarray]:
        """Composed affine map ``(A_s, b_s)`` of a word applied from element ``start``."""
        d = self.dim
        A = np.eye(d)
        b = np.zeros(d)
        if not self.layered:
            for x in word:
                A = self.A[x] @ A
                b = self.A[x] @ b + self.b[x]
            return A, b
        y = self._branch(start)
        for x in word:
            y = -y if self.parity[x] else y
            Ax = np.zeros((3, 3))
            Ax[0, 0] = -1.0 if self.parity[x] else 1.0
            Ax[1:, 1:] = rotation(2 * math.pi / 3 * self.turns[x] * y)
            A = Ax @ A
            b = Ax @ b
        return A, b

    def apply(self, word, start: int, h: np.ndarray) -> np.ndarray:
        A, b = self.word_map(word, start)
        return A @ h + b

    def transition_error(self) -> float:
        """Largest ``|F_x(c_g) - c_{g.x}|`` over all element/token pairs."""
        worst = 0.0
        n = self.group.order
        for g in range(n):
            for x in range(n):
                out = self.apply((x,), g, self.codebook[g])
                worst = max(worst, float(np.abs(out - self.codebook[self.group.table[g, x]]).max()))
        return worst

    def decode(self, h: np.ndarray) -> int:
        return int(np.argmin(((self.codebook - h) ** 2).sum(axis=1)))


def _s3_indicators(group: GroupSpec) -> tuple[tuple[int, ...], tuple[int, ...]]:
    # element = s^p r^q with s = (12), r = (123)
    dec = {"e": (0, 0), "(123)": (0, 1), "(132)": (0, 2), "(12)": (1, 0), "(23)": (1, 1), "(13)": (1, 2)}
    p = tuple(dec[lab][0] for lab in group.labels)
    q = tuple(dec[lab][1] for lab in group.labels)
    return p, q


def build_exact_tracker(name: str) -> ExactTracker:
    """Closed-form affine trackers for C2 (sign flip), C3 (rotation) and S3 (parity + conditional rotation)."""
    group = build_group(name)
    if name == "C2":
        return ExactTracker(group, np.array([[1.0], [-1.0]]), [np.eye(1), -np.eye(1)], [np.zeros(1)] * 2)
    if name == "C3":
        code = np.array([rotation(2 * math.pi * g / 3) @ [1.0, 0.0] for g in range(3)])
        return ExactTracker(group, code, [rotation(2 * math.pi * x / 3) for x in range(3)], [np.zeros(2)] * 3)
    if name == "S3":
        p, q = _s3_indicators(group)
        code = []
        for g in range(6):
            y = -1.0 if p[g] else 1.0
            ang = 2 * math.pi / 3 * q[g] * y
            code.append([y, math.cos(ang), math.sin(ang)])
        return ExactTracker(group, np.array(code), layered=True, parity=p, turns=q)
    raise ConfigError(f"no exact tracker for {name!r}; choose C2, C3 or S3")


def regular_tracker(group: GroupSpec) -> ExactTracker:
    """One-hot codebook with permutation matrices, valid for any finite group."""
    n = group.order
    A = []
    for x in range(n):
        P = np.zeros((n, n))
        P[group.table[np.arange(n), x], np.arange(n)] = 1.0
        A.append(P)
    return ExactTracker(group, np.eye(n), A, [np.zeros(n)] * n)


def c2_involution(c_e, c_a) -> ExactTracker:
    """Parity by the affine involution ``F_a(h) = -h + (c_e + c_a)``."""
    c_e = np.asarray(c_e, dtype=float)
    c_a = np.asarray(c_a, dtype=float)
    if np.allclose(c_e, c_a):
        raise ValueError("centroids must differ")
    d = c_e.size
    return ExactTracker(build_group("C2"), np.stack([c_e, c_a]), [np.eye(d), -np.eye(d)], [np.zeros(d), c_e + c_a])


# ---------------------------------------------------------------- verifiers


@dataclass
class NeutralityReport:
    group: str
    max_word_len: int
    n_words: int
    worst: float
    worst_word: tuple[int, ...] | None
    violations: list[tuple[tuple[int, ...], float]]
    tolerance: float

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "check": "affine_neutrality", "group": self.group, "max_word_len": self.max_word_len, "n_words": self.n_words,
            "worst_deviation": self.worst, "worst_word": None if self.worst_word is None else list(self.worst_word),
            "violations": [{"word": list(w), "deviation": v} for w, v in self.violations], "tolerance": self.tolerance,
            "passed": self.passed,
        }


def restricted_deviation(A: np.ndarray, basis: np.ndarray) -> float:
    """``||(A - I)|_U||_inf``: largest absolute entry of ``(A - I) Q^T``."""
    if basis.size == 0:
        return 0.0
    return float(np.abs((A - np.eye(A.shape[0])) @ basis.T).max())


def verify_affine_neutrality(tracker: ExactTracker, max_word_len: int = 6, tol: float = EXACT_TOL) -> NeutralityReport:
    """Check ``A_s|_U = I`` for every return word up to ``max_word_len`` (all start elements)."""
    words = enumerate_return_words(tracker.group, max_word_len)
    Q = tracker.subspace.basis
    starts = _branch_starts(tracker)
    worst, worst_word = 0.0, None
    bad = []
    for w in words:
        dev = max(restricted_deviation(tracker.word_map(w, g)[0], Q) for g in starts)
        if dev > worst:
            worst, worst_word = dev, w
        if dev > tol:
            bad.append((w, dev))
    return NeutralityReport(tracker.group.name, max_word_len, len(words), worst, worst_word, bad, tol)


def _branch_starts(tracker: ExactTracker) -> list[int]:
    if not tracker.layered:
        return [tracker.group.identity]
    # one representative start element per sign branch
    pos = next(g for g in range(tracker.group.order) if tracker.codebook[g, 0] > 0)
    neg = next(g for g in range(tracker.group.order) if tracker.codebook[g, 0] < 0)
    return [pos, neg]


@dataclass
class TransportReport:
    word: tuple[int, ...]
    is_return_word: bool
    delta: np.ndarray
    transported: np.ndarray  # (|G|, d): F_s(c_g + delta) - F_s(c_g)
    max_deviation: float  # from +delta

    @property
    def passed(self) -> bool:
        return self.max_deviation <= EXACT_TOL

    def to_dict(self) -> dict:
        return {"check": "perturbation_transport", "word": list(self.word), "is_return_word": self.is_return_word,
                "max_deviation": self.max_deviation, "passed": self.passed}


def verify_perturbation_transport(tracker: ExactTracker, delta, word) -> TransportReport:
    """Transport ``delta`` through the word from every codebook state."""
    delta = np.asarray(delta, dtype=float)
    word = tuple(int(x) for x in word)
    n = tracker.group.order
    moved = np.empty((n, tracker.dim))
    for g in range(n):
        c = tracker.codebook[g]
        moved[g] = tracker.apply(word, g, c + delta) - tracker.apply(word, g, c)
    is_return = tracker.group.product(word) == tracker.group.identity
    return TransportReport(word, is_return, delta, moved, float(np.abs(moved - delta).max()))


# ---------------------------------------------------------------- error budget


@dataclass
class BudgetSimConfig:
    codebook: np.ndarray  # (|G|, d)
    W_out: np.ndarray  # (|G|, d)
    eta_bar: np.ndarray  # drift per step, in U
    noise_scale: float = 0.0  # E||xi||^2 = noise_scale^2, xi isotropic in U
    tau: float = 0.5
    horizon: int = 10000
    trials: int = 1000

    def __post_init__(self):
        self.codebook = np.asarray(self.codebook, dtype=float)
        self.W_out = np.asarray(self.W_out, dtype=float)
        self.eta_bar = np.asarray(self.eta_bar, dtype=float)
        if self.subspace.residual(self.eta_bar) > 1e-9 * max(1.0, float(np.abs(self.eta_bar).max())):
            raise ConfigError("eta_bar must lie in the symbolic subspace")
        if self.horizon < 1 or self.trials < 1 or self.noise_scale < 0:
            raise ConfigError("horizon and trials must be positive and noise_scale non-negative")

    @property
    def subspace(self) -> SymbolicSubspace:
        return SymbolicSubspace.from_codebook(self.codebook)

    @property
    def separation(self) -> float:
        """``M``: the smallest readout distance between two codebook entries."""
        R = self.codebook @ self.W_out.T
        D = np.sqrt(((R[:, None] - R[None]) ** 2).sum(-1))
        return float(D[~np.eye(len(R), dtype=bool)].min())

    @property
    def drift_gain(self) -> float:
        return float(np.linalg.norm(self.W_out @ self.eta_bar))

    @property
    def predicted(self) -> float:
        g = self.drift_gain
        return math.inf if g == 0 else self.tau * self.separation / g


@dataclass
class BudgetResult:
    predicted: float
    crossings: np.ndarray  # per trial; inf = horizon exhausted
    separation: float

    @property
    def median(self) -> float:
        return float(np.median(self.crossings))

    @property
    def iqr(self) -> tuple[float, float]:
        lo, hi = np.percentile(self.crossings, [25, 75])
        return float(lo), float(hi)

    @property
    def ratio(self) -> np.ndarray:
        return self.crossings / self.predicted


def simulate_error_budget(cfg: BudgetSimConfig, seed: int = 0, chunk: int = 1024) -> BudgetResult:
    """Accumulate ``e(t) = sum_j (eta_bar + xi_j)`` and record the first ``t`` with ``q(t) >= tau``.

    ``q(t) = ||W_out e(t)|| / M``. Without noise every trial is identical, so a
    single trajectory is simulated.
    """
    Q = cfg.subspace.basis
    k = Q.shape[0]
    a = Q @ cfg.eta_bar  # drift coordinates in U
    B = cfg.W_out @ Q.T  # readout of U coordinates
    M = cfg.separation
    trials = cfg.trials if cfg.noise_scale > 0 else 1
    rng = np.random.default_rng([seed, 70])
    sd = cfg.noise_scale / math.sqrt(k) if k else 0.0
    z = np.zeros((trials, k))
    cross = np.full(trials, np.inf)
    live = np.ones(trials, dtype=bool)
    t0 = 0
    while t0 < cfg.horizon and live.any():
        n = min(chunk, cfg.horizon - t0)
        idx = np.flatnonzero(live)
        noise = z[idx, None, :]
        if sd > 0:
            noise = noise + np.cumsum(rng.normal(0.0, sd, size=(idx.size, n, k)), axis=1)
        else:
            noise = np.broadcast_to(noise, (idx.size, n, k))
        # drift as t * a: a running sum of a constant drifts by ulps and misses exact ties
        t = np.arange(t0 + 1, t0 + n + 1, dtype=float)[:, None]
        path = noise + t * a
        q = np.linalg.norm(path @ B.T, axis=-1) / M
        hit = q >= cfg.tau
        any_hit = hit.any(axis=1)
        first = hit.argmax(axis=1)
        cross[idx[any_hit]] = t0 + first[any_hit] + 1
        live[idx[any_hit]] = False
        z[idx] = noise[:, -1]
        t0 += n
    if trials == 1 and cfg.trials > 1:
        cross = np.full(cfg.trials, cross[0])
    return BudgetResult(cfg.predicted, cross, M)


def regular_cyclic_codebook(k: int, r: float = 1.0, d: int = 2) -> np.ndarray:
    ang = 2 * math.pi * np.arange(k) / k
    C = np.zeros((k, d))
    C[:, 0] = r * np.cos(ang)
    C[:, 1] = r * np.sin(ang)
    return C


@dataclass
class DiffusionResult:
    steps: np.ndarray
    rms: np.ndarray
    slope: float


def diffusive_rms(noise_scale: float = 1.0, steps: int = 10000, trials: int = 1000, k: int = 2, seed: int = 0, chunk: int = 500) -> DiffusionResult:
    """RMS of ``||e(t)||`` for a zero-drift random walk in a ``k``-dim subspace, with its log-log slope."""
    rng = np.random.default_rng([seed, 80])
    sd = noise_scale / math.sqrt(k)
    z = np.zeros((trials, k))
    msq = np.empty(steps)
    for t0 in range(0, steps, chunk):
        n = min(chunk, steps - t0)
        path = z[:, None, :] + np.cumsum(rng.normal(0.0, sd, size=(trials, n, k)), axis=1)
        msq[t0 : t0 + n] = (path * path).sum(-1).mean(0)
        z = path[:, -1]
    t = np.arange(1, steps + 1)
    rms = np.sqrt(msq)
    pts = np.unique(np.geomspace(1, steps, 60).astype(int)) - 1
    slope = float(np.polyfit(np.log(t[pts]), np.log(rms[pts]), 1)[0])
    return DiffusionResult(t, rms, slope)


@dataclass(frozen=True)
class CyclicMargin:
    separation: float  # 2 r sin(pi/k)
    tolerance: float  # r sin(pi/k)
    sector: float  # pi/k


def cyclic_margin(k: int, r: float = 1.0) -> CyclicMargin:
    if k < 2 or r <= 0:
        raise ValueError("need k >= 2 and r > 0")
    s = math.sin(math.pi / k)
    return CyclicMargin(2 * r * s, r * s, math.pi / k)
