"""Finite groups, state-tracking batches and exact running-product labels.

Elements are dense indices ``0..|G|-1``. The multiplication convention is
``table[a][b] = a . b`` and a trajectory evolves as ``g_t = g_{t-1} . x_t``.
For permutation groups ``a . b`` is the composition ``a o b`` (apply ``b``
first), which gives ``(12) . (23) = (123)`` in cycle notation.
"""

from __future__ import annotations

import csv
import io
import itertools
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ResourceError

MAX_RETURN_WORD_LEN = 8
MAX_ENUMERATED_WORDS = 20_000_000


@dataclass(frozen=True)
class GroupSpec:
    name: str
    table: np.ndarray
    identity: int
    generators: tuple[int, ...]
    labels: tuple[str, ...] = field(default=())

    @property
    def order(self) -> int:
        return int(self.table.shape[0])

    def mul(self, a: int, b: int) -> int:
        return int(self.table[a, b])

    def inverse(self, a: int) -> int:
        return int(np.flatnonzero(self.table[a] == self.identity)[0])

    def element(self, label: str) -> int:
        return self.labels.index(label)

    def product(self, word) -> int:
        g = self.identity
        for x in word:
            g = int(self.table[g, x])
        return g


def _perm_compose(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(a[b[i]] for i in range(len(a)))


def _cycle_label(p: tuple[int, ...]) -> str:
    seen: set[int] = set()
    cycles = []
    for start in range(len(p)):
        if start in seen or p[start] == start:
            seen.add(start)
            continue
        cyc = [start]
        seen.add(start)
        j = p[start]
        while j != start:
            cyc.append(j)
            seen.add(j)
            j = p[j]
        cycles.append("(" + "".join(str(i + 1) for i in cyc) + ")")
    return "".join(cycles) or "e"


def _perm_from_cycles(n: int, text: str) -> tuple[int, ...]:
    p = list(range(n))
    for cyc in re.findall(r"\(([0-9]+)\)", text):
        idx = [int(c) - 1 for c in cyc]
        for i, j in zip(idx, idx[1:] + idx[:1]):
            p[i] = j
    return tuple(p)


def _table_from_elements(elements, compose) -> np.ndarray:
    index = {e: i for i, e in enumerate(elements)}
    n = len(elements)
    table = np.empty((n, n), dtype=np.int64)
    for i, a in enumerate(elements):
        for j, b in enumerate(elements):
            table[i, j] = index[compose(a, b)]
    return table


def cyclic(k: int) -> GroupSpec:
    if k < 1:
        raise ConfigError(f"cyclic group order must be positive, got {k}")
    idx = np.arange(k)
    table = (idx[:, None] + idx[None, :]) % k
    return GroupSpec(f"C{k}", table, 0, (1 % k,), tuple(str(i) for i in range(k)))


def symmetric3() -> GroupSpec:
    # canonical element ordering for S3
    labels = ("e", "(12)", "(13)", "(23)", "(123)", "(132)")
    perms = [_perm_from_cycles(3, s) for s in labels]
    table = _table_from_elements(perms, _perm_compose)
    gens = (labels.index("(12)"), labels.index("(123)"))
    return GroupSpec("S3", table, 0, gens, labels)


def alternating4() -> GroupSpec:
    perms = [p for p in itertools.permutations(range(4)) if _parity(p) == 0]
    perms.sort()  # identity (0,1,2,3) sorts first
    table = _table_from_elements(perms, _perm_compose)
    labels = tuple(_cycle_label(p) for p in perms)
    gens = (labels.index("(123)"), labels.index("(12)(34)"))
    return GroupSpec("A4", table, 0, gens, labels)


def _parity(p) -> int:
    inv = sum(1 for i in range(len(p)) for j in range(i + 1, len(p)) if p[i] > p[j])
    return inv % 2


def direct_product(g: GroupSpec, h: GroupSpec) -> GroupSpec:
    """Componentwise product; element ``(a, b)`` has index ``a * |H| + b``."""
    n, m = g.order, h.order
    table = np.empty((n * m, n * m), dtype=np.int64)
    for a1, b1, a2, b2 in itertools.product(range(n), range(m), range(n), range(m)):
        table[a1 * m + b1, a2 * m + b2] = g.table[a1, a2] * m + h.table[b1, b2]
    gens = tuple(a * m + h.identity for a in g.generators) + tuple(
        g.identity * m + b for b in h.generators
    )
    g_labels = g.labels or tuple(map(str, range(n)))
    h_labels = h.labels or tuple(map(str, range(m)))
    labels = tuple(f"({a},{b})" for a in g_labels for b in h_labels)
    return GroupSpec(f"{g.name}x{h.name}", table, g.identity * m + h.identity, gens, labels)


def build_group(name: str) -> GroupSpec:
    """Build one of the supported groups: ``Ck``, ``S3``, ``A4`` or ``AxB`` products."""
    key = name.strip()
    if "x" in key:
        parts = key.split("x")
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"unknown group {name!r}")
        return direct_product(build_group(parts[0]), build_group(parts[1]))
    if key == "S3":
        return symmetric3()
    if key == "A4":
        return alternating4()
    m = re.fullmatch(r"C([0-9]+)", key)
    if m and 1 <= int(m.group(1)) <= 64:
        return cyclic(int(m.group(1)))
    raise ConfigError(f"unknown group {name!r}; expected Ck, S3, A4 or a product like C2xC4")


def check_group_axioms(group: GroupSpec) -> None:
    """Exhaustively check the group axioms; raises ``ValueError`` on the first failure."""
    t = group.table
    n = group.order
    full = np.arange(n)
    if t.shape != (n, n) or t.min() < 0 or t.max() >= n:
        raise ValueError("table entries out of range")
    for i in range(n):
        if not np.array_equal(np.sort(t[i]), full) or not np.array_equal(np.sort(t[:, i]), full):
            raise ValueError(f"row/column {i} is not a permutation")
    if not np.array_equal(_assoc_lhs(t), _assoc_rhs(t)):
        raise ValueError("table is not associative")
    e = group.identity
    if not (np.array_equal(t[e], full) and np.array_equal(t[:, e], full)):
        raise ValueError("identity row/column is not the identity map")
    if set(closure(group, group.generators)) != set(range(n)):
        raise ValueError("generators do not generate the group")


def _assoc_lhs(t: np.ndarray) -> np.ndarray:
    # (a.b).c indexed [a, b, c]
    return t[t[:, :, None], np.arange(t.shape[0])[None, None, :]]


def _assoc_rhs(t: np.ndarray) -> np.ndarray:
    # a.(b.c) indexed [a, b, c]
    return t[np.arange(t.shape[0])[:, None, None], t[None, :, :]]


def closure(group: GroupSpec, gens) -> list[int]:
    seen = {group.identity}
    frontier = [group.identity]
    while frontier:
        nxt = []
        for g in frontier:
            for s in gens:
                h = int(group.table[g, s])
                if h not in seen:
                    seen.add(h)
                    nxt.append(h)
        frontier = nxt
    return sorted(seen)


def running_product(group: GroupSpec, tokens, g0: int | None = None) -> np.ndarray:
    """Labels ``g_1..g_T`` of the running product. Accepts ``(T,)`` or ``(B, T)`` tokens."""
    x = np.asarray(tokens, dtype=np.int64)
    if x.size and (x.min() < 0 or x.max() >= group.order):
        raise IndexError("token outside the group")
    start = group.identity if g0 is None else int(g0)
    if not 0 <= start < group.order:
        raise IndexError(f"start state {start} outside the group")
    squeeze = x.ndim == 1
    x2 = x[None, :] if squeeze else x
    out = np.empty_like(x2)
    g = np.full(x2.shape[0], start, dtype=np.int64)
    for t in range(x2.shape[1]):
        g = group.table[g, x2[:, t]]
        out[:, t] = g
    return out[0] if squeeze else out


@dataclass(frozen=True)
class Batch:
    tokens: np.ndarray  # (n, T)
    labels: np.ndarray  # (n, T)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sequence", "step", "token", "label"])
        n, T = self.tokens.shape
        for i in range(n):
            for t in range(T):
                w.writerow([i, t + 1, int(self.tokens[i, t]), int(self.labels[i, t])])
        return buf.getvalue()

    def to_bytes(self) -> bytes:
        """Flat little-endian int32 blob: header ``(n, T)`` then tokens then labels."""
        n, T = self.tokens.shape
        head = np.array([n, T], dtype="<i4").tobytes()
        return head + self.tokens.astype("<i4").tobytes() + self.labels.astype("<i4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Batch":
        n, T = np.frombuffer(blob[:8], dtype="<i4")
        body = np.frombuffer(blob[8:], dtype="<i4").astype(np.int64)
        return cls(body[: n * T].reshape(n, T), body[n * T :].reshape(n, T))


def sample_batch(group: GroupSpec, n: int, T: int, rng_seed, *, generators_only: bool = False) -> Batch:
    """i.i.d. uniform tokens (over all of G, or over the generators) with exact labels.

    ``rng_seed`` may be an int, a sequence of ints or a ``numpy.random.Generator``.
    """
    if n < 1 or T < 1:
        raise ValueError("need n >= 1 and T >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if generators_only:
        pool = np.asarray(group.generators, dtype=np.int64)
        tokens = pool[rng.integers(0, len(pool), size=(n, T))]
    else:
        tokens = rng.integers(0, group.order, size=(n, T), dtype=np.int64)
    return Batch(tokens, running_product(group, tokens))


def enumerate_return_words(group: GroupSpec, max_len: int) -> list[tuple[int, ...]]:
    """All words over G of length ``1..max_len`` whose product is the identity.

    Such a word acts as the identity on every start state.
    """
    if max_len > MAX_RETURN_WORD_LEN:
        raise ResourceError(f"max_len={max_len} exceeds the guard of {MAX_RETURN_WORD_LEN}")
    total = sum(group.order**k for k in range(1, max_len + 1))
    if total > MAX_ENUMERATED_WORDS:
        raise ResourceError(f"{total} candidate words exceed the enumeration budget")
    out: list[tuple[int, ...]] = []
    n = group.order
    # words of length k-1 grouped by their product; a return word of length k is a
    # prefix followed by the inverse of the prefix product
    inv = [group.inverse(a) for a in range(n)]
    prefixes: list[tuple[tuple[int, ...], int]] = [((), group.identity)]
    for k in range(1, max_len + 1):
        for word, prod in prefixes:
            out.append(word + (inv[prod],))
        if k < max_len:
            prefixes = [(w + (x,), int(group.table[p, x])) for w, p in prefixes for x in range(n)]
    out.sort(key=lambda w: (len(w), w))
    return out
