"""Intertwining operators D, L and the carre du champ on trace polynomials.

Conventions. ``D`` and ``L`` are the N-independent parts of half the
time-weighted Laplacian, ``(1/2) sum_j t_j Delta_j``, acting on trace
polynomial functions::

    (1/2)(T.Delta)[P]_N = [D P]_N + N^-2 [L P]_N

The factor 1/2 makes ``exp(D + L/N^2)`` the transition semigroup of the
matrix SDE ``dB = B dW - (r - s)/2 B dt`` run for times ``t_j``.

All rules follow from inserting a basis element xi after each ``(j, 1)`` letter
and xi* before each ``(j, *)`` letter, and from the two basis sums
``sum xi A xi = (s - r) tr(A) I`` and ``sum xi* A xi = (s + r) tr(A) I``.
"""
from __future__ import annotations

import functools
import itertools
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from .linalg import expm_dense
from .trace_algebra import (
    ONE,
    Letter,
    TracePoly,
    _add_into,
    canonical_word,
    mono_mul,
    mono_sort_key,
    monomial_degree,
    word_traces,
)

DEFAULT_DIM_CAP = 200_000


class DimensionCapError(RuntimeError):
    pass


class IndexMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class RSParams:
    """Metric parameters; (1, 0) is unitary Brownian motion, (1/2, 1/2) the standard GL_N one."""

    r: float
    s: float

    def __post_init__(self):
        if not (self.r >= 0 and self.s >= 0 and self.r + self.s > 0):
            raise ValueError(f"need r, s >= 0 with r + s > 0, got ({self.r}, {self.s})")
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "s", float(self.s))

    @property
    def same(self) -> float:
        """Weight for two insertions of the same type (xi, xi) or (xi*, xi*)."""
        return self.s - self.r

    @property
    def mixed(self) -> float:
        return self.s + self.r

    def kappa(self, star_a: bool, star_b: bool) -> float:
        return self.same if star_a == star_b else self.mixed


def as_rs(rs) -> RSParams:
    if isinstance(rs, RSParams):
        return rs
    return RSParams(*rs)


def as_times(T, indices: Iterable[int] | None = None) -> dict:
    """Normalize a time vector to ``{index: t}``.

    Scalars apply to every index in ``indices``; sequences are 1-based.
    """
    if isinstance(T, Mapping):
        out = {int(k): float(v) for k, v in T.items()}
    elif np.isscalar(T):
        idx = sorted(indices) if indices is not None else [1]
        out = {j: float(T) for j in (idx or [1])}
    else:
        out = {i + 1: float(t) for i, t in enumerate(T)}
    for j, t in out.items():
        if not np.isfinite(t) or t < 0:
            raise ValueError(f"time for index {j} must be finite and nonnegative, got {t}")
    return out


def _check_indices(P: TracePoly, T: dict):
    missing = P.index_set() - set(T)
    if missing:
        raise IndexMismatchError(f"polynomial uses indices {sorted(missing)} with no time entry")


# --------------------------------------------------------------------------
# word-level rules (unit time on one index)


def _gaps(word) -> list[int]:
    """Insertion gap of each letter; gap g sits just before letter g (cyclically)."""
    n = len(word)
    return [i if l.star else (i + 1) % n for i, l in enumerate(word)]


def _rotate(word, g):
    return word[g:] + word[:g]


def _arcs(word, g1, g2):
    if g1 == g2:
        return (), _rotate(word, g1)
    n = len(word)
    a = tuple(word[(g1 + k) % n] for k in range((g2 - g1) % n))
    b = tuple(word[(g2 + k) % n] for k in range((g1 - g2) % n))
    return a, b


@functools.lru_cache(maxsize=1 << 17)
def _split_rule(word, rs: RSParams) -> dict:
    """``{j: {monomial: coef}}`` with D_j v_word for unit time on index j."""
    out: dict = {}
    gaps = _gaps(word)
    by_index: dict = {}
    for pos, l in enumerate(word):
        by_index.setdefault(l.index, []).append(pos)
    for j, positions in by_index.items():
        acc: dict = {}
        _add_into(acc, (word,), 0.5 * rs.same * len(positions))
        for a, b in itertools.combinations(positions, 2):
            kappa = rs.kappa(word[a].star, word[b].star)
            x, y = _arcs(word, gaps[a], gaps[b])
            mono = tuple(sorted(canonical_word(arc) for arc in (x, y) if arc))
            # ordered pairs (a, b) and (b, a) give the same term
            _add_into(acc, mono, kappa)
        out[j] = acc
    return out


@functools.lru_cache(maxsize=1 << 18)
def _merge_rule(w1, w2, rs: RSParams) -> dict:
    """``{j: {monomial: coef}}`` with Gamma_j(v_w1, v_w2) for unit time on index j."""
    out: dict = {}
    g1, g2 = _gaps(w1), _gaps(w2)
    for a, la in enumerate(w1):
        for b, lb in enumerate(w2):
            if la.index != lb.index:
                continue
            merged = canonical_word(_rotate(w1, g1[a]) + _rotate(w2, g2[b]))
            acc = out.setdefault(la.index, {})
            _add_into(acc, ((merged,)), 0.5 * rs.kappa(la.star, lb.star))
    return out


def _weighted(rule: dict, T: dict) -> dict:
    acc: dict = {}
    for j, terms in rule.items():
        t = T.get(j)
        if t is None:
            raise IndexMismatchError(f"index {j} has no time entry")
        if t == 0:
            continue
        for mono, c in terms.items():
            _add_into(acc, mono, t * c)
    return acc


def D_word(word, rs, T) -> dict:
    return _weighted(_split_rule(word, as_rs(rs)), T)


def gamma_words(w1, w2, rs, T) -> dict:
    return _weighted(_merge_rule(w1, w2, as_rs(rs)), T)


# --------------------------------------------------------------------------
# monomial-level and polynomial-level operators


def _D_mono(mono, rs, T) -> dict:
    acc: dict = {}
    for i, w in enumerate(mono):
        if i and mono[i - 1] == w:
            continue
        mult = mono.count(w)
        rest = mono[:i] + mono[i + 1:]
        for m2, c in D_word(w, rs, T).items():
            _add_into(acc, mono_mul(rest, m2), mult * c)
    return acc


def _gamma_mono(m1, m2, rs, T) -> dict:
    acc: dict = {}
    for i, w in enumerate(m1):
        rest1 = m1[:i] + m1[i + 1:]
        for k, u in enumerate(m2):
            rest = mono_mul(rest1, m2[:k] + m2[k + 1:])
            for m3, c in gamma_words(w, u, rs, T).items():
                _add_into(acc, mono_mul(rest, m3), c)
    return acc


def _L_mono(mono, rs, T) -> dict:
    acc: dict = {}
    for i, k in itertools.combinations(range(len(mono)), 2):
        rest = mono[:i] + mono[i + 1:k] + mono[k + 1:]
        for m3, c in gamma_words(mono[i], mono[k], rs, T).items():
            _add_into(acc, mono_mul(rest, m3), 2 * c)
    return acc


def _lift(P: TracePoly, rule) -> TracePoly:
    acc: dict = {}
    for mono, c in P.items():
        for m2, c2 in rule(mono).items():
            _add_into(acc, m2, c * c2)
    return TracePoly(acc)


def apply_D(rs, T, P: TracePoly) -> TracePoly:
    """First-order (derivation) part of the half Laplacian."""
    rs = as_rs(rs)
    T = as_times(T, P.index_set())
    _check_indices(P, T)
    return _lift(P, lambda m: _D_mono(m, rs, T))


def apply_L(rs, T, P: TracePoly) -> TracePoly:
    """Second-order part; vanishes on constants and on single traces."""
    rs = as_rs(rs)
    T = as_times(T, P.index_set())
    _check_indices(P, T)
    return _lift(P, lambda m: _L_mono(m, rs, T))


def gamma(rs, T, P: TracePoly, Q: TracePoly) -> TracePoly:
    """Carre du champ: symmetric, bilinear and Leibniz in each argument."""
    rs = as_rs(rs)
    T = as_times(T, P.index_set() | Q.index_set())
    _check_indices(P, T)
    _check_indices(Q, T)
    acc: dict = {}
    for m1, c1 in P.items():
        if m1 == ONE:
            continue
        for m2, c2 in Q.items():
            if m2 == ONE:
                continue
            for m3, c3 in _gamma_mono(m1, m2, rs, T).items():
                _add_into(acc, m3, c1 * c2 * c3)
    return TracePoly(acc)


# --------------------------------------------------------------------------
# bases


def alphabet(J: Iterable[int]) -> list[Letter]:
    return sorted(Letter(j, star) for j in J for star in (False, True))


def necklaces(letters: list, n: int) -> list[tuple]:
    """Least-rotation representatives of length-n necklaces, in lexicographic order."""
    k = len(letters)
    out = []
    a = [0] * (n + 1)

    def gen(t, p):
        if t > n:
            if n % p == 0:
                out.append(tuple(letters[i] for i in a[1:n + 1]))
            return
        a[t] = a[t - p]
        gen(t + 1, p)
        for c in range(a[t - p] + 1, k):
            a[t] = c
            gen(t + 1, t)

    if n >= 1:
        gen(1, 1)
    return out


class Basis:
    """Ordered list of monomials with a position index."""

    def __init__(self, monomials: Iterable):
        self.monomials = list(monomials)
        self.index = {m: i for i, m in enumerate(self.monomials)}
        if len(self.index) != len(self.monomials):
            raise ValueError("duplicate monomials in basis")

    def __len__(self):
        return len(self.monomials)

    @property
    def dim(self):
        return len(self.monomials)

    def degrees(self) -> np.ndarray:
        return np.array([monomial_degree(m) for m in self.monomials])

    def vector(self, P: TracePoly) -> np.ndarray:
        v = np.zeros(len(self), dtype=complex)
        for m, c in P.items():
            try:
                v[self.index[m]] += c
            except KeyError:
                raise KeyError(f"monomial {m} not in basis") from None
        return v

    def poly(self, v) -> TracePoly:
        return TracePoly({m: c for m, c in zip(self.monomials, v) if c != 0})


class FilteredBasis(Basis):
    """Every monomial of degree <= dmax over the index set J, exactly once."""

    def __init__(self, J, dmax, monomials):
        super().__init__(monomials)
        self.J = tuple(sorted(J))
        self.dmax = dmax


def build_basis(J, dmax: int, cap: int = DEFAULT_DIM_CAP) -> FilteredBasis:
    """Enumerate the filtered basis: necklaces of length <= dmax and all their products."""
    if dmax < 0:
        raise ValueError("dmax must be nonnegative")
    J = sorted(set(int(j) for j in J))
    if not J:
        raise ValueError("index set must be nonempty")
    letters = alphabet(J)
    words = [w for n in range(1, dmax + 1) for w in necklaces(letters, n)]
    words.sort(key=lambda w: (len(w), w))
    monos: list = []

    def extend(start, mono, deg):
        monos.append(mono)
        if len(monos) > cap:
            raise DimensionCapError(f"basis over J={J} with dmax={dmax} exceeds cap {cap}")
        for i in range(start, len(words)):
            w = words[i]
            if deg + len(w) > dmax:
                continue
            extend(i, mono + (w,), deg + len(w))

    extend(0, (), 0)
    monos = [tuple(sorted(m)) for m in monos]
    monos.sort(key=mono_sort_key)
    return FilteredBasis(J, dmax, monos)


def closure_basis(P_or_monos, rs, T, with_L: bool = False, cap: int = DEFAULT_DIM_CAP) -> Basis:
    """Smallest set of monomials containing the input and closed under D (and L)."""
    rs = as_rs(rs)
    monos = list(P_or_monos.monomials()) if isinstance(P_or_monos, TracePoly) else list(P_or_monos)
    seen = set(monos)
    stack = list(monos)
    while stack:
        m = stack.pop()
        images = [_D_mono(m, rs, T)]
        if with_L:
            images.append(_L_mono(m, rs, T))
        for img in images:
            for m2 in img:
                if m2 not in seen:
                    seen.add(m2)
                    stack.append(m2)
                    if len(seen) > cap:
                        raise DimensionCapError(f"invariant subspace exceeds cap {cap}")
    return Basis(sorted(seen, key=mono_sort_key))


# --------------------------------------------------------------------------
# operator matrices

KINDS = ("D", "L", "D+L/N2")


@dataclass(frozen=True)
class OperatorMatrix:
    basis: Basis
    entries: sp.csc_matrix
    kind: str
    N: float | None = None

    def dense(self) -> np.ndarray:
        return self.entries.toarray()

    def triplets(self):
        coo = self.entries.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return [(int(coo.row[i]), int(coo.col[i]), float(coo.data[i].real), float(coo.data[i].imag)) for i in order]

    def write_triplets(self, path):
        with open(path, "w") as fh:
            fh.write("# row col re im\n")
            for r, c, re_, im in self.triplets():
                fh.write(f"{r} {c} {re_!r} {im!r}\n")


def _sparse_from_rule(basis: Basis, rule) -> sp.csc_matrix:
    rows, cols, vals = [], [], []
    for col, m in enumerate(basis.monomials):
        for m2, c in rule(m).items():
            row = basis.index.get(m2)
            if row is None:
                raise AssertionError(f"image monomial {m2} of {m} fell outside the basis")
            rows.append(row)
            cols.append(col)
            vals.append(c)
    n = len(basis)
    return sp.csc_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n))


def operator_matrix(kind: str, rs, T, basis: Basis, N=None) -> OperatorMatrix:
    """Matrix of D, L or D + L/N^2 on ``basis`` (columns are images of basis monomials)."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    rs = as_rs(rs)
    J = getattr(basis, "J", None)
    idx = set(J) if J else {l.index for m in basis.monomials for w in m for l in w}
    T = as_times(T, idx)
    if kind == "D":
        mat = _sparse_from_rule(basis, lambda m: _D_mono(m, rs, T))
    elif kind == "L":
        mat = _sparse_from_rule(basis, lambda m: _L_mono(m, rs, T))
    else:
        if N is None:
            raise ValueError("kind 'D+L/N2' requires N")
        Dm = _sparse_from_rule(basis, lambda m: _D_mono(m, rs, T))
        Lm = _sparse_from_rule(basis, lambda m: _L_mono(m, rs, T))
        mat = (Dm + Lm / float(N) ** 2).tocsc()
    return OperatorMatrix(basis, mat, kind, N)


DENSE_LIMIT = 800


def expm_action(A, v: np.ndarray) -> np.ndarray:
    """``exp(A) v``; dense Pade for small systems, Al-Mohy--Higham action otherwise."""
    if A.shape[0] == 0:
        return v
    if A.shape[0] <= DENSE_LIMIT:
        dense = A.toarray() if sp.issparse(A) else np.asarray(A)
        return expm_dense(dense) @ v
    return expm_multiply(sp.csc_matrix(A), v)


def _is_infinite(N) -> bool:
    return N is None or (isinstance(N, float) and np.isinf(N)) or N == "inf"


def heat_expectation(P: TracePoly, rs, T, N=np.inf, cap: int = DEFAULT_DIM_CAP) -> complex:
    """``[exp(D + L/N^2) P](1)``: the exact mean of ``[P]_N`` at the process times ``T``.

    ``N = inf`` gives the large-N limit (free multiplicative Brownian motions).
    """
    rs = as_rs(rs)
    T = as_times(T, P.index_set())
    _check_indices(P, T)
    if P.is_constant():
        return P.at_one()
    finite = not _is_infinite(N)
    basis = closure_basis(P, rs, T, with_L=finite, cap=cap)
    kind = "D+L/N2" if finite else "D"
    A = operator_matrix(kind, rs, T, basis, N=N if finite else None).entries
    v = expm_action(A, basis.vector(P))
    value = complex(np.sum(v))
    if not np.isfinite(value):
        raise FloatingPointError("non-finite heat expectation")
    return value


# --------------------------------------------------------------------------
# large-N word moments (e^{tD} is an algebra homomorphism)


class WordMoments:
    """Large-N moments ``[exp(D_T) v_w](1)`` for all words of a fixed family.

    The generator is split into fixed parts ``D_T = sum_k c_k D_k`` so the
    same invariant subspace serves every combination of coefficients.
    """

    def __init__(self, words: Iterable, rs, parts: list[dict], cap: int = DEFAULT_DIM_CAP):
        self.rs = as_rs(rs)
        unit = {}
        for p in parts:
            for j in p:
                unit[j] = 1.0
        for w in words:
            for l in w:
                unit.setdefault(l.index, 1.0)
        self.parts = [{j: float(p.get(j, 0.0)) for j in unit} for p in parts]
        self.words = sorted(set(words))
        seeds = [(w,) for w in self.words]
        self.basis = closure_basis(seeds, self.rs, unit, cap=cap)
        self.mats = [
            _sparse_from_rule(self.basis, lambda m, p=p: _D_mono(m, self.rs, p)).transpose().tocsc()
            for p in self.parts
        ]
        self.word_rows = np.array([self.basis.index[(w,)] for w in self.words], dtype=int)

    def moments(self, coeffs) -> dict:
        """``{word: moment}`` for generator ``sum_k coeffs[k] * D_k``."""
        At = sum(c * M for c, M in zip(coeffs, self.mats) if c != 0)
        ones = np.ones(len(self.basis), dtype=complex)
        if isinstance(At, int):
            u = ones
        else:
            u = expm_action(At, ones)
        vals = u[self.word_rows]
        return dict(zip(self.words, vals))


def free_expectation_from_moments(P: TracePoly, moments: Mapping) -> complex:
    total = 0j
    for mono, c in P.items():
        term = c
        for w in mono:
            term *= moments[w]
        total += term
    return total


# --------------------------------------------------------------------------
# brute-force finite-N oracle


class OracleResult(NamedTuple):
    brute: complex  # (1/2)(T.Delta)[P]_N(g) from explicit basis matrices
    d_part: complex  # [D P]_N(g)
    l_part: complex  # [L P]_N(g)
    N: int
    scale: float = 0.0  # floor for the denominator: 1e-6 x the size of the summed terms

    @property
    def symbolic(self) -> complex:
        return self.d_part + self.l_part / self.N**2

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.brute), abs(self.d_part) + abs(self.l_part) / self.N**2, self.scale)
        if scale == 0:
            return 0.0
        return abs(self.brute - self.symbolic) / scale


class LaplacianOracle:
    """Exact ``(1/2) sum_j t_j sum_xi d_xi^2`` of trace polynomials at a fixed point ``g``.

    Derivatives are exact: ``d_xi`` inserts xi after each ``(j, 1)`` letter and
    xi* before each ``(j, *)`` letter, summed over an explicit orthonormal basis.
    Word-level derivative arrays are cached, so one oracle serves many polynomials.
    """

    def __init__(self, g, rs, T, xi_basis=None):
        from .rsbasis import build_rs_basis

        self.mats = {int(k): np.asarray(v, dtype=complex) for k, v in (g.items() if isinstance(g, Mapping) else enumerate(g, 1))}
        self.N = next(iter(self.mats.values())).shape[-1]
        self.rs = as_rs(rs)
        self.T = as_times(T, self.mats.keys())
        xi = build_rs_basis(self.N, self.rs) if xi_basis is None else np.asarray(xi_basis)
        self.xi = {False: xi, True: np.conj(np.swapaxes(xi, -1, -2))}
        self._cache: dict = {}

    def _letter(self, l: Letter):
        m = self.mats[l.index]
        return m.conj().T if l.star else m

    def _product(self, items):
        """Trace of a product of fixed matrices and (K, N, N) stacks, per basis element."""
        acc = None
        for it in items:
            if acc is None:
                acc = it
            else:
                acc = acc @ it
        return np.trace(acc, axis1=-2, axis2=-1) / self.N

    def word_derivatives(self, word, j):
        """(value, first derivative[K], second derivative[K]) of tr(word) along index j."""
        key = (word, j)
        if key in self._cache:
            return self._cache[key]
        base = [self._letter(l) for l in word]
        value = complex(self._product(base))
        positions = [i for i, l in enumerate(word) if l.index == j]
        K = self.xi[False].shape[0]
        d1 = np.zeros(K, dtype=complex)
        d2 = np.zeros(K, dtype=complex)

        def sequence(slots):
            seq = []
            for i, m in enumerate(base):
                ins = slots.get(i)
                if ins is None:
                    seq.append(m)
                elif word[i].star:
                    seq.extend([ins, m])
                else:
                    seq.extend([m, ins])
            return seq

        for a in positions:
            x = self.xi[word[a].star]
            d1 += self._product(sequence({a: x}))
            d2 += self._product(sequence({a: x @ x}))
        for a, b in itertools.combinations(positions, 2):
            xa, xb = self.xi[word[a].star], self.xi[word[b].star]
            d2 += 2 * self._product(sequence({a: xa, b: xb}))
        out = (value, d1, d2)
        self._cache[key] = out
        return out

    def magnitude(self, P: TracePoly) -> float:
        """Size of the terms in the Laplacian sum: sum |c| sum_j t_j (r+s) n_j^2 prod ||g_l||_2."""
        norms = {j: np.linalg.norm(m, 2) for j, m in self.mats.items()}
        total = 0.0
        for mono, c in P.items():
            letters = [l for w in mono for l in w]
            prod = float(np.prod([norms[l.index] for l in letters])) if letters else 0.0
            for j, t in self.T.items():
                n = sum(1 for l in letters if l.index == j)
                total += abs(c) * t * self.rs.mixed * n * n * prod
        return total

    def half_laplacian(self, P: TracePoly) -> complex:
        total = 0j
        for mono, c in P.items():
            if mono == ONE:
                continue
            for j, t in self.T.items():
                if t == 0 or not any(l.index == j for w in mono for l in w):
                    continue
                parts = [self.word_derivatives(w, j) for w in mono]
                vals = np.array([p[0] for p in parts])
                second = 0
                for i, (_, d1i, d2i) in enumerate(parts):
                    others = np.prod(np.delete(vals, i))
                    second = second + d2i * others
                    for k in range(i + 1, len(parts)):
                        rest = np.prod(np.delete(vals, [i, k]))
                        second = second + 2 * d1i * parts[k][1] * rest
                total += c * 0.5 * t * complex(np.sum(second))
        return total

    def evaluate(self, P: TracePoly) -> complex:
        traces = word_traces(P.words(), self.mats)
        total = 0j
        for mono, c in P.items():
            term = c
            for w in mono:
                term *= traces[w]
            total += term
        return complex(total)

    def compare(self, P: TracePoly, T_symbolic=None) -> OracleResult:
        T_sym = self.T if T_symbolic is None else as_times(T_symbolic, self.T.keys())
        dP = apply_D(self.rs, T_sym, P)
        lP = apply_L(self.rs, T_sym, P)
        return OracleResult(self.half_laplacian(P), self.evaluate(dP), self.evaluate(lP), self.N,
                            1e-6 * self.magnitude(P))


def laplacian_parts_oracle(P: TracePoly, g, rs, T, N=None) -> OracleResult:
    """Brute-force half Laplacian of ``[P]_N`` at ``g`` next to its symbolic decomposition."""
    oracle = LaplacianOracle(g, rs, T)
    if N is not None and oracle.N != N:
        raise ValueError(f"matrices are {oracle.N} x {oracle.N}, expected N={N}")
    if oracle.N > 8:
        raise ValueError("the brute-force oracle is limited to N <= 8")
    return oracle.compare(P)
