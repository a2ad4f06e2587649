"""Limit covariance of trace-polynomial fluctuations, computed three ways.

``sigma(P, Q) = 2 int_0^1 [e^{tD} Gamma(e^{(1-t)D} P, e^{(1-t)D} Q)](1) dt``

* ``sigma_direct`` integrates the definition on the invariant subspaces of P and Q.
* ``sigma_free`` integrates the three-process formula: Gamma-tilde(P, Q) is a trace
  polynomial in (b, c, d) evaluated on freely independent free multiplicative
  Brownian motions run for (tT, (1-t)T, (1-t)T).
* ``sigma_closed_poly`` handles one-variable polynomials through derivatives on the circle.

Large-N expectations are always taken through the N = inf heat semigroup.
"""
from __future__ import annotations

import itertools
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .intertwine import (
    WordMoments,
    _D_mono,
    _gamma_mono,
    _sparse_from_rule,
    as_rs,
    as_times,
    closure_basis,
    expm_action,
    free_expectation_from_moments,
    heat_expectation,
)
from .trace_algebra import ONE, Letter, TracePoly, _add_into, canonical_word, conjugate, mono_mul

DEFAULT_TOL = 1e-9
MIN_NODES = 16
MAX_NODES = 512


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class SigmaResult:
    value: complex
    method: str
    quadrature_nodes: int
    est_error: float
    note: str = ""

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "value_re": float(np.real(self.value)),
            "value_im": float(np.imag(self.value)),
            "est_error": float(self.est_error),
            "nodes": int(self.quadrature_nodes),
        }
        if self.note:
            out["note"] = self.note
        return out


def gauss_legendre(f, a: float, b: float, tol: float = DEFAULT_TOL, n0: int = MIN_NODES, nmax: int = MAX_NODES):
    """Integrate ``f`` on [a, b], doubling the node count until two rules agree to ``tol``.

    Returns (value, nodes, est_error); raises QuadratureError past ``nmax``.
    """
    if a == b:
        return 0j, 0, 0.0

    def rule(n):
        x, w = np.polynomial.legendre.leggauss(n)
        t = 0.5 * (b - a) * x + 0.5 * (b + a)
        vals = np.array([f(ti) for ti in t], dtype=complex)
        return 0.5 * (b - a) * np.dot(w, vals)

    n = n0
    prev = rule(n)
    while True:
        n2 = 2 * n
        cur = rule(n2)
        err = abs(cur - prev)
        if err <= tol:
            return complex(cur), n2, float(err)
        if n2 >= nmax:
            raise QuadratureError(f"no convergence with {n2} nodes (last change {err:.3e})")
        n, prev = n2, cur


def _strip_constant(P: TracePoly) -> TracePoly:
    return TracePoly({m: c for m, c in P.items() if m != ONE})


def _indices(*polys) -> set:
    out = set()
    for p in polys:
        out |= p.index_set()
    return out


# --------------------------------------------------------------------------
# direct route


class _DirectIntegrand:
    def __init__(self, P, Q, rs, T):
        self.rs = as_rs(rs)
        self.T = T
        P, Q = _strip_constant(P), _strip_constant(Q)
        self.empty = not P or not Q
        if self.empty:
            return
        self.bp = closure_basis(P, self.rs, T)
        self.bq = closure_basis(Q, self.rs, T)
        self.Dp = _sparse_from_rule(self.bp, lambda m: _D_mono(m, self.rs, T))
        self.Dq = _sparse_from_rule(self.bq, lambda m: _D_mono(m, self.rs, T))
        self.p0 = self.bp.vector(P)
        self.q0 = self.bq.vector(Q)
        rows, ia, ib, vals = [], [], [], []
        out_index: dict = {}
        for a, ma in enumerate(self.bp.monomials):
            if ma == ONE:
                continue
            for b, mb in enumerate(self.bq.monomials):
                if mb == ONE:
                    continue
                for mc, c in _gamma_mono(ma, mb, self.rs, T).items():
                    rows.append(out_index.setdefault(mc, len(out_index)))
                    ia.append(a)
                    ib.append(b)
                    vals.append(c)
        self.rows = np.array(rows, dtype=int)
        self.ia = np.array(ia, dtype=int)
        self.ib = np.array(ib, dtype=int)
        self.vals = np.array(vals, dtype=complex)
        self.out_monos = list(out_index)
        words = {w for m in self.out_monos for w in m}
        self.moments = WordMoments(words, self.rs, [T])

    def __call__(self, t: float) -> complex:
        if self.empty or len(self.vals) == 0:
            return 0j
        pt = expm_action((1 - t) * self.Dp, self.p0)
        qt = expm_action((1 - t) * self.Dq, self.q0)
        phi = self.moments.moments([t])
        psi = np.array([np.prod([phi[w] for w in m]) if m else 1.0 for m in self.out_monos], dtype=complex)
        return complex(np.sum(self.vals * psi[self.rows] * pt[self.ia] * qt[self.ib]))


def sigma_direct(P: TracePoly, Q: TracePoly, rs, T, tol: float = DEFAULT_TOL) -> SigmaResult:
    """Quadrature of the defining integral on [0, 1]."""
    T = as_times(T, _indices(P, Q))
    f = _DirectIntegrand(P, Q, rs, T)
    if f.empty:
        return SigmaResult(0j, "direct", 0, 0.0)
    val, n, err = gauss_legendre(f, 0.0, 1.0, tol)
    return SigmaResult(2 * val, "direct", n, 2 * err)


def integrand_direct(P, Q, rs, T):
    """The t-integrand of ``sigma_direct`` (without the factor 2), for inspection."""
    return _DirectIntegrand(P, Q, rs, as_times(T, _indices(P, Q)))


# --------------------------------------------------------------------------
# three-process route

ROLE_B, ROLE_C, ROLE_D = 1, 2, 3


def role_index(j: int, role: int, width: int) -> int:
    """Index of ``(j, role)`` in the tripled index set: b -> j, c -> width + j, d -> 2 width + j."""
    return (role - 1) * width + j


def _subst_word(word, right_role: int, width: int) -> tuple:
    """Letters of ``tr(word)`` evaluated at ``B G R`` with ``G = I``; gaps at odd positions."""
    out = []
    for l in word:
        b = role_index(l.index, ROLE_B, width)
        r = role_index(l.index, right_role, width)
        if l.star:
            out.extend([Letter(r, True), Letter(b, True)])
        else:
            out.extend([Letter(b, False), Letter(r, False)])
    return tuple(out)


def _subst_mono(mono, right_role, width):
    return tuple(sorted(canonical_word(_subst_word(w, right_role, width)) for w in mono))


def gamma_tilde(P: TracePoly, Q: TracePoly, rs, T, width: int | None = None) -> TracePoly:
    """Gamma-tilde(P, Q): a trace polynomial over the tripled index set (roles b, c, d).

    Satisfies ``N^2 Gamma_N([P](B . C), [Q](B . D))(I) = [Gamma-tilde(P, Q)]_N(B, C, D)``.
    """
    rs = as_rs(rs)
    T = as_times(T, _indices(P, Q))
    width = width or max(T) if T else 1
    wcache: dict = {}

    def word_term(w, u):
        key = (w, u)
        if key not in wcache:
            sw, su = _subst_word(w, ROLE_C, width), _subst_word(u, ROLE_D, width)
            acc: dict = {}
            for a, la in enumerate(w):
                for b, lb in enumerate(u):
                    if la.index != lb.index:
                        continue
                    t = T[la.index]
                    if t == 0:
                        continue
                    merged = sw[2 * a + 1:] + sw[:2 * a + 1] + su[2 * b + 1:] + su[:2 * b + 1]
                    _add_into(acc, (canonical_word(merged),), 0.5 * t * rs.kappa(la.star, lb.star))
            wcache[key] = acc
        return wcache[key]

    acc: dict = {}
    for m1, c1 in P.items():
        if m1 == ONE:
            continue
        for m2, c2 in Q.items():
            if m2 == ONE:
                continue
            for i, w in enumerate(m1):
                rest1 = _subst_mono(m1[:i] + m1[i + 1:], ROLE_C, width)
                for k, u in enumerate(m2):
                    rest = mono_mul(rest1, _subst_mono(m2[:k] + m2[k + 1:], ROLE_D, width))
                    for m3, c3 in word_term(w, u).items():
                        _add_into(acc, mono_mul(rest, m3), c1 * c2 * c3)
    return TracePoly(acc)


def collapse_roles(P: TracePoly, width: int) -> TracePoly:
    """Send every role back to its base index (B = B, C = D = I is not this; this merges roles)."""
    def base(l):
        return Letter((l.index - 1) % width + 1, l.star)

    return P.map_words(lambda w: TracePoly.var([base(l) for l in w]))


def drop_roles(P: TracePoly, width: int, keep=(ROLE_B,)) -> TracePoly:
    """Set the matrices of roles not in ``keep`` to the identity."""
    def strip(w):
        letters = [l for l in w if (l.index - 1) // width + 1 in keep]
        if not letters:
            return TracePoly.constant(1)
        return TracePoly.var([Letter((l.index - 1) % width + 1, l.star) for l in letters])

    return P.map_words(strip)


class _FreeIntegrand:
    def __init__(self, G: TracePoly, rs, T: dict, width: int):
        self.G = G
        part_b = {role_index(j, ROLE_B, width): t for j, t in T.items()}
        part_cd = {role_index(j, r, width): t for j, t in T.items() for r in (ROLE_C, ROLE_D)}
        self.moments = WordMoments(G.words(), rs, [part_b, part_cd]) if G else None

    def __call__(self, t):
        if self.moments is None:
            return 0j
        phi = self.moments.moments([t, 1 - t])
        return free_expectation_from_moments(self.G, phi)


def sigma_free(P: TracePoly, Q: TracePoly, rs, T, tol: float = DEFAULT_TOL) -> SigmaResult:
    """Quadrature of ``2 int_0^1 tau[Gamma-tilde(P, Q)](b_tT, c_(1-t)T, d_(1-t)T) dt``."""
    T = as_times(T, _indices(P, Q))
    width = max(T)
    G = gamma_tilde(P, Q, rs, T, width)
    if not G:
        return SigmaResult(0j, "free", 0, 0.0)
    f = _FreeIntegrand(G, as_rs(rs), T, width)
    val, n, err = gauss_legendre(f, 0.0, 1.0, tol)
    return SigmaResult(2 * val, "free", n, 2 * err)


# --------------------------------------------------------------------------
# one-variable closed forms

VARIANTS = ("plain", "mixed", "star_star")

SIGN_NOTE = (
    "same-type closed form: derivative factors taken as n X^n (merge rule); "
    "with P' = i n X^n literally the sign flips"
)


def _power_word(n: int, first: int, second: int, star: bool):
    """Letters of (X_first X_second)^n, or of its adjoint when ``star``."""
    pair = [Letter(first, False), Letter(second, False)]
    letters = pair * n
    if star:
        letters = [l.flip() for l in reversed(letters)]
    return letters


def closed_poly_integrand(p: Sequence, q: Sequence, variant: str, rs, literal: bool = False) -> TracePoly:
    """Trace polynomial over {1, 2, 3} = (b, c, d) whose tau-value is integrated over [0, T]."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    rs = as_rs(rs)
    acc: dict = {}
    for n, pn in enumerate(p):
        for m, qm in enumerate(q):
            if n == 0 or m == 0 or pn == 0 or qm == 0:
                continue
            if variant == "mixed":
                # P'(bc) (Q'(bd))*: (i n p_n)(conj(i m q_m)) = n m p_n conj(q_m)
                coef = rs.mixed * n * m * pn * np.conj(qm)
                letters = _power_word(n, 1, 2, False) + _power_word(m, 1, 3, True)
            elif variant == "plain":
                coef = rs.same * n * m * pn * qm * (-1 if literal else 1)
                letters = _power_word(n, 1, 2, False) + _power_word(m, 1, 3, False)
            else:
                coef = rs.same * n * m * np.conj(pn) * np.conj(qm) * (-1 if literal else 1)
                letters = _power_word(n, 1, 2, True) + _power_word(m, 1, 3, True)
            _add_into(acc, (canonical_word(letters),), coef)
    return TracePoly(acc)


def sigma_closed_poly(p, q, variant: str, rs, T: float, tol: float = DEFAULT_TOL, literal: bool = False) -> SigmaResult:
    """One-variable polynomials ``P = sum p[n] X^n``, ``Q = sum q[n] X^n`` on a single index.

    ``plain`` gives sigma(trP, trQ), ``mixed`` sigma(trP, trQ*), ``star_star`` sigma(trP*, trQ*).
    """
    T = float(T)
    G = closed_poly_integrand(p, q, variant, rs, literal=literal)
    note = SIGN_NOTE if variant != "mixed" else ""
    if literal and variant != "mixed":
        note = "paper-literal sign for the same-type closed form"
    if not G or T == 0:
        return SigmaResult(0j, "closed", 0, 0.0, note)
    moments = WordMoments(G.words(), rs, [{1: 1.0}, {2: 1.0, 3: 1.0}])

    def f(t):
        return free_expectation_from_moments(G, moments.moments([t, T - t]))

    val, n, err = gauss_legendre(f, 0.0, T, tol)
    return SigmaResult(val, "closed", n, err, note)


def one_variable_poly(coeffs: Sequence, star: bool = False, index: int = 1) -> TracePoly:
    """``sum c_n tr(X^n)`` (or of X*^n)."""
    out = TracePoly()
    for n, c in enumerate(coeffs):
        if c == 0:
            continue
        if n == 0:
            out = out + TracePoly.constant(c)
        else:
            out = out + TracePoly.var([Letter(index, star)] * n, c)
    return out


# --------------------------------------------------------------------------
# Wick moments and finite-N moments


def pairings(items: Sequence):
    items = list(items)
    if not items:
        yield []
        return
    if len(items) % 2:
        return
    first = items[0]
    for i in range(1, len(items)):
        rest = items[1:i] + items[i + 1:]
        for p in pairings(rest):
            yield [(first, items[i])] + p


def wick_moment(Ps: Sequence[TracePoly], rs, T, sigma=None, tol: float = DEFAULT_TOL) -> complex:
    """Sum over pairings of products of sigma; zero for odd k."""
    k = len(Ps)
    if k == 0:
        return 1 + 0j
    if k % 2:
        return 0j
    T = as_times(T, _indices(*Ps))
    cache: dict = {}

    def sig(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            if sigma is not None:
                cache[key] = complex(sigma(Ps[key[0]], Ps[key[1]]))
            else:
                cache[key] = sigma_direct(Ps[key[0]], Ps[key[1]], rs, T, tol).value
        return cache[key]

    total = 0j
    for pairing in pairings(range(k)):
        term = 1 + 0j
        for i, j in pairing:
            term *= sig(i, j)
        total += term
    return total


def exact_fluctuation_moment(Ps: Sequence[TracePoly], rs, T, N) -> complex:
    """``E[prod_i N([P_i]_N - E[P_i]_N)]`` exactly, at finite N, by subset expansion."""
    k = len(Ps)
    if k == 0:
        return 1 + 0j
    if k == 1:
        return 0j
    T = as_times(T, _indices(*Ps))
    means = [heat_expectation(P, rs, T, N) for P in Ps]
    re_terms, im_terms = [], []
    for size in range(k + 1):
        for S in itertools.combinations(range(k), size):
            prod = TracePoly.constant(1)
            for i in S:
                prod = prod * Ps[i]
            val = heat_expectation(prod, rs, T, N) if S else 1.0
            for i in range(k):
                if i not in S:
                    val *= means[i]
            val *= (-1) ** (k - size)
            re_terms.append(val.real)
            im_terms.append(val.imag)
    centered = complex(math.fsum(re_terms), math.fsum(im_terms))
    return centered * float(N) ** k


# --------------------------------------------------------------------------
# Gaussian field


class FieldError(ValueError):
    pass


@dataclass
class GaussianField:
    """Limit Gaussian vector (xi_P1, ..., xi_Pk).

    ``C[i, j] = E[xi_i conj(xi_j)] = sigma(P_i, P_j*)`` and ``R[i, j] = E[xi_i xi_j] = sigma(P_i, P_j)``.
    """

    polys: list
    C: np.ndarray
    R: np.ndarray
    tol: float = 1e-10

    def real_covariance(self) -> np.ndarray:
        """Covariance of (Re xi, Im xi), a 2k x 2k real matrix."""
        C, R = self.C, self.R
        uu = (C + R).real / 2
        vv = (C - R).real / 2
        uv = (R.imag - C.imag) / 2
        return np.block([[uu, uv], [uv.T, vv]])

    def check(self):
        C, R = self.C, self.R
        herm = np.max(np.abs(C - C.conj().T), initial=0)
        symm = np.max(np.abs(R - R.T), initial=0)
        emin = np.min(np.linalg.eigvalsh((C + C.conj().T) / 2), initial=0)
        rmin = np.min(np.linalg.eigvalsh(self.real_covariance()), initial=0)
        scale = max(1.0, np.max(np.abs(C), initial=0))
        problems = []
        if herm > self.tol * scale:
            problems.append(f"C not Hermitian ({herm:.2e})")
        if symm > self.tol * scale:
            problems.append(f"R not symmetric ({symm:.2e})")
        if emin < -self.tol * scale:
            problems.append(f"C not PSD (min eigenvalue {emin:.2e})")
        if rmin < -self.tol * scale:
            problems.append(f"real embedding not PSD (min eigenvalue {rmin:.2e})")
        return problems


def build_field(Ps: Sequence[TracePoly], rs, T, tol: float = DEFAULT_TOL, method: str = "direct") -> GaussianField:
    T = as_times(T, _indices(*Ps))
    fn = sigma_direct if method == "direct" else sigma_free
    k = len(Ps)
    conj = [conjugate(P) for P in Ps]
    C = np.zeros((k, k), dtype=complex)
    R = np.zeros((k, k), dtype=complex)
    for i in range(k):
        for j in range(k):
            C[i, j] = fn(Ps[i], conj[j], rs, T, tol).value
            if j >= i:
                R[i, j] = R[j, i] = fn(Ps[i], Ps[j], rs, T, tol).value
    return GaussianField(list(Ps), C, R)


def sample_gaussian_field(field: GaussianField, n: int, seed=None) -> np.ndarray:
    """Draw ``n`` samples of the complex field, shape (n, k)."""
    k = len(field.polys)
    if n == 0:
        return np.zeros((0, k), dtype=complex)
    problems = [p for p in field.check() if "embedding" in p]
    if problems:
        raise FieldError("; ".join(problems))
    cov = field.real_covariance()
    w, V = np.linalg.eigh((cov + cov.T) / 2)
    # round-off eigenvalues would otherwise leak ~1e-8 noise into null directions
    w[w < 1e-12 * max(1.0, w[-1])] = 0.0
    factor = V * np.sqrt(np.clip(w, 0, None))
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, 2 * k)) @ factor.T
    return z[:, :k] + 1j * z[:, k:]
