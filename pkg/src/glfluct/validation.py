"""Invariant suite behind ``glfluct validate``.

Each check returns measured residuals next to its threshold. The
``paper-literal`` convention compares the Laplacian without the factor 1/2
against the symbolic operators, which must fail with a ratio of 2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .covariance import sigma_closed_poly, sigma_direct, sigma_free
from .intertwine import (
    LaplacianOracle,
    RSParams,
    _D_mono,
    _L_mono,
    _sparse_from_rule,
    apply_D,
    apply_L,
    build_basis,
    gamma,
)
from .linalg import expm_dense
from .rsbasis import build_rs_basis, gram, magic_residuals
from .trace_algebra import Letter, TracePoly, canonical_word, parse

RS_GRID = (RSParams(1, 0), RSParams(0.5, 0.5), RSParams(2, 0.3))


@dataclass
class CheckResult:
    name: str
    passed: bool
    residual: float
    threshold: float
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        extra = "".join(f" {k}={v}" for k, v in self.detail.items())
        return f"{flag} {self.name}: residual={self.residual:.3e} (threshold {self.threshold:.1e}){extra}"

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "residual": self.residual,
                "threshold": self.threshold, "detail": self.detail}


def random_word(rng, J, length):
    return canonical_word(Letter(int(rng.choice(J)), bool(rng.integers(2))) for _ in range(length))


def random_poly(rng, J=(1,), dmax=3, terms=3, integer=True) -> TracePoly:
    """Random trace polynomial of degree <= dmax with small integer (or complex) coefficients."""
    J = list(J)
    acc = TracePoly()
    for _ in range(terms):
        deg = int(rng.integers(0, dmax + 1))
        mono = TracePoly.constant(1)
        left = deg
        while left > 0:
            n = int(rng.integers(1, left + 1))
            mono = mono * TracePoly.var(random_word(rng, J, n))
            left -= n
        if integer:
            c = complex(int(rng.integers(-3, 4)), int(rng.integers(-2, 3)))
        else:
            c = complex(rng.standard_normal(), rng.standard_normal())
        acc = acc + mono * c
    return acc


def _max_coef(P: TracePoly) -> float:
    return max((abs(c) for _, c in P.items()), default=0.0)


def check_magic(rng, Ns, pairs) -> CheckResult:
    worst = 0.0
    for rs in RS_GRID:
        for N in Ns:
            xi = build_rs_basis(N, rs)
            for _ in range(pairs):
                A = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
                B = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
                worst = max(worst, max(magic_residuals(xi, rs, A, B).values()))
    return CheckResult("magic formulas", worst <= 1e-12, worst, 1e-12, {"N": f"{Ns[0]}..{Ns[-1]}"})


def check_gram(Ns) -> CheckResult:
    worst = 0.0
    for rs in (RSParams(0.5, 0.5), RSParams(2, 0.3)):
        for N in Ns:
            G = gram(build_rs_basis(N, rs), rs)
            worst = max(worst, float(np.max(np.abs(G - np.eye(len(G))))))
    return CheckResult("orthonormal (r,s) basis", worst <= 1e-12, worst, 1e-12)


def check_intertwining(rng, dmax, Ns, convention="half") -> CheckResult:
    basis = build_basis([1, 2], dmax)
    T = {1: 0.7, 2: 1.3}
    T_sym = {j: 2 * t for j, t in T.items()} if convention == "paper-literal" else T
    worst, ratios = 0.0, []
    for rs in RS_GRID:
        for N in Ns:
            g = {j: rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N)) for j in (1, 2)}
            oracle = LaplacianOracle(g, rs, T)
            for m in basis.monomials:
                if not m:
                    continue
                res = oracle.compare(TracePoly({m: 1}), T_symbolic=T_sym)
                worst = max(worst, res.rel_error)
                if abs(res.brute) > 1e-8:
                    ratios.append(abs(res.symbolic / res.brute))
    detail = {"monomials": len(basis) - 1, "convention": convention}
    if ratios:
        detail["median_ratio"] = round(float(np.median(ratios)), 6)
    return CheckResult("intertwining oracle", worst <= 1e-10, worst, 1e-10, detail)


def check_laws(rng, trials) -> list:
    rs, T = RSParams(1, 0.5), {1: 1.0, 2: 0.5}
    J = [1, 2]
    first = second = gam = 0.0
    for _ in range(trials):
        P, Q, R = (random_poly(rng, J, 3, 3) for _ in range(3))
        D = lambda X: apply_D(rs, T, X)  # noqa: E731
        L = lambda X: apply_L(rs, T, X)  # noqa: E731
        first = max(first, _max_coef(D(P * Q) - D(P) * Q - P * D(Q)))
        second = max(second, _max_coef(
            L(P * Q * R) - L(P * Q) * R - P * L(Q * R) - L(P * R) * Q + L(P) * Q * R + P * L(Q) * R + P * Q * L(R)))
        gam = max(gam, _max_coef(gamma(rs, T, P, Q) - 0.5 * (L(P * Q) - L(P) * Q - P * L(Q))))
    return [
        CheckResult("first-order law for D", first <= 1e-12, first, 1e-12),
        CheckResult("second-order law for L", second <= 1e-12, second, 1e-12),
        CheckResult("Gamma from L", gam <= 1e-12, gam, 1e-12),
    ]


def check_blocks(dmax) -> CheckResult:
    basis = build_basis([1, 2], dmax)
    deg = basis.degrees()
    worst = 0.0
    for rs in RS_GRID:
        for rule in (_D_mono, _L_mono):
            M = _sparse_from_rule(basis, lambda m, rule=rule: rule(m, rs, {1: 1.0, 2: 0.5})).tocoo()
            off = deg[M.row] != deg[M.col]
            if np.any(off):
                worst = max(worst, float(np.max(np.abs(M.data[off]))))
    return CheckResult("degree-block structure", worst == 0.0, worst, 0.0, {"dim": len(basis)})


def duhamel_residual(rs, T, N, dmax, nodes=48) -> float:
    basis = build_basis(sorted(T), dmax)
    D = _sparse_from_rule(basis, lambda m: _D_mono(m, rs, T)).toarray()
    L = _sparse_from_rule(basis, lambda m: _L_mono(m, rs, T)).toarray()
    A = D + L / N**2
    x, w = np.polynomial.legendre.leggauss(nodes)
    t = 0.5 * (x + 1)
    integral = sum(0.5 * wi * expm_dense(ti * A) @ L @ expm_dense((1 - ti) * D) for ti, wi in zip(t, w))
    R = expm_dense(A) - expm_dense(D) - integral / N**2
    return float(np.max(np.abs(R)))


def check_duhamel(dmax) -> CheckResult:
    worst = 0.0
    for rs in RS_GRID:
        for N in (2, 5):
            worst = max(worst, duhamel_residual(rs, {1: 0.8}, N, dmax))
    return CheckResult("Duhamel identity", worst <= 1e-9, worst, 1e-9, {"dmax": dmax})


def check_sigma(rng, pairs, dmax, tol=1e-9) -> list:
    worst = 0.0
    for k in range(pairs):
        rs = RS_GRID[k % len(RS_GRID)]
        T = {1: 0.9, 2: 0.4}
        P = random_poly(rng, [1, 2], dmax, 2, integer=False)
        Q = random_poly(rng, [1, 2], dmax, 2, integer=False)
        worst = max(worst, abs(sigma_direct(P, Q, rs, T, tol).value - sigma_free(P, Q, rs, T, tol).value))
    anchors = 0.0
    X, Xs = parse("tr(X1)"), parse("tr(X1*)")
    for T in (0.5, 1.0, 2.0):
        for rs, exact in ((RSParams(1, 0), 1 - math.exp(-T)), (RSParams(0.5, 0.5), math.exp(T) - 1)):
            for val in (sigma_direct(X, Xs, rs, T, tol).value, sigma_free(X, Xs, rs, T, tol).value,
                        sigma_closed_poly([0, 1], [0, 1], "mixed", rs, T, tol).value):
                anchors = max(anchors, abs(val - exact))
    return [
        CheckResult("sigma direct vs free", worst <= 1e-7, worst, 1e-7, {"pairs": pairs}),
        CheckResult("sigma closed-form anchors", anchors <= 1e-8, anchors, 1e-8),
    ]


def run_validation(convention="half", seed=0, quick=True) -> list:
    rng = np.random.default_rng(seed)
    Ns = [2, 3, 4] if quick else list(range(2, 9))
    out = [check_magic(rng, Ns, 10 if quick else 100), check_gram(Ns)]
    out.append(check_intertwining(rng, 4 if quick else 6, [2, 3] if quick else [2, 3, 4], convention))
    out += check_laws(rng, 10 if quick else 50)
    out.append(check_blocks(4 if quick else 5))
    out.append(check_duhamel(3 if quick else 4))
    out += check_sigma(rng, 5 if quick else 50, 3 if quick else 4)
    return out
