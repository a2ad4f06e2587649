"""Orthonormal bases of M_N for the (r, s) inner product and the basis-sum identities."""
from __future__ import annotations

import numpy as np

from .intertwine import RSParams, as_rs


def hermitian_basis(N: int) -> np.ndarray:
    """Hermitian H_k with Tr(H_j H_k) = delta_jk, shape (N^2, N, N)."""
    out = []
    for a in range(N):
        m = np.zeros((N, N), dtype=complex)
        m[a, a] = 1
        out.append(m)
    c = 1 / np.sqrt(2)
    for a in range(N):
        for b in range(a + 1, N):
            m = np.zeros((N, N), dtype=complex)
            m[a, b] = m[b, a] = c
            out.append(m)
            m = np.zeros((N, N), dtype=complex)
            m[a, b] = -1j * c
            m[b, a] = 1j * c
            out.append(m)
    return np.array(out)


def build_rs_basis(N: int, rs) -> np.ndarray:
    """``{sqrt(r/N) i H_k} u {sqrt(s/N) H_k}``, shape (2 N^2, N, N).

    For the unitary case s = 0 the second half is zero; sums over the basis
    are still correct although the inner product itself degenerates.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    rs = as_rs(rs)
    H = hermitian_basis(N)
    return np.concatenate([np.sqrt(rs.r / N) * 1j * H, np.sqrt(rs.s / N) * H])


def rs_inner(A, B, N: int, rs: RSParams) -> float:
    rs = as_rs(rs)
    if rs.r == 0 or rs.s == 0:
        raise ValueError("the (r, s) inner product needs r, s > 0")
    tr_abh = np.trace(A @ np.conj(B).T)
    tr_ab = np.trace(A @ B)
    return float(0.5 * (1 / rs.s + 1 / rs.r) * N * tr_abh.real + 0.5 * (1 / rs.s - 1 / rs.r) * N * tr_ab.real)


def gram(basis: np.ndarray, rs) -> np.ndarray:
    N = basis.shape[-1]
    rs = as_rs(rs)
    K = basis.shape[0]
    flat = basis.reshape(K, -1)
    # Re Tr(A B*) and Re Tr(A B) for all pairs
    g1 = (flat @ np.conj(flat).T).real
    g2 = (flat @ np.swapaxes(basis, -1, -2).reshape(K, -1).T).real
    return 0.5 * (1 / rs.s + 1 / rs.r) * N * g1 + 0.5 * (1 / rs.s - 1 / rs.r) * N * g2


def magic_residuals(basis: np.ndarray, rs, A: np.ndarray, B: np.ndarray) -> dict:
    """Absolute residuals of the four basis-sum identities for one pair (A, B)."""
    rs = as_rs(rs)
    N = basis.shape[-1]
    xs = np.conj(np.swapaxes(basis, -1, -2))
    tr = lambda M: np.trace(M, axis1=-2, axis2=-1) / N  # noqa: E731
    trAB = tr(A @ B)
    out = {
        "tr(xi A)tr(xi B)": abs(np.sum(tr(basis @ A) * tr(basis @ B)) - rs.same / N**2 * trAB),
        "tr(xi* A)tr(xi* B)": abs(np.sum(tr(xs @ A) * tr(xs @ B)) - rs.same / N**2 * trAB),
        "tr(xi* A)tr(xi B)": abs(np.sum(tr(xs @ A) * tr(basis @ B)) - rs.mixed / N**2 * trAB),
    }
    I = np.eye(N)
    out["sum xi A xi"] = np.max(np.abs(np.sum(basis @ A @ basis, axis=0) - rs.same * tr(A) * I))
    out["sum xi* A xi"] = np.max(np.abs(np.sum(xs @ A @ basis, axis=0) - rs.mixed * tr(A) * I))
    return {k: float(v) for k, v in out.items()}
