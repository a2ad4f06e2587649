"""Monte Carlo laboratory: GUE increments, SDE paths on GL_N, fluctuation estimators.

Random streams are counter-based: every (sample, component, step, bridge node)
owns a Philox stream derived from the master seed, so any subset of samples
can be regenerated independently and chunking never changes the result.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .covariance import exact_fluctuation_moment, sigma_direct, wick_moment
from .intertwine import RSParams, as_rs, heat_expectation
from .linalg import expm_batch
from .trace_algebra import conjugate, evaluate, format_poly

SCHEMES = ("multiplicative_exp", "euler_maruyama")


class SimulationError(FloatingPointError):
    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


@dataclass
class SimConfig:
    N: int
    rs: RSParams
    T: dict
    steps_per_unit_time: int = 200
    samples: int = 2000
    scheme: str = "multiplicative_exp"
    seed: int = 0
    # dyadic Brownian-bridge refinement of the same noise: dt -> dt / 2**refine
    refine: int = 0
    sample_offset: int = 0
    chunk: int = 100
    expm_tol: float = 1e-12

    def __post_init__(self):
        self.rs = as_rs(self.rs)
        if not isinstance(self.T, dict):
            T = np.atleast_1d(np.asarray(self.T, dtype=float))
            self.T = {j + 1: float(t) for j, t in enumerate(T)}
        self.T = {int(j): float(t) for j, t in sorted(self.T.items())}
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.steps_per_unit_time < 1:
            raise ValueError("steps_per_unit_time must be >= 1")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if any(t < 0 or not math.isfinite(t) for t in self.T.values()):
            raise ValueError("times must be finite and nonnegative")
        if self.refine < 0:
            raise ValueError("refine must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def J(self) -> list:
        return list(self.T)

    def steps(self, j) -> int:
        t = self.T[j]
        return 0 if t == 0 else max(1, int(round(t * self.steps_per_unit_time)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rs"] = {"r": self.rs.r, "s": self.rs.s}
        d["T"] = {str(j): t for j, t in self.T.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        rs = d.pop("rs")
        d["rs"] = RSParams(rs["r"], rs["s"]) if isinstance(rs, dict) else as_rs(rs)
        d["T"] = {int(j): float(t) for j, t in d["T"].items()}
        return cls(**d)


# --------------------------------------------------------------------------
# increments


_SQRT_HALF = math.sqrt(0.5)


def _hermitian_parts(z: np.ndarray, N: int):
    """Real and imaginary parts of the Hermitian matrix built from N^2 normals.

    With G = z reshaped to N x N: diagonal from diag(G), real off-diagonal
    parts from the strict upper triangle, imaginary parts from the strict
    lower triangle, each scaled by 1/sqrt2. Only elementwise work, no scatter.
    """
    G = z.reshape(z.shape[:-1] + (N, N))
    U = np.triu(G, 1)
    Lw = np.tril(G, -1)
    re = U + np.swapaxes(U, -1, -2)
    re *= _SQRT_HALF
    d = np.arange(N)
    re[..., d, d] = G[..., d, d]
    im = np.swapaxes(Lw, -1, -2) - Lw
    im *= _SQRT_HALF
    return re, im


def hermitian_from_normals(z: np.ndarray, N: int) -> np.ndarray:
    """Map N^2 standard normals (last axis) to a Hermitian H with E|H_ij|^2 = 1 entrywise."""
    re, im = _hermitian_parts(z, N)
    H = np.empty(re.shape, dtype=complex)
    H.real, H.imag = re, im
    return H


def _n_normals(N: int, rs: RSParams) -> int:
    return N * N * ((rs.r > 0) + (rs.s > 0))


def increment_from_normals(z: np.ndarray, N: int, rs: RSParams, dt: float) -> np.ndarray:
    """sqrt(r) i X + sqrt(s) Y with X, Y GUE scaled so E tr X^2 = dt."""
    scale = math.sqrt(dt / N)
    lead = z.shape[:-1] + (N, N)
    W_re, W_im = np.zeros(lead), np.zeros(lead)
    k = 0
    if rs.r > 0:
        # i a (R + iI) = -a I + i a R
        a = math.sqrt(rs.r) * scale
        re, im = _hermitian_parts(z[..., :N * N], N)
        W_re -= a * im
        W_im += a * re
        k = N * N
    if rs.s > 0:
        b = math.sqrt(rs.s) * scale
        re, im = _hermitian_parts(z[..., k:k + N * N], N)
        W_re += b * re
        W_im += b * im
    W = np.empty(lead, dtype=complex)
    W.real, W.imag = W_re, W_im
    return W


def sample_increment(N: int, rs, dt: float, rng: np.random.Generator) -> np.ndarray:
    """One increment of W = sqrt(r) i X + sqrt(s) Y over time dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    rs = as_rs(rs)
    return increment_from_normals(rng.standard_normal(_n_normals(N, rs)), N, rs, dt)


def _stream(seed: int, sample: int, comp: int, step: int, node: int) -> np.random.Generator:
    key = np.array([seed, (sample << 16) | comp], dtype=np.uint64)
    counter = np.array([0, step, node, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def step_normals(seed, sample, comp, step, L, refine: int) -> np.ndarray:
    """Standard normals for the 2**refine sub-steps of one coarse step, shape (2**refine, L).

    The coarse normal vector z is split by Brownian bridges (z + u)/sqrt2, (z - u)/sqrt2,
    so every refinement level sees the same underlying path.
    """
    z = _stream(seed, sample, comp, step, 1).standard_normal(L)
    if refine == 0:
        return z[None]
    level = [(1, z)]
    for _ in range(refine):
        nxt = []
        for node, v in level:
            u = _stream(seed, sample, comp, step, 2 * node).standard_normal(L)
            nxt.append((2 * node, (v + u) / math.sqrt(2)))
            nxt.append((2 * node + 1, (v - u) / math.sqrt(2)))
        level = nxt
    return np.stack([v for _, v in level])


# --------------------------------------------------------------------------
# paths


@dataclass
class PathDataset:
    """Final matrices B_j(T_j) for each sample, shape (samples, |J|, N, N)."""

    config: SimConfig
    mats: np.ndarray

    MAGIC = b"GLBM"
    VERSION = 1

    @property
    def N(self):
        return self.mats.shape[-1]

    @property
    def samples(self):
        return self.mats.shape[0]

    def matrices(self) -> dict:
        """{j: stack of B_j} for evaluation."""
        return {j: self.mats[:, k] for k, j in enumerate(self.config.J)}

    def save(self, path) -> None:
        path = Path(path)
        times = [self.config.T[j] for j in self.config.J]
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<IIIQ", self.VERSION, self.N, len(times), self.samples))
            fh.write(struct.pack(f"<{len(times)}d", *times))
            fh.write(np.ascontiguousarray(self.mats, dtype="<c16").tobytes())
        Path(str(path) + ".json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "PathDataset":
        path = Path(path)
        data = path.read_bytes()
        if data[:4] != cls.MAGIC:
            raise ValueError("not a GLBM file")
        version, N, nJ, samples = struct.unpack_from("<IIIQ", data, 4)
        if version != cls.VERSION:
            raise ValueError(f"unsupported version {version}")
        off = 4 + struct.calcsize("<IIIQ")
        times = struct.unpack_from(f"<{nJ}d", data, off)
        off += 8 * nJ
        mats = np.frombuffer(data, dtype="<c16", offset=off).reshape(samples, nJ, N, N).astype(complex)
        meta = Path(str(path) + ".json")
        if meta.exists():
            config = SimConfig.from_dict(json.loads(meta.read_text()))
        else:
            config = SimConfig(N=N, rs=(1, 0), T=list(times), samples=samples)
        return cls(config, mats)


def _advance(B, W, scheme, drift, tol):
    if scheme == "multiplicative_exp":
        return B @ expm_batch(W, tol=tol)
    return B + B @ W - drift * B


def _simulate_chunk(cfg: SimConfig, c: int, lo: int, hi: int) -> np.ndarray:
    """Final B_j for samples [lo, hi) of component index c."""
    N, rs = cfg.N, cfg.rs
    j = cfg.J[c]
    L = _n_normals(N, rs)
    n_coarse = cfg.steps(j)
    sub = 2**cfg.refine
    dt = cfg.T[j] / (n_coarse * sub) if n_coarse else 0.0
    drift = 0.5 * (rs.r - rs.s) * dt
    ids = range(cfg.sample_offset + lo, cfg.sample_offset + hi)
    B = np.broadcast_to(np.eye(N, dtype=complex), (hi - lo, N, N)).copy()
    z = np.empty((hi - lo, sub, L))
    for k in range(n_coarse):
        for r, i in enumerate(ids):
            z[r] = step_normals(cfg.seed, i, c, k, L, cfg.refine)
        for h in range(sub):
            W = increment_from_normals(z[:, h], N, rs, dt)
            B = _advance(B, W, cfg.scheme, drift, cfg.expm_tol)
        if not np.all(np.isfinite(B)):
            raise SimulationError(f"non-finite entries at step {k} (component {j})", step=k)
    return B


def simulate_paths(config: SimConfig, progress=None, workers: int = 1) -> PathDataset:
    """Integrate dB = B dW - (r - s)/2 B dt independently for each component and sample.

    ``workers > 1`` spreads sample chunks over processes. Each chunk owns its
    random streams and the merge is ordered, so the result is bit-identical
    to the serial run.
    """
    cfg = config
    N = cfg.N
    out = np.empty((cfg.samples, len(cfg.J), N, N), dtype=complex)
    tasks = [(c, lo, min(cfg.samples, lo + cfg.chunk))
             for c in range(len(cfg.J)) for lo in range(0, cfg.samples, cfg.chunk)]
    if workers <= 1 or len(tasks) == 1:
        results = (_simulate_chunk(cfg, *t) for t in tasks)
    else:
        from concurrent.futures import ProcessPoolExecutor

        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_simulate_chunk, *zip(*[(cfg,) + t for t in tasks]))
    try:
        for (c, lo, hi), B in zip(tasks, results):
            out[lo:hi, c] = B
            if progress:
                progress(c, hi)
    finally:
        if workers > 1 and len(tasks) > 1:
            pool.shutdown()
    return PathDataset(cfg, out)


def unitarity_defect(dataset: PathDataset) -> float:
    M = dataset.mats
    G = np.conj(np.swapaxes(M, -1, -2)) @ M
    G -= np.eye(M.shape[-1])
    return float(np.max(np.linalg.norm(G, axis=(-2, -1)), initial=0.0))


# --------------------------------------------------------------------------
# estimation


def poly_values(dataset: PathDataset, Ps) -> np.ndarray:
    """Per-sample values [P_i]_N(B), shape (samples, k)."""
    mats = dataset.matrices()
    cols = []
    for P in Ps:
        v = evaluate(P, mats)
        cols.append(np.broadcast_to(np.asarray(v, dtype=complex), (dataset.samples,)))
    return np.stack(cols, axis=1) if cols else np.zeros((dataset.samples, 0), dtype=complex)


def batch_mean(x: np.ndarray, batches: int):
    """Mean and batch-means standard error (complex: sqrt(se_re^2 + se_im^2)) along axis 0."""
    n = x.shape[0]
    if n < batches:
        raise ValueError(f"need at least {batches} samples for {batches} batches")
    m = n // batches
    bm = x[: m * batches].reshape((batches, m) + x.shape[1:]).mean(axis=1)
    est = x.mean(axis=0)
    se_re = np.std(bm.real, axis=0, ddof=1) / math.sqrt(batches)
    se_im = np.std(bm.imag, axis=0, ddof=1) / math.sqrt(batches)
    return est, np.sqrt(se_re**2 + se_im**2)


def _z(est, pred, se):
    """|est - pred| / se; differences at round-off level count as exact agreement."""
    pred = np.asarray(pred)
    d = np.abs(np.asarray(est) - pred)
    se = np.asarray(se)
    exact = d <= 1e-9 * np.maximum(1.0, np.abs(pred))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, d / np.where(se > 0, se, 1), np.inf)
    return np.where(exact, 0.0, z)


@dataclass
class FluctuationReport:
    polys: list
    N: int
    samples: int
    batches: int
    mean_est: np.ndarray
    mean_se: np.ndarray
    mean_pred: np.ndarray
    cov_est: np.ndarray
    cov_se: np.ndarray
    pcov_est: np.ndarray
    pcov_se: np.ndarray
    cov_exact: np.ndarray | None = None
    pcov_exact: np.ndarray | None = None
    cov_limit: np.ndarray | None = None
    pcov_limit: np.ndarray | None = None
    degenerate: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def mean_z(self):
        return _z(self.mean_est, self.mean_pred, self.mean_se)

    def cov_z(self, which="exact"):
        ref = self.cov_exact if which == "exact" else self.cov_limit
        return None if ref is None else _z(self.cov_est, ref, self.cov_se)

    def pcov_z(self, which="exact"):
        ref = self.pcov_exact if which == "exact" else self.pcov_limit
        return None if ref is None else _z(self.pcov_est, ref, self.pcov_se)

    def mean_rows(self):
        z = self.mean_z
        return [
            [self.polys[i], self.mean_est[i].real, self.mean_est[i].imag, self.mean_se[i],
             self.mean_pred[i].real, self.mean_pred[i].imag, z[i]]
            for i in range(len(self.polys))
        ]

    def cov_rows(self):
        rows = []
        k = len(self.polys)
        for kind, est, se, ex, lim in (
            ("cov", self.cov_est, self.cov_se, self.cov_exact, self.cov_limit),
            ("pcov", self.pcov_est, self.pcov_se, self.pcov_exact, self.pcov_limit),
        ):
            for i in range(k):
                for j in range(i, k):
                    row = [kind, self.polys[i], self.polys[j], est[i, j].real, est[i, j].imag, se[i, j]]
                    for ref in (ex, lim):
                        if ref is None:
                            row += ["", "", ""]
                        else:
                            row += [ref[i, j].real, ref[i, j].imag, _z(est[i, j], ref[i, j], se[i, j])]
                    rows.append(row)
        return rows

    MEAN_COLS = ["poly", "re_mean_est", "im_mean_est", "stderr", "re_mean_pred", "im_mean_pred", "z"]
    COV_COLS = ["kind", "poly_i", "poly_j", "re_est", "im_est", "stderr",
                "re_exact", "im_exact", "z_exact", "re_limit", "im_limit", "z_limit"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.MEAN_COLS)
        for row in self.mean_rows():
            w.writerow([_fmt(x) for x in row])
        w.writerow([])
        w.writerow(self.COV_COLS)
        for row in self.cov_rows():
            w.writerow([_fmt(x) for x in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "samples": self.samples,
            "batches": self.batches,
            "means": [dict(zip(self.MEAN_COLS, [_plain(x) for x in r])) for r in self.mean_rows()],
            "covariances": [dict(zip(self.COV_COLS, [_plain(x) for x in r])) for r in self.cov_rows()],
            "degenerate": self.degenerate,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, path, fmt="csv") -> None:
        Path(path).write_text(self.to_csv() if fmt == "csv" else self.to_json())


def _fmt(x):
    if isinstance(x, str):
        return x
    x = float(x)
    return repr(x)


def _plain(x):
    if isinstance(x, str):
        return x if x != "" else None
    x = float(x)
    return x if math.isfinite(x) else str(x)


def estimate(
    dataset: PathDataset,
    Ps,
    batches: int = 20,
    exact: bool = True,
    limit: bool = True,
    tol: float = 1e-9,
    values: np.ndarray | None = None,
) -> FluctuationReport:
    """Means, covariances E[X_P conj X_Q] and pseudo-covariances E[X_P X_Q] of X_P = N([P] - E[P])."""
    Ps = list(Ps)
    cfg = dataset.config
    N, n = dataset.N, dataset.samples
    if n < 2:
        raise ValueError("need at least 2 samples")
    if n < batches:
        raise ValueError(f"fewer samples ({n}) than batches ({batches})")
    V = poly_values(dataset, Ps) if values is None else values
    k = len(Ps)
    mean_est, mean_se = batch_mean(V, batches)
    Xc = N * (V - V.mean(axis=0))
    corr = n / (n - 1)
    prod_c = Xc[:, :, None] * np.conj(Xc[:, None, :]) * corr
    prod_p = Xc[:, :, None] * Xc[:, None, :] * corr
    cov_est, cov_se = batch_mean(prod_c, batches)
    pcov_est, pcov_se = batch_mean(prod_p, batches)
    degenerate = [format_poly(P) for P, v in zip(Ps, V.T) if np.ptp(v.real) == 0 and np.ptp(v.imag) == 0]
    mean_pred = np.array([heat_expectation(P, cfg.rs, cfg.T, N) for P in Ps], dtype=complex)
    rep = FluctuationReport(
        polys=[format_poly(P) for P in Ps], N=N, samples=n, batches=batches,
        mean_est=mean_est, mean_se=mean_se, mean_pred=mean_pred,
        cov_est=cov_est, cov_se=cov_se, pcov_est=pcov_est, pcov_se=pcov_se,
        degenerate=degenerate, meta={"config": cfg.to_dict()},
    )
    conj = [conjugate(P) for P in Ps]
    if exact:
        rep.cov_exact = np.array([[exact_fluctuation_moment([Ps[i], conj[j]], cfg.rs, cfg.T, N)
                                   for j in range(k)] for i in range(k)])
        rep.pcov_exact = np.array([[exact_fluctuation_moment([Ps[i], Ps[j]], cfg.rs, cfg.T, N)
                                    for j in range(k)] for i in range(k)])
    if limit:
        rep.cov_limit = np.array([[sigma_direct(Ps[i], conj[j], cfg.rs, cfg.T, tol).value
                                   for j in range(k)] for i in range(k)])
        rep.pcov_limit = np.array([[sigma_direct(Ps[i], Ps[j], cfg.rs, cfg.T, tol).value
                                    for j in range(k)] for i in range(k)])
    return rep


def fluctuation_moment(dataset: PathDataset, Ps, batches: int = 20, values=None):
    """MC estimate of E[prod X_{P_i}] with its batch-means standard error."""
    N = dataset.N
    V = poly_values(dataset, Ps) if values is None else values
    X = N * (V - V.mean(axis=0))
    prod = np.prod(X, axis=1)
    est, se = batch_mean(prod, batches)
    return complex(est), float(se)


def normality_check(x: np.ndarray, nsd: float = 4.0) -> dict:
    """Skewness and excess kurtosis of a real sample against their large-n standard errors."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    skew = float(stats.skew(x))
    kurt = float(stats.kurtosis(x))
    se_s, se_k = math.sqrt(6 / n), math.sqrt(24 / n)
    return {
        "n": n,
        "skew": skew,
        "skew_se": se_s,
        "excess_kurtosis": kurt,
        "kurtosis_se": se_k,
        "passed": abs(skew) <= nsd * se_s and abs(kurt) <= nsd * se_k,
    }


# --------------------------------------------------------------------------
# rate of convergence in N


@dataclass
class RateTable:
    Ns: list
    values: list
    limit: complex
    diffs: list
    slope: float | None
    slope_err: float | None
    status: str

    def rows(self):
        return [(N, v, d) for N, v, d in zip(self.Ns, self.values, self.diffs)]


def rate_study(Ns, Ps, rs, T, tol: float = 1e-9, floor: float = 1e-12) -> RateTable:
    """|exact finite-N moment - Wick limit| over Ns, with the fitted log-log slope."""
    Ns = list(Ns)
    if len(Ns) < 3:
        raise ValueError("rate study needs at least 3 values of N")
    limit = wick_moment(Ps, rs, T, tol=tol)
    values = [exact_fluctuation_moment(Ps, rs, T, N) for N in Ns]
    diffs = [abs(v - limit) for v in values]
    if max(diffs) <= floor:
        return RateTable(Ns, values, limit, diffs, None, None, "converged")
    if min(diffs) <= floor:
        return RateTable(Ns, values, limit, diffs, None, None, "degenerate")
    x, y = np.log(Ns), np.log(diffs)
    if len(Ns) > 3:
        coef, cov = np.polyfit(x, y, 1, cov=True)
        err = float(math.sqrt(cov[0, 0]))
    else:
        coef, err = np.polyfit(x, y, 1), 0.0
    return RateTable(Ns, values, limit, diffs, float(coef[0]), err, "fitted")
