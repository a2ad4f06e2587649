import math

import numpy as np
import pytest

from glfluct.intertwine import RSParams, heat_expectation
from glfluct.matrix_lab import (
    PathDataset,
    SimConfig,
    _z,
    batch_mean,
    estimate,
    fluctuation_moment,
    hermitian_from_normals,
    normality_check,
    poly_values,
    rate_study,
    sample_increment,
    simulate_paths,
    step_normals,
    unitarity_defect,
)
from glfluct.trace_algebra import TracePoly, parse


def small(**kw):
    base = dict(N=4, rs=(1, 0), T={1: 0.5}, steps_per_unit_time=20, samples=40, chunk=16)
    base.update(kw)
    return SimConfig(**base)


# -- increments ---------------------------------------------------------------------


def test_hermitian_from_normals(rng):
    H = hermitian_from_normals(rng.standard_normal((3000, 25)), 5)
    assert np.allclose(H, np.conj(np.swapaxes(H, -1, -2)))
    assert np.mean(np.abs(H) ** 2) == pytest.approx(1, abs=0.03)


@pytest.mark.parametrize("r,s", [(1, 0), (0.5, 0.5), (2, 0.3), (0, 1)])
def test_increment_normalization(r, s):
    rng = np.random.default_rng(7)
    N, dt, n = 4, 0.01, 10000
    W = np.stack([sample_increment(N, (r, s), dt, rng) for _ in range(n)])
    tr = lambda M: np.trace(M, axis1=-2, axis2=-1) / N  # noqa: E731
    WW = tr(W @ np.conj(np.swapaxes(W, -1, -2))).real.mean()
    W2 = tr(W @ W).real.mean()
    assert WW == pytest.approx((r + s) * dt, rel=0.03)
    assert W2 == pytest.approx((s - r) * dt, abs=0.03 * (r + s) * dt)


def test_unitary_increment_skew_hermitian(rng):
    W = sample_increment(6, (1, 0), 0.1, rng)
    assert np.allclose(W, -np.conj(W.T))
    with pytest.raises(ValueError):
        sample_increment(3, (1, 0), 0.0, rng)


def test_bridge_refinement_preserves_sums():
    z0 = step_normals(5, 3, 0, 2, 10, 0)[0]
    z2 = step_normals(5, 3, 0, 2, 10, 2)
    assert z2.shape == (4, 10)
    # coarse increment = sum of fine increments: sqrt(dt) z = sum sqrt(dt/4) z_k
    assert np.allclose(z2.sum(axis=0) / 2, z0)
    assert not np.allclose(step_normals(5, 4, 0, 2, 10, 0), z0)


# -- paths --------------------------------------------------------------------------


def test_zero_time_is_identity():
    ds = simulate_paths(small(T={1: 0.0}))
    assert np.array_equal(ds.mats, np.broadcast_to(np.eye(4), ds.mats.shape))


def test_unitary_paths_stay_unitary():
    ds = simulate_paths(small(N=8, T={1: 1.0}, steps_per_unit_time=200, samples=10))
    assert unitarity_defect(ds) <= 1e-10


def test_reproducible_and_chunk_independent():
    a = simulate_paths(small(seed=11))
    b = simulate_paths(small(seed=11, chunk=7))
    assert np.array_equal(a.mats, b.mats)
    c = simulate_paths(small(seed=12))
    assert not np.allclose(a.mats, c.mats)


def test_workers_do_not_change_result():
    cfg = small(T={1: 0.3, 2: 0.2}, chunk=8)
    assert np.array_equal(simulate_paths(cfg, workers=2).mats, simulate_paths(cfg).mats)


def test_sample_offset_regenerates_subset():
    full = simulate_paths(small(samples=30))
    part = simulate_paths(small(samples=10, sample_offset=15))
    assert np.array_equal(part.mats, full.mats[15:25])


def test_refinement_is_coupled():
    coarse = simulate_paths(small(rs=(0.5, 0.5), samples=8))
    fine = simulate_paths(small(rs=(0.5, 0.5), samples=8, refine=1))
    other = simulate_paths(small(rs=(0.5, 0.5), samples=8, seed=99))
    d_fine = np.max(np.abs(fine.mats - coarse.mats))
    d_other = np.max(np.abs(other.mats - coarse.mats))
    assert d_fine < 0.1 * d_other


def test_two_components_independent_streams():
    ds = simulate_paths(small(T={1: 0.5, 2: 0.5}))
    m = ds.matrices()
    assert set(m) == {1, 2}
    assert not np.allclose(m[1], m[2])


def test_euler_scheme_runs_and_agrees_roughly():
    cfg = dict(rs=(0.5, 0.5), samples=8, steps_per_unit_time=400)
    a = simulate_paths(small(**cfg))
    b = simulate_paths(small(scheme="euler_maruyama", **cfg))
    assert np.max(np.abs(a.mats - b.mats)) < 0.05


@pytest.mark.parametrize("bad", [dict(N=0), dict(samples=0), dict(scheme="rk4"), dict(T={1: -1.0}),
                                 dict(refine=-1), dict(steps_per_unit_time=0), dict(T={1: float("nan")})])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        small(**bad)


def test_config_roundtrip():
    cfg = small(rs=(2, 0.3), T=[0.5, 1.5], seed=3)
    assert cfg.T == {1: 0.5, 2: 1.5}
    assert SimConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.steps(2) == 30


def test_dataset_roundtrip(tmp_path):
    ds = simulate_paths(small(T={1: 0.3, 2: 0.6}, samples=5))
    p = tmp_path / "paths.glbm"
    ds.save(p)
    back = PathDataset.load(p)
    assert np.array_equal(back.mats, ds.mats)
    assert back.config == ds.config
    (tmp_path / "bad.glbm").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError):
        PathDataset.load(tmp_path / "bad.glbm")


# -- estimators -----------------------------------------------------------------------


def test_batch_mean_matches_iid_error(rng):
    x = rng.standard_normal(20000) + 1j * rng.standard_normal(20000)
    est, se = batch_mean(x, 20)
    assert se == pytest.approx(math.sqrt(2 / 20000), rel=0.4)
    with pytest.raises(ValueError):
        batch_mean(x[:5], 20)


def test_z_handles_exact_and_zero_se():
    assert _z(1.0, 1.0 + 1e-12, 0.0) == 0
    assert _z(1.0, 2.0, 0.0) == np.inf
    assert _z(1.0, 1.5, 0.25) == pytest.approx(2)


def test_constant_polynomial_has_zero_fluctuation():
    ds = simulate_paths(small(samples=20))
    rep = estimate(ds, [TracePoly.constant(2), parse("tr(X1 X1*)")], batches=10)
    assert np.all(rep.cov_est[0] == 0) and np.all(rep.pcov_est[:, 0] == 0)
    assert abs(rep.cov_est[1, 1]) < 1e-20
    assert rep.mean_z[0] == 0
    assert "2" in rep.degenerate[0]
    # unitary: tr(U U*) = 1 exactly up to round-off
    assert rep.mean_est[1] == pytest.approx(1, abs=1e-12)


def test_mean_and_covariance_small_N():
    ds = simulate_paths(small(N=6, samples=600, T={1: 1.0}, chunk=200))
    Ps = [parse("tr(X1)"), parse("tr(X1 X1)")]
    rep = estimate(ds, Ps, batches=20)
    # finite-N mean of tr U_t is e^{-t/2} for every N
    assert rep.mean_pred[0] == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert np.all(rep.mean_z < 4)
    assert np.all(rep.cov_z("exact") < 4)
    assert np.all(rep.pcov_z("exact") < 4)
    text = rep.to_csv()
    assert text.startswith("poly,re_mean_est")
    assert "\n\nkind,poly_i" in text


def test_report_json_roundtrip(tmp_path):
    import json

    ds = simulate_paths(small(samples=20))
    rep = estimate(ds, [parse("tr(X1)")], batches=10, limit=False)
    rep.write(tmp_path / "r.json", fmt="json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["N"] == 4 and len(d["covariances"]) == 2
    assert d["covariances"][0]["re_limit"] is None


def test_fluctuation_moment_shape():
    ds = simulate_paths(small(samples=40))
    est, se = fluctuation_moment(ds, [parse("tr(X1)"), parse("tr(X1*)")], batches=10)
    assert isinstance(est, complex) and se > 0
    assert est.real > 0


def test_poly_values_constant_broadcast():
    ds = simulate_paths(small(samples=3))
    V = poly_values(ds, [TracePoly.constant(1j), parse("tr(X1)")])
    assert V.shape == (3, 2) and np.all(V[:, 0] == 1j)


def test_heat_mean_matches_finite_N_oracle():
    # E tr U_t^2 = e^{-t} (cosh(t/N) - N sinh(t/N))
    N, t = 4, 0.7
    exact = math.exp(-t) * (math.cosh(t / N) - N * math.sinh(t / N))
    assert heat_expectation(parse("tr(X1 X1)"), RSParams(1, 0), t, N).real == pytest.approx(exact, abs=1e-13)


def test_normality_check(rng):
    assert normality_check(rng.standard_normal(5000))["passed"]
    assert not normality_check(rng.exponential(size=5000))["passed"]


# -- rates ---------------------------------------------------------------------------


def test_rate_study_needs_three_N():
    with pytest.raises(ValueError):
        rate_study([4, 8], [parse("tr(X1)"), parse("tr(X1*)")], (1, 0), 1.0)


def test_rate_study_trX_is_N_independent():
    tab = rate_study([2, 4, 8], [parse("tr(X1)"), parse("tr(X1*)")], (1, 0), 1.0)
    assert tab.status == "converged"
    assert tab.limit == pytest.approx(1 - math.exp(-1))


@pytest.mark.parametrize("rs,Ps", [
    ((1, 0), ["tr(X1 X1)", "tr(X1* X1*)"]),
    ((0.5, 0.5), ["tr(X1 X1*)", "tr(X1 X1*)"]),
])
def test_rate_study_second_order(rs, Ps):
    tab = rate_study([8, 16, 32, 64], [parse(p) for p in Ps], rs, 1.0)
    assert tab.status == "fitted"
    assert tab.slope == pytest.approx(-2, abs=0.1)
    assert len(tab.rows()) == 4


def test_rate_study_three_points_no_error_bar():
    tab = rate_study([8, 16, 32], [parse("tr(X1 X1)"), parse("tr(X1* X1*)")], (1, 0), 1.0)
    assert tab.slope_err == 0.0 and tab.slope < -1.8
