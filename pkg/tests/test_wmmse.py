import csv

import numpy as np
import pytest

from eqprecoder.channel import sample_channel
from eqprecoder.rates import mrt, total_power, weighted_sum_rate, zf
from eqprecoder.wmmse import (
    BisectionError, WmmseOptions, available_backends, bisect_mu, power_curve, weighted_covariance_terms,
    wmmse_solve, wmmse_solve_batch, write_trace_csv,
)

from conftest import haar_unitary, perm_matrix

BACKENDS = available_backends()


def _cplx(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def _phase_aligned(a, b):
    # compare up to a global phase
    ph = np.vdot(b, a)
    return b * (ph / abs(ph))


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_user_closed_form(rng, backend):
    h = _cplx(rng, 5, 1)
    noise, pm, a = 0.3, 2.0, 1.7
    res = wmmse_solve(h, [a], noise, pm, backend=backend)
    target = np.sqrt(pm) * h / np.linalg.norm(h)
    np.testing.assert_allclose(_phase_aligned(target, res.V), target, atol=1e-6)
    assert res.objective == pytest.approx(a * np.log2(1 + pm * np.linalg.norm(h) ** 2 / noise), abs=1e-6)


@pytest.mark.parametrize("backend", BACKENDS)
def test_zero_weight_gets_zero_column(rng, backend):
    H = _cplx(rng, 4, 2)
    res = wmmse_solve(H, [1.0, 0.0], 0.5, 1.0, backend=backend)
    assert np.all(res.V[:, 1] == 0)
    single = wmmse_solve(H[:, :1], [1.0], 0.5, 1.0, backend=backend)
    np.testing.assert_allclose(_phase_aligned(single.V[:, 0], res.V[:, 0]), single.V[:, 0], atol=1e-6)


@pytest.mark.parametrize("backend", BACKENDS)
def test_beats_baselines_and_random_search(rng, backend):
    H = _cplx(rng, 4, 3)
    alpha = rng.random(3) + 0.2
    noise, pm = 0.1, 1.0
    res = wmmse_solve(H, alpha, noise, pm, WmmseOptions(max_iters=2000, rel_tol=1e-10), backend=backend)
    best_base = max(weighted_sum_rate(H, mrt(H, pm), alpha, noise), weighted_sum_rate(H, zf(H, pm), alpha, noise))
    assert res.objective >= best_base - 1e-9
    V = _cplx(rng, 20_000, 4, 3)
    V *= np.sqrt(pm) / np.linalg.norm(V, axis=(1, 2), keepdims=True)
    assert res.objective >= weighted_sum_rate(np.broadcast_to(H, V.shape), V, alpha, noise).max()


@pytest.mark.parametrize("backend", BACKENDS)
def test_monotone_and_feasible(rng, backend):
    for _ in range(50):
        ch = sample_channel(rng, int(rng.integers(1, 7)), int(rng.integers(1, 6)))
        alpha = rng.random(ch.k) + 0.05
        res = wmmse_solve(ch.H, alpha, ch.noise_power, ch.power_budget, backend=backend)
        assert np.all(np.diff(res.objective_trace) >= -1e-9)
        assert total_power(res.V) <= ch.power_budget * (1 + 1e-9)
        assert len(res.objective_trace) == res.iterations + 1


def test_backends_agree(rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernel not built")
    for _ in range(10):
        ch = sample_channel(rng, 6, 4)
        alpha = 4 * rng.dirichlet(np.ones(4))
        a = wmmse_solve(ch.H, alpha, ch.noise_power, 1.0, backend="python")
        b = wmmse_solve(ch.H, alpha, ch.noise_power, 1.0, backend="compiled")
        assert a.iterations == b.iterations
        np.testing.assert_allclose(a.objective_trace, b.objective_trace, rtol=1e-9)
        np.testing.assert_allclose(b.V, a.V, atol=1e-8)


@pytest.mark.parametrize("backend", BACKENDS)
def test_equivariance(rng, backend):
    ch = sample_channel(rng, 6, 4)
    alpha = 4 * rng.dirichlet(np.ones(4))
    U, P = haar_unitary(rng, 6), perm_matrix(rng, 4)
    opts = WmmseOptions(max_iters=50)
    V = wmmse_solve(ch.H, alpha, ch.noise_power, 1.0, opts, backend).V
    W = wmmse_solve(U @ ch.H @ P.T, P @ alpha, ch.noise_power, 1.0, opts, backend).V
    ref = U @ V @ P.T
    assert np.linalg.norm(W - ref) / np.linalg.norm(ref) < 1e-5


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("scale", [0.1, 10.0])
def test_weight_scale_invariance(rng, backend, scale):
    ch = sample_channel(rng, 4, 3)
    alpha = rng.random(3) + 0.1
    opts = WmmseOptions(max_iters=60)
    a = wmmse_solve(ch.H, alpha, ch.noise_power, 1.0, opts, backend).V
    b = wmmse_solve(ch.H, scale * alpha, ch.noise_power, 1.0, opts, backend).V
    np.testing.assert_allclose(b, a, atol=1e-6 * np.abs(a).max())


@pytest.mark.parametrize("backend", BACKENDS)
def test_input_errors(backend):
    H = np.ones((2, 2), dtype=complex)
    with pytest.raises(ValueError, match="non-finite"):
        wmmse_solve(np.full((2, 2), np.inf), [1, 1], 1.0, 1.0, backend=backend)
    with pytest.raises(ValueError):
        wmmse_solve(H, [0, 0], 1.0, 1.0, backend=backend)
    with pytest.raises(ValueError):
        wmmse_solve(H, [1, 1], 0.0, 1.0, backend=backend)
    with pytest.raises(ValueError):
        wmmse_solve(H, [1, 1], 1.0, 1.0, backend="fortran")


def test_options_validation():
    with pytest.raises(ValueError):
        WmmseOptions(mu_growth=1.0)
    with pytest.raises(ValueError):
        WmmseOptions(rel_tol=0)


# --------------------------------------------------------------------------
# multiplier search


@pytest.mark.parametrize("backend", BACKENDS)
def test_bisect_inactive_constraint(backend):
    assert bisect_mu([1.0, 2.0], [0.1, 0.1], 10.0, backend=backend) == 0.0


@pytest.mark.parametrize("backend", BACKENDS)
def test_bisect_hits_power(rng, backend):
    opts = WmmseOptions()
    for _ in range(100):
        lam = rng.random(5) * 10 ** rng.uniform(-3, 2)
        c = rng.random(5) * 10 ** rng.uniform(-2, 2)
        pm = 10 ** rng.uniform(-2, 1)
        mu = bisect_mu(lam, c, pm, opts, backend)
        if power_curve(lam, c, 0.0) <= pm:
            assert mu == 0.0
        else:
            assert abs(power_curve(lam, c, mu) - pm) <= opts.bisect_tol * pm


@pytest.mark.parametrize("backend", BACKENDS)
def test_bisect_monotone_in_budget(rng, backend):
    ch = sample_channel(rng, 4, 3)
    V = mrt(ch.H, 1.0)
    lam, c = weighted_covariance_terms(ch.H, V, np.ones(3), ch.noise_power)
    prev = np.inf
    for pm in [1e-4, 2e-4, 4e-4, 8e-4, 1.6e-3]:
        mu = bisect_mu(lam, c, pm, backend=backend)
        assert mu <= prev
        prev = mu
    # dense sweep: the power curve itself is decreasing
    mus = np.linspace(0, 10 * max(prev, 1e-6), 200)
    p = [power_curve(lam, c, m) for m in mus]
    assert np.all(np.diff(p) <= 0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_bisect_non_monotone_raises(backend):
    # a negative energy makes power(mu) rise again past its minimum
    with pytest.raises(BisectionError):
        bisect_mu([1.0, 100.0], [10.0, -1e4], 1.0, backend=backend)


@pytest.mark.parametrize("backend", BACKENDS)
def test_bisect_nan_raises(backend):
    with pytest.raises(BisectionError):
        bisect_mu([1.0, 2.0], [np.nan, 10.0], 1.0, backend=backend)


# --------------------------------------------------------------------------
# batches and export


def test_batch_matches_single_and_jobs(rng):
    chs = [sample_channel(rng, 4, 3) for _ in range(6)]
    H = np.stack([c.H for c in chs])
    noise = np.array([c.noise_power for c in chs])
    alpha = 3 * rng.dirichlet(np.ones(3), 6)
    V1, obj1, it1 = wmmse_solve_batch(H, alpha, noise, 1.0)
    V2, obj2, it2 = wmmse_solve_batch(H, alpha, noise, 1.0, jobs=2)
    assert V1.tobytes() == V2.tobytes() and obj1.tobytes() == obj2.tobytes()
    np.testing.assert_array_equal(it1, it2)
    single = wmmse_solve(H[2], alpha[2], noise[2], 1.0)
    np.testing.assert_array_equal(single.V, V1[2])


def test_trace_csv(tmp_path, rng):
    ch = sample_channel(rng, 3, 2)
    res = wmmse_solve(ch.H, [1, 1], ch.noise_power, 1.0)
    path = tmp_path / "t.csv"
    write_trace_csv([res.objective_trace, res.objective_trace[:2]], path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == len(res.objective_trace) + 2
    assert float(rows[0]["objective"]) == res.objective_trace[0]
