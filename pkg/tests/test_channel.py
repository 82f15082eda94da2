import numpy as np
import pytest
from scipy import stats

from eqprecoder.channel import (
    Geometry, ChannelRealization, evolve_episode, linear_gain, noise_power_for_edge_snr,
    pathloss_db, sample_channel, sample_distances,
)


def test_pathloss_anchor_and_edge():
    assert pathloss_db(1.0) == pytest.approx(13.54, abs=1e-12)
    assert pathloss_db(200.0) == pytest.approx(13.54 + 39.08 * np.log10(200.0), abs=1e-12)
    assert abs(pathloss_db(200.0) - 103.46) < 0.01


def test_pathloss_below_one_meter_rejected():
    with pytest.raises(ValueError, match="1 m"):
        pathloss_db(0.5)


def test_pathloss_vectorized():
    d = np.array([1.0, 10.0, 100.0])
    np.testing.assert_allclose(pathloss_db(d), 13.54 + 39.08 * np.array([0.0, 1.0, 2.0]))


def test_noise_power_values():
    n0 = noise_power_for_edge_snr(0.0, 1.0)
    assert n0 == pytest.approx(4.51e-11, rel=0.01)
    assert n0 == pytest.approx(10 ** (-pathloss_db(200.0) / 10), rel=1e-12)
    assert noise_power_for_edge_snr(10.0, 1.0) == pytest.approx(n0 / 10, rel=1e-12)
    assert noise_power_for_edge_snr(0.0, 2.0) == pytest.approx(2 * n0, rel=1e-12)


def test_noise_power_gives_edge_snr():
    g = Geometry()
    snr = 7.0
    noise = noise_power_for_edge_snr(snr, 1.0, g)
    assert 10 * np.log10(linear_gain(g.cell_radius_m, g) / noise) == pytest.approx(snr, abs=1e-9)


@pytest.mark.parametrize("kw", [
    dict(cell_radius_m=10.0, min_distance_m=10.0),
    dict(min_distance_m=0.0),
    dict(pathloss_1m_db=0.0),
    dict(pathloss_exponent_coeff=-1.0),
])
def test_geometry_validation(kw):
    with pytest.raises(ValueError):
        Geometry(**kw)


def test_channel_realization_validation():
    with pytest.raises(ValueError):
        ChannelRealization(np.full((2, 2), np.nan), 1.0, 1.0, np.ones(2))
    with pytest.raises(ValueError):
        ChannelRealization(np.ones((2, 2)), 0.0, 1.0, np.ones(2))
    with pytest.raises(ValueError):
        ChannelRealization(np.ones((2, 2)), 1.0, -1.0, np.ones(2))


def test_sample_channel_determinism():
    a = sample_channel(np.random.default_rng(7), 4, 3)
    b = sample_channel(np.random.default_rng(7), 4, 3)
    assert a.H.tobytes() == b.H.tobytes()
    assert a.ue_distances_m.tobytes() == b.ue_distances_m.tobytes()
    assert a.noise_power == b.noise_power


def test_small_scale_second_moment(rng):
    n = 6
    acc = []
    for _ in range(10_000):
        ch = sample_channel(rng, n, 1)
        acc.append(np.sum(np.abs(ch.H[:, 0]) ** 2) / linear_gain(ch.ue_distances_m[0]))
    assert abs(np.mean(acc) - n) / n < 0.05


def test_distance_law_ks(rng):
    g = Geometry()
    d = sample_distances(rng, 10_000, g)
    r0, r1 = g.min_distance_m, g.cell_radius_m
    ks = stats.kstest(d, lambda x: (np.clip(x, r0, r1) ** 2 - r0**2) / (r1**2 - r0**2)).statistic
    assert ks < 0.02
    assert d.min() >= r0 and d.max() <= r1


def test_sample_channel_rejects_empty(rng):
    with pytest.raises(ValueError):
        sample_channel(rng, 0, 2)


def test_episode_rho_one_is_static(rng):
    base = sample_channel(rng, 4, 3)
    ep = evolve_episode(rng, base, 20, 1.0)
    assert ep.num_slots == 20
    for t in range(20):
        np.testing.assert_array_equal(ep.H[t], base.H)


def _lag1(rng, rho, n=100, k=100):
    base = sample_channel(rng, n, k)
    ep = evolve_episode(rng, base, 2, rho)
    amp = np.sqrt(linear_gain(base.ue_distances_m))
    c0, c1 = ep.H[0] / amp, ep.H[1] / amp
    return np.real(np.vdot(c0, c1)) / np.sqrt(np.vdot(c0, c0).real * np.vdot(c1, c1).real), c1


def test_episode_correlation(rng):
    corr, c1 = _lag1(rng, 0.9)
    assert abs(corr - 0.9) < 0.02
    assert abs(np.mean(np.abs(c1) ** 2) - 1.0) < 0.05  # stationarity
    corr0, _ = _lag1(rng, 0.0)
    assert abs(corr0) < 0.05


def test_episode_slot_zero_and_shared_geometry(rng):
    base = sample_channel(rng, 3, 2)
    ep = evolve_episode(rng, base, 5, 0.9)
    np.testing.assert_array_equal(ep.H[0], base.H)
    sl = ep.slot(3)
    assert sl.n == 3 and sl.k == 2
    np.testing.assert_array_equal(sl.ue_distances_m, base.ue_distances_m)


def test_episode_rho_validation(rng):
    base = sample_channel(rng, 2, 2)
    with pytest.raises(ValueError):
        evolve_episode(rng, base, 5, 1.5)
