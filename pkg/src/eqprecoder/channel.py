"""Downlink channel generation: geometry, pathloss, Rayleigh fading and
slot-to-slot AR(1) evolution."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Geometry:
    """Single-cell drop geometry and pathloss constants.

    Pathloss in dB is ``pathloss_1m_db + pathloss_exponent_coeff * log10(d)``
    with ``d`` in meters.
    """

    cell_radius_m: float = 200.0
    min_distance_m: float = 10.0
    pathloss_1m_db: float = 13.54
    pathloss_exponent_coeff: float = 39.08

    def __post_init__(self):
        if not 0 < self.min_distance_m < self.cell_radius_m:
            raise ValueError(
                f"need 0 < min_distance_m < cell_radius_m, got "
                f"{self.min_distance_m}, {self.cell_radius_m}"
            )
        if self.pathloss_1m_db <= 0 or self.pathloss_exponent_coeff <= 0:
            raise ValueError("pathloss constants must be positive")

    def to_dict(self) -> dict:
        return {
            "cell_radius_m": self.cell_radius_m,
            "min_distance_m": self.min_distance_m,
            "pathloss_1m_db": self.pathloss_1m_db,
            "pathloss_exponent_coeff": self.pathloss_exponent_coeff,
        }


@dataclass
class ChannelRealization:
    """One optimization instance.

    ``H`` is N x K with column k the channel of UE k. ``fading`` holds the
    unit-variance small-scale part so that episodes can evolve it.
    """

    H: np.ndarray
    noise_power: float
    power_budget: float
    ue_distances_m: np.ndarray
    fading: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.complex128)
        if self.H.ndim != 2 or min(self.H.shape) < 1:
            raise ValueError(f"H must be a non-empty 2-D matrix, got shape {self.H.shape}")
        if not np.all(np.isfinite(self.H)):
            raise ValueError("H has non-finite entries")
        if not self.noise_power > 0:
            raise ValueError("noise_power must be positive")
        if not self.power_budget > 0:
            raise ValueError("power_budget must be positive")
        self.ue_distances_m = np.asarray(self.ue_distances_m, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def k(self) -> int:
        return self.H.shape[1]


@dataclass
class EpisodeChannels:
    """T correlated channel matrices of one proportional-fairness episode."""

    H: np.ndarray  # (T, N, K)
    correlation: float
    noise_power: float
    power_budget: float
    ue_distances_m: np.ndarray

    @property
    def num_slots(self) -> int:
        return self.H.shape[0]

    def slot(self, t: int) -> ChannelRealization:
        return ChannelRealization(self.H[t], self.noise_power, self.power_budget, self.ue_distances_m)


def pathloss_db(d, g: Geometry = Geometry()):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 1.0):
        raise ValueError("pathloss model is anchored at 1 m; distances below 1 m are outside its domain")
    out = g.pathloss_1m_db + g.pathloss_exponent_coeff * np.log10(d)
    return float(out) if out.ndim == 0 else out


def linear_gain(d, g: Geometry = Geometry()):
    return 10.0 ** (-np.asarray(pathloss_db(d, g)) / 10.0)


def noise_power_for_edge_snr(snr_edge_db: float, p_m: float, g: Geometry = Geometry()) -> float:
    """Noise power at which a full-power single-UE transmission at the cell
    edge is received with ``snr_edge_db``."""
    if not p_m > 0:
        raise ValueError("p_m must be positive")
    edge_gain = 10.0 ** (-pathloss_db(g.cell_radius_m, g) / 10.0)
    return p_m * edge_gain / 10.0 ** (snr_edge_db / 10.0)


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """I.i.d. standard circularly-symmetric complex Gaussian entries."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) / np.sqrt(2.0)


def sample_distances(rng: np.random.Generator, k: int, g: Geometry = Geometry()) -> np.ndarray:
    # area-uniform on the annulus [min_distance, radius]
    u = rng.random(k)
    r0, r1 = g.min_distance_m, g.cell_radius_m
    return np.sqrt(u * (r1 * r1 - r0 * r0) + r0 * r0)


def sample_channel(
    rng: np.random.Generator,
    n: int,
    k: int,
    g: Geometry = Geometry(),
    snr_edge_db: float = 5.0,
    p_m: float = 1.0,
) -> ChannelRealization:
    if n < 1 or k < 1:
        raise ValueError("need n >= 1 and k >= 1")
    d = sample_distances(rng, k, g)
    fading = complex_normal(rng, (n, k))
    H = fading * np.sqrt(linear_gain(d, g))[None, :]
    return ChannelRealization(
        H=H,
        noise_power=noise_power_for_edge_snr(snr_edge_db, p_m, g),
        power_budget=p_m,
        ue_distances_m=d,
        fading=fading,
    )


def evolve_episode(
    rng: np.random.Generator,
    base: ChannelRealization,
    t_slots: int = 20,
    rho: float = 0.9,
    g: Geometry = Geometry(),
) -> EpisodeChannels:
    """Gauss-Markov evolution of the small-scale fading over ``t_slots`` slots.

    Slot 0 is ``base`` itself; distances (large-scale gains) stay fixed.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if t_slots < 1:
        raise ValueError("t_slots must be >= 1")
    amp = np.sqrt(linear_gain(base.ue_distances_m, g))
    c = base.fading if base.fading is not None else base.H / amp[None, :]
    innov_scale = np.sqrt(1.0 - rho * rho)
    slots = np.empty((t_slots,) + base.H.shape, dtype=np.complex128)
    slots[0] = base.H
    for t in range(1, t_slots):
        c = rho * c + innov_scale * complex_normal(rng, c.shape)
        slots[t] = c * amp[None, :]
    return EpisodeChannels(
        H=slots,
        correlation=float(rho),
        noise_power=base.noise_power,
        power_budget=base.power_budget,
        ue_distances_m=base.ue_distances_m.copy(),
    )
