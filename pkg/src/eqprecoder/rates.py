"""SINR, rates and the weighted-sum-rate objective, plus power projection and
the closed-form MRT / ZF precoders."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RateReport:
    sinr: np.ndarray
    rate: np.ndarray  # bits per channel use
    weighted_sum_rate: float

    def to_dict(self) -> dict:
        return {
            "sinr": self.sinr.tolist(),
            "rate": self.rate.tolist(),
            "weighted_sum_rate": self.weighted_sum_rate,
        }


def check_weights(alpha, k: int) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (k,):
        raise ValueError(f"weights must have shape ({k},), got {alpha.shape}")
    if np.any(alpha < 0) or not np.any(alpha > 0):
        raise ValueError("weights must be non-negative with at least one positive entry")
    return alpha


def sinr(H, V, noise_power) -> np.ndarray:
    """Per-UE SINR. Works on single instances (N, K) or stacks (..., N, K)."""
    H = np.asarray(H)
    V = np.asarray(V)
    if H.shape != V.shape:
        raise ValueError(f"H and V shapes differ: {H.shape} vs {V.shape}")
    # gains[..., k, i] = |h_k^H v_i|^2
    gains = np.abs(np.conj(np.swapaxes(H, -1, -2)) @ V) ** 2
    signal = np.diagonal(gains, axis1=-2, axis2=-1)
    noise = np.asarray(noise_power, dtype=np.float64)[..., None]
    return signal / (gains.sum(axis=-1) - signal + noise)


def weighted_sum_rate(H, V, alpha, noise_power):
    """Sum of alpha_k * log2(1 + sinr_k); vectorized over leading axes."""
    return np.sum(np.asarray(alpha) * np.log2(1.0 + sinr(H, V, noise_power)), axis=-1)


def rate_report(H, V, alpha, noise_power) -> RateReport:
    H = np.asarray(H, dtype=np.complex128)
    V = np.asarray(V, dtype=np.complex128)
    if H.ndim != 2 or H.shape != V.shape:
        raise ValueError(f"H and V must be matching N x K matrices, got {H.shape} and {V.shape}")
    if not noise_power > 0:
        raise ValueError("noise_power must be positive")
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (H.shape[1],):
        raise ValueError(f"weights must have shape ({H.shape[1]},), got {alpha.shape}")
    s = sinr(H, V, noise_power)
    r = np.log2(1.0 + s)
    return RateReport(sinr=s, rate=r, weighted_sum_rate=float(np.dot(alpha, r)))


def total_power(V) -> float:
    return float(np.sum(np.abs(V) ** 2))


def project_power(V, p_m: float) -> np.ndarray:
    """Rescale V so that its total power is exactly ``p_m``."""
    V = np.asarray(V, dtype=np.complex128)
    norm = np.linalg.norm(V)
    if norm == 0.0:
        raise ValueError("cannot project an all-zero precoder onto the power budget")
    return V * (np.sqrt(p_m) / norm)


def mrt(H, p_m: float) -> np.ndarray:
    H = np.asarray(H, dtype=np.complex128)
    norms = np.linalg.norm(H, axis=0)
    if np.any(norms == 0):
        raise ValueError("MRT needs every channel column to be nonzero")
    return H / norms * np.sqrt(p_m / H.shape[1])


def zf(H, p_m: float) -> np.ndarray:
    H = np.asarray(H, dtype=np.complex128)
    n, k = H.shape
    if k > n:
        raise ValueError(f"zero-forcing needs K <= N, got K={k}, N={n}")
    gram = H.conj().T @ H
    if np.linalg.matrix_rank(gram) < k:
        raise np.linalg.LinAlgError("zero-forcing failed: Gram matrix H^H H is singular and cannot be inverted")
    try:
        D = H @ np.linalg.inv(gram)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"zero-forcing failed to invert H^H H: {exc}") from exc
    return D / np.linalg.norm(D, axis=0) * np.sqrt(p_m / k)
