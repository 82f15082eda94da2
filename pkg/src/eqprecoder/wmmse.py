"""WMMSE solver for weighted sum rate maximization under a total power budget.

The per-instance iteration runs in a compiled kernel when the extension was
built, otherwise in NumPy. Set ``EQPRECODER_BACKEND=python`` to force the
NumPy kernel.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from eqprecoder import _wmmse_py
from eqprecoder._wmmse_py import BisectionError  # noqa: F401  (re-export)
from eqprecoder.rates import check_weights

try:
    from eqprecoder import _wmmse_ext
except ImportError:  # extension not built
    _wmmse_ext = None

_KERNELS = {"python": _wmmse_py}
if _wmmse_ext is not None:
    _KERNELS["compiled"] = _wmmse_ext

BACKEND = os.environ.get("EQPRECODER_BACKEND") or ("compiled" if _wmmse_ext is not None else "python")
if BACKEND not in _KERNELS:
    raise ImportError(f"WMMSE backend {BACKEND!r} unavailable; choose from {sorted(_KERNELS)}")


def available_backends() -> list[str]:
    return sorted(_KERNELS)


@dataclass(frozen=True)
class WmmseOptions:
    max_iters: int = 200
    rel_tol: float = 1e-6
    bisect_tol: float = 1e-10
    mu_growth: float = 2.0

    def __post_init__(self):
        if self.max_iters <= 0 or self.rel_tol <= 0 or self.bisect_tol <= 0:
            raise ValueError("WMMSE options must be positive")
        if self.mu_growth <= 1:
            raise ValueError("mu_growth must exceed 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WmmseResult:
    V: np.ndarray
    objective_trace: np.ndarray  # weighted sum rate (bits) before/after each iteration
    iterations: int
    converged: bool

    @property
    def objective(self) -> float:
        return float(self.objective_trace[-1])


def _kernel(backend):
    name = backend or BACKEND
    try:
        return _KERNELS[name]
    except KeyError:
        raise ValueError(f"unknown WMMSE backend {name!r}; available: {available_backends()}") from None


def wmmse_solve(H, alpha, noise_power, p_m, opts: WmmseOptions | None = None, backend: str | None = None) -> WmmseResult:
    opts = opts or WmmseOptions()
    H = np.asarray(H, dtype=np.complex128)
    if H.ndim != 2:
        raise ValueError(f"H must be N x K, got shape {H.shape}")
    if not np.all(np.isfinite(H)):
        raise ValueError("H has non-finite entries")
    if np.any(np.linalg.norm(H, axis=0) == 0):
        raise ValueError("every channel column must be nonzero")
    alpha = check_weights(alpha, H.shape[1])
    if not noise_power > 0 or not p_m > 0:
        raise ValueError("noise_power and p_m must be positive")
    V, trace, iters, conv = _kernel(backend).solve(
        H, alpha, float(noise_power), float(p_m),
        opts.max_iters, opts.rel_tol, opts.bisect_tol, opts.mu_growth,
    )
    return WmmseResult(V=V, objective_trace=trace, iterations=int(iters), converged=bool(conv))


def weighted_covariance_terms(H, V, alpha, noise_power):
    """Eigenvalues of sum_j w_j |u_j|^2 h_j h_j^H and the matching energies
    c_n = ||(Q^H B)_n||^2 of the WMMSE right-hand side, evaluated at V."""
    H = np.asarray(H, dtype=np.complex128)
    M = H.conj().T @ V
    total = np.sum(np.abs(M) ** 2, axis=1) + noise_power
    d = np.diag(M)
    u = d / total
    w = np.asarray(alpha) / (1.0 - np.abs(d) ** 2 / total)
    A = (H * (w * np.abs(u) ** 2)) @ H.conj().T
    lam, Q = np.linalg.eigh(A)
    c = np.sum(np.abs(Q.conj().T @ (H * (w * u))) ** 2, axis=1)
    return lam, c


def power_curve(lam, c, mu) -> float:
    """Precoder power as a function of the multiplier (null eigenvalues dropped)."""
    lam = np.asarray(lam, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    keep = _wmmse_py._significant(lam)
    return _wmmse_py.power_curve(lam[keep], c[keep], mu)


def bisect_mu(lam, c, p_m, opts: WmmseOptions | None = None, backend: str | None = None) -> float:
    """Smallest-power-feasible multiplier: 0 if the unconstrained solution fits,
    else the mu with |power(mu) - p_m| <= bisect_tol * p_m."""
    opts = opts or WmmseOptions()
    return float(_kernel(backend).bisect_mu(lam, c, float(p_m), opts.bisect_tol, opts.mu_growth))


def _solve_chunk(args):
    H, alpha, noise, p_m, opts, backend = args
    out_V = np.empty_like(H)
    out_obj = np.empty(len(H))
    out_it = np.empty(len(H), dtype=np.int64)
    for i in range(len(H)):
        res = wmmse_solve(H[i], alpha[i], noise[i], p_m[i], opts, backend)
        out_V[i] = res.V
        out_obj[i] = res.objective
        out_it[i] = res.iterations
    return out_V, out_obj, out_it


def wmmse_solve_batch(H, alpha, noise_power, p_m, opts: WmmseOptions | None = None,
                      backend: str | None = None, jobs: int = 1):
    """Solve a stack of instances. Returns (V, objective, iterations).

    Results do not depend on ``jobs``: instances are independent and the
    output order is the input order.
    """
    H = np.asarray(H, dtype=np.complex128)
    b = H.shape[0]
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (b, H.shape[2]))
    noise = np.broadcast_to(np.asarray(noise_power, dtype=np.float64), (b,))
    pm = np.broadcast_to(np.asarray(p_m, dtype=np.float64), (b,))
    opts = opts or WmmseOptions()
    if jobs <= 1 or b < 2:
        return _solve_chunk((H, alpha, noise, pm, opts, backend))
    bounds = np.linspace(0, b, min(jobs, b) + 1).astype(int)
    chunks = [(H[s:e], alpha[s:e], noise[s:e], pm[s:e], opts, backend) for s, e in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_solve_chunk, chunks))
    return (np.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts]),
            np.concatenate([p[2] for p in parts]))


def write_trace_csv(traces, path):
    """Objective traces as CSV rows (instance, iteration, objective); iteration 0 is the MRT start."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "iteration", "objective"])
        for i, tr in enumerate(traces):
            for it, val in enumerate(np.asarray(tr)):
                w.writerow([i, it, repr(float(val))])
