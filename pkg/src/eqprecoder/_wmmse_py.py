"""Pure NumPy WMMSE kernel. Reference implementation and fallback for the
compiled ``_wmmse_ext`` module; both follow the same update order."""
import numpy as np

# eigenvalues of the weighted covariance below this fraction of the largest
# one are treated as exact zeros (pseudo-inverse on the null space)
NULL_EIG_RTOL = 1e-12
MAX_GROWTH_STEPS = 2000
MAX_BISECT_STEPS = 400


class BisectionError(RuntimeError):
    """The Lagrange-multiplier search could not bracket or keep monotonicity."""


def power_curve(lam, c, mu):
    """Total precoder power sum_n c_n / (lam_n + mu)^2 at multiplier ``mu``."""
    return float(np.sum(c / (lam + mu) ** 2))


def _significant(lam):
    top = lam.max() if lam.size else 0.0
    if top <= 0.0:
        return np.zeros(lam.shape, dtype=bool)
    return lam > NULL_EIG_RTOL * top


def bisect_mu(lam, c, p_m, bisect_tol=1e-10, mu_growth=2.0):
    lam = np.asarray(lam, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    keep = _significant(lam)
    lam, c = lam[keep], c[keep]
    if lam.size == 0:
        return 0.0
    p_lo = power_curve(lam, c, 0.0)
    if p_lo <= p_m:
        return 0.0

    if not c.sum() > 0:
        raise BisectionError(f"power curve has non-positive total energy {c.sum():.6e}; cannot bracket")
    lo = 0.0
    scale = np.sqrt(c.sum() / p_m)
    hi = max(scale - lam.max(), 1e-3 * scale)
    p_hi = power_curve(lam, c, hi)
    steps = 0
    while p_hi > p_m:
        if p_hi > p_lo or not np.isfinite(p_hi):
            raise BisectionError(
                f"power curve not decreasing while bracketing: power({lo:.6e})={p_lo:.6e}, "
                f"power({hi:.6e})={p_hi:.6e}, target={p_m:.6e}"
            )
        lo, p_lo = hi, p_hi
        hi *= mu_growth
        p_hi = power_curve(lam, c, hi)
        steps += 1
        if steps > MAX_GROWTH_STEPS:
            raise BisectionError(
                f"failed to bracket the power multiplier after {steps} growth steps: "
                f"mu={hi:.6e}, power={p_hi:.6e}, target={p_m:.6e}"
            )
    if abs(p_hi - p_m) <= bisect_tol * p_m:
        return hi

    for _ in range(MAX_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        p = power_curve(lam, c, mid)
        if not (p_hi <= p <= p_lo):
            raise BisectionError(
                f"non-monotone power evaluation: power({lo:.17e})={p_lo:.17e}, "
                f"power({mid:.17e})={p:.17e}, power({hi:.17e})={p_hi:.17e}"
            )
        if abs(p - p_m) <= bisect_tol * p_m:
            return mid
        if p > p_m:
            lo, p_lo = mid, p
        else:
            hi, p_hi = mid, p
        if hi - lo <= 4.0 * np.finfo(float).eps * hi:
            break
    return hi


def _wsr_from_gains(M, alpha, noise):
    gains = np.abs(M) ** 2
    signal = np.diag(gains)
    s = signal / (gains.sum(axis=1) - signal + noise)
    return float(np.dot(alpha, np.log2(1.0 + s)))


def solve(H, alpha, noise, p_m, max_iters, rel_tol, bisect_tol, mu_growth):
    """Run WMMSE from the MRT point. Returns (V, trace, iterations, converged)."""
    n, k = H.shape
    V = H / np.linalg.norm(H, axis=0) * np.sqrt(p_m / k)
    Hh = H.conj().T
    M = Hh @ V
    obj = _wsr_from_gains(M, alpha, noise)
    trace = [obj]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        gains = np.abs(M) ** 2
        total = gains.sum(axis=1) + noise
        diag = np.diag(M)
        u = diag / total
        e = 1.0 - np.abs(diag) ** 2 / total
        w = alpha / e
        coef = w * np.abs(u) ** 2
        A = (H * coef) @ Hh
        B = H * (w * u)
        lam, Q = np.linalg.eigh(A)
        T = Q.conj().T @ B
        c = np.sum(np.abs(T) ** 2, axis=1)
        mu = bisect_mu(lam, c, p_m, bisect_tol, mu_growth)
        keep = _significant(lam)
        V = Q[:, keep] @ (T[keep] / (lam[keep] + mu)[:, None])
        M = Hh @ V
        new = _wsr_from_gains(M, alpha, noise)
        trace.append(new)
        if abs(new - obj) <= rel_tol * abs(obj):
            converged = True
            break
        obj = new
    return V, np.asarray(trace), it, converged
