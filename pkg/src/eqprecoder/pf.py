"""Proportional-fairness episodes, normalized-WSR scoring and sweeps."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from eqprecoder.net import NetParams, forward_batch
from eqprecoder.rates import mrt, weighted_sum_rate, zf, sinr
from eqprecoder.wmmse import WmmseOptions, wmmse_solve

log = logging.getLogger(__name__)

SWEEP_AXES = ("num_ues", "num_antennas", "snr", "train_samples")


# --------------------------------------------------------------------------
# policies: callables (H, alpha, noise, p_m) -> V with a ``name`` tag


class Policy:
    name = "policy"

    def __call__(self, H, alpha, noise, p_m):
        raise NotImplementedError

    def batch(self, H, alpha, noise, p_m):
        noise = np.broadcast_to(noise, H.shape[:1])
        p_m = np.broadcast_to(p_m, H.shape[:1])
        return np.stack([self(H[i], alpha[i], noise[i], p_m[i]) for i in range(H.shape[0])])


class WmmsePolicy(Policy):
    name = "wmmse"

    def __init__(self, opts: WmmseOptions | None = None):
        self.opts = opts or WmmseOptions()

    def __call__(self, H, alpha, noise, p_m):
        return wmmse_solve(H, alpha, noise, p_m, self.opts).V


class MrtPolicy(Policy):
    name = "mrt"

    def __call__(self, H, alpha, noise, p_m):
        return mrt(H, p_m)


class ZfPolicy(Policy):
    name = "zf"

    def __call__(self, H, alpha, noise, p_m):
        return zf(H, p_m)


class NetworkPolicy(Policy):
    name = "network"

    def __init__(self, params: NetParams):
        self.params = params

    def __call__(self, H, alpha, noise, p_m):
        return forward_batch(np.asarray(H)[None], np.asarray(alpha, dtype=float)[None], p_m, self.params)[0]

    def batch(self, H, alpha, noise, p_m):
        return forward_batch(H, alpha, p_m, self.params)


class SumRatePolicy(Policy):
    """Wraps another policy and feeds it all-ones weights (plain sum rate)."""

    def __init__(self, inner: Policy):
        self.inner = inner
        self.name = f"{inner.name}_srm"

    def __call__(self, H, alpha, noise, p_m):
        return self.inner(H, np.ones(np.shape(alpha)), noise, p_m)

    def batch(self, H, alpha, noise, p_m):
        return self.inner.batch(H, np.ones(np.shape(alpha)), noise, p_m)


def wmmse_policy(opts=None):
    return WmmsePolicy(opts)


def make_policy(name: str, params: NetParams | None = None, wmmse_opts=None) -> Policy:
    """Policy by name; a ``_srm`` suffix wraps it in :class:`SumRatePolicy`."""
    if name.endswith("_srm"):
        return SumRatePolicy(make_policy(name[:-4], params, wmmse_opts))
    if name == "wmmse":
        return WmmsePolicy(wmmse_opts)
    if name == "mrt":
        return MrtPolicy()
    if name == "zf":
        return ZfPolicy()
    if name == "network":
        if params is None:
            raise ValueError("network policy needs parameters")
        return NetworkPolicy(params)
    raise ValueError(f"unknown policy {name!r}")


# --------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeTrace:
    weights: np.ndarray  # (T, K) weights used in each slot
    rates: np.ndarray  # (T, K) achieved rates, bits per channel use
    source: str
    capped: list = field(default_factory=list)  # (slot, ue) pairs hitting the weight cap

    @property
    def average_rate(self) -> np.ndarray:
        return self.rates.mean(axis=0)


def pf_weights(past_rates: np.ndarray, weight_cap: float = 1e6):
    """Inverse of each UE's mean rate over the given past slots, capped.

    Returns (weights, mask of capped UEs).
    """
    avg = np.mean(past_rates, axis=0)
    with np.errstate(divide="ignore"):
        w = np.where(avg > 0, 1.0 / np.where(avg > 0, avg, 1.0), np.inf)
    capped = w > weight_cap
    return np.minimum(w, weight_cap), capped


def run_pf_episode(channels, policy: Policy, init_weights=None, update_weights: bool = True,
                   weight_cap: float = 1e6) -> EpisodeTrace:
    """Drive ``policy`` through an episode; slot t > 0 uses the inverse of each
    UE's average rate over slots 0..t-1 when ``update_weights``."""
    T, _, k = channels.H.shape
    alpha0 = np.ones(k) if init_weights is None else np.asarray(init_weights, dtype=np.float64)
    weights = np.empty((T, k))
    rates = np.empty((T, k))
    capped = []
    for t in range(T):
        if t == 0 or not update_weights:
            alpha = alpha0
        else:
            alpha, cap = pf_weights(rates[:t], weight_cap)
            for ue in np.flatnonzero(cap):
                log.warning("slot %d: UE %d has zero average rate; weight capped at %g", t, ue, weight_cap)
                capped.append((t, int(ue)))
        weights[t] = alpha
        V = policy(channels.H[t], alpha, channels.noise_power, channels.power_budget)
        rates[t] = np.log2(1.0 + sinr(channels.H[t], V, channels.noise_power))
    return EpisodeTrace(weights, rates, getattr(policy, "name", "policy"), capped)


def run_pf_episodes(seed: int, episodes: int, n: int, k: int, policies: dict, geometry=None,
                    snr_edge_db: float = 5.0, p_m: float = 1.0, slots: int = 20, rho: float = 0.9,
                    weight_cap: float = 1e6) -> dict:
    """Run every policy on the same sequence of channel episodes.

    Returns ``{name: [EpisodeTrace, ...]}``; episode e uses identical
    channels for all policies (paired comparison).
    """
    from eqprecoder.channel import Geometry, evolve_episode, sample_channel

    geometry = geometry or Geometry()
    rng = np.random.default_rng(seed)
    out = {name: [] for name in policies}
    for _ in range(episodes):
        base = sample_channel(rng, n, k, geometry, snr_edge_db, p_m)
        ep = evolve_episode(rng, base, slots, rho, geometry)
        for name, pol in policies.items():
            out[name].append(run_pf_episode(ep, pol, weight_cap=weight_cap))
    return out


def write_traces_csv(traces, path):
    """Long-format per-slot traces: episode, slot, ue, weight, rate."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "slot", "ue", "weight", "rate"])
        for e, tr in enumerate(traces):
            T, K = tr.rates.shape
            for t in range(T):
                for u in range(K):
                    w.writerow([e, t, u, repr(float(tr.weights[t, u])), repr(float(tr.rates[t, u]))])


def rate_cdf(traces) -> np.ndarray:
    """Empirical CDF of per-UE average rates pooled over all episodes.

    Returns an (M, 2) array of (rate, cumulative probability).
    """
    if not traces:
        raise ValueError("need at least one trace")
    rates = np.sort(np.concatenate([tr.average_rate for tr in traces]))
    levels = np.arange(1, rates.size + 1) / rates.size
    return np.column_stack([rates, levels])


def cdf_percentile(cdf: np.ndarray, q: float) -> float:
    return float(np.percentile(cdf[:, 0], q))


def write_cdf_csv(cdf: np.ndarray, path, pooled_note: str = "pooled over UEs and episodes"):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {pooled_note}\n")
        w = csv.writer(fh)
        w.writerow(["rate", "cdf"])
        for r, p in cdf:
            w.writerow([repr(float(r)), repr(float(p))])


# --------------------------------------------------------------------------
# normalized WSR and sweeps


def policy_wsr(policy: Policy, ds) -> np.ndarray:
    V = policy.batch(ds.H, ds.alpha, ds.noise_power, ds.power_budget)
    return weighted_sum_rate(ds.H, V, ds.alpha, ds.noise_power)


def normalized_wsr(policy: Policy, ds, references) -> float:
    """Mean over samples of WSR(policy) / WSR(WMMSE reference)."""
    if references is None:
        raise ValueError("WMMSE references missing for this test set; compute them first")
    ref = getattr(references, "wsr", references)
    ref = np.asarray(ref)
    if ref.shape != (ds.size,):
        raise ValueError(f"reference count {ref.shape} does not match test set size {ds.size}")
    return float(np.mean(policy_wsr(policy, ds) / ref))


@dataclass
class SweepResult:
    axis: str
    points: list  # (value, normalized_wsr_mean, normalized_wsr_ci)
    baselines: dict = field(default_factory=dict)  # name -> list of (value, mean) or None when skipped
    notes: list = field(default_factory=list)

    def write_csv(self, path):
        names = sorted(self.baselines)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.axis, "normalized_wsr_mean", "normalized_wsr_ci95"] + [f"{n}_mean" for n in names])
            for i, (value, mean, ci) in enumerate(self.points):
                extra = []
                for n in names:
                    b = self.baselines[n][i]
                    extra.append("" if b is None else repr(b))
                w.writerow([value, repr(mean), repr(ci)] + extra)


def _ratio_stats(ratios):
    ratios = np.asarray(ratios)
    ci = 1.96 * ratios.std(ddof=1) / np.sqrt(ratios.size) if ratios.size > 1 else 0.0
    return float(ratios.mean()), float(ci)


def generalization_sweep(params: NetParams, axis: str, values, make_test_set, references_for,
                         baselines=("mrt", "zf")) -> SweepResult:
    """Evaluate one fixed checkpoint across ``values`` of ``axis``.

    ``make_test_set(axis, value)`` returns a ChannelDataset and
    ``references_for(ds)`` its WMMSE references. The same parameter vector
    is used at every point.
    """
    if axis not in SWEEP_AXES or axis == "train_samples":
        raise ValueError(f"axis {axis!r} cannot be swept with a fixed checkpoint")
    net = NetworkPolicy(params)
    res = SweepResult(axis, [], {b: [] for b in baselines})
    for value in values:
        ds = make_test_set(axis, value)
        ref = references_for(ds).wsr
        res.points.append((value,) + _ratio_stats(policy_wsr(net, ds) / ref))
        for b in baselines:
            if b == "zf" and ds.k > ds.n:
                res.baselines[b].append(None)
                res.notes.append(f"{axis}={value}: zf skipped (K={ds.k} > N={ds.n})")
                continue
            res.baselines[b].append(float(np.mean(policy_wsr(make_policy(b), ds) / ref)))
    return res
