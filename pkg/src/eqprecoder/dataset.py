"""Channel datasets, their on-disk formats, and the cached WMMSE references.

Binary format (``.npz``)
    ``meta``            uint8 bytes of a UTF-8 JSON header (see ``_header``)
    ``H``               float64 (S, N, K, 2); last axis is (real, imag)
    ``noise_power``     float64 (S,)
    ``power_budget``    float64 (S,)
    ``alpha``           float64 (S, K) UE weights
    ``ue_distances_m``  float64 (S, K)
    ``input_scale``     float64 (S,) sqrt(N K) / ||H||_F used by the network

JSON-lines format (``.jsonl``)
    line 1: the JSON header; every further line one sample with keys
    ``index``, ``H`` (flat list re, im, re, im, ... over H in row-major
    N x K order), ``noise_power``, ``power_budget``, ``alpha``,
    ``ue_distances_m``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from eqprecoder._npz import save_npz as write_npz
from eqprecoder.channel import Geometry, sample_channel
from eqprecoder.net import condition_channel
from eqprecoder.rates import weighted_sum_rate
from eqprecoder.wmmse import WmmseOptions, wmmse_solve_batch

log = logging.getLogger(__name__)

FORMAT_NAME = "eqprecoder-channels"
FORMAT_VERSION = 1


@dataclass
class ChannelDataset:
    H: np.ndarray
    noise_power: np.ndarray
    power_budget: np.ndarray
    alpha: np.ndarray
    ue_distances_m: np.ndarray
    seed: int = 0
    geometry: Geometry = Geometry()
    snr_edge_db: float = 5.0
    weight_sampling: str = "dirichlet"

    @property
    def size(self) -> int:
        return self.H.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @property
    def k(self) -> int:
        return self.H.shape[2]

    @property
    def input_scale(self) -> np.ndarray:
        return condition_channel(self.H)[1]

    def subset(self, idx) -> "ChannelDataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        return ChannelDataset(
            self.H[idx], self.noise_power[idx], self.power_budget[idx], self.alpha[idx],
            self.ue_distances_m[idx], self.seed, self.geometry, self.snr_edge_db, self.weight_sampling,
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(_header(self), sort_keys=True).encode())
        for arr in (self.H, self.noise_power, self.power_budget, self.alpha):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _header(ds: ChannelDataset) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n": ds.n,
        "k": ds.k,
        "size": ds.size,
        "seed": ds.seed,
        "geometry": ds.geometry.to_dict(),
        "snr_edge_db": ds.snr_edge_db,
        "weight_sampling": ds.weight_sampling,
    }


def generate_dataset(seed: int, size: int, n: int, k: int, geometry: Geometry = Geometry(),
                     snr_edge_db: float = 5.0, p_m: float = 1.0, weight_sampling: str = "dirichlet",
                     **weight_kwargs) -> ChannelDataset:
    """Fresh UE positions and fading per sample; weights from ``weight_sampling``."""
    from eqprecoder.training import sample_training_weights

    rng = np.random.default_rng(seed)
    H = np.empty((size, n, k), dtype=np.complex128)
    dist = np.empty((size, k))
    alpha = np.empty((size, k))
    noise = np.empty(size)
    for i in range(size):
        ch = sample_channel(rng, n, k, geometry, snr_edge_db, p_m)
        H[i], dist[i], noise[i] = ch.H, ch.ue_distances_m, ch.noise_power
        alpha[i] = sample_training_weights(
            rng, k, weight_sampling, n=n, geometry=geometry, snr_edge_db=snr_edge_db, p_m=p_m, **weight_kwargs
        )
    return ChannelDataset(H, noise, np.full(size, float(p_m)), alpha, dist, seed, geometry,
                          float(snr_edge_db), weight_sampling)


def save_npz(ds: ChannelDataset, path):
    with open(path, "wb") as fh:
        write_npz(
            fh,
            meta=np.frombuffer(json.dumps(_header(ds), sort_keys=True).encode(), dtype=np.uint8),
            H=np.stack([ds.H.real, ds.H.imag], axis=-1),
            noise_power=ds.noise_power,
            power_budget=ds.power_budget,
            alpha=ds.alpha,
            ue_distances_m=ds.ue_distances_m,
            input_scale=ds.input_scale,
        )


def _from_header(meta, H, noise, pm, alpha, dist) -> ChannelDataset:
    if meta.get("format") != FORMAT_NAME or meta.get("version") != FORMAT_VERSION:
        raise ValueError(f"not a {FORMAT_NAME} v{FORMAT_VERSION} file")
    return ChannelDataset(H, noise, pm, alpha, dist, meta["seed"], Geometry(**meta["geometry"]),
                          meta["snr_edge_db"], meta.get("weight_sampling", "dirichlet"))


def load_npz(path) -> ChannelDataset:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        Hri = z["H"]
        return _from_header(meta, Hri[..., 0] + 1j * Hri[..., 1], z["noise_power"], z["power_budget"],
                            z["alpha"], z["ue_distances_m"])


def save_jsonl(ds: ChannelDataset, path):
    with open(path, "w") as fh:
        fh.write(json.dumps(_header(ds), sort_keys=True) + "\n")
        for i in range(ds.size):
            flat = np.stack([ds.H[i].real, ds.H[i].imag], axis=-1).ravel()
            rec = {
                "index": i,
                "H": flat.tolist(),
                "noise_power": float(ds.noise_power[i]),
                "power_budget": float(ds.power_budget[i]),
                "alpha": ds.alpha[i].tolist(),
                "ue_distances_m": ds.ue_distances_m[i].tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path) -> ChannelDataset:
    with open(path) as fh:
        meta = json.loads(fh.readline())
        recs = [json.loads(line) for line in fh if line.strip()]
    n, k = meta["n"], meta["k"]
    if len(recs) != meta["size"]:
        raise ValueError(f"header declares {meta['size']} samples, file has {len(recs)}")
    Hri = np.array([r["H"] for r in recs], dtype=np.float64).reshape(len(recs), n, k, 2)
    return _from_header(
        meta, Hri[..., 0] + 1j * Hri[..., 1],
        np.array([r["noise_power"] for r in recs]), np.array([r["power_budget"] for r in recs]),
        np.array([r["alpha"] for r in recs]).reshape(len(recs), k),
        np.array([r["ue_distances_m"] for r in recs]).reshape(len(recs), k),
    )


def load_dataset(path) -> ChannelDataset:
    return load_jsonl(path) if str(path).endswith(".jsonl") else load_npz(path)


# --------------------------------------------------------------------------
# WMMSE references


@dataclass
class References:
    V: np.ndarray
    wsr: np.ndarray
    iterations: np.ndarray
    computed_chunks: int = 0
    cached_chunks: int = 0


def cache_key(ds: ChannelDataset, opts: WmmseOptions) -> str:
    h = hashlib.sha256(ds.fingerprint().encode())
    h.update(json.dumps(opts.to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:20]


def wmmse_references(ds: ChannelDataset, opts: WmmseOptions | None = None, cache_dir=None,
                     chunk_size: int = 256, jobs: int = 1) -> References:
    """WMMSE solutions for every sample, cached per chunk under ``cache_dir``.

    Chunks already on disk are reused, so an interrupted run resumes where it
    stopped. The reference objective is recomputed from the stored precoder
    with the same rate code the policies are scored with.
    """
    opts = opts or WmmseOptions()
    folder = None
    if cache_dir is not None:
        folder = os.path.join(cache_dir, cache_key(ds, opts))
        os.makedirs(folder, exist_ok=True)
    Vs, its = [], []
    computed = cached = 0
    for ci, start in enumerate(range(0, ds.size, chunk_size)):
        stop = min(start + chunk_size, ds.size)
        path = os.path.join(folder, f"chunk_{ci:05d}.npz") if folder else None
        if path and os.path.exists(path):
            with np.load(path) as z:
                Vs.append(z["V"])
                its.append(z["iterations"])
            cached += 1
            log.info("wmmse chunk %d [%d:%d]: cache hit", ci, start, stop)
            continue
        t0 = time.perf_counter()
        V, _, it = wmmse_solve_batch(ds.H[start:stop], ds.alpha[start:stop], ds.noise_power[start:stop],
                                     ds.power_budget[start:stop], opts, jobs=jobs)
        computed += 1
        log.info("wmmse chunk %d [%d:%d]: computed in %.3fs", ci, start, stop, time.perf_counter() - t0)
        if path:
            tmp = path + ".tmp"
            with open(tmp, "wb") as fh:
                write_npz(fh, V=V, iterations=it)
            os.replace(tmp, path)
        Vs.append(V)
        its.append(it)
    V = np.concatenate(Vs) if Vs else np.empty((0, ds.n, ds.k), dtype=np.complex128)
    wsr = weighted_sum_rate(ds.H, V, ds.alpha, ds.noise_power)
    return References(V, wsr, np.concatenate(its) if its else np.empty(0, dtype=np.int64), computed, cached)
