"""Unsupervised training: gradient ascent on the expected weighted sum rate."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from eqprecoder._npz import save_npz
from eqprecoder.channel import Geometry
from eqprecoder.net import NetConfig, NetParams, forward_batch, init_params, loss_and_grad
from eqprecoder.rates import weighted_sum_rate

log = logging.getLogger(__name__)

WEIGHT_LAWS = ("dirichlet", "pf_replay")
LR_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 0.005
    num_samples: int = 12800
    epochs: int = 100
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_sampling: str = "dirichlet"
    lr_schedule: str = "cosine"
    lr_final_fraction: float = 0.05

    def __post_init__(self):
        if min(self.batch_size, self.num_samples, self.epochs) <= 0:
            raise ValueError("batch_size, num_samples and epochs must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.weight_sampling not in WEIGHT_LAWS:
            raise ValueError(f"weight_sampling must be one of {WEIGHT_LAWS}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not 0 <= self.lr_final_fraction <= 1:
            raise ValueError("lr_final_fraction must lie in [0, 1]")

    def learning_rate_at(self, epoch: int) -> float:
        """Step size during 0-based ``epoch``; cosine decays to
        ``lr_final_fraction`` of the initial rate in the last epoch."""
        if self.lr_schedule == "constant" or self.epochs == 1:
            return self.learning_rate
        t = epoch / (self.epochs - 1)
        f = self.lr_final_fraction
        return self.learning_rate * (f + (1 - f) * 0.5 * (1 + np.cos(np.pi * t)))

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good: NetParams):
        super().__init__(msg)
        self.last_good = last_good


# --------------------------------------------------------------------------
# loss and gradient


def _as_batch(H, alpha, noise):
    H = np.asarray(H, dtype=np.complex128)
    alpha = np.asarray(alpha, dtype=np.float64)
    if H.ndim == 2:
        H, alpha = H[None], alpha[None]
    noise = np.broadcast_to(np.asarray(noise, dtype=np.float64), H.shape[:1])
    return H, alpha, noise


def loss(H, alpha, noise, p_m, params: NetParams) -> float:
    """Negative weighted sum rate of the network's precoder (batch mean)."""
    H, alpha, noise = _as_batch(H, alpha, noise)
    V = forward_batch(H, alpha, p_m, params)
    return float(-np.mean(weighted_sum_rate(H, V, alpha, noise)))


def gradient(H, alpha, noise, p_m, params: NetParams) -> np.ndarray:
    H, alpha, noise = _as_batch(H, alpha, noise)
    return loss_and_grad(H, alpha, noise, p_m, params)[1]


@dataclass
class GradReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float


def finite_difference_check(H, alpha, noise, p_m, params: NetParams, step: float = 1e-6) -> GradReport:
    """Compare the analytic gradient with central differences on every
    parameter. The relative error of a component is measured against the
    larger of its two estimates, floored at 1e-6 of the largest numeric
    component so that near-zero entries do not divide by round-off."""
    H, alpha, noise = _as_batch(H, alpha, noise)
    g = gradient(H, alpha, noise, p_m, params)
    num = np.empty_like(g)
    probe = params.copy()
    for i in range(g.size):
        orig = probe.flat[i]
        probe.flat[i] = orig + step
        fp = loss(H, alpha, noise, p_m, probe)
        probe.flat[i] = orig - step
        fm = loss(H, alpha, noise, p_m, probe)
        probe.flat[i] = orig
        num[i] = (fp - fm) / (2.0 * step)
    floor = 1e-6 * max(1.0, float(np.abs(num).max()))
    rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), floor)
    return GradReport(g, num, float(rel.max()))


# --------------------------------------------------------------------------
# weights


def sample_training_weights(rng: np.random.Generator, k: int, mode: str = "dirichlet", *, n: int | None = None,
                            geometry: Geometry = Geometry(), snr_edge_db: float = 5.0, p_m: float = 1.0,
                            t_slots: int = 20, rho: float = 0.9, wmmse_opts=None) -> np.ndarray:
    """UE weights for one training sample.

    ``dirichlet``: K times a symmetric Dirichlet(1) draw (entries average 1).
    ``pf_replay``: the proportional-fairness weights of a random slot of a
    WMMSE-driven episode on fresh channels (needs ``n``).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if mode == "dirichlet":
        d = rng.dirichlet(np.ones(k))
        return k * d
    if mode == "pf_replay":
        from eqprecoder.channel import evolve_episode, sample_channel
        from eqprecoder.pf import run_pf_episode, wmmse_policy

        if n is None:
            raise ValueError("pf_replay needs the antenna count n")
        base = sample_channel(rng, n, k, geometry, snr_edge_db, p_m)
        ep = evolve_episode(rng, base, t_slots, rho, geometry)
        trace = run_pf_episode(ep, wmmse_policy(wmmse_opts))
        slot = int(rng.integers(1, t_slots)) if t_slots > 1 else 0
        return trace.weights[slot].copy()
    raise ValueError(f"unknown weight law {mode!r}; expected one of {WEIGHT_LAWS}")


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def optimizer_step(flat: np.ndarray, grad: np.ndarray, state: OptimizerState, cfg: TrainConfig,
                   lr: float | None = None):
    """In-place parameter update (``lr`` defaults to the configured rate)."""
    state.step += 1
    lr = cfg.learning_rate if lr is None else lr
    if cfg.optimizer == "sgd":
        flat -= lr * grad
        return
    if state.m is None:
        state.m = np.zeros_like(flat)
        state.v = np.zeros_like(flat)
    state.m *= cfg.beta1
    state.m += (1 - cfg.beta1) * grad
    state.v *= cfg.beta2
    state.v += (1 - cfg.beta2) * grad * grad
    mhat = state.m / (1 - cfg.beta1 ** state.step)
    vhat = state.v / (1 - cfg.beta2 ** state.step)
    flat -= lr * mhat / (np.sqrt(vhat) + cfg.eps)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    params: NetParams
    opt: OptimizerState = field(default_factory=OptimizerState)
    epoch: int = 0
    history: list = field(default_factory=list)
    rng_state: dict | None = None


def save_train_state(path, state: TrainState, extra: dict | None = None):
    """Everything needed to continue bit-identically: parameters, optimizer
    moments, epoch counter, history and the shuffling RNG state."""
    meta = {
        "net_config": state.params.config.to_dict(),
        "epoch": state.epoch,
        "step": state.opt.step,
        "history": state.history,
        "rng_state": state.rng_state,
        **(extra or {}),
    }
    empty = np.zeros(0)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        save_npz(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 params=state.params.flat,
                 m=empty if state.opt.m is None else state.opt.m,
                 v=empty if state.opt.v is None else state.opt.v)
    os.replace(tmp, path)


def load_train_state(path) -> tuple[TrainState, dict]:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        flat, m, v = z["params"].copy(), z["m"].copy(), z["v"].copy()
    params = NetParams(NetConfig(**meta["net_config"]), flat)
    opt = OptimizerState(meta["step"], m if m.size else None, v if v.size else None)
    return TrainState(params, opt, meta["epoch"], meta["history"], meta["rng_state"]), meta


def normalized_wsr_of(params: NetParams, ds, ref_wsr) -> float:
    V = forward_batch(ds.H, ds.alpha, ds.power_budget, params)
    return float(np.mean(weighted_sum_rate(ds.H, V, ds.alpha, ds.noise_power) / ref_wsr))


def train(train_set, cfg: TrainConfig, net_cfg: NetConfig | None = None, holdout=None, holdout_ref=None,
          state: TrainState | None = None, stop_after: int | None = None, on_epoch=None):
    """Train on ``train_set`` (a ChannelDataset) with minibatch gradient steps.

    Every epoch appends ``{"epoch", "mean_loss", "normalized_wsr"}`` to the
    history; the held-out metric is NaN when no held-out set is given.
    ``state`` resumes an interrupted run; ``stop_after`` ends after that many
    epochs in this call; ``on_epoch(state)`` runs after each epoch (used for
    checkpointing). Returns the final TrainState.
    """
    if train_set.size == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    if state is None:
        state = TrainState(params=init_params(net_cfg or NetConfig(), rng))
    elif state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    params = state.params
    size, bs = train_set.size, cfg.batch_size
    done_here = 0
    while state.epoch < cfg.epochs:
        if stop_after is not None and done_here >= stop_after:
            break
        order = rng.permutation(size)
        lr = cfg.learning_rate_at(state.epoch)
        losses = []
        for start in range(0, size, bs):
            idx = np.sort(order[start:start + bs])
            last_good = params.copy()
            try:
                f, g = loss_and_grad(train_set.H[idx], train_set.alpha[idx], train_set.noise_power[idx],
                                     train_set.power_budget[idx], params)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {state.epoch + 1}: {exc}", last_good) from exc
            if not np.isfinite(f):
                raise TrainingDiverged(f"epoch {state.epoch + 1}: loss became non-finite", last_good)
            optimizer_step(params.flat, g, state.opt, cfg, lr)
            losses.append(f * len(idx))
        state.epoch += 1
        done_here += 1
        row = {"epoch": state.epoch, "mean_loss": float(np.sum(losses) / size), "normalized_wsr": float("nan")}
        if holdout is not None and holdout_ref is not None:
            row["normalized_wsr"] = normalized_wsr_of(params, holdout, holdout_ref)
        state.history.append(row)
        state.rng_state = rng.bit_generator.state
        log.info("epoch %d loss %.6f normalized_wsr %.4f", row["epoch"], row["mean_loss"], row["normalized_wsr"])
        if on_epoch is not None:
            on_epoch(state)
    return state
