"""Jointly unitary- and permutation-equivariant precoder network.

Every main layer right-multiplies the hidden precoder stack X (N x K per
channel) by K x K mixing matrices. The mixing matrices are produced by a small
edge GNN from the inner products h_i^H x_j and their weighted copies
alpha_i h_i^H x_j, which are invariant to any unitary rotation of the antenna
space. Right-multiplication then keeps the output rotating with the input,
while the edge GNN keeps UE reindexing consistent.

Shapes used throughout (batched): H (B, N, K) complex, alpha (B, K),
X (B, N, K, C) complex, edge tensors (B, K, K, C) real.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from eqprecoder._npz import save_npz

CHECKPOINT_VERSION = 1
ACTIVATION_SCOPES = ("per_channel", "global")
EDGE_NORMS = ("none", "antennas", "rms", "frobenius", "spectral", "diag")


@dataclass(frozen=True)
class NetConfig:
    num_layers: int = 3
    hidden_channels: int = 4
    subnet_layers: int = 2
    subnet_hidden_channels: int = 8
    residual_identity: bool = True
    activation_scope: str = "per_channel"
    leaky_slope: float = 0.1
    init_scale: float = 1.0
    final_init_scale: float = 0.1
    edge_norm: str = "frobenius"

    def __post_init__(self):
        if min(self.num_layers, self.hidden_channels, self.subnet_layers, self.subnet_hidden_channels) < 1:
            raise ValueError("layer and channel counts must be >= 1")
        if self.activation_scope not in ACTIVATION_SCOPES:
            raise ValueError(f"activation_scope must be one of {ACTIVATION_SCOPES}")
        if self.edge_norm not in EDGE_NORMS:
            raise ValueError(f"edge_norm must be one of {EDGE_NORMS}")

    def main_plan(self) -> list[tuple[int, int]]:
        """(in, out) hidden channels of each main layer; the last reduces to 1."""
        c = self.hidden_channels
        return [(c, c)] * (self.num_layers - 1) + [(c, 1)]

    def subnet_plan(self, cin: int, cout: int) -> list[tuple[int, int]]:
        widths = [4 * cin] + [self.subnet_hidden_channels] * (self.subnet_layers - 1) + [2 * cin * cout]
        return list(zip(widths[:-1], widths[1:]))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EdgeGnnLayerParams:
    a: np.ndarray  # self term, (in, out)
    b: np.ndarray  # row aggregate (same source UE, other targets)
    c: np.ndarray  # column aggregate (same target UE, other sources)
    bias: np.ndarray  # (out,)


def _layout(cfg: NetConfig):
    """Offsets of every (a, b, c, bias) block in the flat parameter vector.

    Order: main layer l, then sub-layer q, then a, b, c (row-major in x out)
    and bias.
    """
    out, pos = [], 0
    for cin, cout in cfg.main_plan():
        sub = []
        for i, o in cfg.subnet_plan(cin, cout):
            blocks = {}
            for name, shape in (("a", (i, o)), ("b", (i, o)), ("c", (i, o)), ("bias", (o,))):
                size = int(np.prod(shape))
                blocks[name] = (pos, pos + size, shape)
                pos += size
            sub.append(blocks)
        out.append(sub)
    return out, pos


def param_count(cfg: NetConfig) -> int:
    return _layout(cfg)[1]


@dataclass
class NetParams:
    config: NetConfig
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (param_count(self.config),):
            raise ValueError(f"expected {param_count(self.config)} parameters, got {self.flat.shape}")

    def layers(self) -> list[list[EdgeGnnLayerParams]]:
        """Views (not copies) into ``flat``, per main layer and sub-layer."""
        layout, _ = _layout(self.config)
        res = []
        for sub in layout:
            res.append([
                EdgeGnnLayerParams(**{k: self.flat[s:e].reshape(shape) for k, (s, e, shape) in blk.items()})
                for blk in sub
            ])
        return res

    def copy(self) -> "NetParams":
        return NetParams(self.config, self.flat.copy())


def init_params(cfg: NetConfig, rng: np.random.Generator) -> NetParams:
    flat = np.zeros(param_count(cfg))
    p = NetParams(cfg, flat)
    for sub in p.layers():
        for q, lp in enumerate(sub):
            fan_in = 3 * lp.a.shape[0]
            scale = cfg.init_scale / np.sqrt(fan_in)
            if q == len(sub) - 1:
                scale *= cfg.final_init_scale
            for w in (lp.a, lp.b, lp.c):
                w[...] = rng.normal(0.0, scale, w.shape)
    return p


def zero_params(cfg: NetConfig) -> NetParams:
    return NetParams(cfg, np.zeros(param_count(cfg)))


# --------------------------------------------------------------------------
# building blocks


def condition_channel(H):
    """Rescale each sample to ||H||_F^2 = N K. Returns (scaled H, factor)."""
    n, k = H.shape[-2:]
    c = np.sqrt(n * k) / np.linalg.norm(H, axis=(-2, -1))
    return H * c[..., None, None], c


def edge_features(X, H, alpha, norm: str = "none"):
    """Real edge tensor with planes [Re E1, Im E1, Re E2, Im E2], each C wide.

    E1[i, j] = h_i^H x_j per channel and E2[i, j] = alpha_i E1[i, j]. Accepts a
    single instance (X: N x K x C) or a batch (leading axis). ``norm`` divides
    E1 by N (``antennas``), by its root-mean-square over the K x K grid
    (``rms``), by its Frobenius norm (``frobenius``), by its largest singular
    value (``spectral``) or by the root-mean-square of its diagonal (``diag``),
    per sample and channel. Returns (features,
    E1 before normalization, divisor).
    """
    X = np.asarray(X)
    H = np.asarray(H)
    alpha = np.asarray(alpha, dtype=np.float64)
    if X.shape[:-1] != H.shape or alpha.shape != H.shape[:-2] + H.shape[-1:]:
        raise ValueError(f"shape mismatch: X {X.shape}, H {H.shape}, alpha {alpha.shape}")
    E1 = np.einsum("...nk,...njc->...kjc", H.conj(), X)
    if norm == "rms":
        r = np.sqrt(np.mean(np.abs(E1) ** 2, axis=(-3, -2), keepdims=True))
    elif norm == "frobenius":
        r = np.sqrt(np.sum(np.abs(E1) ** 2, axis=(-3, -2), keepdims=True))
    elif norm == "spectral":
        r = _top_singular(E1)[0]
    elif norm == "diag":
        d = np.diagonal(E1, axis1=-3, axis2=-2)  # (..., C, K)
        r = np.sqrt(np.mean(np.abs(d) ** 2, axis=-1))[..., None, None, :]
    elif norm == "antennas":
        r = np.full((1, 1, 1), float(H.shape[-2]))
    else:
        r = np.ones((1, 1, 1))
    En = E1 / r
    E2 = alpha[..., :, None, None] * En
    return np.concatenate([En.real, En.imag, E2.real, E2.imag], axis=-1), E1, r


def _top_singular(E1):
    """Largest singular value of every K x K channel slice of E1, shaped to
    broadcast against it, with the matching singular vector product u v^H."""
    M = np.moveaxis(E1, -1, -3)  # (..., C, K, K)
    U, sv, Vh = np.linalg.svd(M)
    r = np.moveaxis(sv[..., :1, None], -3, -1)  # (..., 1, 1, C)
    uv = np.moveaxis(U[..., :, :1] @ Vh[..., :1, :], -3, -1)
    return r, uv


def _aggregate(Y):
    """Row and column means that exclude the edge itself (zero when K = 1)."""
    k = Y.shape[-2]
    if k == 1:
        z = np.zeros_like(Y)
        return z, z
    row = (Y.sum(axis=-2, keepdims=True) - Y) / (k - 1)
    col = (Y.sum(axis=-3, keepdims=True) - Y) / (k - 1)
    return row, col


def edge_gnn_layer(Y, p: EdgeGnnLayerParams, activate: bool = True, slope: float = 0.1):
    """One permutation-equivariant layer on a K x K x C edge tensor.

    out[i, j] = a^T y[i, j] + b^T mean_{k != j} y[i, k] + c^T mean_{k != i} y[k, j]
    + bias, followed by a leaky rectifier when ``activate``.
    """
    Z = _edge_linear(Y, p)
    return _leaky(Z, slope) if activate else Z


def _edge_linear(Y, p):
    row, col = _aggregate(Y)
    return Y @ p.a + row @ p.b + col @ p.c + p.bias


def _leaky(Z, slope):
    return np.where(Z > 0, Z, slope * Z)


def _residual(cin, cout):
    # identity mixing for square plans; averaging for the final reduction
    if cin == cout:
        return np.eye(cin)
    return np.full((cin, cout), 1.0 / cin)


def subnet_forward(E, layer_params, cfg: NetConfig, cin: int, cout: int):
    """Mixing tensor G (..., K, K, cin, cout) from the edge tensor E."""
    Y = E
    for q, lp in enumerate(layer_params):
        Y = edge_gnn_layer(Y, lp, activate=q < len(layer_params) - 1, slope=cfg.leaky_slope)
    return _to_mixing(Y, cfg, cin, cout)


def _to_mixing(Y, cfg, cin, cout):
    k = Y.shape[-2]
    half = cin * cout
    G = (Y[..., :half] + 1j * Y[..., half:]).reshape(Y.shape[:-1] + (cin, cout))
    if cfg.residual_identity:
        G = G + np.eye(k)[:, :, None, None] * _residual(cin, cout)
    return G


def activation(X, scope: str = "per_channel"):
    """X / (1 + ||X||^2), with the squared Frobenius norm per channel or over
    all channels jointly."""
    X = np.asarray(X)
    return X * _act_scale(X, scope)[0]


def _act_scale(X, scope):
    if scope == "per_channel":
        n = np.sum(np.abs(X) ** 2, axis=(-3, -2), keepdims=True)
    else:
        n = np.sum(np.abs(X) ** 2, axis=(-3, -2, -1), keepdims=True)
    return 1.0 / (1.0 + n), n


# --------------------------------------------------------------------------
# forward / backward


def forward_batch(H, alpha, p_m, params: NetParams, keep_cache: bool = False):
    """Batched forward pass. Returns V (B, N, K) with total power p_m each."""
    cfg = params.config
    H = np.asarray(H, dtype=np.complex128)
    alpha = np.asarray(alpha, dtype=np.float64)
    pm = np.broadcast_to(np.asarray(p_m, dtype=np.float64), H.shape[:1])
    if H.ndim != 3 or alpha.shape != (H.shape[0], H.shape[2]):
        raise ValueError(f"expected H (B, N, K) and alpha (B, K), got {H.shape} and {alpha.shape}")
    if np.any(alpha < 0) or np.any(alpha.sum(axis=1) <= 0):
        raise ValueError("weights must be non-negative with a positive entry per sample")
    Hn, _ = condition_channel(H)
    # the WSR maximizer ignores the overall weight scale, so the network does too
    alpha = alpha / alpha.mean(axis=1, keepdims=True)
    X = np.repeat(Hn[..., None], cfg.hidden_channels, axis=-1)
    cache = []
    plan = cfg.main_plan()
    for l, ((cin, cout), sub) in enumerate(zip(plan, params.layers())):
        E, E1, r = edge_features(X, Hn, alpha, cfg.edge_norm)
        ys, zs = [E], []
        Y = E
        for q, lp in enumerate(sub):
            Z = _edge_linear(Y, lp)
            zs.append(Z)
            Y = _leaky(Z, cfg.leaky_slope) if q < len(sub) - 1 else Z
            ys.append(Y)
        G = _to_mixing(Y, cfg, cin, cout)
        Xm = np.einsum("bnic,bijcd->bnjd", X, G)
        entry = {"X": X, "ys": ys, "zs": zs, "G": G, "E1": E1, "r": r}
        if l < len(plan) - 1:
            s, nrm = _act_scale(Xm, cfg.activation_scope)
            entry.update(Xm=Xm, s=s, n=nrm)
            X = Xm * s
        else:
            X = Xm
        if keep_cache:
            cache.append(entry)
        if not np.all(np.isfinite(X)):
            raise FloatingPointError(f"non-finite hidden state after main layer {l + 1}")
    Xf = X[..., 0]
    norm = np.linalg.norm(Xf, axis=(1, 2))
    if np.any(norm == 0):
        raise FloatingPointError("network produced an all-zero precoder")
    scale = np.sqrt(pm) / norm
    V = Xf * scale[:, None, None]
    if keep_cache:
        return V, {"Hn": Hn, "alpha": alpha, "layers": cache, "Xf": Xf, "scale": scale, "norm": norm}
    return V


def forward(H, alpha, params: NetParams, p_m: float = 1.0) -> np.ndarray:
    """Precoder for a single instance (N x K)."""
    H = np.asarray(H, dtype=np.complex128)
    return forward_batch(H[None], np.asarray(alpha, dtype=np.float64)[None], p_m, params)[0]


def wsr_and_grad_v(H, V, alpha, noise):
    """Weighted sum rate per sample and d WSR / d V (gradient as dRe + i dIm)."""
    M = np.conj(np.swapaxes(H, -1, -2)) @ V  # M[b, k, i] = h_k^H v_i
    P = np.abs(M) ** 2
    total = P.sum(axis=-1) + noise[:, None]
    sig = np.diagonal(P, axis1=-2, axis2=-1)
    interf = total - sig
    wsr = np.sum(alpha * (np.log2(total) - np.log2(interf)), axis=-1)
    coef = alpha / np.log(2.0)
    gP = (coef / total)[:, :, None] - (coef / interf)[:, :, None] * (1.0 - np.eye(P.shape[-1]))
    gM = 2.0 * gP * M
    return wsr, H @ gM


def backward(cache, gV, params: NetParams) -> np.ndarray:
    """Gradient of sum_b Re<gV_b, V_b> with respect to the flat parameters."""
    cfg = params.config
    grad = NetParams(cfg, np.zeros_like(params.flat))
    glayers = grad.layers()
    players = params.layers()
    Hn, alpha = cache["Hn"], cache["alpha"]
    Xf, scale, norm = cache["Xf"], cache["scale"], cache["norm"]

    # V = Xf * sqrt(p) / ||Xf||
    inner = np.sum((np.conj(gV) * Xf).real, axis=(1, 2))
    gX = (scale[:, None, None] * gV - (scale / norm**2 * inner)[:, None, None] * Xf)[..., None]

    plan = cfg.main_plan()
    for l in range(len(plan) - 1, -1, -1):
        cin, cout = plan[l]
        ent = cache["layers"][l]
        if l < len(plan) - 1:
            # X_out = Xm * s(n), s = 1 / (1 + n)
            Xm, s = ent["Xm"], ent["s"]
            prod = (np.conj(gX) * Xm).real
            if cfg.activation_scope == "per_channel":
                inner = prod.sum(axis=(1, 2), keepdims=True)
            else:
                inner = prod.sum(axis=(1, 2, 3), keepdims=True)
            gX = s * gX - 2.0 * s**2 * inner * Xm
        X, G = ent["X"], ent["G"]
        # Xm = sum_{i,c} X[:, :, i, c] G[:, i, :, c, :]
        gG = np.einsum("bnic,bnjd->bijcd", np.conj(X), gX)
        gX_in = np.einsum("bnjd,bijcd->bnic", gX, np.conj(G))
        half = cin * cout
        gY = np.concatenate(
            [gG.real.reshape(gG.shape[:3] + (half,)), gG.imag.reshape(gG.shape[:3] + (half,))], axis=-1
        )
        sub, gsub = players[l], glayers[l]
        for q in range(len(sub) - 1, -1, -1):
            if q < len(sub) - 1:
                gY = gY * np.where(ent["zs"][q] > 0, 1.0, cfg.leaky_slope)
            Yin = ent["ys"][q]
            row, col = _aggregate(Yin)
            gq, pq = gsub[q], sub[q]
            gq.a[...] = np.einsum("bijc,bijd->cd", Yin, gY)
            gq.b[...] = np.einsum("bijc,bijd->cd", row, gY)
            gq.c[...] = np.einsum("bijc,bijd->cd", col, gY)
            gq.bias[...] = gY.sum(axis=(0, 1, 2))
            grow, gcol = _aggregate(gY @ pq.b.T), _aggregate(gY @ pq.c.T)
            # the exclusive row / column means are self-adjoint
            gY = gY @ pq.a.T + grow[0] + gcol[1]
        # edge planes -> E1 (E2 = alpha_i E1)
        cc = cin
        gE1 = (gY[..., :cc] + 1j * gY[..., cc:2 * cc]) + alpha[:, :, None, None] * (
            gY[..., 2 * cc:3 * cc] + 1j * gY[..., 3 * cc:]
        )
        if cfg.edge_norm in ("rms", "frobenius"):
            # En = E1 / r with r^2 the sum (frobenius) or mean (rms) of |E1|^2 over the grid
            E1, r = ent["E1"], ent["r"]
            m = E1.shape[-2] ** 2 if cfg.edge_norm == "rms" else 1
            inner = np.sum((np.conj(gE1) * E1).real, axis=(1, 2), keepdims=True)
            gE1 = gE1 / r - inner / (r**3 * m) * E1
        elif cfg.edge_norm == "spectral":
            # d sigma_max = Re <u v^H, dE1>
            E1, r = ent["E1"], ent["r"]
            inner = np.sum((np.conj(gE1) * E1).real, axis=(1, 2), keepdims=True)
            gE1 = gE1 / r - inner / r**2 * _top_singular(E1)[1]
        elif cfg.edge_norm == "diag":
            # r^2 is the mean of |E1[i, i]|^2 over i
            E1, r = ent["E1"], ent["r"]
            k = E1.shape[-2]
            inner = np.sum((np.conj(gE1) * E1).real, axis=(1, 2), keepdims=True)
            D = E1 * np.eye(k)[None, :, :, None]
            gE1 = gE1 / r - inner / (r**3 * k) * D
        else:
            gE1 = gE1 / ent["r"]
        # E1 = Hn^H X
        gX = gX_in + np.einsum("bnk,bkjc->bnjc", Hn, gE1)
    return grad.flat


def loss_and_grad(H, alpha, noise, p_m, params: NetParams):
    """Mean negative weighted sum rate over the batch and its exact gradient."""
    H = np.asarray(H, dtype=np.complex128)
    noise = np.broadcast_to(np.asarray(noise, dtype=np.float64), H.shape[:1])
    V, cache = forward_batch(H, alpha, p_m, params, keep_cache=True)
    wsr, gV = wsr_and_grad_v(H, V, np.asarray(alpha, dtype=np.float64), noise)
    b = H.shape[0]
    grad = backward(cache, -gV / b, params)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return float(-wsr.mean()), grad


def column_span_check(H, V) -> float:
    """Relative residual of V's columns outside the column space of H."""
    H = np.asarray(H, dtype=np.complex128)
    V = np.asarray(V, dtype=np.complex128)
    total = np.linalg.norm(V)
    if total == 0:
        return 0.0
    q, r = np.linalg.qr(H)
    rank = int(np.sum(np.abs(np.diag(r)) > 1e-12 * max(np.abs(np.diag(r)).max(), 1e-300)))
    q = q[:, :rank]
    return float(np.linalg.norm(V - q @ (q.conj().T @ V)) / total)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: NetParams, extra: dict | None = None):
    """Write an .npz checkpoint: format version, NetConfig as JSON and the
    flat float64 parameter vector (order documented in ``_layout``)."""
    meta = {"format_version": CHECKPOINT_VERSION, "config": params.config.to_dict(), **(extra or {})}
    with open(path, "wb") as fh:
        save_npz(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 params=params.flat)


def load_checkpoint(path) -> tuple[NetParams, dict]:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        flat = z["params"].copy()
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
    return NetParams(NetConfig(**meta["config"]), flat), meta
