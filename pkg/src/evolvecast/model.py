"""Convolution-attention spatio-temporal forecaster.

Layout: ``stacks`` stacks of ``blocks`` blocks.  Each block runs a Chebyshev
interpolation graph convolution, multi-head global spatial attention, a
dilated causal temporal convolution and temporal attention with an input
residual, then emits a forecast and a backcast.  Blocks inside a stack are
chained by subtracting backcasts; stack forecasts are summed per stack and
averaged across stacks.

All signal tensors carry a leading batch axis: ``[batch, nodes, features, time]``.
No parameter depends on the node count, so one model runs on any graph.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ShapeError
from .graph import RescaledLaplacian


@dataclass(frozen=True)
class CastConfig:
    """Model hyperparameters.

    ``spatial_channels`` is F1, ``attention_channels`` F2 (split across
    ``heads``), ``temporal_filters`` F3 (size of the temporal filter bank) and
    ``block_channels`` F4, which must equal ``in_features`` for the block
    residual.  ``dilations`` defaults to ``1, 2, 4, ...`` per block.
    """

    stacks: int = 3
    blocks: int = 3
    heads: int = 3
    cheb_order: int = 3
    in_features: int = 1
    spatial_channels: int = 64
    attention_channels: int = 48
    temporal_filters: int = 64
    block_channels: int | None = None
    out_features: int = 1
    kernel_taps: int = 2
    history: int = 12
    horizon: int = 12
    dilations: tuple | None = None

    def __post_init__(self):
        if self.block_channels is None:
            object.__setattr__(self, "block_channels", self.in_features)
        if self.dilations is None:
            object.__setattr__(self, "dilations", tuple(2**l for l in range(self.blocks)))
        else:
            object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        self.validate()

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "cheb_order":
                if v < 0:
                    raise ConfigError("cheb_order must be >= 0")
            elif f.name == "dilations":
                if len(v) != self.blocks or any(d < 1 for d in v):
                    raise ConfigError(f"need {self.blocks} dilations >= 1, got {v}")
            elif v < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {v}")
        if self.block_channels != self.in_features:
            raise ConfigError(
                f"block_channels ({self.block_channels}) must equal in_features "
                f"({self.in_features}) for the block residual"
            )
        if self.attention_channels % self.heads:
            raise ConfigError(
                f"attention_channels ({self.attention_channels}) must be divisible by heads ({self.heads})"
            )

    @property
    def head_channels(self) -> int:
        return self.attention_channels // self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CastConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("dilations") is not None:
            d["dilations"] = tuple(d["dilations"])
        return cls(**d)


def chebyshev(order: int, x):
    """Chebyshev polynomial of the first kind via T_o = 2x T_{o-1} - T_{o-2}."""
    x = np.asarray(x, dtype=float)
    prev, cur = np.ones_like(x), x
    if order == 0:
        return prev
    for _ in range(order - 1):
        prev, cur = cur, 2.0 * x * cur - prev
    return cur


def chebyshev_nodes(order: int) -> np.ndarray:
    q = np.arange(order + 1)
    return np.cos(np.pi * (q + 0.5) / (order + 1))


def interpolation_coefficients(order: int) -> np.ndarray:
    """``C[o, q] = 2/(O+1) * T_o(x_q)`` mapping node-value weights to basis weights."""
    xq = chebyshev_nodes(order)
    return np.stack([chebyshev(o, xq) for o in range(order + 1)]) * (2.0 / (order + 1))


def _block_shapes(cfg: CastConfig) -> dict:
    G = cfg.head_channels
    return {
        "spatial_conv.gamma": ((cfg.cheb_order + 1, cfg.in_features, cfg.spatial_channels), cfg.in_features),
        "spatial_attn.weight": ((cfg.heads, cfg.spatial_channels, G), cfg.spatial_channels),
        "spatial_attn.a_key": ((cfg.heads, G), G),
        "spatial_attn.a_query": ((cfg.heads, G), G),
        "temporal_conv.weight": (
            (cfg.kernel_taps, cfg.attention_channels, cfg.temporal_filters),
            cfg.kernel_taps * cfg.attention_channels,
        ),
        "temporal_attn.w_key": ((cfg.temporal_filters, cfg.block_channels), cfg.temporal_filters),
        "temporal_attn.w_mid": ((cfg.block_channels,), cfg.block_channels),
        "temporal_attn.w_query": ((cfg.temporal_filters,), cfg.temporal_filters),
        "temporal_attn.w_out": ((cfg.history, cfg.history), cfg.history),
        "temporal_attn.bias": ((cfg.history, cfg.history), None),
        "temporal_attn.value": ((cfg.temporal_filters, cfg.block_channels), cfg.temporal_filters),
        "forecast.weight": ((cfg.block_channels, cfg.out_features), cfg.block_channels),
        "forecast.time": ((cfg.history, cfg.horizon), cfg.history),
        "forecast.bias": ((cfg.out_features,), None),
        "backcast.weight": ((cfg.block_channels, cfg.in_features), cfg.block_channels),
        "backcast.bias": ((cfg.in_features,), None),
    }


def _laplacian_tensor(laplacian) -> Tensor:
    if isinstance(laplacian, RescaledLaplacian):
        return Tensor(laplacian.matrix)
    return ad.as_tensor(laplacian)


# block components

def chebnet2_conv(X: Tensor, L_hat, gamma: Tensor, order: int) -> Tensor:
    """Spectral convolution with filter values learned at Chebyshev nodes.

    ``gamma`` is ``[O+1, F_in, F1]``; output ``[b, N, F1, P]``.
    """
    L = _laplacian_tensor(L_hat)
    if gamma.shape[0] != order + 1 or gamma.shape[1] != X.shape[2]:
        raise ShapeError(f"gamma {gamma.shape} does not fit order {order} and input {X.shape}")
    if L.shape != (X.shape[1], X.shape[1]):
        raise ShapeError(f"laplacian {L.shape} does not match {X.shape[1]} nodes")
    weights = ad.einsum("oq,qfg->ofg", Tensor(interpolation_coefficients(order)), gamma)
    basis = [X]
    if order >= 1:
        basis.append(ad.einsum("ij,bjfp->bifp", L, X))
    for _ in range(2, order + 1):
        basis.append(ad.scale(ad.einsum("ij,bjfp->bifp", L, basis[-1]), 2.0) - basis[-2])
    out = None
    for o, Z in enumerate(basis):
        term = ad.einsum("bnfp,fg->bngp", Z, weights[o])
        out = term if out is None else out + term
    return out


def spatial_attention(H1: Tensor, weight: Tensor, a_key: Tensor, a_query: Tensor, trace: dict | None = None) -> Tensor:
    """Multi-head global attention over nodes; scores contract the time axis."""
    b, n, _, p = H1.shape
    heads, _, g = weight.shape
    Wh = ad.einsum("bnfp,ufg->bungp", H1, weight)
    key = ad.einsum("bungp,ug->bunp", Wh, a_key)
    query = ad.einsum("bungp,ug->bunp", Wh, a_query)
    scores = ad.einsum("buip,bujp->buij", key, query)
    attn = ad.softmax(scores, axis=-1)
    if trace is not None:
        trace.setdefault("spatial", []).append(attn.data)
    out = ad.relu(ad.einsum("buij,bujgp->biugp", attn, Wh))
    return ad.reshape(out, (b, n, heads * g, p))


def temporal_attention(
    H3: Tensor,
    X: Tensor,
    w_key: Tensor,
    w_mid: Tensor,
    w_query: Tensor,
    w_out: Tensor,
    bias: Tensor,
    value: Tensor,
    trace: dict | None = None,
    override=None,
) -> Tensor:
    """Time-by-time attention followed by the block input residual.

    Scores are ``w_out @ sigmoid(k q^T / N + bias)`` with ``k`` and ``q`` the
    per-node key/query time profiles, averaged over nodes; rows are
    softmax-normalized.  ``override`` replaces the normalized matrix (tests).
    """
    n = H3.shape[1]
    if X.shape[2] != value.shape[1]:
        raise ShapeError(f"residual input {X.shape} does not match block channels {value.shape[1]}")
    k = ad.einsum("bnfp,fg,g->bnp", H3, w_key, w_mid)
    q = ad.einsum("bnfp,f->bnp", H3, w_query)
    scores = ad.scale(ad.einsum("bnp,bnq->bpq", k, q), 1.0 / n)
    E = ad.einsum("pr,brq->bpq", w_out, ad.sigmoid(scores + bias))
    attn = ad.softmax(E, axis=-1) if override is None else ad.as_tensor(override)
    if trace is not None:
        trace.setdefault("temporal", []).append(attn.data)
    V = ad.einsum("bnfp,fg->bngp", H3, value)
    if attn.ndim == 3:
        H4 = ad.einsum("bngp,bpq->bngq", V, attn)
    else:
        H4 = ad.einsum("bngp,pq->bngq", V, attn)
    return H4 + X


class CastModel:
    def __init__(self, config: CastConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        for m in range(config.stacks):
            for l in range(config.blocks):
                for key, (shape, fan_in) in _block_shapes(config).items():
                    name = f"stack{m}.block{l}.{key}"
                    if fan_in is None:
                        data = np.zeros(shape)
                    else:
                        bound = math.sqrt(1.0 / fan_in)
                        data = rng.uniform(-bound, bound, size=shape)
                    self.params[name] = Parameter(data, name)

    # parameter plumbing
    def named_parameters(self) -> dict[str, Parameter]:
        return self.params

    def block_params(self, m: int, l: int) -> dict[str, Parameter]:
        prefix = f"stack{m}.block{l}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict):
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ShapeError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k].data = v.copy()

    def copy(self) -> "CastModel":
        clone = CastModel.__new__(CastModel)
        clone.config = self.config
        clone.params = {k: Parameter(v.data.copy(), k) for k, v in self.params.items()}
        return clone

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # forward
    def block_forward(self, X: Tensor, laplacian, m: int, l: int, trace=None, temporal_override=None):
        cfg = self.config
        p = self.block_params(m, l)
        H1 = chebnet2_conv(X, laplacian, p["spatial_conv.gamma"], cfg.cheb_order)
        H2 = spatial_attention(
            H1, p["spatial_attn.weight"], p["spatial_attn.a_key"], p["spatial_attn.a_query"], trace
        )
        H3 = ad.conv1d_causal(H2, p["temporal_conv.weight"], cfg.dilations[l])
        H4 = temporal_attention(
            H3,
            X,
            p["temporal_attn.w_key"],
            p["temporal_attn.w_mid"],
            p["temporal_attn.w_query"],
            p["temporal_attn.w_out"],
            p["temporal_attn.bias"],
            p["temporal_attn.value"],
            trace,
            temporal_override,
        )
        Yf = ad.einsum("bnfp,fk->bnkp", H4, p["forecast.weight"])
        Y = ad.einsum("bnkp,ph->bnkh", Yf, p["forecast.time"])
        Y = Y + ad.reshape(p["forecast.bias"], (cfg.out_features, 1))
        V = ad.einsum("bnfp,fk->bnkp", H4, p["backcast.weight"])
        V = V + ad.reshape(p["backcast.bias"], (cfg.in_features, 1))
        return Y, V, X - V

    def stack_forward(self, X: Tensor, laplacian, m: int, trace=None):
        forecast = None
        for l in range(self.config.blocks):
            Y, _, X = self.block_forward(X, laplacian, m, l, trace)
            forecast = Y if forecast is None else forecast + Y
        return forecast, X

    def forward(self, X, laplacian, trace=None) -> Tensor:
        X = ad.as_tensor(X)
        squeeze = X.ndim == 3
        if squeeze:
            X = ad.reshape(X, (1,) + X.shape)
        cfg = self.config
        if X.ndim != 4 or X.shape[2] != cfg.in_features or X.shape[3] != cfg.history:
            raise ShapeError(
                f"expected input [batch, N, {cfg.in_features}, {cfg.history}], got {X.shape}"
            )
        total = None
        for m in range(cfg.stacks):
            Ym, X = self.stack_forward(X, laplacian, m, trace)
            total = Ym if total is None else total + Ym
        out = ad.scale(total, 1.0 / cfg.stacks)
        if squeeze:
            out = ad.reshape(out, out.shape[1:])
        return out

    __call__ = forward

    def predict(self, X, laplacian) -> np.ndarray:
        with ad.no_grad():
            return self.forward(X, laplacian).data


def final_backcast_names(config: CastConfig) -> set[str]:
    """Parameters of the last block's backcast head; its residual output is
    never consumed, so their gradients are identically zero."""
    prefix = f"stack{config.stacks - 1}.block{config.blocks - 1}."
    return {prefix + "backcast.weight", prefix + "backcast.bias"}
