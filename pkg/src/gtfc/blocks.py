"""Feature recalibration blocks: SE baseline, c-GTFC, and tf-GTFC.

A block takes a feature map of shape (C, F, T) (or a batch (N, C, F, T)),
computes a global summary of the map, and rescales the map multiplicatively.
Three kinds are implemented:

  se      squeeze-and-excitation: global average pool, two-layer MLP,
          sigmoid channel weights.
  c_gtfc  attention-weighted lp pooling over the time-frequency grid,
          sqrt(C)-scale channel normalization, and a per-channel
          1 + tanh(gamma * g + beta) gate that is the identity at init.
  tf_gtfc group-wise context vectors scored against every time-frequency
          location, standardized over the grid, then scaled and shifted
          before a sigmoid gate.

All forward passes are built from autodiff ops so gradients flow to both
the map and the block parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import DomainError, ShapeMismatch, Tensor

# Keeps std gradients finite when scores are exactly constant over the
# grid; shifts sigma by less than 1e-12 for any realistic score spread.
_VAR_GUARD = 1e-24


class GroupMismatch(ValueError):
    """Channel count is not divisible by the group count."""


class UnknownOperator(ValueError):
    """Gate operator name is not one of the supported set."""


GATE_OPS = ("sigmoid", "one_plus_elu", "one_plus_tanh")
BLOCK_KINDS = ("none", "se", "c_gtfc", "tf_gtfc")


@dataclass
class GtfcConfig:
    """Hyperparameters shared by c-GTFC and tf-GTFC blocks.

    ``attn_hidden=None`` resolves to max(C // 4, 4) at each insertion
    site. ``per_group_we=True`` gives every group its own W_e instead of
    one matrix shared across groups.
    """

    p: float = 2.0
    G: int = 8
    gate_op: str = "one_plus_tanh"
    rho_init: float = 0.0
    tau_init: float = 1.0
    attn_hidden: Optional[int] = None
    epsilon: float = 1e-5
    per_group_we: bool = False

    def __post_init__(self):
        if self.p <= 0:
            raise DomainError(f"norm order p must be positive, got {self.p}")
        if self.G < 1:
            raise GroupMismatch(f"group count must be >= 1, got {self.G}")
        if self.gate_op not in GATE_OPS:
            raise UnknownOperator(f"gate_op {self.gate_op!r} not in {GATE_OPS}")
        if self.attn_hidden is not None and self.attn_hidden < 1:
            raise DomainError("attn_hidden must be >= 1")

    def resolve_attn_hidden(self, channels: int) -> int:
        if self.attn_hidden is not None:
            return self.attn_hidden
        return max(channels // 4, 4)


def _param(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, dtype=dtype)


@dataclass
class SeParams:
    """Squeeze-and-excitation weights: W1 (C/r x C), W2 (C x C/r)."""

    W1: Tensor
    W2: Tensor
    r: int = 16

    @staticmethod
    def init(channels: int, r: int = 16, seed: int = 0, dtype=None) -> "SeParams":
        rng = np.random.default_rng(seed)
        hidden = max(channels // r, 1)
        w1 = rng.normal(0.0, np.sqrt(2.0 / channels), size=(hidden, channels))
        w2 = rng.normal(0.0, np.sqrt(2.0 / hidden), size=(channels, hidden))
        return SeParams(W1=_param(w1, dtype), W2=_param(w2, dtype), r=r)

    def trainable(self) -> dict:
        return {"W1": self.W1, "W2": self.W2}


@dataclass
class GtfcParams:
    """Trainable buffers of one GTFC block.

    For c-GTFC the embedding operates on all C channels and the gate
    fields gamma/beta are present; W_e/rho/tau are None. For tf-GTFC the
    embedding operates per group on C/G channels (weights shared across
    groups), W_e/rho/tau are present, and gamma/beta are None.
    """

    lam: Tensor
    W_alpha: Tensor
    b_alpha: Tensor
    u_alpha: Tensor
    gamma: Optional[Tensor] = None
    beta: Optional[Tensor] = None
    W_e: Optional[Tensor] = None
    rho: Optional[Tensor] = None
    tau: Optional[Tensor] = None

    @staticmethod
    def init(channels: int, config: GtfcConfig, kind: str = "c_gtfc",
             seed: int = 0, dtype=None) -> "GtfcParams":
        rng = np.random.default_rng(seed)
        if kind == "c_gtfc":
            width = channels
        elif kind == "tf_gtfc":
            if channels % config.G != 0:
                raise GroupMismatch(f"C={channels} not divisible by G={config.G}")
            width = channels // config.G
        else:
            raise UnknownOperator(f"no GtfcParams for kind {kind!r}")
        hidden = config.resolve_attn_hidden(width)
        params = GtfcParams(
            lam=_param(np.ones(width), dtype),
            W_alpha=_param(rng.normal(0.0, 1.0 / np.sqrt(width), size=(hidden, width)), dtype),
            b_alpha=_param(np.zeros(hidden), dtype),
            u_alpha=_param(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden,)), dtype),
        )
        if kind == "c_gtfc":
            params.gamma = _param(np.zeros(channels), dtype)
            params.beta = _param(np.zeros(channels), dtype)
        else:
            we_shape = (config.G, width, width) if config.per_group_we else (width, width)
            params.W_e = _param(rng.normal(0.0, 1.0 / np.sqrt(width), size=we_shape), dtype)
            params.rho = _param(np.full((), config.rho_init), dtype)
            params.tau = _param(np.full((), config.tau_init), dtype)
        return params

    def trainable(self) -> dict:
        names = ["lam", "W_alpha", "b_alpha", "u_alpha",
                 "gamma", "beta", "W_e", "rho", "tau"]
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


def _as_map(x) -> tuple:
    """Normalize a feature map to a 4-D (N, C, F, T) tensor."""
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 3:
        return T.reshape(t, (1,) + t.shape), False
    if t.ndim == 4:
        return t, True
    raise ShapeMismatch(f"expected (C,F,T) or (N,C,F,T), got {t.shape}")


def _restore(out: Tensor, batched: bool) -> Tensor:
    return out if batched else T.reshape(out, out.shape[1:])


# -- squeeze-and-excitation ---------------------------------------------------


def se_block(x, params: SeParams) -> Tensor:
    """Channel reweighting: sigmoid(W2 relu(W1 mean_FT(x))) per channel."""
    x4, batched = _as_map(x)
    n, c = x4.shape[0], x4.shape[1]
    if params.W1.shape[1] != c or params.W2.shape[0] != c:
        raise ShapeMismatch(f"SE weights sized for C={params.W1.shape[1]}, map has C={c}")
    z = T.reduce_mean(x4, axes=(2, 3))                        # (N, C)
    h = T.relu(T.matmul(z, T.transpose(params.W1, (1, 0))))   # (N, C/r)
    a = T.sigmoid(T.matmul(h, T.transpose(params.W2, (1, 0))))
    out = x4 * T.reshape(a, (n, c, 1, 1))
    return _restore(out, batched)


# -- global time-frequency context --------------------------------------------


def attention_weights(x, params: GtfcParams, p: float) -> Tensor:
    """Attention over the F x T grid: softmax of u' tanh(W |x|^p + b).

    Returns alpha with shape (N, F*T) (or (F*T,) for an unbatched map).
    """
    if p <= 0:
        raise DomainError(f"norm order p must be positive, got {p}")
    x4, batched = _as_map(x)
    n, c, f, t = x4.shape
    if params.W_alpha.shape[1] != c:
        raise ShapeMismatch(f"W_alpha sized for C={params.W_alpha.shape[1]}, map has C={c}")
    m = f * t
    u = T.pow_(T.abs_(x4), p)                                  # |x|^p
    cols = T.reshape(T.transpose(T.reshape(u, (n, c, m)), (0, 2, 1)), (n * m, c))
    pre = T.matmul(cols, T.transpose(params.W_alpha, (1, 0))) + params.b_alpha
    scores = T.matmul(T.tanh(pre), T.reshape(params.u_alpha, (-1, 1)))
    alpha = T.softmax(T.reshape(scores, (n, m)), axis=1)
    return alpha if batched else T.reshape(alpha, (m,))


def lp_attentive_embed(x, params: GtfcParams, p: float) -> Tensor:
    """Attentive lp pooling: g_c = lambda_c (sum_ij alpha_ij |x_c^ij|^p)^(1/p), shape (N, C)."""
    x4, batched = _as_map(x)
    n, c, f, t = x4.shape
    m = f * t
    alpha = attention_weights(x4, params, p)                   # (N, M)
    u = T.reshape(T.pow_(T.abs_(x4), p), (n, c, m))
    pooled = T.reduce_sum(u * T.reshape(alpha, (n, 1, m)), axes=2)
    g = params.lam * T.pow_(pooled, 1.0 / p)
    return g if batched else T.reshape(g, (c,))


def channel_normalize(g, epsilon: float = 1e-5) -> Tensor:
    """Scale the context to norm sqrt(C): g_hat = sqrt(C) * g / sqrt(sum_c g_c^2 + epsilon).

    Works on a (C,) vector or a (N, C) batch; the norm runs over the last
    axis and sqrt(C) comes from that axis extent.
    """
    t = g if isinstance(g, Tensor) else Tensor(g)
    c = t.shape[-1]
    total = T.reduce_sum(t * t, axes=-1, keepdims=True) + epsilon
    return t * float(np.sqrt(c)) / T.sqrt(total)


def channel_gate(x, g_hat, gamma, beta, gate_op: str = "one_plus_tanh") -> Tensor:
    """Rescale every channel by a gate of gamma_c * g_hat_c + beta_c.

    one_plus_tanh and one_plus_elu are exact identity when gamma and beta
    are zero; sigmoid halves the map at zero instead.
    """
    if gate_op not in GATE_OPS:
        raise UnknownOperator(f"gate_op {gate_op!r} not in {GATE_OPS}")
    x4, batched = _as_map(x)
    n, c = x4.shape[0], x4.shape[1]
    gh = g_hat if isinstance(g_hat, Tensor) else Tensor(g_hat)
    if gh.ndim == 1:
        gh = T.reshape(gh, (1, c))
    pre = gamma * gh + beta                                    # (N, C)
    if gate_op == "sigmoid":
        factor = T.sigmoid(pre)
    elif gate_op == "one_plus_elu":
        factor = 1.0 + T.elu(pre)
    else:
        factor = 1.0 + T.tanh(pre)
    out = x4 * T.reshape(factor, (n, c, 1, 1))
    return _restore(out, batched)


def c_gtfc(x, params: GtfcParams, config: GtfcConfig) -> Tensor:
    """Channel-wise GTFC: attentive lp embed, sqrt(C) normalize, affine gate."""
    x4, batched = _as_map(x)
    g = lp_attentive_embed(x4, params, config.p)
    g_hat = channel_normalize(g, config.epsilon)
    out = channel_gate(x4, g_hat, params.gamma, params.beta, config.gate_op)
    return _restore(out, batched)


def grid_normalize(e, epsilon: float = 1e-5) -> Tensor:
    """Standardize scores over the grid axis: (e - mean) / (sigma + epsilon).

    sigma is the population standard deviation over the last axis.
    """
    t = e if isinstance(e, Tensor) else Tensor(e)
    mu = T.reduce_mean(t, axes=-1, keepdims=True)
    centered = t - mu
    var = T.reduce_mean(centered * centered, axes=-1, keepdims=True)
    return centered / (T.sqrt(var + _VAR_GUARD) + epsilon)


def tf_gtfc(x, params: GtfcParams, config: GtfcConfig) -> Tensor:
    """Group-wise time-frequency GTFC.

    Each group of C/G channels builds its own normalized context vector,
    scores every grid location against it through W_e, normalizes the
    scores over the grid, and gates the group by sigmoid(rho * e_hat + tau).
    """
    x4, batched = _as_map(x)
    n, c, f, t = x4.shape
    if c % config.G != 0:
        raise GroupMismatch(f"C={c} not divisible by G={config.G}")
    width = c // config.G
    if params.lam.shape[0] != width:
        raise ShapeMismatch(f"params sized for group width {params.lam.shape[0]}, need {width}")
    m = f * t
    outputs = []
    for gi in range(config.G):
        xg = T.narrow(x4, 1, gi * width, width)                # (N, w, F, T)
        g_hat = channel_normalize(
            lp_attentive_embed(xg, params, config.p), config.epsilon)
        we = params.W_e
        if config.per_group_we:
            we = T.reshape(T.narrow(we, 0, gi, 1), (width, width))
        q = T.matmul(g_hat, we)                                # (N, w)
        e = T.reduce_sum(T.reshape(q, (n, width, 1)) * T.reshape(xg, (n, width, m)), axes=1)
        s = params.rho * grid_normalize(e, config.epsilon) + params.tau
        factor = T.reshape(T.sigmoid(s), (n, 1, f, t))
        outputs.append(xg * factor)
    out = T.concat(outputs, axis=1)
    return _restore(out, batched)


# -- parameter accounting ------------------------------------------------------


def param_count(kind: str, channels: int, config: Optional[GtfcConfig] = None,
                r: int = 16) -> int:
    """Exact trainable-parameter count of one block at an insertion site.

    Closed forms (H = attn_hidden at the operating width, w = C/G):
      se:      2 * C * max(C // r, 1)
      c_gtfc:  C + H*C + 2H + 2C          (lambda, W_alpha, b, u, gamma, beta)
      tf_gtfc: w + H*w + 2H + w^2 [*G if per-group W_e] + 2
    """
    if kind == "none":
        return 0
    if kind == "se":
        hidden = max(channels // r, 1)
        return 2 * channels * hidden
    if config is None:
        config = GtfcConfig()
    if kind == "c_gtfc":
        h = config.resolve_attn_hidden(channels)
        return channels + h * channels + 2 * h + 2 * channels
    if kind == "tf_gtfc":
        if channels % config.G != 0:
            raise GroupMismatch(f"C={channels} not divisible by G={config.G}")
        width = channels // config.G
        h = config.resolve_attn_hidden(width)
        we = config.G * width * width if config.per_group_we else width * width
        return width + h * width + 2 * h + we + 2
    raise UnknownOperator(f"unknown block kind {kind!r}")


def init_block_params(kind: str, channels: int, config: Optional[GtfcConfig] = None,
                      r: int = 16, seed: int = 0, dtype=None):
    """Construct the parameter container for a block kind (None for 'none')."""
    if kind == "none":
        return None
    if kind == "se":
        return SeParams.init(channels, r=r, seed=seed, dtype=dtype)
    if kind in ("c_gtfc", "tf_gtfc"):
        return GtfcParams.init(channels, config or GtfcConfig(), kind=kind,
                               seed=seed, dtype=dtype)
    raise UnknownOperator(f"unknown block kind {kind!r}")


def apply_block(kind: str, x, params, config: Optional[GtfcConfig] = None):
    """Dispatch a feature map through one block kind ('none' passes through)."""
    if kind == "none":
        return x if isinstance(x, Tensor) else Tensor(x)
    if kind == "se":
        return se_block(x, params)
    if kind == "c_gtfc":
        return c_gtfc(x, params, config or GtfcConfig())
    if kind == "tf_gtfc":
        return tf_gtfc(x, params, config or GtfcConfig())
    raise UnknownOperator(f"unknown block kind {kind!r}")
