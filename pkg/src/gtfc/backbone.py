"""Residual CNN speaker embedder hosting the recalibration blocks.

Desk-scale layout mirrors the full-scale ResNet-34 trunk at a fraction
of the width: a 3x3 stem, four stages of basic blocks (stride 2 from
stage 2 on, on both the frequency and time axes), mean pooling over
time, a linear embedding head, and a softmax speaker classifier.

One recalibration block per residual block, spliced around the second
conv/BN pair:

  after_bn     conv1 -> BN -> swish -> conv2 -> BN -> [block] -> +res -> swish
  before_bn    conv1 -> BN -> swish -> conv2 -> [block] -> BN -> +res -> swish
  before_conv  conv1 -> BN -> swish -> [block] -> conv2 -> BN -> +res -> swish
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import tensor as T
from .blocks import (
    BLOCK_KINDS,
    GtfcConfig,
    UnknownOperator,
    apply_block,
    init_block_params,
    param_count,
)
from .tensor import (
    ShapeMismatch,
    Tensor,
    _accum_grad,
    _make_result,
    load_gtf1,
    no_grad,
    save_gtf1,
)

INSERT_POSITIONS = ("after_bn", "before_bn", "before_conv")
CHECKPOINT_FORMAT = "gtfc-checkpoint-v1"
MIN_FRAMES = 8  # three stride-2 stages need 2^3 frames to keep every stage honest


class BatchTooSmall(ValueError):
    """Train-mode batch statistics need more than one element per channel."""


class TooShort(ValueError):
    """Utterance has fewer frames than the embedder's receptive field."""


class NonFiniteLoss(FloatingPointError):
    """Training loss left the finite range; carries step diagnostics."""


class CheckpointError(ValueError):
    """Checkpoint directory is missing, malformed, or inconsistent."""


# -- convolution ---------------------------------------------------------------


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x, weight, stride=1, pad=0) -> Tensor:
    """2-D cross-correlation of (N,C,F,T) maps with (C_out,C_in,kh,kw) kernels.

    Accepts a 3-D (C,F,T) map as a batch of one. Kernels are 1x1 or 3x3;
    output extents are floor((ext + 2*pad - k)/stride) + 1. Implemented as
    im2col matmul with a scatter-add backward over the kernel taps.
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    squeeze = xt.ndim == 3
    if squeeze:
        xt = T.reshape(xt, (1,) + xt.shape)
    if xt.ndim != 4:
        raise ShapeMismatch(f"conv2d expects (N,C,F,T), got {xt.shape}")
    wt = weight if isinstance(weight, Tensor) else Tensor(weight)
    if wt.ndim != 4:
        raise ShapeMismatch(f"conv2d kernel must be 4-D, got {wt.shape}")
    n, c_in, f_in, t_in = xt.shape
    c_out, c_k, kh, kw = wt.shape
    if c_k != c_in:
        raise ShapeMismatch(f"kernel expects C_in={c_k}, map has {c_in}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeMismatch(f"only 1x1/3x3 kernels supported, got {kh}x{kw}")
    sf, st = _pair(stride)
    pf, pt = _pair(pad)
    f_out = (f_in + 2 * pf - kh) // sf + 1
    t_out = (t_in + 2 * pt - kw) // st + 1
    if f_out < 1 or t_out < 1:
        raise ShapeMismatch(f"conv2d output extent empty for input {xt.shape}")

    padded = np.pad(xt.data, ((0, 0), (0, 0), (pf, pf), (pt, pt)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sf, ::st]                     # (N,C,F',T',kh,kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * f_out * t_out, c_in * kh * kw)
    w_mat = wt.data.reshape(c_out, c_in * kh * kw)
    out = (cols @ w_mat.T).reshape(n, f_out, t_out, c_out).transpose(0, 3, 1, 2)
    pad_shape = padded.shape

    def vjp(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * f_out * t_out, c_out)
        if wt.requires_grad:
            _accum_grad(wt, (g_mat.T @ cols).reshape(wt.shape))
        if xt.requires_grad:
            g_cols = (g_mat @ w_mat).reshape(n, f_out, t_out, c_in, kh, kw)
            g_cols = g_cols.transpose(0, 3, 1, 2, 4, 5)     # (N,C,F',T',kh,kw)
            g_pad = np.zeros(pad_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    g_pad[:, :, i:i + sf * f_out:sf, j:j + st * t_out:st] += \
                        g_cols[:, :, :, :, i, j]
            g_x = g_pad[:, :, pf:pf + f_in, pt:pt + t_in]
            _accum_grad(xt, g_x)

    result = _make_result(np.ascontiguousarray(out), (xt, wt), vjp)
    return T.reshape(result, result.shape[1:]) if squeeze else result


# -- batch normalization -------------------------------------------------------


class BatchNorm2d:
    """Per-channel normalization with trainable affine and running stats.

    Train mode normalizes with batch statistics over (N, F, T) and updates
    the running buffers as 0.9 * old + 0.1 * batch; eval mode uses the
    running buffers. Variances are population (1/m) variances.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9,
                 dtype=None):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def forward(self, x: Tensor, train: bool, update: Optional[bool] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"batchnorm over {self.channels} channels, map {x.shape}")
        n, c, f, t = x.shape
        gamma = T.reshape(self.gamma, (1, c, 1, 1))
        beta = T.reshape(self.beta, (1, c, 1, 1))
        if train:
            if n * f * t <= 1:
                raise BatchTooSmall("train-mode batchnorm needs > 1 element per channel")
            mu = T.reduce_mean(x, axes=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = T.reduce_mean(centered * centered, axes=(0, 2, 3), keepdims=True)
            out = centered / T.sqrt(var + self.eps) * gamma + beta
            if update is None or update:
                with no_grad():
                    m = self.momentum
                    self.running_mean = m * self.running_mean + (1 - m) * \
                        mu.data.reshape(c).astype(np.float64)
                    self.running_var = m * self.running_var + (1 - m) * \
                        var.data.reshape(c).astype(np.float64)
            return out
        mean = self.running_mean.reshape(1, c, 1, 1)
        var = self.running_var.reshape(1, c, 1, 1)
        scale = 1.0 / np.sqrt(var + self.eps)
        return (x - mean) * scale * gamma + beta

    def trainable(self, prefix: str) -> dict:
        return {f"{prefix}_gamma": self.gamma, f"{prefix}_beta": self.beta}

    def buffers(self, prefix: str) -> dict:
        return {f"{prefix}_running_mean": self.running_mean,
                f"{prefix}_running_var": self.running_var}

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        if name.endswith("running_mean"):
            self.running_mean = value.astype(np.float64)
        else:
            self.running_var = value.astype(np.float64)


# -- residual basic block ------------------------------------------------------


@dataclass
class BasicBlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    insert_kind: str = "none"
    insert_pos: str = "after_bn"

    def __post_init__(self):
        if self.insert_kind not in BLOCK_KINDS:
            raise UnknownOperator(f"insert_kind {self.insert_kind!r} not in {BLOCK_KINDS}")
        if self.insert_pos not in INSERT_POSITIONS:
            raise UnknownOperator(f"insert_pos {self.insert_pos!r} not in {INSERT_POSITIONS}")


class BasicBlock:
    """conv3x3 -> BN -> swish -> conv3x3 -> BN (+ recalibration) -> add -> swish."""

    def __init__(self, spec: BasicBlockSpec, gtfc: GtfcConfig, se_r: int = 16,
                 rng: Optional[np.random.Generator] = None, dtype=None):
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        self.gtfc = gtfc
        self.se_r = se_r
        c_in, c_out = spec.in_channels, spec.out_channels
        self.conv1_weight = _conv_init(rng, c_out, c_in, 3, dtype)
        self.bn1 = BatchNorm2d(c_out, dtype=dtype)
        self.conv2_weight = _conv_init(rng, c_out, c_out, 3, dtype)
        self.bn2 = BatchNorm2d(c_out, dtype=dtype)
        self.projects = spec.stride != 1 or c_in != c_out
        if self.projects:
            self.proj_weight = _conv_init(rng, c_out, c_in, 1, dtype)
            self.proj_bn = BatchNorm2d(c_out, dtype=dtype)
        self.insert_params = init_block_params(
            spec.insert_kind, c_out, gtfc, r=se_r,
            seed=int(rng.integers(2 ** 31)), dtype=dtype)

    def _recalibrate(self, h: Tensor) -> Tensor:
        return apply_block(self.spec.insert_kind, h, self.insert_params, self.gtfc)

    def forward(self, x: Tensor, train: bool, update: Optional[bool] = None) -> Tensor:
        s = self.spec
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        h = conv2d(x, self.conv1_weight, stride=s.stride, pad=1)
        h = T.swish(self.bn1.forward(h, train, update))
        if s.insert_kind != "none" and s.insert_pos == "before_conv":
            h = self._recalibrate(h)
        h = conv2d(h, self.conv2_weight, stride=1, pad=1)
        if s.insert_kind != "none" and s.insert_pos == "before_bn":
            h = self._recalibrate(h)
        h = self.bn2.forward(h, train, update)
        if s.insert_kind != "none" and s.insert_pos == "after_bn":
            h = self._recalibrate(h)
        res = x
        if self.projects:
            res = self.proj_bn.forward(
                conv2d(x, self.proj_weight, stride=s.stride, pad=0), train, update)
        out = T.swish(h + res)
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def trainable(self) -> dict:
        out = {"conv1_weight": self.conv1_weight}
        out.update(self.bn1.trainable("bn1"))
        out["conv2_weight"] = self.conv2_weight
        out.update(self.bn2.trainable("bn2"))
        if self.projects:
            out["proj_weight"] = self.proj_weight
            out.update(self.proj_bn.trainable("proj_bn"))
        if self.insert_params is not None:
            out.update(self.insert_params.trainable())
        return out

    def buffers(self) -> dict:
        out = dict(self.bn1.buffers("bn1"))
        out.update(self.bn2.buffers("bn2"))
        if self.projects:
            out.update(self.proj_bn.buffers("proj_bn"))
        return out


def _conv_init(rng, c_out, c_in, k, dtype) -> Tensor:
    scale = np.sqrt(2.0 / (c_in * k * k))
    return Tensor(rng.normal(0.0, scale, size=(c_out, c_in, k, k)),
                  requires_grad=True, dtype=dtype)


def _linear_init(rng, out_dim, in_dim, dtype) -> tuple:
    scale = np.sqrt(2.0 / in_dim)
    w = Tensor(rng.normal(0.0, scale, size=(out_dim, in_dim)),
               requires_grad=True, dtype=dtype)
    b = Tensor(np.zeros(out_dim), requires_grad=True, dtype=dtype)
    return w, b


# -- model ---------------------------------------------------------------------


@dataclass
class ModelSpec:
    """Architecture hyperparameters plus the insertion policy.

    Desk scale: stage_channels [4, 8, 16, 32], one block per stage,
    embedding 16. Paper scale: [16, 32, 64, 128] x [3, 4, 6, 3],
    embedding 128.
    """

    stage_channels: List[int]
    blocks_per_stage: List[int]
    embedding_dim: int
    num_speakers: int
    activation: str = "swish"
    input_mels: int = 64
    insert_kind: str = "none"
    insert_pos: str = "after_bn"
    se_r: int = 16
    gtfc: GtfcConfig = field(default_factory=GtfcConfig)

    def __post_init__(self):
        if len(self.stage_channels) != len(self.blocks_per_stage):
            raise ShapeMismatch("stage_channels and blocks_per_stage lengths differ")
        if self.activation != "swish":
            raise UnknownOperator(f"unsupported activation {self.activation!r}")
        if self.insert_kind not in BLOCK_KINDS:
            raise UnknownOperator(f"insert_kind {self.insert_kind!r} not in {BLOCK_KINDS}")
        if self.insert_pos not in INSERT_POSITIONS:
            raise UnknownOperator(f"insert_pos {self.insert_pos!r} not in {INSERT_POSITIONS}")


def desk_spec(num_speakers: int, insert_kind: str = "none",
              insert_pos: str = "after_bn", gtfc: Optional[GtfcConfig] = None) -> ModelSpec:
    return ModelSpec([4, 8, 16, 32], [1, 1, 1, 1], 16, num_speakers,
                     insert_kind=insert_kind, insert_pos=insert_pos,
                     gtfc=gtfc or GtfcConfig())


def full_spec(num_speakers: int, insert_kind: str = "none",
               insert_pos: str = "after_bn", gtfc: Optional[GtfcConfig] = None) -> ModelSpec:
    return ModelSpec([16, 32, 64, 128], [3, 4, 6, 3], 128, num_speakers,
                     insert_kind=insert_kind, insert_pos=insert_pos,
                     gtfc=gtfc or GtfcConfig())


def temporal_pool(x: Tensor) -> Tensor:
    """Mean over the time axis, flattened to (N, C*F) (or (C*F,) unbatched)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    pooled = T.reduce_mean(x, axes=3)
    n, c, f = pooled.shape
    flat = T.reshape(pooled, (n, c * f))
    return T.reshape(flat, (c * f,)) if squeeze else flat


class SpeakerEmbedder:
    """Stages of basic blocks with temporal pooling and two linear heads."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=None):
        self.spec = spec
        rng = np.random.default_rng(seed)
        c0 = spec.stage_channels[0]
        self.stem_conv_weight = _conv_init(rng, c0, 1, 3, dtype)
        self.stem_bn = BatchNorm2d(c0, dtype=dtype)
        self.blocks: List[BasicBlock] = []
        c_prev = c0
        for stage, (c, reps) in enumerate(zip(spec.stage_channels, spec.blocks_per_stage)):
            for rep in range(reps):
                stride = 2 if stage > 0 and rep == 0 else 1
                bspec = BasicBlockSpec(c_prev, c, stride,
                                       insert_kind=spec.insert_kind,
                                       insert_pos=spec.insert_pos)
                self.blocks.append(BasicBlock(bspec, spec.gtfc, spec.se_r,
                                              rng=rng, dtype=dtype))
                c_prev = c
        f_last = self.freq_extent(spec.input_mels)
        pooled_dim = spec.stage_channels[-1] * f_last
        self.embed_weight, self.embed_bias = _linear_init(
            rng, spec.embedding_dim, pooled_dim, dtype)
        # Zero-init classifier: uniform softmax at step 0, so the first
        # loss is exactly ln(num_speakers); label gradients break symmetry.
        self.cls_weight = Tensor(np.zeros((spec.num_speakers, spec.embedding_dim)),
                                 requires_grad=True, dtype=dtype)
        self.cls_bias = Tensor(np.zeros(spec.num_speakers), requires_grad=True,
                               dtype=dtype)

    def freq_extent(self, f: int) -> int:
        for stage in range(len(self.spec.stage_channels)):
            if stage > 0:
                f = (f - 1) // 2 + 1
        return f

    def features_to_map(self, features: np.ndarray) -> np.ndarray:
        """(T, mels) features to a (1, mels, T) single-channel map."""
        feats = np.asarray(features)
        if feats.ndim != 2 or feats.shape[1] != self.spec.input_mels:
            raise ShapeMismatch(f"expected (T, {self.spec.input_mels}) features, "
                                f"got {feats.shape}")
        return np.ascontiguousarray(feats.T)[None, :, :]

    def forward_map(self, x, train: bool = False,
                    update: Optional[bool] = None) -> Tensor:
        """Run (N,1,F,T) maps through stem and stages to pooled vectors."""
        xt = x if isinstance(x, Tensor) else Tensor(x)
        h = conv2d(xt, self.stem_conv_weight, stride=1, pad=1)
        h = T.swish(self.stem_bn.forward(h, train, update))
        for block in self.blocks:
            h = block.forward(h, train, update)
        return temporal_pool(h)

    def forward(self, x, train: bool = False, update: Optional[bool] = None) -> tuple:
        """Maps to (embeddings (N, D), logits (N, num_speakers))."""
        pooled = self.forward_map(x, train, update)
        emb = T.matmul(pooled, T.transpose(self.embed_weight, (1, 0))) + self.embed_bias
        logits = T.matmul(emb, T.transpose(self.cls_weight, (1, 0))) + self.cls_bias
        return emb, logits

    def embed(self, features: np.ndarray) -> np.ndarray:
        """Eval-mode utterance embedding from (T, mels) features."""
        feats = np.asarray(features)
        if feats.shape[0] < MIN_FRAMES:
            raise TooShort(f"need at least {MIN_FRAMES} frames, got {feats.shape[0]}")
        x = self.features_to_map(feats)[None, :, :, :]
        with no_grad():
            emb, _ = self.forward(Tensor(x), train=False)
        return emb.numpy()[0]

    def trainable(self) -> dict:
        out = {"stem/conv_weight": self.stem_conv_weight}
        out.update({f"stem/{k}": v for k, v in self.stem_bn.trainable("bn").items()})
        for i, block in enumerate(self.blocks):
            out.update({f"block_{i}/{k}": v for k, v in block.trainable().items()})
        out.update({"embed/weight": self.embed_weight, "embed/bias": self.embed_bias,
                    "cls/weight": self.cls_weight, "cls/bias": self.cls_bias})
        return out

    def buffers(self) -> dict:
        out = {f"stem/{k}": v for k, v in self.stem_bn.buffers("bn").items()}
        for i, block in enumerate(self.blocks):
            out.update({f"block_{i}/{k}": v for k, v in block.buffers().items()})
        return out

    def param_ledger(self) -> dict:
        """Parameter counts split into trunk and inserted recalibration blocks."""
        insert_names = {"lam", "W_alpha", "b_alpha", "u_alpha", "gamma", "beta",
                        "W_e", "rho", "tau", "W1", "W2"}
        trunk = 0
        inserted = 0
        for name, t in self.trainable().items():
            leaf = name.split("/")[-1]
            if name.startswith("block_") and leaf in insert_names:
                inserted += t.size
            else:
                trunk += t.size
        per_site = [param_count(b.spec.insert_kind, b.spec.out_channels,
                                self.spec.gtfc, r=self.spec.se_r)
                    for b in self.blocks]
        return {"trunk": trunk, "inserted": inserted,
                "inserted_by_formula": sum(per_site),
                "total": trunk + inserted}


def set_trainable(model: SpeakerEmbedder, name: str, tensor: Tensor) -> None:
    """Point the model attribute behind a trainable name at ``tensor``.

    Names follow the ``trainable()`` convention (``stem/conv_weight``,
    ``block_0/bn1_gamma``, ``embed/weight``, ...). Used by gradient
    checking, which must rebind leaves before re-running the forward pass.
    """
    parts = name.split("/")
    if parts[0] == "stem":
        if parts[1] == "conv_weight":
            model.stem_conv_weight = tensor
        elif parts[1] == "bn_gamma":
            model.stem_bn.gamma = tensor
        else:
            model.stem_bn.beta = tensor
        return
    if parts[0] == "embed":
        setattr(model, "embed_weight" if parts[1] == "weight" else "embed_bias", tensor)
        return
    if parts[0] == "cls":
        setattr(model, "cls_weight" if parts[1] == "weight" else "cls_bias", tensor)
        return
    block = model.blocks[int(parts[0].split("_")[1])]
    leaf = parts[1]
    if leaf == "conv1_weight":
        block.conv1_weight = tensor
    elif leaf == "conv2_weight":
        block.conv2_weight = tensor
    elif leaf == "proj_weight":
        block.proj_weight = tensor
    elif leaf.startswith("bn1"):
        setattr(block.bn1, leaf.split("_")[1], tensor)
    elif leaf.startswith("bn2"):
        setattr(block.bn2, leaf.split("_")[1], tensor)
    elif leaf.startswith("proj_bn"):
        setattr(block.proj_bn, leaf[len("proj_bn_"):], tensor)
    else:
        setattr(block.insert_params, leaf, tensor)


# -- loss and optimizer ---------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; labels are integer class indices."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels {labels.shape} for logits {logits.shape}")
    m = T.reduce_max(logits, axes=1, keepdims=True)
    z = logits - m
    lse = T.log(T.reduce_sum(T.exp(z), axes=1, keepdims=True)) + m
    log_probs = logits - lse
    onehot = np.zeros((n, k), dtype=log_probs.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = T.reduce_sum(log_probs * onehot, axes=1)
    return -T.reduce_mean(picked)


class SgdMomentum:
    """Classic SGD with momentum and coupled weight decay."""

    def __init__(self, params: dict, lr: float = 1e-3, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def step(self) -> None:
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad + self.weight_decay * t.data
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            t.data -= self.lr * v


def train_step(batch, model: SpeakerEmbedder, optimizer: SgdMomentum) -> float:
    """One SGD step on a batch of (features (T,64), label) pairs.

    Chunks are cropped to the shortest length in the batch so they stack
    into one map. Returns the pre-update loss.
    """
    t_min = min(feats.shape[0] for feats, _ in batch)
    maps = np.stack([model.features_to_map(feats[:t_min]) for feats, _ in batch])
    labels = np.array([label for _, label in batch], dtype=np.int64)
    optimizer.zero_grad()
    _, logits = model.forward(Tensor(maps), train=True)
    loss = cross_entropy(logits, labels)
    value = float(loss.item())
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss={value} on batch labels={labels.tolist()} "
                            f"lr={optimizer.lr}")
    loss.backward()
    optimizer.step()
    return value


@dataclass
class FitResult:
    steps: int
    epoch_losses: List[float]
    final_lr: float


def fit(model: SpeakerEmbedder, dataset, epochs: int, batch_size: int, seed: int,
        chunk_fn: Optional[Callable] = None, lr: float = 1e-3,
        momentum: float = 0.9, weight_decay: float = 1e-4,
        stall_patience: int = 10, stall_factor: float = 0.1,
        log_fn: Optional[Callable] = None) -> FitResult:
    """Seeded training loop over a list of (features, label) utterances.

    Each epoch shuffles the utterance order and redraws chunks through
    ``chunk_fn(features, chunk_seed)`` (identity when None). The learning
    rate is multiplied by ``stall_factor`` when the epoch-mean loss has
    not improved for ``stall_patience`` consecutive epochs.
    """
    optimizer = SgdMomentum(model.trainable(), lr=lr, momentum=momentum,
                            weight_decay=weight_decay)
    best = np.inf
    stalled = 0
    step = 0
    epoch_losses = []
    for epoch in range(epochs):
        epoch_rng = np.random.default_rng([seed, epoch])
        order = epoch_rng.permutation(len(dataset))
        chunk_seeds = epoch_rng.integers(0, 2 ** 31, size=len(dataset))
        losses = []
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            batch = []
            for i in idx:
                feats, label = dataset[i]
                if chunk_fn is not None:
                    feats = chunk_fn(feats, int(chunk_seeds[i]))
                batch.append((feats, label))
            value = train_step(batch, model, optimizer)
            step += 1
            losses.append(value)
            if log_fn is not None:
                log_fn(step, value, optimizer.lr)
        mean_loss = float(np.mean(losses))
        epoch_losses.append(mean_loss)
        if mean_loss < best - 1e-4:
            best = mean_loss
            stalled = 0
        else:
            stalled += 1
            if stalled >= stall_patience:
                optimizer.lr *= stall_factor
                stalled = 0
    return FitResult(steps=step, epoch_losses=epoch_losses, final_lr=optimizer.lr)


# -- checkpoints -----------------------------------------------------------------


def _spec_lines(spec: ModelSpec) -> list:
    g = spec.gtfc
    lines = [
        f"format\t{CHECKPOINT_FORMAT}",
        f"stage_channels\t{','.join(map(str, spec.stage_channels))}",
        f"blocks_per_stage\t{','.join(map(str, spec.blocks_per_stage))}",
        f"embedding_dim\t{spec.embedding_dim}",
        f"num_speakers\t{spec.num_speakers}",
        f"activation\t{spec.activation}",
        f"input_mels\t{spec.input_mels}",
        f"insert_kind\t{spec.insert_kind}",
        f"insert_pos\t{spec.insert_pos}",
        f"se_r\t{spec.se_r}",
        f"gtfc_p\t{g.p!r}",
        f"gtfc_G\t{g.G}",
        f"gtfc_gate_op\t{g.gate_op}",
        f"gtfc_rho_init\t{g.rho_init!r}",
        f"gtfc_tau_init\t{g.tau_init!r}",
        f"gtfc_attn_hidden\t{'none' if g.attn_hidden is None else g.attn_hidden}",
        f"gtfc_epsilon\t{g.epsilon!r}",
        f"gtfc_per_group_we\t{int(g.per_group_we)}",
    ]
    return lines


def _parse_spec_lines(fields: dict) -> ModelSpec:
    gtfc = GtfcConfig(
        p=float(fields["gtfc_p"]),
        G=int(fields["gtfc_G"]),
        gate_op=fields["gtfc_gate_op"],
        rho_init=float(fields["gtfc_rho_init"]),
        tau_init=float(fields["gtfc_tau_init"]),
        attn_hidden=None if fields["gtfc_attn_hidden"] == "none"
        else int(fields["gtfc_attn_hidden"]),
        epsilon=float(fields["gtfc_epsilon"]),
        per_group_we=bool(int(fields["gtfc_per_group_we"])),
    )
    return ModelSpec(
        stage_channels=[int(v) for v in fields["stage_channels"].split(",")],
        blocks_per_stage=[int(v) for v in fields["blocks_per_stage"].split(",")],
        embedding_dim=int(fields["embedding_dim"]),
        num_speakers=int(fields["num_speakers"]),
        activation=fields["activation"],
        input_mels=int(fields["input_mels"]),
        insert_kind=fields["insert_kind"],
        insert_pos=fields["insert_pos"],
        se_r=int(fields["se_r"]),
        gtfc=gtfc,
    )


def save_checkpoint(model: SpeakerEmbedder, directory) -> None:
    """Write every tensor as GTF1 plus a versioned text spec/manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {name: t.data for name, t in model.trainable().items()}
    tensors.update(model.buffers())
    lines = _spec_lines(model.spec)
    for i, block in enumerate(model.blocks):
        lines.append(f"block_insert\t{i}\t{block.spec.insert_kind}\t{block.spec.insert_pos}")
    for name in sorted(tensors):
        shape = ",".join(map(str, np.asarray(tensors[name]).shape)) or "scalar"
        lines.append(f"tensor\t{name}\t{shape}")
    for name, data in tensors.items():
        path = directory / (name + ".gtf")
        path.parent.mkdir(parents=True, exist_ok=True)
        save_gtf1(path, np.atleast_1d(np.asarray(data)))
    (directory / "spec.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(directory) -> SpeakerEmbedder:
    """Rebuild a model from a checkpoint directory written by save_checkpoint."""
    directory = Path(directory)
    spec_path = directory / "spec.txt"
    if not spec_path.is_file():
        raise CheckpointError(f"missing {spec_path}")
    fields = {}
    tensor_names = []
    for line in spec_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if parts[0] == "tensor":
            tensor_names.append(parts[1])
        elif parts[0] == "block_insert":
            continue
        else:
            fields[parts[0]] = parts[1]
    if fields.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {fields.get('format')!r}")
    model = SpeakerEmbedder(_parse_spec_lines(fields), seed=0)
    trainable = model.trainable()
    buffers = model.buffers()
    expected = set(trainable) | set(buffers)
    if set(tensor_names) != expected:
        missing = expected - set(tensor_names)
        extra = set(tensor_names) - expected
        raise CheckpointError(f"tensor manifest mismatch: missing={sorted(missing)} "
                              f"extra={sorted(extra)}")
    for name in tensor_names:
        try:
            data = load_gtf1(directory / (name + ".gtf"))
        except OSError as exc:
            raise CheckpointError(f"cannot read tensor {name!r}: {exc}")
        if name in trainable:
            target = trainable[name]
            data = data.reshape(target.shape)
            target.data = data.astype(target.dtype)
        else:
            data = data.reshape(np.asarray(buffers[name]).shape)
            _assign_buffer(model, name, data)
    return model


def _assign_buffer(model: SpeakerEmbedder, name: str, data: np.ndarray) -> None:
    path, leaf = name.rsplit("/", 1)
    if path == "stem":
        model.stem_bn.load_buffer(leaf, data)
        return
    index = int(path.split("_")[1])
    block = model.blocks[index]
    if leaf.startswith("bn1"):
        block.bn1.load_buffer(leaf, data)
    elif leaf.startswith("bn2"):
        block.bn2.load_buffer(leaf, data)
    else:
        block.proj_bn.load_buffer(leaf, data)
