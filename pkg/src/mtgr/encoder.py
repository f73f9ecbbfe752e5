"""HSTU-style encoder with group layer norm and dynamic masking.

One layer::

    xn          = GLN(x)
    q, k, v, u  = xn @ W_{q,k,v,u} + b_{q,k,v,u}          (split into heads)
    attn        = silu(q k^T) / normalizer * M              (no softmax)
    out         = MLP(GLN(concat_heads(attn @ v) * u)) + x

Shapes are ``(B, L, d)``; a 2-d ``(L, d)`` input is treated as a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .data import DataError, Group
from .tensor import Tensor

N_GROUPS = len(Group)
MASK_MODES = ("dynamic", "causal", "full")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HstuConfig:
    n_layer: int = 3
    d_model: int = 512
    n_heads: int = 2
    eps: float = 1e-6
    normalizer: str = "total_length"  # or "fixed"
    normalizer_value: float = 1.0
    use_gln: bool = True
    mask_mode: str = "dynamic"

    def __post_init__(self):
        if self.n_layer < 0:
            raise ConfigError("n_layer must be >= 0")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.normalizer not in ("total_length", "fixed"):
            raise ConfigError(f"unknown normalizer {self.normalizer!r}")
        if self.normalizer == "fixed" and self.normalizer_value <= 0:
            raise ConfigError("fixed normalizer must be positive")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def head_hidden(self) -> int:
        return max(1, self.d_model // 2)


# Model sizes from the reference configurations, with their learning rates.
SMALL = HstuConfig(n_layer=3, d_model=512, n_heads=2)
MEDIUM = HstuConfig(n_layer=5, d_model=768, n_heads=3)
LARGE = HstuConfig(n_layer=15, d_model=768, n_heads=3)
PRESETS = {"small": (SMALL, 3e-4), "medium": (MEDIUM, 3e-4), "large": (LARGE, 1e-4)}


# ----------------------------------------------------------------------------
# masks
# ----------------------------------------------------------------------------


@dataclass
class MaskMatrix:
    values: np.ndarray  # (L, L) of {0, 1}; row i may read column j
    tags: np.ndarray
    timestamps: np.ndarray

    def render(self, labels: Optional[Sequence[str]] = None) -> str:
        """Text grid, '1' visible and '·' hidden; rows are readers, columns are read."""
        n = self.values.shape[0]
        labels = list(labels) if labels is not None else [f"{Group(t).name[:4].lower()}{i}" for i, t in enumerate(self.tags)]
        w = max(len(s) for s in labels) if labels else 0
        lines = [" " * w + " " + " ".join(s[:1] for s in labels)]
        for i in range(n):
            row = " ".join("1" if self.values[i, j] else "·" for j in range(n))
            lines.append(f"{labels[i]:>{w}} {row}")
        return "\n".join(lines)


def build_dynamic_mask(tags, timestamps, mode: str = "dynamic") -> MaskMatrix:
    """Visibility matrix for one token sequence.

    dynamic: static columns (profile + static sequence) are visible to every row,
    but static rows read only static columns; a realtime column j is visible to
    realtime/candidate rows i with ts[j] < ts[i]; candidate columns only to
    themselves. ``full`` drops the time rule, ``causal`` uses position order;
    both keep candidates visible only to themselves. The diagonal is always 1.
    """
    tags = np.asarray(tags, dtype=np.int64)
    ts = np.asarray(timestamps, dtype=np.int64)
    if mode not in MASK_MODES:
        raise ConfigError(f"unknown mask_mode {mode!r}")
    n = tags.shape[0]
    static = (tags == Group.PROFILE) | (tags == Group.STATIC)
    rt = tags == Group.REALTIME
    cand = tags == Group.CANDIDATE
    eye = np.eye(n, dtype=bool)
    if mode == "dynamic":
        if np.any(ts[rt | cand] <= 0):
            raise DataError("realtime and candidate tokens need timestamps")
        m = np.zeros((n, n), dtype=bool)
        m[:, static] = True
        m[np.ix_(static, ~static)] = False
        readers = rt | cand
        m |= readers[:, None] & rt[None, :] & (ts[None, :] < ts[:, None])
    elif mode == "full":
        m = np.ones((n, n), dtype=bool)
    else:
        m = np.tril(np.ones((n, n), dtype=bool))
    m[:, cand] = False
    m |= eye
    return MaskMatrix(m.astype(np.float64), tags, ts)


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(cfg: HstuConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Encoder layers plus the two-logit output head. Projection biases start at zero."""
    d, g = cfg.d_model, N_GROUPS if cfg.use_gln else 1
    p: Dict[str, np.ndarray] = {}
    for l in range(cfg.n_layer):
        pre = f"layer{l}."
        for ln in ("gln1", "gln2"):
            p[pre + ln + ".gamma"] = np.ones((g, d))
            p[pre + ln + ".beta"] = np.zeros((g, d))
        for name in ("q", "k", "v", "u"):
            p[pre + name + ".w"] = _glorot(rng, d, d)
            p[pre + name + ".b"] = np.zeros(d)
        p[pre + "mlp.w1"] = _glorot(rng, d, d)
        p[pre + "mlp.b1"] = np.zeros(d)
        p[pre + "mlp.w2"] = _glorot(rng, d, d)
        p[pre + "mlp.b2"] = np.zeros(d)
    h = cfg.head_hidden
    p["head.w1"] = _glorot(rng, d, h)
    p["head.b1"] = np.zeros(h)
    p["head.w2"] = _glorot(rng, h, 2)
    p["head.b2"] = np.zeros(2)
    return p


def layer_view(params: Mapping[str, Tensor], layer: int) -> Dict[str, Tensor]:
    pre = f"layer{layer}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


# ----------------------------------------------------------------------------
# forward
# ----------------------------------------------------------------------------


def group_layer_norm(x: Tensor, tags: np.ndarray, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-token layer norm, affine parameters chosen by each token's group.

    ``gamma``/``beta`` have one row per group; with a single row every token
    shares it (plain LN).
    """
    tags = np.asarray(tags, dtype=np.int64)
    n_groups = gamma.shape[0]
    if n_groups == 1:
        tags = np.zeros_like(tags)
    elif tags.size and (tags.min() < 0 or tags.max() >= n_groups):
        raise ConfigError(f"group tag outside [0, {n_groups})")
    xn = T.normalize(x, eps)
    return T.add(T.mul(xn, T.take(gamma, tags)), T.take(beta, tags))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _as_batch(x: Tensor, mask: np.ndarray, tags: np.ndarray):
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), np.asarray(mask)[None], np.asarray(tags)[None], True
    return x, np.asarray(mask), np.asarray(tags), False


def _scale(mask: np.ndarray, cfg: HstuConfig, lengths: Optional[np.ndarray]) -> np.ndarray:
    """Mask divided by the per-sample normalizer, shaped (B, 1, L, L)."""
    b, n = mask.shape[0], mask.shape[-1]
    if cfg.normalizer == "fixed":
        norm = np.full(b, cfg.normalizer_value, dtype=np.float64)
    else:
        norm = np.full(b, n, dtype=np.float64) if lengths is None else np.asarray(lengths, dtype=np.float64)
    return (mask / norm[:, None, None])[:, None]


def hstu_layer_forward(x: Tensor, mask: np.ndarray, tags: np.ndarray, params: Mapping[str, Tensor],
                       cfg: HstuConfig, lengths: Optional[np.ndarray] = None, *, _scaled=None) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[-1] != cfg.d_model:
        raise T.DimensionError(f"token width {x.shape[-1]} != d_model {cfg.d_model}")
    xb, mb, tb, squeeze = _as_batch(x, mask, tags)
    bsz, n, d = xb.shape
    if mb.shape != (bsz, n, n) or tb.shape != (bsz, n):
        raise T.DimensionError(f"mask {mb.shape} / tags {tb.shape} do not match tokens {xb.shape}")
    h, dh = cfg.n_heads, cfg.head_dim
    scaled = _scale(mb, cfg, lengths) if _scaled is None else _scaled

    xn = group_layer_norm(xb, tb, params["gln1.gamma"], params["gln1.beta"], cfg.eps)

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (bsz, n, h, dh)), (0, 2, 1, 3))

    q = heads(_linear(xn, params["q.w"], params["q.b"]))
    k = heads(_linear(xn, params["k.w"], params["k.b"]))
    v = heads(_linear(xn, params["v.w"], params["v.b"]))
    u = _linear(xn, params["u.w"], params["u.b"])
    scores = T.silu(T.matmul(q, T.transpose(k, (0, 1, 3, 2))))
    mixed = T.matmul(T.mul(scores, scaled), v)
    mixed = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (bsz, n, d))
    gated = T.mul(mixed, u)
    y = group_layer_norm(gated, tb, params["gln2.gamma"], params["gln2.beta"], cfg.eps)
    y = _linear(T.silu(_linear(y, params["mlp.w1"], params["mlp.b1"])), params["mlp.w2"], params["mlp.b2"])
    out = T.add(y, xb)
    return T.reshape(out, (n, d)) if squeeze else out


def encode(x: Tensor, mask: np.ndarray, tags: np.ndarray, params: Mapping[str, Tensor],
           cfg: HstuConfig, lengths: Optional[np.ndarray] = None) -> Tensor:
    """``n_layer`` HSTU layers sharing one mask."""
    x = T.as_tensor(x)
    mb = np.asarray(mask)
    scaled = _scale(mb if mb.ndim == 3 else mb[None], cfg, lengths)
    for l in range(cfg.n_layer):
        x = hstu_layer_forward(x, mask, tags, layer_view(params, l), cfg, lengths, _scaled=scaled)
    return x


class ContractError(ValueError):
    pass


def head_forward(rows: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Two-layer head: (N, d) -> (N, 2) of [ctr_logit, ctcvr_logit]."""
    hidden = T.silu(_linear(rows, params["head.w1"], params["head.b1"]))
    return _linear(hidden, params["head.w2"], params["head.b2"])


def candidate_logits(encoded: Tensor, tags: np.ndarray, params: Mapping[str, Tensor]) -> Tensor:
    """Logit pairs for every candidate token of a single (L, d) sequence, in token order."""
    tags = np.asarray(tags)
    rows = np.nonzero(tags == Group.CANDIDATE)[0]
    if rows.size == 0:
        raise ContractError("no candidate tokens")
    return head_forward(T.take(encoded, rows), params)


def loss(logits: Tensor, click, purchase, weights=None) -> Tensor:
    """BCE(ctr_logit, click) + BCE(ctcvr_logit, click and purchase), weighted over candidates.

    ``weights`` default to a plain mean over candidates.
    """
    click = np.asarray(click, dtype=np.float64)
    purchase = np.asarray(purchase, dtype=np.float64)
    if np.any(purchase > click):
        raise DataError("purchase=1 requires click=1")
    n = logits.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    targets = np.stack([click, click * purchase], axis=1)
    per = T.bce_with_logits(logits, targets)
    return T.sum_all(T.mul(per, w[:, None]))


def to_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}
