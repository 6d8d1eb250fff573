"""Attention masks and the shared transformer building blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_KINDS = ("enc_self", "dec_self", "cross", "prefix_lm", "causal_lm")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionMaskSpec:
    kind: str
    src_len: int
    tgt_len: int = 0

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")


def build_mask(spec):
    """Boolean attention mask, rows are queries and columns keys.

    prefix_lm and causal_lm masks cover the concatenation [X, Y]. With
    1-based i (query) and j (key): prefix_lm allows i >= j or j <= |X|;
    causal_lm allows i >= j.
    """
    nx, ny = spec.src_len, spec.tgt_len
    if spec.kind == "enc_self":
        if nx < 1:
            raise ValueError(f"enc_self mask needs src_len >= 1, got {nx}")
        return np.ones((nx, nx), dtype=bool)
    if spec.kind == "dec_self":
        if ny < 1:
            raise ValueError(f"dec_self mask needs tgt_len >= 1, got {ny}")
        return np.tril(np.ones((ny, ny), dtype=bool))
    if nx < 1 or ny < 1:
        raise ValueError(f"{spec.kind} mask needs positive lengths, got |X|={nx}, |Y|={ny}")
    if spec.kind == "cross":
        return np.ones((ny, nx), dtype=bool)
    n = nx + ny
    m = np.tril(np.ones((n, n), dtype=bool))
    if spec.kind == "prefix_lm":
        m[:, :nx] = True
    return m


def joint_mask(src_len, tgt_len):
    """Target-query mask over keys [X^L ; Y]: all source plus the causal target prefix."""
    if src_len < 1 or tgt_len < 1:
        raise ValueError("joint mask needs positive lengths")
    return np.concatenate([np.ones((tgt_len, src_len), dtype=bool),
                           np.tril(np.ones((tgt_len, tgt_len), dtype=bool))], axis=1)


# --------------------------------------------------------------- positions


@dataclass
class PositionalEncoding:
    d: int
    max_len: int = 512
    restart_at_target: bool = True
    _table: np.ndarray | None = field(default=None, repr=False, compare=False)

    def table(self):
        if self._table is None:
            self._table = sinusoid(np.arange(self.max_len), self.d)
        return self._table

    def encode(self, pos):
        pos = np.asarray(pos)
        if pos.size and pos.max() >= self.max_len:
            return sinusoid(pos, self.d)
        return self.table()[pos]


def sinusoid(pos, d):
    pos = np.asarray(pos, dtype=np.float64)
    i = np.arange(d) // 2
    angle = pos[..., None] / np.power(10000.0, 2 * i / d)
    return np.where(np.arange(d) % 2 == 0, np.sin(angle), np.cos(angle))


def position_ids(src_len, tgt_len, restart_at_target=True):
    if src_len < 0 or tgt_len < 0:
        raise ValueError("lengths must be >= 0")
    start = 0 if restart_at_target else src_len
    return np.concatenate([np.arange(src_len), start + np.arange(tgt_len)]).astype(np.int64)


def positions(src_len, tgt_len, encoding):
    return encoding.encode(position_ids(src_len, tgt_len, encoding.restart_at_target))


# --------------------------------------------------------------- parameters


@dataclass
class AttentionParams:
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    o_w: Tensor
    o_b: Tensor

    NAMES = ("q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "o_w", "o_b")

    def named(self, prefix):
        return {f"{prefix}.{n}": getattr(self, n) for n in self.NAMES}


@dataclass
class LayerParams:
    index: int
    self_attn: AttentionParams
    ffn_in_w: Tensor
    ffn_in_b: Tensor
    ffn_out_w: Tensor
    ffn_out_b: Tensor
    norms: list
    cross_attn: AttentionParams | None = None

    def __post_init__(self):
        d = self.self_attn.q_w.shape[0]
        d_ff = self.ffn_in_w.shape[1]
        if self.ffn_in_w.shape != (d, d_ff) or self.ffn_out_w.shape != (d_ff, d):
            raise ConfigError("feed-forward shapes inconsistent with model width")
        want = 3 if self.cross_attn is not None else 2
        if len(self.norms) != want:
            raise ConfigError(f"layer needs {want} norm pairs, got {len(self.norms)}")

    @property
    def d(self):
        return self.self_attn.q_w.shape[0]

    def named(self, prefix):
        out = self.self_attn.named(f"{prefix}.self")
        if self.cross_attn is not None:
            out.update(self.cross_attn.named(f"{prefix}.cross"))
        out.update({f"{prefix}.ffn_in_w": self.ffn_in_w, f"{prefix}.ffn_in_b": self.ffn_in_b,
                    f"{prefix}.ffn_out_w": self.ffn_out_w, f"{prefix}.ffn_out_b": self.ffn_out_b})
        for k, (g, b) in enumerate(self.norms):
            out[f"{prefix}.norm{k}_g"] = g
            out[f"{prefix}.norm{k}_b"] = b
        return out

    @classmethod
    def from_named(cls, params, prefix, index):
        def attn(sub):
            return AttentionParams(*(params[f"{prefix}.{sub}.{n}"] for n in AttentionParams.NAMES))

        cross = attn("cross") if f"{prefix}.cross.q_w" in params else None
        n_norms = 3 if cross is not None else 2
        return cls(index=index, self_attn=attn("self"),
                   ffn_in_w=params[f"{prefix}.ffn_in_w"], ffn_in_b=params[f"{prefix}.ffn_in_b"],
                   ffn_out_w=params[f"{prefix}.ffn_out_w"], ffn_out_b=params[f"{prefix}.ffn_out_b"],
                   norms=[(params[f"{prefix}.norm{k}_g"], params[f"{prefix}.norm{k}_b"])
                          for k in range(n_norms)],
                   cross_attn=cross)


def _xavier(rng, fan_in, fan_out, dtype):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype), requires_grad=True)


def _zeros(n, dtype):
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


def _ones(n, dtype):
    return Tensor(np.ones(n, dtype=dtype), requires_grad=True)


def init_attention(rng, d, dtype):
    ws = []
    for _ in range(4):
        ws += [_xavier(rng, d, d, dtype), _zeros(d, dtype)]
    return AttentionParams(*ws)


def init_layer(rng, d, d_ff, index, cross=False, dtype=np.float32):
    self_attn = init_attention(rng, d, dtype)
    cross_attn = init_attention(rng, d, dtype) if cross else None
    norms = [(_ones(d, dtype), _zeros(d, dtype)) for _ in range(3 if cross else 2)]
    return LayerParams(index=index, self_attn=self_attn,
                       ffn_in_w=_xavier(rng, d, d_ff, dtype), ffn_in_b=_zeros(d_ff, dtype),
                       ffn_out_w=_xavier(rng, d_ff, d, dtype), ffn_out_b=_zeros(d, dtype),
                       norms=norms, cross_attn=cross_attn)


def layer_param_count(d, d_ff, cross=False):
    attn = 4 * (d * d + d)
    ffn = 2 * d * d_ff + d_ff + d
    norms = (3 if cross else 2) * 2 * d
    return attn * (2 if cross else 1) + ffn + norms


# --------------------------------------------------------------- computation


class Dropout:
    """Dropout site generator; every call draws fresh noise from ``rng``."""

    def __init__(self, rate=0.0, rng=None, training=False):
        self.rate = rate
        self.rng = rng
        self.training = training and rate > 0

    def __call__(self, x):
        if not self.training:
            return x
        return T.dropout(x, self.rate, self.rng, True)


NO_DROPOUT = Dropout()


def linear(x, w, b):
    return T.add(T.matmul(x, w), b)


def split_heads(x, heads):
    B, n, d = x.shape
    return T.transpose(T.reshape(x, (B, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x):
    B, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, n, h * dh))


def attention_core(q, k, v, mask, heads, drop=NO_DROPOUT):
    """Scaled dot-product attention on projected [B, n, d] inputs.

    ``mask`` broadcasts against [B, nq, nk]; masked keys get weight 0.
    """
    d = q.shape[-1]
    if d % heads:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d // heads))
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = mask[:, None]
    weights = drop(T.softmax_masked(scores, mask))
    return merge_heads(T.matmul(weights, vh))


def _batched(x):
    return x if x.value.ndim == 3 else T.reshape(x, (1,) + x.shape)


def multi_head_attention(queries, keys_values, mask, params, heads, drop=NO_DROPOUT):
    """Multi-head attention; inputs are [n, d] or batched [B, n, d]."""
    squeeze = queries.value.ndim == 2
    q_in, kv_in = _batched(queries), _batched(keys_values)
    d = q_in.shape[-1]
    if d % heads:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    q = linear(q_in, params.q_w, params.q_b)
    k = linear(kv_in, params.k_w, params.k_b)
    v = linear(kv_in, params.v_w, params.v_b)
    out = linear(attention_core(q, k, v, mask, heads, drop), params.o_w, params.o_b)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out


def feed_forward(x, params, drop=NO_DROPOUT):
    h = drop(T.relu(linear(x, params.ffn_in_w, params.ffn_in_b)))
    return linear(h, params.ffn_out_w, params.ffn_out_b)


def _sublayer(x, fn, norm, placement, drop):
    g, b = norm
    if placement == "pre":
        return T.add(x, drop(fn(T.layer_norm(x, g, b))))
    return T.layer_norm(T.add(x, drop(fn(x))), g, b)


def transformer_layer(x, params, heads, self_mask, norm_placement="post", context=None,
                      cross_mask=None, joint=False, drop=NO_DROPOUT):
    """One transformer layer on [n, d] or [B, n, d] input.

    Sublayers: self-attention, then cross-attention over ``context`` (when
    given and the layer owns cross-attention weights), then ReLU FFN. With
    ``joint=True`` the self-attention keys are [context ; x] under a single
    softmax and ``self_mask`` has shape [n, |context| + n].
    """
    if norm_placement not in ("pre", "post"):
        raise ConfigError(f"norm_placement must be 'pre' or 'post', got {norm_placement!r}")
    squeeze = x.value.ndim == 2
    x = _batched(x)
    if context is not None:
        context = _batched(context)
    if context is not None and not joint and cross_mask is None:
        raise ValueError("context provided without a cross-attention mask")
    if cross_mask is not None and params.cross_attn is None:
        raise ValueError("cross-attention mask given to a layer without cross-attention")

    if joint:
        if context is None:
            raise ValueError("joint attention needs a context")
        n_ctx = context.shape[1]
        g, b = params.norms[0]
        if norm_placement == "pre":
            h = T.layer_norm(T.concat([context, x], axis=1), g, b)
            q_in = T.gather_rows(h, np.broadcast_to(np.arange(n_ctx, n_ctx + x.shape[1]),
                                                    (x.shape[0], x.shape[1])))
            x = T.add(x, drop(multi_head_attention(q_in, h, self_mask, params.self_attn,
                                                   heads, drop)))
        else:
            kv = T.concat([context, x], axis=1)
            a = multi_head_attention(x, kv, self_mask, params.self_attn, heads, drop)
            x = T.layer_norm(T.add(x, drop(a)), g, b)
    else:
        x = _sublayer(x, lambda h: multi_head_attention(h, h, self_mask, params.self_attn, heads, drop),
                      params.norms[0], norm_placement, drop)
    k = 1
    if params.cross_attn is not None and cross_mask is not None:
        x = _sublayer(x, lambda h: multi_head_attention(h, context, cross_mask, params.cross_attn,
                                                        heads, drop),
                      params.norms[1], norm_placement, drop)
        k = 2
    elif params.cross_attn is not None:
        raise ValueError("decoder layer needs a context and a cross-attention mask")
    x = _sublayer(x, lambda h: feed_forward(h, params, drop), params.norms[k], norm_placement, drop)
    if squeeze:
        x = T.reshape(x, x.shape[1:])
    return x
