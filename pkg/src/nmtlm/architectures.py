"""The five translation model variants, their losses and size accounting.

Every variant consumes a :class:`Batch` and predicts the same target tokens
(content plus EOS). EncDec feeds ``[start, y1 .. y_{m-1}]`` to its decoder.
The LM variants read the concatenation ``[X, y1 .. y_{m-1}]`` (with the start
token in front of the target segment only when it is a target-language
tag), so the last source position predicts the first target token.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .transformer import (NO_DROPOUT, ConfigError, LayerParams, PositionalEncoding, init_layer,
                          layer_param_count, linear, transformer_layer)

PAD, BOS, EOS = 0, 1, 2

FAMILIES = ("EncDec", "PrefixLM", "CausalLM")
VARIANT_NAMES = {
    "encdec": ("EncDec", False, False),
    "prefixlm": ("PrefixLM", False, False),
    "prefixlm_toponly": ("PrefixLM", True, False),
    "causallm": ("CausalLM", False, False),
    "causallm_tgtonly": ("CausalLM", False, True),
}


@dataclass(frozen=True)
class ModelVariant:
    family: str
    top_only: bool = False
    tgt_only: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.top_only and self.family != "PrefixLM":
            raise ConfigError(f"top_only requires family PrefixLM, got {self.family}")
        if self.tgt_only and self.family != "CausalLM":
            raise ConfigError(f"tgt_only requires family CausalLM, got {self.family}")

    @classmethod
    def from_name(cls, name):
        try:
            return cls(*VARIANT_NAMES[name.lower()])
        except KeyError:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANT_NAMES)}") from None

    @property
    def name(self):
        for k, v in VARIANT_NAMES.items():
            if v == (self.family, self.top_only, self.tgt_only):
                return k
        raise AssertionError("unreachable")

    @property
    def is_lm(self):
        return self.family != "EncDec"

    @property
    def mask_kind(self):
        return {"EncDec": None, "PrefixLM": "prefix_lm", "CausalLM": "causal_lm"}[self.family]

    def table_row(self):
        """Objective terms, structure, source mask and sharing of this variant."""
        return {
            "src_lm_loss": self.family == "CausalLM" and not self.tgt_only,
            "tgt_loss": True,
            "structure": "TopOnly" if (self.family == "EncDec" or self.top_only) else "LayerWise",
            "src_mask": "Causal" if self.family == "CausalLM" else "Full",
            "parameter_sharing": self.is_lm,
        }


ALL_VARIANTS = tuple(ModelVariant.from_name(n) for n in VARIANT_NAMES)


@dataclass
class ModelConfig:
    variant: ModelVariant
    d: int = 64
    d_ff: int = 256
    L: int = 1
    heads: int = 4
    vocab_size: int = 512
    norm_placement: str = "post"
    dropout: float = 0.1
    label_smoothing: float = 0.1
    tie_lm_parameters: bool = True
    scale_mode: str = "deep"
    tie_embeddings: bool = False
    restart_positions: bool = True
    max_len: int = 256
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.variant, str):
            self.variant = ModelVariant.from_name(self.variant)
        self.validate()

    def validate(self):
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.d < 1 or self.d_ff < 1 or self.heads < 1:
            raise ConfigError("d, d_ff and heads must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.norm_placement not in ("pre", "post"):
            raise ConfigError(f"norm_placement must be 'pre' or 'post', got {self.norm_placement!r}")
        if self.scale_mode not in ("deep", "wide"):
            raise ConfigError(f"scale_mode must be 'deep' or 'wide', got {self.scale_mode!r}")
        if not 0 <= self.dropout < 1 or not 0 <= self.label_smoothing < 1:
            raise ConfigError("dropout and label_smoothing must lie in [0, 1)")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size too small")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def base(cls, variant, **kw):
        return cls(variant=variant, d=512, d_ff=2048, heads=8, **kw)

    @classmethod
    def big(cls, variant, **kw):
        return cls(variant=variant, d=1024, d_ff=4096, heads=16, **kw)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def widened(self):
        return self.replace(d_ff=3 * self.d_ff, scale_mode="wide")

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["variant"] = self.variant.name
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --------------------------------------------------------------- model state


def stack_names(config):
    if config.variant.family == "EncDec":
        return ("enc", "dec")
    if config.tie_lm_parameters:
        return ("lm",)
    return ("src", "tgt")


@dataclass
class ModelState:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def layers(self, stack):
        return [LayerParams.from_named(self.params, f"{stack}.{l}", l) for l in range(self.config.L)]

    def final_norm(self, stack):
        if self.config.norm_placement != "pre":
            return None
        return self.params[f"{stack}.final_g"], self.params[f"{stack}.final_b"]

    def output_weights(self):
        if self.config.tie_embeddings:
            return T.transpose(self.params["embed"], (1, 0)), self.params["out_b"]
        return self.params["out_w"], self.params["out_b"]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def clone(self):
        return ModelState(self.config, {k: Tensor(v.value.copy(), requires_grad=True)
                                        for k, v in self.params.items()})

    def manifest(self):
        return [(k, tuple(v.shape)) for k, v in self.params.items()]


def init_model(config, seed=0):
    rng = T.rng_stream(seed, "init")
    dtype = np.dtype(config.dtype)
    d, V = config.d, config.vocab_size
    params = {"embed": Tensor(rng.normal(0, d ** -0.5, size=(V, d)).astype(dtype), requires_grad=True)}
    for stack in stack_names(config):
        cross = stack == "dec"
        for l in range(config.L):
            params.update(init_layer(rng, d, config.d_ff, l, cross=cross, dtype=dtype).named(f"{stack}.{l}"))
        if config.norm_placement == "pre":
            params[f"{stack}.final_g"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
            params[f"{stack}.final_b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    if not config.tie_embeddings:
        lim = math.sqrt(6.0 / (d + V))
        params["out_w"] = Tensor(rng.uniform(-lim, lim, size=(d, V)).astype(dtype), requires_grad=True)
    params["out_b"] = Tensor(np.zeros(V, dtype=dtype), requires_grad=True)
    return ModelState(config, params)


# --------------------------------------------------------------- batches


@dataclass
class Batch:
    """Right-padded token arrays for a group of sentence pairs.

    ``tgt`` holds target content plus EOS; ``start`` is the decoder start
    token (BOS or a target-language tag); ``lm_start`` says whether that
    token is also fed to LM variants (true only for target-side tags).
    """
    src: np.ndarray
    src_len: np.ndarray
    tgt: np.ndarray
    tgt_len: np.ndarray
    start: np.ndarray
    lm_start: np.ndarray

    @property
    def size(self):
        return len(self.src_len)

    @property
    def n_tgt_tokens(self):
        return int(self.tgt_len.sum())


def make_batch(sources, targets, starts=None, lm_starts=None):
    if len(sources) != len(targets) or not sources:
        raise ValueError("need equal, nonzero numbers of sources and targets")
    for x, y in zip(sources, targets):
        if len(x) < 1 or len(y) < 1:
            raise ValueError("empty source or target sequence")
    B = len(sources)
    src_len = np.array([len(x) for x in sources], dtype=np.int64)
    tgt_len = np.array([len(y) for y in targets], dtype=np.int64)
    src = np.zeros((B, src_len.max()), dtype=np.int64)
    tgt = np.zeros((B, tgt_len.max()), dtype=np.int64)
    for b, (x, y) in enumerate(zip(sources, targets)):
        src[b, :len(x)] = x
        tgt[b, :len(y)] = y
    start = np.full(B, BOS, dtype=np.int64) if starts is None else np.asarray(starts, dtype=np.int64)
    lm_start = np.zeros(B, dtype=bool) if lm_starts is None else np.asarray(lm_starts, dtype=bool)
    return Batch(src, src_len, tgt, tgt_len, start, lm_start)


def batch_from_pairs(pairs):
    return make_batch([p.src for p in pairs], [p.tgt for p in pairs],
                      [p.start for p in pairs], [p.lm_start for p in pairs])


@dataclass
class ForwardOutput:
    tgt_logits: Tensor
    tgt_targets: np.ndarray
    src_logits: Tensor | None = None
    src_targets: np.ndarray | None = None


# --------------------------------------------------------------- forward passes


_PE_CACHE = {}


def _pe(config):
    key = (config.d, config.max_len)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = PositionalEncoding(config.d, config.max_len)
    return _PE_CACHE[key]


def _embed(state, ids, pos, drop):
    cfg = state.config
    e = T.scale(T.embedding(state.params["embed"], ids), math.sqrt(cfg.d))
    pe = _pe(cfg).encode(pos).astype(cfg.dtype)
    return drop(T.add(e, pe))


def _finish(state, stack, h):
    fn = state.final_norm(stack)
    return T.layer_norm(h, *fn) if fn is not None else h


def _project(state, h):
    w, b = state.output_weights()
    return linear(h, w, b)


def _valid(lengths, width):
    return np.arange(width)[None, :] < lengths[:, None]


def _encode(state, stack, src, src_len, drop):
    cfg = state.config
    Tx = src.shape[1]
    pos = np.broadcast_to(np.arange(Tx), src.shape)
    h = _embed(state, src, pos, drop)
    mask = np.broadcast_to(_valid(src_len, Tx)[:, None, :], (len(src_len), Tx, Tx))
    for layer in state.layers(stack):
        h = transformer_layer(h, layer, cfg.heads, mask, cfg.norm_placement, drop=drop)
    return h


def forward_encdec(state, batch, drop=NO_DROPOUT):
    """EncDec: encoder over X, causal decoder with cross-attention to X^L."""
    cfg = state.config
    if cfg.variant.family != "EncDec":
        raise ConfigError("forward_encdec needs an EncDec model")
    enc = _finish(state, "enc", _encode(state, "enc", batch.src, batch.src_len, drop))
    B, Ty = batch.tgt.shape
    Tx = batch.src.shape[1]
    dec_in = np.concatenate([batch.start[:, None], batch.tgt[:, :-1]], axis=1)
    pos = np.broadcast_to(np.arange(Ty), dec_in.shape)
    h = _embed(state, dec_in, pos, drop)
    tv = _valid(batch.tgt_len, Ty)
    self_mask = np.tril(np.ones((Ty, Ty), dtype=bool))[None] & tv[:, None, :]
    cross_mask = np.broadcast_to(_valid(batch.src_len, Tx)[:, None, :], (B, Ty, Tx))
    for layer in state.layers("dec"):
        h = transformer_layer(h, layer, cfg.heads, self_mask, cfg.norm_placement,
                              context=enc, cross_mask=cross_mask, drop=drop)
    h = _finish(state, "dec", h)
    return ForwardOutput(_project(state, h), np.where(tv, batch.tgt, PAD))


@dataclass
class _Packed:
    ids: np.ndarray
    pos: np.ndarray
    mask: np.ndarray
    is_tgt: np.ndarray
    tgt_rows: np.ndarray
    src_rows: np.ndarray


def _pack_lm(batch, mask_kind, restart):
    """Lay out [X, (tag), y1 .. y_{m-1}] per row with per-example masks."""
    B = batch.size
    seqs, segs = [], []
    for b in range(B):
        x = batch.src[b, :batch.src_len[b]]
        y = batch.tgt[b, :batch.tgt_len[b] - 1]
        head = [batch.start[b]] if batch.lm_start[b] else []
        seqs.append(np.concatenate([x, head, y]).astype(np.int64))
        segs.append(len(x))
    lens = np.array([len(s) for s in seqs])
    S = lens.max()
    ids = np.zeros((B, S), dtype=np.int64)
    pos = np.zeros((B, S), dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = s
        nx = segs[b]
        tpos = np.arange(len(s) - nx) + (0 if restart else nx)
        pos[b, :len(s)] = np.concatenate([np.arange(nx), tpos])
    nsrc = np.array(segs)
    i = np.arange(S)[:, None]
    j = np.arange(S)[None, :]
    mask = np.broadcast_to(i >= j, (B, S, S)).copy()
    if mask_kind == "prefix_lm":
        mask |= (j[None] < nsrc[:, None, None])
    mask &= (j[None] < lens[:, None, None])
    mask |= np.eye(S, dtype=bool)[None]
    is_tgt = np.arange(S)[None, :] >= nsrc[:, None]
    Ty = batch.tgt.shape[1]
    first = nsrc - 1 + batch.lm_start.astype(np.int64)
    tgt_rows = np.minimum(first[:, None] + np.arange(Ty)[None, :], S - 1)
    Tx = batch.src.shape[1]
    src_rows = np.minimum(np.arange(max(Tx - 1, 1))[None, :], (nsrc - 1)[:, None].clip(0))
    return _Packed(ids, pos, mask, is_tgt, tgt_rows, src_rows)


def _mix(a, b, is_tgt):
    m = is_tgt[..., None].astype(a.dtype)
    return T.add(T.mul(a, 1 - m), T.mul(b, m))


def _segmented_layer(h, p_src, p_tgt, is_tgt, mask, cfg, drop):
    """Layer-wise LM layer with separate source/target weights (untied)."""
    from .transformer import attention_core, feed_forward

    def norm(x, k):
        return _mix(T.layer_norm(x, *p_src.norms[k]), T.layer_norm(x, *p_tgt.norms[k]), is_tgt)

    def lin(x, name, attn=True):
        ps, pt = (p_src.self_attn, p_tgt.self_attn) if attn else (p_src, p_tgt)
        return _mix(linear(x, getattr(ps, name + "_w"), getattr(ps, name + "_b")),
                    linear(x, getattr(pt, name + "_w"), getattr(pt, name + "_b")), is_tgt)

    def attn(x):
        a = attention_core(lin(x, "q"), lin(x, "k"), lin(x, "v"), mask, cfg.heads, drop)
        return lin(a, "o")

    def ffn(x):
        return _mix(feed_forward(x, p_src, drop), feed_forward(x, p_tgt, drop), is_tgt)

    for k, fn in enumerate((attn, ffn)):
        if cfg.norm_placement == "pre":
            h = T.add(h, drop(fn(norm(h, k))))
        else:
            h = norm(T.add(h, drop(fn(h))), k)
    return h


def forward_lm(state, batch, mask_kind=None, drop=NO_DROPOUT):
    """Layer-wise LM over the concatenation with a prefix_lm or causal_lm mask."""
    cfg = state.config
    mask_kind = mask_kind or cfg.variant.mask_kind
    if mask_kind not in ("prefix_lm", "causal_lm"):
        raise ValueError(f"forward_lm needs prefix_lm or causal_lm, got {mask_kind!r}")
    if np.any(batch.src_len < 1):
        raise ValueError("empty source sequence")
    pk = _pack_lm(batch, mask_kind, cfg.restart_positions)
    h = _embed(state, pk.ids, pk.pos, drop)
    if cfg.tie_lm_parameters:
        for layer in state.layers("lm"):
            h = transformer_layer(h, layer, cfg.heads, pk.mask, cfg.norm_placement, drop=drop)
        h = _finish(state, "lm", h)
    else:
        for ps, pt in zip(state.layers("src"), state.layers("tgt")):
            h = _segmented_layer(h, ps, pt, pk.is_tgt, pk.mask, cfg, drop)
        if cfg.norm_placement == "pre":
            h = _mix(_finish(state, "src", h), _finish(state, "tgt", h), pk.is_tgt)
    tv = _valid(batch.tgt_len, batch.tgt.shape[1])
    out = ForwardOutput(_project(state, T.gather_rows(h, pk.tgt_rows)), np.where(tv, batch.tgt, PAD))
    if cfg.variant.family == "CausalLM":
        Tx = batch.src.shape[1]
        src_t = np.zeros((batch.size, max(Tx - 1, 1)), dtype=np.int64)
        if Tx > 1:
            sv = _valid(batch.src_len - 1, Tx - 1)
            src_t = np.where(sv, batch.src[:, 1:], PAD)
        out.src_logits = _project(state, T.gather_rows(h, pk.src_rows))
        out.src_targets = src_t
    return out


def forward_prefixlm_toponly(state, batch, drop=NO_DROPOUT):
    """PrefixLM+TopOnly: every target layer attends jointly to [X^L ; causal Y prefix]."""
    cfg = state.config
    src_stack, tgt_stack = ("lm", "lm") if cfg.tie_lm_parameters else ("src", "tgt")
    if np.any(batch.src_len < 1):
        raise ValueError("empty source sequence")
    xl = _encode(state, src_stack, batch.src, batch.src_len, drop)
    B, Tx = batch.src.shape
    y_in, y_len = [], []
    for b in range(B):
        head = [batch.start[b]] if batch.lm_start[b] else []
        y_in.append(np.concatenate([head, batch.tgt[b, :batch.tgt_len[b] - 1]]).astype(np.int64))
        y_len.append(len(y_in[-1]))
    y_len = np.array(y_len)
    Tyi = int(y_len.max())
    src_final = _finish(state, src_stack, xl)
    if Tyi > 0:
        ids = np.zeros((B, Tyi), dtype=np.int64)
        for b, s in enumerate(y_in):
            ids[b, :len(s)] = s
        start = 0 if cfg.restart_positions else batch.src_len[:, None]
        pos = np.arange(Tyi)[None, :] + start
        h = _embed(state, ids, np.broadcast_to(pos, ids.shape), drop)
        sv = _valid(batch.src_len, Tx)
        yv = _valid(y_len, Tyi)
        causal = np.tril(np.ones((Tyi, Tyi), dtype=bool))[None] & yv[:, None, :]
        causal |= np.eye(Tyi, dtype=bool)[None]
        mask = np.concatenate([np.broadcast_to(sv[:, None, :], (B, Tyi, Tx)), causal], axis=2)
        for layer in state.layers(tgt_stack):
            h = transformer_layer(h, layer, cfg.heads, mask, cfg.norm_placement, context=xl,
                                  joint=True, drop=drop)
        h = _finish(state, tgt_stack, h)
        allh = T.concat([src_final, h], axis=1)
    else:
        allh = src_final
    Ty = batch.tgt.shape[1]
    k = np.arange(Ty)[None, :]
    # without a fed start token, the last source position predicts the first target
    rows = np.where(batch.lm_start[:, None], Tx + k,
                    np.where(k == 0, (batch.src_len - 1)[:, None], Tx + k - 1))
    rows = np.minimum(rows, allh.shape[1] - 1)
    tv = _valid(batch.tgt_len, Ty)
    return ForwardOutput(_project(state, T.gather_rows(allh, rows)), np.where(tv, batch.tgt, PAD))


def forward(state, batch, drop=NO_DROPOUT):
    v = state.config.variant
    if v.family == "EncDec":
        return forward_encdec(state, batch, drop)
    if v.top_only:
        return forward_prefixlm_toponly(state, batch, drop)
    return forward_lm(state, batch, v.mask_kind, drop)


# --------------------------------------------------------------- losses


@dataclass
class LossBreakdown:
    total: Tensor
    src: float
    tgt: float


def loss_tgt(logits, targets, epsilon):
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits cover {logits.shape[:-1]} positions but targets {targets.shape}")
    return T.cross_entropy_label_smoothed(logits, targets, epsilon, PAD)


def loss_causallm(src_logits, tgt_logits, src_targets, tgt_targets, epsilon, tgt_only=False):
    """Returns (total, src_part, tgt_part); src_part is 0.0 when absent or disabled."""
    tgt_part = loss_tgt(tgt_logits, tgt_targets, epsilon)
    if tgt_only or src_logits is None or not np.any(np.asarray(src_targets) != PAD):
        return tgt_part, 0.0, tgt_part
    src_part = loss_tgt(src_logits, src_targets, epsilon)
    return T.add(src_part, tgt_part), src_part, tgt_part


def compute_loss(state, out, epsilon=None):
    cfg = state.config
    eps = cfg.label_smoothing if epsilon is None else epsilon
    if cfg.variant.family == "CausalLM":
        total, src, tgt = loss_causallm(out.src_logits, out.tgt_logits, out.src_targets,
                                        out.tgt_targets, eps, cfg.variant.tgt_only)
        src_v = float(src.value) if isinstance(src, Tensor) else float(src)
        return LossBreakdown(total, src_v, float(tgt.value))
    tgt = loss_tgt(out.tgt_logits, out.tgt_targets, eps)
    return LossBreakdown(tgt, 0.0, float(tgt.value))


# --------------------------------------------------------------- accounting


def param_count(config):
    """Non-embedding parameters: every stack weight, excluding embedding and softmax."""
    d, d_ff, L = config.d, config.d_ff, config.L
    final = 2 * d if config.norm_placement == "pre" else 0
    if config.variant.family == "EncDec":
        return L * (layer_param_count(d, d_ff) + layer_param_count(d, d_ff, cross=True)) + 2 * final
    stacks = 1 if config.tie_lm_parameters else 2
    return stacks * (L * layer_param_count(d, d_ff) + final)


def _attn_flops(nq, nk, d, self_attn=True):
    proj = 8 * nq * d * d if self_attn else 4 * nq * d * d + 4 * nk * d * d
    return proj, 4 * nq * nk * d


@dataclass
class FlopsEstimate:
    projections: int
    attention: int
    ffn: int
    convention: str = "forward pass only; one multiply-accumulate = 2 FLOPs; embeddings and softmax excluded"

    @property
    def total(self):
        return self.projections + self.attention + self.ffn


def flops_estimate(config, src_len, tgt_len):
    if src_len < 1 or tgt_len < 1:
        raise ValueError("lengths must be >= 1")
    d, f, L = config.d, config.d_ff, config.L
    nx, ny = src_len, tgt_len
    parts = np.zeros(3, dtype=object)

    def add(nq, nk, self_attn=True, ffn_tokens=None):
        p, a = _attn_flops(nq, nk, d, self_attn)
        parts[0] += p
        parts[1] += a
        if ffn_tokens is not None:
            parts[2] += 4 * ffn_tokens * d * f

    v = config.variant
    for _ in range(L):
        if v.family == "EncDec":
            add(nx, nx, ffn_tokens=nx)
            add(ny, ny, ffn_tokens=ny)
            add(ny, nx, self_attn=False)
        elif v.top_only:
            add(nx, nx, ffn_tokens=nx)
            p, a = _attn_flops(ny, nx + ny, d, self_attn=False)
            parts[0] += p
            parts[1] += a
            parts[2] += 4 * ny * d * f
        else:
            add(nx + ny, nx + ny, ffn_tokens=nx + ny)
    return FlopsEstimate(int(parts[0]), int(parts[1]), int(parts[2]))


@dataclass
class AlignedConfig:
    config: ModelConfig
    params: int
    target_params: int

    @property
    def mismatch(self):
        return abs(self.params - self.target_params) / self.target_params


def align_configs(target, variant=None):
    """Deep and wide LM configs parameter-matched to an EncDec config."""
    if target.variant.family != "EncDec":
        raise ConfigError("align_configs needs an EncDec target config")
    variant = variant or ModelVariant("PrefixLM")
    if isinstance(variant, str):
        variant = ModelVariant.from_name(variant)
    goal = param_count(target)
    base = target.replace(variant=variant)
    L = 1
    while param_count(base.replace(L=L)) < goal:
        L += 1
    deep = base.replace(L=L, scale_mode="deep", norm_placement="pre" if L > 12 else target.norm_placement)
    slope = target.L * (2 * target.d + 1) * (1 if base.tie_lm_parameters else 2)
    fixed = param_count(base.replace(d_ff=1)) - slope
    guess = (goal - fixed) / slope
    best = None
    for cand in {max(1, math.floor(guess)), max(1, math.ceil(guess))}:
        n = param_count(base.replace(d_ff=cand))
        key = (abs(n - goal), cand)
        if best is None or key < best[0]:
            best = (key, cand)
    wide = base.replace(d_ff=best[1], scale_mode="wide")
    return {"deep": AlignedConfig(deep, param_count(deep), goal),
            "wide": AlignedConfig(wide, param_count(wide), goal)}


# --------------------------------------------------------------- checkpoint files


CHECKPOINT_MAGIC = "nmtlm-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, state, meta=None, extra=None):
    """Write ``manifest.txt`` plus one little-endian float32 file per tensor.

    ``extra`` maps additional names (e.g. optimizer moments) to arrays.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
             "config " + json.dumps(state.config.to_dict(), sort_keys=True),
             "meta " + json.dumps(meta or {}, sort_keys=True)]
    arrays = [(k, v.value) for k, v in state.params.items()]
    arrays += list((extra or {}).items())
    for i, (name, arr) in enumerate(arrays):
        fname = f"{i:05d}.f32"
        np.asarray(arr, dtype="<f4").tofile(path / fname)
        shape = ",".join(str(s) for s in np.shape(arr)) or "-"
        kind = "param" if i < len(state.params) else "extra"
        lines.append(f"{kind} {name} {shape} {fname}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Returns (ModelState, meta, extra arrays)."""
    path = Path(path)
    lines = (path / "manifest.txt").read_text().splitlines()
    magic, version = lines[0].split()
    if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint header {lines[0]!r}")
    config = ModelConfig.from_dict(json.loads(lines[1].split(" ", 1)[1]))
    meta = json.loads(lines[2].split(" ", 1)[1])
    dtype = np.dtype(config.dtype)
    params, extra = {}, {}
    for line in lines[3:]:
        kind, name, shape, fname = line.split()
        shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        arr = np.fromfile(path / fname, dtype="<f4").reshape(shape)
        if kind == "param":
            params[name] = Tensor(arr.astype(dtype), requires_grad=True)
        else:
            extra[name] = arr
    return ModelState(config, params), meta, extra
