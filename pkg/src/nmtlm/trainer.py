"""Training loop: Adam with warmup / inverse-sqrt schedule, clipping,
checkpointing with optimizer state, and checkpoint averaging."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architectures import ModelState, compute_loss, forward, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, rng_stream
from .transformer import Dropout

log = logging.getLogger("nmtlm.train")


@dataclass
class TrainConfig:
    steps: int = 2000
    warmup_steps: int = 400
    scale: float = 1.0
    label_smoothing: float = 0.1
    dropout: float = 0.1
    checkpoint_interval: int = 0
    keep_checkpoints: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 1.0
    log_interval: int = 100

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)


def lr_schedule(t, W, d, scale=1.0):
    """Linear warmup to ``scale / sqrt(d * W)`` at t = W, then t^-1/2 decay."""
    if t < 1:
        raise ValueError("step must be >= 1")
    return scale * d ** -0.5 * min(t ** -0.5, t * W ** -1.5)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step, fingerprint, value):
        super().__init__(f"non-finite loss {value} at step {step} (batch {fingerprint})")
        self.step = step
        self.fingerprint = fingerprint


def batch_fingerprint(batch):
    h = 0
    for arr in (batch.src, batch.tgt, batch.start, batch.lm_start):
        h = zlib.crc32(np.ascontiguousarray(arr).tobytes(), h)
    return f"{h:08x}"


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_extra(self):
        out = {}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    @classmethod
    def from_extra(cls, extra, step, dtype):
        st = cls(step)
        for name, arr in extra.items():
            kind, _, pname = name.partition(".")[2].partition(".")
            getattr(st, kind)[pname] = arr.astype(dtype)
        return st


def clip_grads(params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    sq = sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm and norm > max_norm:
        c = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(c)
    return norm


def adam_update(state, opt, lr, cfg):
    opt.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** opt.step
    c2 = 1 - b2 ** opt.step
    for name, p in state.params.items():
        if p.grad is None:
            continue
        dt = p.value.dtype.type
        m = opt.m.setdefault(name, np.zeros_like(p.value))
        v = opt.v.setdefault(name, np.zeros_like(p.value))
        m *= dt(b1)
        m += dt(1 - b1) * p.grad
        v *= dt(b2)
        v += dt(1 - b2) * np.square(p.grad)
        p.value -= dt(lr / c1) * m / (np.sqrt(v / dt(c2)) + dt(cfg.adam_eps))


@dataclass
class StepResult:
    step: int
    lr: float
    loss: float
    src: float
    tgt: float
    grad_norm: float
    tokens: int


def train_step(state, batch, config, opt, step=None):
    """One forward/backward/update. ``step`` (1-based) keys lr and dropout noise."""
    step = opt.step + 1 if step is None else step
    drop = Dropout(config.dropout, rng_stream(config.seed, "dropout", step), training=True)
    state.zero_grad()
    with Tape() as tape:
        out = forward(state, batch, drop)
        losses = compute_loss(state, out, config.label_smoothing)
        value = float(losses.total.value)
        if not math.isfinite(value):
            raise NonFiniteLossError(step, batch_fingerprint(batch), value)
        tape.backward(losses.total)
    norm = clip_grads(state.parameters(), config.clip_norm)
    lr = lr_schedule(step, config.warmup_steps, state.config.d, config.scale)
    adam_update(state, opt, lr, config)
    tokens = int(batch.src_len.sum() + batch.tgt_len.sum())
    return StepResult(step, lr, value, losses.src, losses.tgt, norm, tokens)


def format_log(r, tok_per_s):
    return (f"step={r.step} lr={r.lr:.6g} loss={r.loss:.5f} src={r.src:.5f} tgt={r.tgt:.5f} "
            f"gnorm={r.grad_norm:.4f} tok_per_s={tok_per_s:.1f}")


class Trainer:
    """Drives ``train_step`` over a step-indexed batch stream.

    Batches and dropout noise are keyed by step index, so the step counter
    is the only RNG cursor a checkpoint needs.
    """

    def __init__(self, state, stream, config, opt=None):
        self.state = state
        self.stream = stream
        self.config = config
        self.opt = opt or AdamState()
        self.history = []

    @property
    def step(self):
        return self.opt.step

    def run(self, until=None, checkpoint_dir=None):
        until = self.config.steps if until is None else until
        cfg = self.config
        t0, tok = time.perf_counter(), 0
        while self.opt.step < until:
            r = train_step(self.state, self.stream.batch_at(self.opt.step + 1), cfg, self.opt)
            self.history.append(r)
            tok += r.tokens
            if cfg.log_interval and r.step % cfg.log_interval == 0:
                dt = time.perf_counter() - t0
                log.info(format_log(r, tok / dt if dt > 0 else 0.0))
                t0, tok = time.perf_counter(), 0
            if checkpoint_dir and cfg.checkpoint_interval and r.step % cfg.checkpoint_interval == 0:
                self.save(Path(checkpoint_dir) / f"step{r.step:06d}")
                self._prune(checkpoint_dir)
        return self.history

    def save(self, path):
        meta = {"step": self.opt.step, "train": self.config.to_dict(),
                "rng": {"seed": self.config.seed, "cursor": self.opt.step}}
        save_checkpoint(path, self.state, meta, self.opt.to_extra())

    def _prune(self, checkpoint_dir):
        keep = self.config.keep_checkpoints
        if not keep:
            return
        for old in sorted(Path(checkpoint_dir).glob("step*"))[:-keep]:
            for f in old.iterdir():
                f.unlink()
            old.rmdir()

    @classmethod
    def resume(cls, path, stream, config=None):
        state, meta, extra = load_checkpoint(path)
        config = config or TrainConfig(**meta["train"])
        opt = AdamState.from_extra(extra, meta["step"], np.dtype(state.config.dtype))
        return cls(state, stream, config, opt)


def checkpoint_average(checkpoints):
    """Elementwise mean of parameters; accepts ModelStates or checkpoint paths."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    states = [c if isinstance(c, ModelState) else load_checkpoint(c)[0] for c in checkpoints]
    ref = dict(states[0].manifest())
    for s in states[1:]:
        other = dict(s.manifest())
        bad = sorted(k for k in set(ref) | set(other) if ref.get(k) != other.get(k))
        if bad:
            raise ValueError("checkpoint manifests differ in: " + ", ".join(bad))
    params = {}
    for name, p in states[0].params.items():
        acc = np.zeros(p.shape, dtype=np.float64)
        for s in states:
            acc += s.params[name].value
        params[name] = Tensor((acc / len(states)).astype(p.value.dtype), requires_grad=True)
    return ModelState(states[0].config, params)


def checkpoint_dirs(root):
    return sorted(Path(root).glob("step*"))
