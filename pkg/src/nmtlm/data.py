"""Synthetic multilingual parallel corpora, language tags and batching.

Token ids: 0 pad, 1 BOS, 2 EOS, then one tag id per language, then one
contiguous vocabulary block per language.
"""
from __future__ import annotations

import dataclasses
import zlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architectures import BOS, EOS, batch_from_pairs
from .tensor import rng_stream

N_SPECIAL = 3
SPLITS = ("train", "dev", "test")
TAG_POSITIONS = ("source_start", "source_end", "target_start")


@dataclass(frozen=True)
class SyntheticLanguageSpec:
    lang: str
    tag_id: int
    vocab_start: int
    vocab_size: int
    min_len: int = 3
    max_len: int = 8
    seed: int = 0

    @property
    def vocab_end(self):
        return self.vocab_start + self.vocab_size

    def owns(self, token):
        return self.vocab_start <= token < self.vocab_end


@dataclass
class Vocabulary:
    languages: dict

    @property
    def size(self):
        return max(s.vocab_end for s in self.languages.values())

    def __getitem__(self, lang):
        return self.languages[lang]

    def reserved(self):
        return set(range(N_SPECIAL)) | {s.tag_id for s in self.languages.values()}


def make_languages(ids, block_size, min_len=3, max_len=8, seed=0):
    """One spec per language id: tags right after the specials, then equal vocab blocks."""
    ids = list(ids)
    first = N_SPECIAL + len(ids)
    specs = {lang: SyntheticLanguageSpec(lang, N_SPECIAL + k, first + k * block_size, block_size,
                                         min_len, max_len, seed)
             for k, lang in enumerate(ids)}
    check_disjoint(specs.values())
    return Vocabulary(specs)


def check_disjoint(specs):
    specs = sorted(specs, key=lambda s: s.vocab_start)
    reserved = set(range(N_SPECIAL)) | {s.tag_id for s in specs}
    for a, b in zip(specs, specs[1:]):
        if a.vocab_end > b.vocab_start:
            raise ValueError(f"vocabulary blocks of {a.lang!r} and {b.lang!r} overlap")
    for s in specs:
        if any(s.owns(r) for r in reserved):
            raise ValueError(f"vocabulary block of {s.lang!r} covers a reserved id")


# --------------------------------------------------------------- rules


def _transform(tokens, kind, k):
    if kind == "identity":
        return list(tokens)
    if kind == "reverse":
        return list(tokens[::-1])
    if kind == "rotate":
        if not tokens:
            return []
        k %= len(tokens)
        return list(tokens[k:] + tokens[:k])
    raise ValueError(f"unknown transform {kind!r}")


@dataclass(frozen=True)
class TranslationRule:
    """Token bijection between vocab blocks followed by structural transforms."""
    src: str
    tgt: str
    transforms: tuple = ()

    @classmethod
    def parse(cls, src, tgt, text):
        steps = []
        for part in filter(None, text.split("+")):
            kind, _, k = part.partition(":")
            if kind not in ("identity", "reverse", "rotate"):
                raise ValueError(f"unknown transform {kind!r}")
            if kind != "identity":
                steps.append((kind, int(k) if k else 0))
        return cls(src, tgt, tuple(steps))

    def describe(self):
        if not self.transforms:
            return "identity"
        return "+".join(k if k == "reverse" else f"{k}:{n}" for k, n in self.transforms)

    def apply(self, tokens, vocab):
        a, b = vocab[self.src], vocab[self.tgt]
        if a.vocab_size != b.vocab_size:
            raise ValueError("token bijection needs equal block sizes")
        out = [t - a.vocab_start + b.vocab_start for t in tokens]
        for kind, k in self.transforms:
            out = _transform(out, kind, k)
        return out

    def then(self, other):
        if self.tgt != other.src:
            raise ValueError(f"cannot compose {self.src}->{self.tgt} with {other.src}->{other.tgt}")
        return TranslationRule(self.src, other.tgt, self.transforms + other.transforms)

    def inverse(self):
        inv = tuple((k, -n if k == "rotate" else n) for k, n in reversed(self.transforms))
        return TranslationRule(self.tgt, self.src, inv)


class RuleBook:
    """Known rules plus their inverses; resolves unseen directions by composition."""

    def __init__(self, rules):
        self.edges = {}
        for r in rules:
            self.edges[(r.src, r.tgt)] = r
            self.edges.setdefault((r.tgt, r.src), r.inverse())

    def resolve(self, src, tgt):
        if (src, tgt) in self.edges:
            return self.edges[(src, tgt)]
        seen = {src: TranslationRule(src, src)}
        queue = deque([src])
        while queue:
            cur = queue.popleft()
            for (a, b), r in sorted(self.edges.items()):
                if a == cur and b not in seen:
                    seen[b] = seen[cur].then(r)
                    if b == tgt:
                        return seen[b]
                    queue.append(b)
        raise KeyError(f"no rule path from {src} to {tgt}")


# --------------------------------------------------------------- corpora


@dataclass
class SequencePair:
    """Model-ready pair: ``src`` and ``tgt`` both end with EOS."""
    src: list
    tgt: list
    src_lang: str
    tgt_lang: str
    start: int = BOS
    lm_start: bool = False
    tag: int | None = None

    @property
    def n_tokens(self):
        return len(self.src) + len(self.tgt)


@dataclass
class ParallelCorpus:
    pairs: list
    src_lang: str
    tgt_lang: str
    split: str
    rule: TranslationRule | None = None
    tag_position: str | None = None

    @property
    def direction(self):
        return (self.src_lang, self.tgt_lang)

    def __len__(self):
        return len(self.pairs)


def _split_of(tokens):
    h = zlib.crc32(np.asarray(tokens, dtype=np.int64).tobytes()) % 10
    return "train" if h < 8 else ("dev" if h == 8 else "test")


def generate_corpus(vocab, rule, n, seed, split="train"):
    """``n`` pairs whose sources are sampled uniformly from the source block.

    A sentence belongs to exactly one split (hash partition), so train,
    dev and test never share a source sentence.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    check_disjoint(vocab.languages.values())
    a = vocab[rule.src]
    rng = rng_stream(seed, f"corpus/{rule.src}/{rule.tgt}/{split}")
    pairs = []
    tries = 0
    while len(pairs) < n:
        tries += 1
        if tries > 1000 * n + 1000:
            raise RuntimeError("could not sample enough sentences for this split")
        length = int(rng.integers(a.min_len, a.max_len + 1))
        src = [int(t) for t in rng.integers(a.vocab_start, a.vocab_end, size=length)]
        if _split_of(src) != split:
            continue
        pairs.append(SequencePair(src + [EOS], rule.apply(src, vocab) + [EOS], rule.src, rule.tgt))
    return ParallelCorpus(pairs, rule.src, rule.tgt, split, rule)


def tag_pairs(corpus, vocab, position="source_start"):
    """Insert the target-language tag; ``target_start`` replaces BOS with the tag."""
    if position not in TAG_POSITIONS:
        raise ValueError(f"tag position must be one of {TAG_POSITIONS}")
    tag = vocab[corpus.tgt_lang].tag_id
    out = []
    for p in corpus.pairs:
        if position == "source_start":
            q = dataclasses.replace(p, src=[tag] + p.src, tag=tag)
        elif position == "source_end":
            q = dataclasses.replace(p, src=p.src + [tag], tag=tag)
        else:
            q = dataclasses.replace(p, start=tag, lm_start=True, tag=tag)
        out.append(q)
    return dataclasses.replace(corpus, pairs=out, tag_position=position)


def content(tokens, vocab):
    reserved = vocab.reserved()
    return [t for t in tokens if t not in reserved]


def write_corpus(corpus, path):
    rule = corpus.rule.describe() if corpus.rule else "-"
    start = corpus.pairs[0].start if corpus.pairs else BOS
    lm_start = int(corpus.pairs[0].lm_start) if corpus.pairs else 0
    lines = [f"#corpus src={corpus.src_lang} tgt={corpus.tgt_lang} split={corpus.split} "
             f"rule={rule} tag={corpus.tag_position or '-'} start={start} lm_start={lm_start}"]
    for p in corpus.pairs:
        lines.append(" ".join(map(str, p.src)) + "\t" + " ".join(map(str, p.tgt)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_corpus(path):
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#corpus "):
        raise ValueError(f"{path}: missing corpus header")
    head = dict(kv.split("=", 1) for kv in lines[0].split()[1:])
    src, tgt = head["src"], head["tgt"]
    rule = None if head["rule"] == "-" else TranslationRule.parse(src, tgt, head["rule"])
    start, lm_start = int(head["start"]), bool(int(head["lm_start"]))
    tag = start if lm_start else None
    pairs = []
    for line in lines[1:]:
        if not line.strip():
            continue
        s, t = line.split("\t")
        pair = SequencePair([int(x) for x in s.split()], [int(x) for x in t.split()], src, tgt,
                            start, lm_start, tag)
        pairs.append(pair)
    tag_pos = None if head["tag"] == "-" else head["tag"]
    return ParallelCorpus(pairs, src, tgt, head["split"], rule, tag_pos)


# --------------------------------------------------------------- sampling


@dataclass
class SamplerConfig:
    temperature: float = 5.0
    batch_tokens: int = 1024
    seed: int = 0


def temperature_weights(counts, T):
    """p_i proportional to (count_i / total) ** (1 / T)."""
    counts = np.asarray(counts, dtype=np.float64)
    if T <= 0:
        raise ValueError("temperature must be positive")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("counts sum to zero")
    w = (counts / total) ** (1.0 / T)
    return w / w.sum()


@dataclass
class BatchStream:
    """Deterministic stream: the batch at step t depends only on (seed, t)."""
    corpora: list
    sampler: SamplerConfig
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.corpora or any(len(c) == 0 for c in self.corpora):
            raise ValueError("make_batches needs nonempty corpora")
        self.weights = temperature_weights([len(c) for c in self.corpora], self.sampler.temperature)
        for c in self.corpora:
            for i, p in enumerate(c.pairs):
                if p.n_tokens > self.sampler.batch_tokens:
                    raise ValueError(f"pair {i} of {c.src_lang}->{c.tgt_lang} has {p.n_tokens} tokens, "
                                     f"over the {self.sampler.batch_tokens}-token budget")

    def pairs_at(self, step):
        rng = rng_stream(self.sampler.seed, "batch", step)
        k = int(rng.choice(len(self.corpora), p=self.weights))
        corpus = self.corpora[k]
        chosen, max_s, max_t = [], 0, 0
        while True:
            p = corpus.pairs[int(rng.integers(len(corpus)))]
            s, t = max(max_s, len(p.src)), max(max_t, len(p.tgt))
            if (len(chosen) + 1) * (s + t) > self.sampler.batch_tokens:
                break
            chosen.append(p)
            max_s, max_t = s, t
        return k, chosen

    def batch_at(self, step):
        return batch_from_pairs(self.pairs_at(step)[1])

    def __iter__(self):
        step = 1
        while True:
            yield self.batch_at(step)
            step += 1


def make_batches(corpora, sampler):
    return BatchStream(list(corpora), sampler)

