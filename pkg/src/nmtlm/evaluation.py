"""Perplexity, corpus BLEU, beam search and translation-language accuracy."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, fields

import numpy as np

from .architectures import BOS, EOS, PAD, batch_from_pairs, forward, make_batch
from .tensor import log_softmax_np


def _pairs(corpus):
    return list(getattr(corpus, "pairs", corpus))


# --------------------------------------------------------------- perplexity


def target_nll(state, batch):
    """(sum of -ln p(reference token), token count) over non-pad target positions."""
    out = forward(state, batch)
    logp = log_softmax_np(out.tgt_logits.value.astype(np.float64))
    tgt = out.tgt_targets
    keep = tgt != PAD
    picked = np.take_along_axis(logp, tgt[..., None], -1)[..., 0]
    return float(-picked[keep].sum()), int(keep.sum())


def log_perplexity(state, corpus, batch_size=32):
    """Mean natural-log negative likelihood per target token, teacher forced."""
    pairs = _pairs(corpus)
    if not pairs:
        raise ValueError("log_perplexity on an empty corpus")
    nll, n = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        s, c = target_nll(state, batch_from_pairs(pairs[i:i + batch_size]))
        nll += s
        n += c
    return nll / n


# --------------------------------------------------------------- BLEU


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_n=4):
    """Corpus BLEU in percent over token sequences, one reference each."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    if not hypotheses:
        raise ValueError("corpus_bleu on empty lists")
    match = [0] * max_n
    total = [0] * max_n
    c = r = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        c += len(hyp)
        r += len(ref)
        for n in range(1, max_n + 1):
            h, rf = _ngrams(hyp, n), _ngrams(ref, n)
            match[n - 1] += sum(min(k, rf[g]) for g, k in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    if c == 0 or min(match) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(match, total)) / max_n
    bp = min(0.0, 1.0 - r / c)
    return 100.0 * math.exp(log_p + bp)


# --------------------------------------------------------------- decoding


def strip(tokens):
    """Drop everything from the first EOS on."""
    tokens = list(tokens)
    return tokens[:tokens.index(EOS)] if EOS in tokens else tokens


def _next_logprobs(state, pairs_like, prefixes):
    """Next-token log-probs for each (source pair, target prefix)."""
    srcs = [p.src for p in pairs_like]
    tgts = [list(y) + [EOS] for y in prefixes]
    batch = make_batch(srcs, tgts, [p.start for p in pairs_like], [p.lm_start for p in pairs_like])
    logits = forward(state, batch).tgt_logits.value
    k = np.array([len(y) for y in prefixes])
    rows = logits[np.arange(len(prefixes)), k].astype(np.float64)
    rows[:, PAD] = -np.inf
    rows[:, BOS] = -np.inf
    return log_softmax_np(rows)


def greedy_decode(state, pairs, max_len, batch_size=64):
    """Argmax decoding, batched over sentences. Returns token lists ending with EOS when finished."""
    pairs = _pairs(pairs)
    out = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        hyps = [[] for _ in chunk]
        done = [False] * len(chunk)
        for _ in range(max_len):
            lp = _next_logprobs(state, chunk, hyps)
            for b, row in enumerate(lp):
                if not done[b]:
                    tok = int(np.argmax(row))
                    hyps[b].append(tok)
                    done[b] = tok == EOS
            if all(done):
                break
        out.extend(hyps)
    return out


@dataclass
class Hypothesis:
    tokens: tuple
    logprob: float
    finished_at: int

    def score(self, alpha):
        return self.logprob / max(len(self.tokens), 1) ** alpha


def _rank(hyps, alpha):
    return sorted(hyps, key=lambda h: (-h.score(alpha), h.finished_at, h.tokens))


def beam_search_core(next_logprobs, beam, alpha, max_len):
    """Beam search over a next-token function ``prefixes -> [len(prefixes), V]`` log-probs.

    Finished hypotheses are scored by sum log-prob / |Y|^alpha with |Y|
    counting EOS. Ties go to the earlier completion, then the
    lexicographically smaller sequence. The greedy hypothesis is kept in
    the finished pool, so the result never scores below greedy.
    """
    if beam < 1 or max_len < 1:
        raise ValueError("beam and max_len must be >= 1")
    greedy = _run_beam(next_logprobs, 1, alpha, max_len)
    if beam == 1:
        return greedy
    best = _run_beam(next_logprobs, beam, alpha, max_len)
    return _rank([best, greedy], alpha)[0]


def _run_beam(next_logprobs, beam, alpha, max_len):
    alive = [Hypothesis((), 0.0, -1)]
    finished = []
    for t in range(max_len):
        lp = next_logprobs([h.tokens for h in alive])
        cands = []
        for h, row in zip(alive, lp):
            for v in np.flatnonzero(np.isfinite(row)):
                cands.append(Hypothesis(h.tokens + (int(v),), h.logprob + float(row[v]), t))
        cands.sort(key=lambda h: (-h.logprob, h.tokens))
        alive = []
        for h in cands[:2 * beam]:
            if h.tokens[-1] == EOS:
                finished.append(h)
            elif len(alive) < beam:
                alive.append(h)
            if len(alive) == beam:
                break
        if not alive:
            break
        if len(finished) >= beam:
            best = _rank(finished, alpha)[0].score(alpha)
            bound = max(h.logprob for h in alive) / max_len ** alpha
            if best >= bound:
                break
    if finished:
        return _rank(finished, alpha)[0]
    return _rank([Hypothesis(h.tokens, h.logprob, max_len) for h in alive], alpha)[0]


def beam_search(state, pair, beam=4, length_penalty=0.5, max_len=32):
    """Decode one source (a SequencePair-like object); returns the token list."""
    hyp = beam_search_core(lambda prefixes: _next_logprobs(state, [pair] * len(prefixes), prefixes),
                           beam, length_penalty, max_len)
    return list(hyp.tokens)


def translate(state, pairs, beam=1, length_penalty=0.5, max_len=None, extra_len=4):
    """Hypotheses for every pair, EOS stripped. beam=1 takes the batched greedy path."""
    pairs = _pairs(pairs)
    if max_len is None:
        max_len = max(len(p.src) for p in pairs) + extra_len
    if beam == 1:
        return [strip(h) for h in greedy_decode(state, pairs, max_len)]
    return [strip(beam_search(state, p, beam, length_penalty, max_len)) for p in pairs]


# --------------------------------------------------------------- language accuracy


def language_accuracy(hypotheses, intended, vocab):
    """Fraction of hypotheses whose non-reserved tokens are mostly in the intended block."""
    if len(hypotheses) != len(intended):
        raise ValueError("hypotheses and intended languages differ in length")
    if not hypotheses:
        raise ValueError("language_accuracy on empty lists")
    reserved = vocab.reserved()
    on = 0
    for hyp, lang in zip(hypotheses, intended):
        toks = [t for t in hyp if t not in reserved]
        hits = sum(vocab[lang].owns(t) for t in toks)
        on += bool(toks) and 2 * hits > len(toks)
    return on / len(hypotheses)


# --------------------------------------------------------------- records


@dataclass
class MetricsRecord:
    direction: str
    split: str
    log_ppl: float
    bleu: float
    lang_acc: float
    n_params: int
    flops: int
    beam: int
    length_penalty: float

    def __post_init__(self):
        if not 0 <= self.bleu <= 100:
            raise ValueError(f"BLEU out of range: {self.bleu}")
        if not 0 <= self.lang_acc <= 1:
            raise ValueError(f"language accuracy out of range: {self.lang_acc}")
        if not self.log_ppl > 0:
            raise ValueError(f"log perplexity must be positive: {self.log_ppl}")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def to_line(self):
        return " ".join(f"{k}={v}" for k, v in asdict(self).items())


def evaluate_direction(state, corpus, vocab, beam=1, length_penalty=0.5, n_params=0, flops=0,
                       max_sentences=None):
    pairs = _pairs(corpus)[:max_sentences]
    hyps = translate(state, pairs, beam, length_penalty)
    refs = [strip(p.tgt) for p in pairs]
    tgt_lang = pairs[0].tgt_lang
    return MetricsRecord(f"{pairs[0].src_lang}-{tgt_lang}", getattr(corpus, "split", "dev"),
                         log_perplexity(state, pairs), corpus_bleu(hyps, refs),
                         language_accuracy(hyps, [tgt_lang] * len(hyps), vocab),
                         n_params, flops, beam, length_penalty)
