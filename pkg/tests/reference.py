"""Loop-based numpy re-implementations used as independent oracles.

Single example, float64, no batching, no autodiff. Weights are read from a
ModelState parameter dict by name.
"""
import math

import numpy as np


def sinusoid(pos, d):
    out = np.zeros(d)
    for k in range(d):
        angle = pos / 10000 ** (2 * (k // 2) / d)
        out[k] = math.sin(angle) if k % 2 == 0 else math.cos(angle)
    return out


def ln(x, g, b, eps=1e-6):
    out = np.zeros_like(x)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[i] = [(v - mu) / math.sqrt(var + eps) for v in row]
    return out * g + b


def attention(q_in, kv_in, allowed, P, prefix, heads):
    q = q_in @ P[f"{prefix}.q_w"] + P[f"{prefix}.q_b"]
    k = kv_in @ P[f"{prefix}.k_w"] + P[f"{prefix}.k_b"]
    v = kv_in @ P[f"{prefix}.v_w"] + P[f"{prefix}.v_b"]
    d = q.shape[1]
    dh = d // heads
    out = np.zeros((q.shape[0], d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(q.shape[0]):
            keys = [j for j in range(k.shape[0]) if allowed(i, j)]
            s = [float(q[i, sl] @ k[j, sl]) / math.sqrt(dh) for j in keys]
            mx = max(s)
            e = [math.exp(x - mx) for x in s]
            z = sum(e)
            for w, j in zip(e, keys):
                out[i, sl] += w / z * v[j, sl]
    return out @ P[f"{prefix}.o_w"] + P[f"{prefix}.o_b"]


def ffn(x, P, prefix):
    h = np.maximum(x @ P[f"{prefix}.ffn_in_w"] + P[f"{prefix}.ffn_in_b"], 0)
    return h @ P[f"{prefix}.ffn_out_w"] + P[f"{prefix}.ffn_out_b"]


def residual(x, fn, P, norm, placement):
    g, b = P[f"{norm}_g"], P[f"{norm}_b"]
    if placement == "pre":
        return x + fn(ln(x, g, b))
    return ln(x + fn(x), g, b)


def embed(P, ids, pos, d):
    return np.array([P["embed"][t] * math.sqrt(d) + sinusoid(p, d) for t, p in zip(ids, pos)])


def logits(P, h):
    return h @ P["out_w"] + P["out_b"]


def encode(P, stack, x, L, heads, placement):
    for l in range(L):
        pre = f"{stack}.{l}"
        x = residual(x, lambda h: attention(h, h, lambda i, j: True, P, f"{pre}.self", heads),
                     P, f"{pre}.norm0", placement)
        x = residual(x, lambda h: ffn(h, P, pre), P, f"{pre}.norm1", placement)
    if placement == "pre":
        x = ln(x, P[f"{stack}.final_g"], P[f"{stack}.final_b"])
    return x


def encdec(P, X, Y_in, d, L, heads, placement="post"):
    """Standard EncDec with separate self- and cross-attention softmaxes."""
    enc = encode(P, "enc", embed(P, X, range(len(X)), d), L, heads, placement)
    y = embed(P, Y_in, range(len(Y_in)), d)
    for l in range(L):
        pre = f"dec.{l}"
        y = residual(y, lambda h: attention(h, h, lambda i, j: j <= i, P, f"{pre}.self", heads),
                     P, f"{pre}.norm0", placement)
        y = residual(y, lambda h: attention(h, enc, lambda i, j: True, P, f"{pre}.cross", heads),
                     P, f"{pre}.norm1", placement)
        y = residual(y, lambda h: ffn(h, P, pre), P, f"{pre}.norm2", placement)
    if placement == "pre":
        y = ln(y, P["dec.final_g"], P["dec.final_b"])
    return logits(P, y)


def merged_encdec(P, X, Y, d, L, heads, enc="src", dec="tgt"):
    """EncDec whose decoder attends with one softmax over [X^L ; causal Y].

    Post-norm. Predicts every target token: the first from the encoder's
    last position, the rest from decoder positions fed y1 .. y_{m-1}.
    """
    xl = encode(P, enc, embed(P, X, range(len(X)), d), L, heads, "post")
    preds = [logits(P, xl[-1:])[0]]
    y_in = list(Y[:-1])
    if y_in:
        nx = len(X)
        y = embed(P, y_in, range(len(y_in)), d)
        for l in range(L):
            pre = f"{dec}.{l}"

            def att(h):
                kv = np.concatenate([xl, h])
                return attention(h, kv, lambda i, j: j < nx or j - nx <= i, P, f"{pre}.self", heads)

            y = residual(y, att, P, f"{pre}.norm0", "post")
            y = residual(y, lambda h: ffn(h, P, pre), P, f"{pre}.norm1", "post")
        preds.extend(logits(P, y))
    return np.array(preds)
