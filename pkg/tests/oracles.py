"""Independent reference computations used as test oracles.

None of these touch the tape; they are plain numpy / math in float64.
"""

from __future__ import annotations

import math

import numpy as np


def central_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Elementwise central finite differences of scalar ``f`` at ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def directional_diff(f, x: np.ndarray, v: np.ndarray, eps: float = 1e-6) -> float:
    return (f(x + eps * v) - f(x - eps * v)) / (2 * eps)


def rel_err(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def softmax_ref(row) -> list[float]:
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = math.fsum(e)
    return [v / s for v in e]


def attention_ref(q, x, wq, wk, wv, d_model):
    """Single head with explicit loops."""
    l = len(q)
    Q = np.array([[sum(q[i][a] * wq[a][j] for a in range(len(wq))) for j in range(len(wq[0]))] for i in range(l)])
    K = np.array([[sum(x[i][a] * wk[a][j] for a in range(len(wk))) for j in range(len(wk[0]))] for i in range(len(x))])
    V = np.array([[sum(x[i][a] * wv[a][j] for a in range(len(wv))) for j in range(len(wv[0]))] for i in range(len(x))])
    out = []
    for i in range(l):
        logits = [math.fsum(Q[i, c] * K[j, c] for c in range(Q.shape[1])) / math.sqrt(d_model) for j in range(len(x))]
        p = softmax_ref(logits)
        out.append([math.fsum(p[j] * V[j, c] for j in range(len(x))) for c in range(V.shape[1])])
    return np.array(out)


def layer_norm_ref(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def gelu_ref(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def positional_ref(l, d):
    pe = np.zeros((l, d))
    for pos in range(l):
        for i in range(d):
            angle = pos / 10000 ** (2 * (i // 2) / d)
            pe[pos, i] = math.sin(angle) if i % 2 == 0 else math.cos(angle)
    return pe


def transformer_ref(tensors: dict, cfg, tokens, xi, nu, task: str):
    """Whole-model forward, written head by head without the tape or stacking tricks."""
    t = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    out = []
    for seq in np.asarray(tokens):
        l = len(seq)
        x = t["embed"][seq] + positional_ref(l, cfg.d_model)
        for layer in range(cfg.n_layers):
            p = f"layer{layer}."
            mha = np.zeros_like(x)
            for h in range(cfg.n_heads):
                Q = x @ t[p + "wq"][h]
                K = x @ t[p + "wk"][h]
                V = x @ t[p + "wv"][h]
                S = Q @ K.T / math.sqrt(cfg.d_model)
                S = np.exp(S - S.max(axis=1, keepdims=True))
                S = S / S.sum(axis=1, keepdims=True)
                mha += xi[layer][h] * (S @ V) @ t[p + "wo"][h]
            a = layer_norm_ref(x + mha, t[p + "ln1.g"], t[p + "ln1.b"], cfg.ln_eps)
            hdn = a @ t[p + "ffn.w1"] + t[p + "ffn.b1"]
            hdn = np.maximum(hdn, 0) if cfg.activation == "relu" else gelu_ref(hdn)
            f = hdn @ t[p + "ffn.w2"] + t[p + "ffn.b2"]
            x = layer_norm_ref(a + nu[layer] * f, t[p + "ln2.g"], t[p + "ln2.b"], cfg.ln_eps)
        pooled = x.mean(axis=0)
        out.append(pooled @ t[f"head.{task}.w"] + t[f"head.{task}.b"])
    return np.array(out)


def adamax_ref(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Kingma & Ba's AdaMax, in float64, for a sequence of gradients."""
    m = np.zeros_like(theta, dtype=np.float64)
    u = np.zeros_like(theta, dtype=np.float64)
    theta = np.array(theta, dtype=np.float64)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        u = np.maximum(b2 * u, np.abs(g))
        theta = theta - (lr / (1 - b1**t)) * m / (u + eps)
    return theta
