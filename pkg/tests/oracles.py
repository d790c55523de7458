"""Slow, loop-based reference computations used only by the tests.

These deliberately avoid the vectorized code paths in the package.
"""

import math

import numpy as np


def attention_loops(Q, K, V, scale=None, mask=None):
    """Double-loop softmax attention; ``mask[t, s]`` False drops a key."""
    L, d = Q.shape
    scale = 1 / math.sqrt(d) if scale is None else scale
    out = np.zeros((L, V.shape[1]))
    for t in range(L):
        scores = []
        for s in range(K.shape[0]):
            if mask is None or mask[t, s]:
                scores.append((s, scale * sum(float(Q[t, c]) * float(K[s, c]) for c in range(d))))
        top = max(x for _, x in scores)
        z = sum(math.exp(x - top) for _, x in scores)
        for s, x in scores:
            out[t] += math.exp(x - top) / z * V[s].astype(np.float64)
    return out


def block_H_loop(K, V, B, j):
    d = K.shape[1]
    rows = range(j * B, (j + 1) * B)
    mean = [sum(float(K[n, c]) for n in rows) / B for c in range(d)]
    H = np.zeros((d, V.shape[1]))
    for n in rows:
        for a in range(d):
            for b in range(V.shape[1]):
                H[a, b] += (float(K[n, a]) - mean[a]) * float(V[n, b])
    return H


def piecewise_loop(Q, K, V, plan, B, variant, scale=None):
    """Row-by-row evaluation of the piecewise numerator/denominator, no shift.

    Only for small, well-scaled inputs where exp cannot overflow.
    """
    L, d = Q.shape
    N = K.shape[0] // B
    scale = 1 / math.sqrt(d) if scale is None else scale
    Kb = K.reshape(N, B, d).astype(np.float64)
    Vb = V.reshape(N, B, -1).astype(np.float64)
    k_bar = Kb.mean(axis=1)
    Hs = [block_H_loop(K, V, B, j) for j in range(N)]
    H_bar = sum(Hs) / N
    out = np.zeros((L, V.shape[1]))
    for t in range(L):
        i = t // plan.query_block
        sel = set(plan.selected[i])
        q = Q[t].astype(np.float64)
        num = np.zeros(V.shape[1])
        den = 0.0
        alpha_sum = 0.0
        n_tail = 0
        for j in range(N):
            if j in sel:
                for n in range(B):
                    w = math.exp(scale * float(q @ Kb[j, n]))
                    num += w * Vb[j, n]
                    den += w
            elif variant != "sparse_only":
                a = math.exp(scale * float(q @ k_bar[j]))
                alpha_sum += a
                n_tail += 1
                den += B * a
                num += a * Vb[j].sum(axis=0)
                if variant == "block_first":
                    num += a * (scale * q) @ Hs[j]
        if variant == "hybrid":
            num += alpha_sum * (scale * q) @ H_bar
        out[t] = num / den
    return out
