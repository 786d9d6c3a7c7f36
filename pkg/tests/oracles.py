"""Independent reference computations used as test oracles.

Everything here is written with plain loops over numpy scalars and does
not touch the autodiff engine, so agreement with the library is evidence
rather than a tautology.
"""

import math

import numpy as np


def induced_edges(edges, nodes):
    """Brute-force induced edge set: keep an edge iff both endpoints are members."""
    nodes = set(nodes)
    return [(s, r, d) for s, r, d in edges if s in nodes and d in nodes]


def random_graph(rng, n_nodes, n_edges, n_relations=3):
    return [(int(rng.integers(n_nodes)), int(rng.integers(n_relations)), int(rng.integers(n_nodes)))
            for _ in range(n_edges)]


def leaky(x, slope):
    return x if x >= 0 else slope * x


def dense_attention(H, Wq, Wk, edges, n):
    """alpha[i, j] from explicit loops: softmax over j in in-neighbours(i) plus i."""
    alpha = np.zeros((n, n))
    for i in range(n):
        support = sorted({i} | {s for s, _, d in edges if d == i})
        q = [sum(Wq[a, b] * H[i, b] for b in range(H.shape[1])) for a in range(Wq.shape[0])]
        logits = {}
        for j in support:
            k = [sum(Wk[a, b] * H[j, b] for b in range(H.shape[1])) for a in range(Wk.shape[0])]
            logits[j] = sum(qa * ka for qa, ka in zip(q, k))
        top = max(logits.values())
        z = sum(math.exp(v - top) for v in logits.values())
        for j in support:
            alpha[i, j] = math.exp(logits[j] - top) / z
    return alpha


def dense_layer(H, W, Wq, Wk, edges, slope):
    n, d = H.shape
    alpha = dense_attention(H, Wq, Wk, edges, n)
    out = np.zeros((n, W.shape[0]))
    for i in range(n):
        for a in range(W.shape[0]):
            acc = 0.0
            for j in range(n):
                if alpha[i, j]:
                    acc += alpha[i, j] * sum(W[a, b] * H[j, b] for b in range(d))
            out[i, a] = leaky(acc, slope)
    return out


def word_alignment(word_reps, sememe_reps, P=None):
    total = 0.0
    for w in word_reps:
        S = np.asarray(sememe_reps[w], dtype=float)
        mean = [sum(S[k, c] for k in range(S.shape[0])) / S.shape[0] for c in range(S.shape[1])]
        target = mean if P is None else [sum(P[r, c] * mean[c] for c in range(len(mean))) for r in range(P.shape[0])]
        h = np.asarray(word_reps[w], dtype=float).ravel()
        total += math.sqrt(sum((h[c] - target[c]) ** 2 for c in range(len(target))))
    return total


def relation_alignment(A, B):
    acc, count = 0.0, 0
    for i in range(len(A)):
        for c in range(len(A[i])):
            acc += (A[i][c] - B[i][c]) ** 2
            count += 1
    return acc / count


def contrastive(groups, tau, include_positive=False):
    """groups: list of (positives, negatives) arrays of relation vectors."""
    total = 0.0
    for pos, neg in groups:
        for a in range(len(pos)):
            for p in range(len(pos)):
                if a == p:
                    continue
                s_ap = float(np.dot(pos[a], pos[p])) / tau
                denom = sum(math.exp(float(np.dot(pos[a], x)) / tau) for x in neg)
                if include_positive:
                    denom += math.exp(s_ap)
                total += -(s_ap - math.log(denom))
    return total


def cosine_table(stem, choices):
    def cos(u, v):
        nu = math.sqrt(sum(x * x for x in u))
        nv = math.sqrt(sum(x * x for x in v))
        if nu == 0 or nv == 0:
            return 0.0
        return sum(a * b for a, b in zip(u, v)) / (nu * nv)

    return [cos(stem, c) for c in choices]
