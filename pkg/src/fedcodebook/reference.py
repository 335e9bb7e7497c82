"""Slow, loop-heavy reference implementations.

Everything here recomputes what the main modules compute, but with
explicit Python loops and none of the library's tensor machinery.  The
test suite and the `verify` command compare the fast paths against
these, so keep this module boring: no shared helpers with the real
implementations, no vectorization beyond trivial row arithmetic.
"""

from __future__ import annotations

import math

import numpy as np


# ----------------------------------------------------------- model forward

def naive_encode(g, arrs: dict, mask_rows=()) -> np.ndarray:
    """Loop-based two-layer message passing matching encode()."""
    x = g.node_features.astype(np.float64).copy()
    for r in mask_rows:
        x[r] = arrs["mask_vec"]
    h = x
    for tag in ("enc1", "enc2"):
        w_self, w_nbr = arrs[f"{tag}.self_w"], arrs[f"{tag}.nbr_w"]
        w_edge, bias = arrs[f"{tag}.edge_w"], arrs[f"{tag}.bias"]
        nxt = np.zeros((g.node_count, w_self.shape[1]))
        for v in range(g.node_count):
            acc = h[v] @ w_self
            incoming = []
            for e in range(g.edge_count):
                u, w = int(g.edges[e, 0]), int(g.edges[e, 1])
                if w != v:
                    continue
                msg = h[u].copy()
                if g.edge_features is not None and w_edge.size:
                    msg = msg + g.edge_features[e] @ w_edge
                incoming.append(msg)
            if incoming:
                mean = incoming[0].copy()
                for msg in incoming[1:]:
                    mean += msg
                mean /= len(incoming)
                acc = acc + mean @ w_nbr
            acc = acc + bias
            nxt[v] = np.maximum(acc, 0.0) if tag == "enc1" else acc
        h = nxt
    return h


def naive_quantize_indices(z: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Brute-force nearest-token scan; strict < keeps the lowest index on ties."""
    n, big = len(z), len(tokens)
    idx = np.zeros(n, dtype=np.int64)
    for i in range(n):
        best, best_d = 0, None
        for j in range(big):
            dist = 0.0
            for t in range(z.shape[1]):
                diff = z[i, t] - tokens[j, t]
                dist += diff * diff
            if best_d is None or dist < best_d:
                best, best_d = j, dist
        idx[i] = best
    return idx


def naive_quantized_rows(arrs: dict, indices: np.ndarray, heads: int) -> np.ndarray:
    """Per-head token pickup, concatenation, shared projection."""
    rows = []
    for i in range(indices.shape[0]):
        parts = [arrs[f"codebook.{h}"][indices[i, h]] for h in range(heads)]
        rows.append(np.concatenate(parts))
    return np.stack(rows) @ arrs["head_proj"]


def naive_loss_feat(x: np.ndarray, x_hat: np.ndarray, gamma: float) -> float:
    total = 0.0
    for i in range(len(x)):
        na, nb = math.sqrt(float(x[i] @ x[i])), math.sqrt(float(x_hat[i] @ x_hat[i]))
        cos = float(x[i] @ x_hat[i]) / (na * nb) if na > 0 and nb > 0 else 0.0
        total += (1.0 - cos) ** gamma
    return total / len(x)


def naive_loss_topo(a: np.ndarray, x_hat: np.ndarray) -> float:
    n = len(a)
    total = 0.0
    for i in range(n):
        for j in range(n):
            s = 1.0 / (1.0 + math.exp(-float(x_hat[i] @ x_hat[j])))
            total += (a[i, j] - s) ** 2
    return total


def naive_pretrain_loss(g, arrs: dict, heads: int, gamma: float,
                        mask_rows=()) -> float:
    """Plain forward value of the four-term objective (the two
    quantization terms share one value; freezing only affects gradients)."""
    z = naive_encode(g, arrs, mask_rows)
    idx = np.stack([naive_quantize_indices(z, arrs[f"codebook.{h}"])
                    for h in range(heads)], axis=1)
    z_q = naive_quantized_rows(arrs, idx, heads)
    x_hat = z_q @ arrs["dec.w"] + arrs["dec.b"]
    quant = float(((z - z_q) ** 2).sum()) / g.node_count
    return (naive_loss_feat(g.node_features, x_hat, gamma)
            + naive_loss_topo(g.adjacency(), x_hat) + 2.0 * quant)


def frozen_surrogate_loss(g, arrs: dict, heads: int, gamma: float, mask_rows,
                          frozen_indices: np.ndarray, z_base: np.ndarray,
                          z_q_base: np.ndarray) -> float:
    """The objective with every stopped quantity pinned to its base value.

    Finite differences of this function are exactly what the analytic
    gradients claim: the decoder input becomes z + (z_q - z) with the
    parenthesized offset constant (the straight-through convention), the
    token-pull term compares frozen embeddings against live tokens at
    frozen indices, and the commitment term compares live embeddings
    against frozen quantized values.
    """
    z = naive_encode(g, arrs, mask_rows)
    z_q_tokens = naive_quantized_rows(arrs, frozen_indices, heads)
    dec_in = z + (z_q_base - z_base)
    x_hat = dec_in @ arrs["dec.w"] + arrs["dec.b"]
    n = g.node_count
    return (naive_loss_feat(g.node_features, x_hat, gamma)
            + naive_loss_topo(g.adjacency(), x_hat)
            + float(((z_base - z_q_tokens) ** 2).sum()) / n
            + float(((z - z_q_base) ** 2).sum()) / n)


# ------------------------------------------------------------- aggregation

def naive_cosine(u, v) -> float:
    nu = math.sqrt(sum(float(x) * float(x) for x in u))
    nv = math.sqrt(sum(float(x) * float(x) for x in v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return sum(float(a) * float(b) for a, b in zip(u, v)) / (nu * nv)


def naive_token_similarity(cb_a: np.ndarray, cb_b: np.ndarray) -> np.ndarray:
    out = np.zeros((len(cb_a), len(cb_b)))
    for i in range(len(cb_a)):
        for j in range(len(cb_b)):
            out[i, j] = naive_cosine(cb_a[i], cb_b[j])
    return out


def naive_alignment_mask(sim: np.ndarray, freq_a, freq_b) -> np.ndarray:
    out = np.full_like(sim, -np.inf)
    for i in range(sim.shape[0]):
        for j in range(sim.shape[1]):
            if freq_b[j] >= freq_a[i]:
                out[i, j] = sim[i, j]
    return out


def naive_phase1_tokens(tokens_list, counters_list, lam: float):
    """Materializes every (client, token) candidate weight explicitly."""
    big_k = len(tokens_list)
    heads, n_tok, _ = tokens_list[0].shape
    out = []
    for a in range(big_k):
        new = np.array(tokens_list[a], dtype=np.float64, copy=True)
        if lam == 1.0:
            out.append(new)
            continue
        for h in range(heads):
            for i in range(n_tok):
                phi = tokens_list[a][h][i]
                fa = counters_list[a][h][i]
                cands = []   # (weight, vector)
                for b in range(big_k):
                    for j in range(n_tok):
                        if counters_list[b][h][j] >= fa:
                            s = naive_cosine(phi, tokens_list[b][h][j])
                            cands.append((math.exp(s), tokens_list[b][h][j]))
                total = sum(w for w, _ in cands)
                mix = np.zeros_like(phi)
                for w, vec in cands:
                    mix = mix + (w / total) * vec
                new[h][i] = lam * phi + (1.0 - lam) * mix
        out.append(new)
    return out


def naive_client_similarity(tokens_a: np.ndarray, tokens_b: np.ndarray) -> float:
    heads, n_tok, _ = tokens_a.shape
    per_head = []
    for h in range(heads):
        acc = 0.0
        for i in range(n_tok):
            acc += max(naive_cosine(tokens_a[h][i], tokens_b[h][j])
                       for j in range(tokens_b.shape[1]))
        per_head.append(acc / n_tok)
    return sum(per_head) / heads


def naive_softmax(values) -> list:
    top = max(values)
    e = [math.exp(v - top) for v in values]
    s = sum(e)
    return [v / s for v in e]


def naive_personalized(others: list, delta: np.ndarray) -> list:
    big_k = len(others)
    out = []
    for a in range(big_k):
        w = naive_softmax([float(x) for x in delta[a]])
        bundle = {}
        for name in others[0]:
            acc = np.zeros_like(others[0][name], dtype=np.float64)
            for b in range(big_k):
                acc = acc + w[b] * others[b][name]
            bundle[name] = acc
        out.append(bundle)
    return out


def naive_distinctiveness(delta: np.ndarray) -> np.ndarray:
    big_k = len(delta)
    return np.array([1.0 - sum(float(delta[a, b]) for b in range(big_k)) / big_k
                     for a in range(big_k)])


def naive_weighted_bundle(tokens_list, others, weights):
    tokens = np.zeros_like(tokens_list[0], dtype=np.float64)
    for a, w in enumerate(weights):
        tokens = tokens + w * tokens_list[a]
    bundle = {}
    for name in others[0]:
        acc = np.zeros_like(others[0][name], dtype=np.float64)
        for a, w in enumerate(weights):
            acc = acc + w * others[a][name]
        bundle[name] = acc
    return tokens, bundle


def naive_global(tokens_list, others, nabla) -> tuple:
    return naive_weighted_bundle(tokens_list, others,
                                 naive_softmax([float(x) for x in nabla]))


def naive_fedavg(tokens_list, others, counts) -> tuple:
    total = sum(counts)
    return naive_weighted_bundle(tokens_list, others,
                                 [c / total for c in counts])


# -------------------------------------------------- metric / head oracles

def naive_argmax_lowest(row) -> int:
    best, arg = -math.inf, 0
    for j, v in enumerate(row):
        if float(v) > best:
            best, arg = float(v), j
    return arg


def naive_accuracy(probs, labels) -> float:
    hits = sum(1 for i in range(len(labels))
               if naive_argmax_lowest(probs[i]) == int(labels[i]))
    return hits / len(labels)


def naive_auc(scores, labels):
    """Concordant-pair count; ties score half.  None when single-class."""
    pos = [float(s) for s, y in zip(scores, labels) if int(y) == 1]
    neg = [float(s) for s, y in zip(scores, labels) if int(y) == 0]
    if not pos or not neg:
        return None
    acc = 0.0
    for p in pos:
        for q in neg:
            acc += 1.0 if p > q else (0.5 if p == q else 0.0)
    return acc / (len(pos) * len(neg))


def naive_auc_columns(probs, labels):
    vals = [naive_auc([probs[i][l] for i in range(len(labels))],
                      [labels[i][l] for i in range(len(labels))])
            for l in range(len(labels[0]))]
    ok = [v for v in vals if v is not None]
    return None if not ok else sum(ok) / len(ok)


def naive_prototype_probs(x, protos) -> np.ndarray:
    out = np.zeros((len(x), len(protos)))
    for i in range(len(x)):
        weights = []
        for c in range(len(protos)):
            d2 = sum((float(x[i][t]) - float(protos[c][t])) ** 2
                     for t in range(len(protos[c])))
            weights.append(math.exp(-d2))
        out[i] = np.array(weights) / sum(weights)
    return out
