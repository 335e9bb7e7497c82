"""Server-side aggregation: the two collaboration phases plus the
sample-weighted baseline.

Everything here is pure numpy over ClientUpload values; no autodiff is
involved on the server.  Upload lists are treated positionally (caller
orders them by client id), and all operations are deterministic
functions of their inputs.

Phase 1 (per head, per client): token pairs are scored by cosine
similarity, pairs whose candidate token has a lower access frequency
than the target are masked out, the surviving scores are exponentiated
and normalized into mixing weights, and each token moves to a
lam / (1 - lam) blend of itself and the weighted candidate mix.  Other
parameters follow softmax-weighted averages driven by codebook
similarity.

Phase 2: clients whose codebooks look least like everyone else's get
the largest softmax weight, and every parameter (codebook included) is
averaged with those weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError


@dataclass
class ClientUpload:
    client_id: int
    tokens: np.ndarray          # (heads, N, d_h)
    counters: np.ndarray        # (heads, N) access frequencies
    other: dict                 # name -> array, every non-codebook parameter
    sample_count: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.counters = np.asarray(self.counters)
        if self.tokens.ndim != 3:
            raise DimensionError(f"tokens must be (heads, N, d_h), got {self.tokens.shape}")
        if self.counters.shape != self.tokens.shape[:2]:
            raise DimensionError(
                f"counters {self.counters.shape} do not match tokens {self.tokens.shape[:2]}")
        if (self.counters < 0).any():
            raise ContractError("frequency counters must be nonnegative")


@dataclass
class SimilarityTables:
    token_sim: dict             # (head, a, b) -> (N, N) cosine matrix
    client_sim: np.ndarray      # (K, K), row a = how well b's tokens cover a's
    distinctiveness: np.ndarray # (K,)


def _check_uploads(uploads: list[ClientUpload]):
    if not uploads:
        raise ContractError("no uploads to aggregate")
    first = uploads[0]
    for u in uploads[1:]:
        if u.tokens.shape != first.tokens.shape:
            raise DimensionError("uploads disagree on codebook shape")
        if set(u.other) != set(first.other):
            raise DimensionError("uploads disagree on parameter names")


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def token_similarity(cb_a: np.ndarray, cb_b: np.ndarray) -> np.ndarray:
    """Pairwise cosine of one head's tokens; zero tokens score 0 against
    everything; results clipped into [-1, 1]."""
    if cb_a.shape[1] != cb_b.shape[1]:
        raise DimensionError(f"token dims disagree: {cb_a.shape} vs {cb_b.shape}")
    na = np.linalg.norm(cb_a, axis=1)
    nb = np.linalg.norm(cb_b, axis=1)
    denom = np.outer(na, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(denom > 0.0, (cb_a @ cb_b.T) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(sim, -1.0, 1.0)


def alignment_mask(sim: np.ndarray, freq_a: np.ndarray, freq_b: np.ndarray) -> np.ndarray:
    """Entry (i, j) survives only when candidate j's frequency is at
    least target i's; masked entries become -inf (weight 0 downstream,
    by branch, never by exponentiating the sentinel)."""
    keep = freq_b[None, :] >= freq_a[:, None]
    return np.where(keep, sim, -np.inf)


def _masked_weights(sim_masked: np.ndarray) -> np.ndarray:
    keep = np.isfinite(sim_masked)
    return np.where(keep, np.exp(np.where(keep, sim_masked, 0.0)), 0.0)


def update_codebooks_phase1(uploads: list[ClientUpload], lam: float) -> list[np.ndarray]:
    """Frequency-gated token mixing; returns one (heads, N, d_h) array
    per client.  lam = 1 short-circuits to exact copies."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda {lam} outside [0, 1]")
    _check_uploads(uploads)
    if lam == 1.0:
        return [u.tokens.copy() for u in uploads]
    heads = uploads[0].tokens.shape[0]
    out = []
    for ua in uploads:
        new_heads = []
        for h in range(heads):
            phi_a, freq_a = ua.tokens[h], ua.counters[h]
            num = np.zeros_like(phi_a)
            den = np.zeros(phi_a.shape[0])
            for ub in uploads:
                sim = token_similarity(phi_a, ub.tokens[h])
                w = _masked_weights(alignment_mask(sim, freq_a, ub.counters[h]))
                num += w @ ub.tokens[h]
                den += w.sum(axis=1)
            # den > 0 always: the self pair (b=a, j=i) passes its own gate
            mixed = num / den[:, None]
            new_heads.append(lam * phi_a + (1.0 - lam) * mixed)
        out.append(np.stack(new_heads))
    return out


def client_similarity(tokens_a: np.ndarray, tokens_b: np.ndarray) -> float:
    """How well b's codebook covers a's: per head, each of a's tokens
    takes its best cosine match among b's tokens; mean over tokens, then
    over heads.  Asymmetric by construction."""
    heads = tokens_a.shape[0]
    per_head = []
    for h in range(heads):
        sim = token_similarity(tokens_a[h], tokens_b[h])
        per_head.append(sim.max(axis=1).mean())
    return float(np.mean(per_head))


def build_similarity_tables(uploads: list[ClientUpload]) -> SimilarityTables:
    _check_uploads(uploads)
    k = len(uploads)
    heads = uploads[0].tokens.shape[0]
    token_sim = {}
    delta = np.zeros((k, k))
    for a in range(k):
        for b in range(k):
            per_head = []
            for h in range(heads):
                s = token_similarity(uploads[a].tokens[h], uploads[b].tokens[h])
                token_sim[(h, a, b)] = s
                per_head.append(s.max(axis=1).mean())
            delta[a, b] = np.mean(per_head)
    return SimilarityTables(token_sim=token_sim, client_sim=delta,
                            distinctiveness=domain_distinctiveness(delta))


def personalized_other_params(uploads: list[ClientUpload],
                              delta: np.ndarray) -> list[dict]:
    """Row-softmax of the client-similarity matrix weights every client's
    view of everyone's non-codebook parameters."""
    _check_uploads(uploads)
    k = len(uploads)
    if delta.shape != (k, k):
        raise DimensionError(f"delta shape {delta.shape} != ({k}, {k})")
    out = []
    for a in range(k):
        w = _softmax(delta[a])
        out.append({name: sum(w[b] * uploads[b].other[name] for b in range(k))
                    for name in uploads[0].other})
    return out


def domain_distinctiveness(delta: np.ndarray) -> np.ndarray:
    """1 minus each client's mean similarity to all clients (self included)."""
    return 1.0 - delta.mean(axis=1)


def global_aggregate_phase2(uploads: list[ClientUpload],
                            nabla: np.ndarray) -> tuple[np.ndarray, dict]:
    """Distinctiveness-softmax average of everything, tokens aligned
    positionally across clients."""
    _check_uploads(uploads)
    k = len(uploads)
    if nabla.shape != (k,):
        raise DimensionError(f"distinctiveness shape {nabla.shape} != ({k},)")
    w = _softmax(nabla)
    tokens = sum(w[a] * uploads[a].tokens for a in range(k))
    other = {name: sum(w[a] * uploads[a].other[name] for a in range(k))
             for name in uploads[0].other}
    return tokens, other


def fedavg_aggregate(uploads: list[ClientUpload]) -> tuple[np.ndarray, dict]:
    """Sample-count-weighted average of every parameter tensor."""
    _check_uploads(uploads)
    total = sum(u.sample_count for u in uploads)
    if total <= 0:
        raise ContractError("fedavg needs a positive total sample count")
    w = [u.sample_count / total for u in uploads]
    tokens = sum(w[a] * u.tokens for a, u in enumerate(uploads))
    other = {name: sum(w[a] * u.other[name] for a, u in enumerate(uploads))
             for name in uploads[0].other}
    return tokens, other
