"""Task heads on a frozen backbone.

Fine-tuning never touches the pretrained parameters: instances are
embedded once through encode + quantize, prototypes are recomputed from
the training split at every epoch start, and only the linear head
receives gradients (through the combined prediction).  The prototype
path scores a candidate by exp(-squared Euclidean distance) to each
class prototype; the combined prediction is the elementwise mean of the
two probability vectors, renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .model import GVQParams, quantize, encode
from .optim import make_optimizer

LEVELS = ("node", "edge", "graph")
METRICS = ("accuracy", "auc_roc")


@dataclass
class TaskSpec:
    level: str
    metric: str = "accuracy"
    train_frac: float = 0.6
    val_frac: float = 0.2           # remainder is the test split
    few_shot_k: int | None = None   # overrides the fractions when set
    multilabel: bool = False

    def validate(self):
        if self.level not in LEVELS:
            raise ConfigError(f"unknown task level {self.level!r}")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.multilabel and self.level != "graph":
            raise ConfigError("multilabel heads are a graph-level feature")
        if self.metric == "auc_roc" and not self.multilabel:
            raise ConfigError("auc_roc applies to multilabel graph tasks; "
                              "use accuracy otherwise")
        if self.few_shot_k is not None:
            if self.few_shot_k < 1:
                raise ConfigError("few_shot_k must be >= 1")
        else:
            if not 0.0 < self.train_frac < 1.0:
                raise ConfigError("train_frac must be in (0, 1)")
            if not 0.0 <= self.val_frac < 1.0:
                raise ConfigError("val_frac must be in [0, 1)")
            if self.train_frac + self.val_frac >= 1.0:
                raise ConfigError("train_frac + val_frac leave no test split")


@dataclass
class PrototypeHead:
    prototypes: np.ndarray          # class_count x d_h


@dataclass
class OneVsRestPrototypes:
    pos: np.ndarray                 # label_count x d_h
    neg: np.ndarray


@dataclass
class LinearHead:
    weight: np.ndarray              # d_h x class_count
    bias: np.ndarray


# -------------------------------------------------------------- embeddings

def embed_instances(g, params: GVQParams, level: str) -> np.ndarray:
    """Quantized embeddings per labeled instance, masking disabled.

    node -> one row per node; edge -> elementwise product of the two
    endpoint rows; graph -> mean node row (a single-row matrix).
    """
    if level not in LEVELS:
        raise ConfigError(f"unknown task level {level!r}")
    if level != g.label_level:
        raise ContractError(
            f"task level {level!r} does not match graph labels {g.label_level!r}")
    z = encode(g, params)
    zq = quantize(z, params, count=False).z_q.data
    if level == "node":
        return zq.copy()
    if level == "edge":
        return zq[g.edges[:, 0]] * zq[g.edges[:, 1]]
    return zq.mean(axis=0, keepdims=True)


def embed_dataset(graphs: list, params: GVQParams) -> tuple[np.ndarray, np.ndarray]:
    """Stack instance embeddings and labels across a graph list."""
    if not graphs:
        raise ConfigError("no graphs to embed")
    level = graphs[0].label_level
    xs, ys = [], []
    for g in graphs:
        xs.append(embed_instances(g, params, level))
        ys.append(np.asarray(g.labels, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


# -------------------------------------------------------------------- heads

def fit_prototypes(x: np.ndarray, y: np.ndarray, class_count: int) -> PrototypeHead:
    protos = np.zeros((class_count, x.shape[1]))
    for c in range(class_count):
        rows = x[y == c]
        if not len(rows):
            raise ContractError(f"class {c} has no training instances")
        protos[c] = rows.mean(axis=0)
    return PrototypeHead(protos)


def fit_prototypes_multilabel(x: np.ndarray, y: np.ndarray) -> OneVsRestPrototypes:
    """One positive and one negative prototype per label column."""
    labels = y.shape[1]
    pos = np.zeros((labels, x.shape[1]))
    neg = np.zeros_like(pos)
    for l in range(labels):
        hit, miss = x[y[:, l] == 1], x[y[:, l] == 0]
        if not len(hit) or not len(miss):
            raise ContractError(f"label column {l} has a single class in training")
        pos[l], neg[l] = hit.mean(axis=0), miss.mean(axis=0)
    return OneVsRestPrototypes(pos, neg)


def _neg_sq_dist(x: np.ndarray, protos: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - protos[None, :, :]
    return -(diff * diff).sum(axis=2)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def prototype_probs(x: np.ndarray, head: PrototypeHead) -> np.ndarray:
    return _softmax_rows(_neg_sq_dist(x, head.prototypes))


def linear_probs(x: np.ndarray, head: LinearHead) -> np.ndarray:
    return _softmax_rows(x @ head.weight + head.bias)


def predict(x: np.ndarray, proto: PrototypeHead, lin: LinearHead) -> np.ndarray:
    """Mean of the two class distributions, renormalized."""
    combined = 0.5 * (prototype_probs(x, proto) + linear_probs(x, lin))
    return combined / combined.sum(axis=1, keepdims=True)


def prototype_probs_multilabel(x: np.ndarray, head: OneVsRestPrototypes) -> np.ndarray:
    dp = _neg_sq_dist(x, head.pos)      # n x L, one column per label
    dn = np.stack([_neg_sq_dist(x, head.neg[l:l + 1])[:, 0]
                   for l in range(head.neg.shape[0])], axis=1)
    top = np.maximum(dp, dn)
    ep, en = np.exp(dp - top), np.exp(dn - top)
    return ep / (ep + en)


def linear_probs_multilabel(x: np.ndarray, head: LinearHead) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-(x @ head.weight + head.bias)))


def predict_multilabel(x, proto: OneVsRestPrototypes, lin: LinearHead) -> np.ndarray:
    # independent Bernoulli probabilities per label; nothing to renormalize
    return 0.5 * (prototype_probs_multilabel(x, proto)
                  + linear_probs_multilabel(x, lin))


def head_probs(x: np.ndarray, proto, lin: LinearHead) -> np.ndarray:
    if isinstance(proto, OneVsRestPrototypes):
        return predict_multilabel(x, proto, lin)
    return predict(x, proto, lin)


# ------------------------------------------------------------------- splits

def few_shot_split(labels: np.ndarray, k: int, seed: int):
    """k seeded train instances per class; the rest is shuffled and cut
    50/50 into val/test (test keeps the odd one)."""
    labels = np.asarray(labels)
    if k < 1:
        raise ConfigError("few-shot k must be >= 1")
    rng = np.random.default_rng(seed)
    train = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise ContractError(f"class {int(c)} has {len(idx)} < k={k} instances")
        train.extend(idx[rng.permutation(len(idx))[:k]])
    rest = np.setdiff1d(np.arange(len(labels)), train)
    rest = rest[rng.permutation(len(rest))]
    half = len(rest) // 2
    return (np.sort(np.asarray(train, dtype=np.int64)),
            np.sort(rest[:half]), np.sort(rest[half:]))


def fraction_split(labels: np.ndarray, train_frac: float, val_frac: float,
                   seed: int):
    """Stratified split; every class lands at least one training instance."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_tr = max(1, int(round(train_frac * len(idx))))
        n_val = min(int(round(val_frac * len(idx))), len(idx) - n_tr)
        train.extend(idx[:n_tr])
        val.extend(idx[n_tr:n_tr + n_val])
        test.extend(idx[n_tr + n_val:])
    return (np.sort(np.asarray(train, dtype=np.int64)),
            np.sort(np.asarray(val, dtype=np.int64)),
            np.sort(np.asarray(test, dtype=np.int64)))


def one_vs_rest_labels(y: np.ndarray, class_count: int) -> np.ndarray:
    """Single-label ints -> binary indicator columns (multilabel view)."""
    out = np.zeros((len(y), class_count))
    out[np.arange(len(y)), np.asarray(y, dtype=np.int64)] = 1.0
    return out


# ------------------------------------------------------------------ metrics

def _rank_auc(scores: np.ndarray, labels: np.ndarray):
    """Mann-Whitney AUC via tie-averaged ranks; None when single-class."""
    pos_n = int((labels == 1).sum())
    neg_n = int((labels == 0).sum())
    if pos_n == 0 or neg_n == 0:
        return None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    _, inverse, counts = np.unique(scores, return_inverse=True,
                                   return_counts=True)
    rank_sums = np.bincount(inverse, weights=ranks)
    ranks = (rank_sums / counts)[inverse]
    u = ranks[labels == 1].sum() - pos_n * (pos_n + 1) / 2.0
    return float(u / (pos_n * neg_n))


def evaluate(probs: np.ndarray, labels: np.ndarray, metric: str) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ContractError(f"probs {probs.shape} do not match {len(labels)} labels")
    if not len(labels):
        raise ContractError("nothing to evaluate")
    if metric == "accuracy":
        return float(np.mean(np.argmax(probs, axis=1) == labels))
    if metric == "auc_roc":
        cols = labels[:, None] if labels.ndim == 1 else labels
        scores = probs if probs.shape[1] == cols.shape[1] else probs[:, :1]
        per_label = [_rank_auc(scores[:, l], cols[:, l])
                     for l in range(cols.shape[1])]
        valid = [v for v in per_label if v is not None]
        if not valid:
            raise ContractError("every label column is single-class; AUC undefined")
        return float(np.mean(valid))
    raise ConfigError(f"unknown metric {metric!r}")


# -------------------------------------------------------------- fine-tuning

@dataclass
class FinetuneResult:
    proto: object                   # PrototypeHead or OneVsRestPrototypes
    linear: LinearHead
    train_trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    embeddings: np.ndarray | None = None
    labels: np.ndarray | None = None


def train_heads(x_tr, y_tr, x_val, y_val, class_count: int, epochs: int,
                lr: float, seed: int, multilabel: bool = False,
                metric: str = "accuracy") -> FinetuneResult:
    """Cross-entropy over the combined prediction; gradients reach only
    the linear head (prototypes are refit, not trained)."""
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if not len(x_tr):
        raise ContractError("empty training split")
    n, d_h = x_tr.shape
    rng = np.random.default_rng(seed)
    w = T.Tensor(rng.normal(size=(d_h, class_count)) * 0.02)
    b = T.Tensor(np.zeros(class_count))
    opt = make_optimizer("adam", [w, b], lr)
    xt = T.Tensor(x_tr)

    if multilabel:
        y_mat = np.asarray(y_tr, dtype=np.float64)
        ones = T.Tensor(np.ones_like(y_mat))
        y_t, y_not = T.Tensor(y_mat), T.Tensor(1.0 - y_mat)
    else:
        onehot = np.zeros((n, class_count))
        onehot[np.arange(n), np.asarray(y_tr, dtype=np.int64)] = 1.0
        y_t = T.Tensor(onehot)

    result = FinetuneResult(proto=None, linear=None)
    for _ in range(epochs):
        if multilabel:
            proto = fit_prototypes_multilabel(x_tr, y_tr)
            p_proto = T.Tensor(prototype_probs_multilabel(x_tr, proto))
            p = T.scale(T.add(p_proto, T.sigmoid(T.add(T.matmul(xt, w), b))), 0.5)
            ll = T.add(T.mul(y_t, T.log(p)), T.mul(y_not, T.log(T.sub(ones, p))))
            loss = T.scale(T.tsum(ll), -1.0 / p.data.size)
        else:
            proto = fit_prototypes(x_tr, y_tr, class_count)
            p_proto = T.Tensor(prototype_probs(x_tr, proto))
            p_lin = T.softmax(T.add(T.matmul(xt, w), b))
            comb = T.scale(T.add(p_proto, p_lin), 0.5)
            norm = T.mul(comb, T.power(T.tsum(comb, axis=1, keepdims=True), -1.0))
            loss = T.scale(T.tsum(T.mul(T.log(norm), y_t)), -1.0 / n)
        opt.step(T.backward(loss, [w, b]))
        result.train_trace.append(float(loss.data))

        head = LinearHead(w.data.copy(), b.data.copy())
        result.proto, result.linear = proto, head
        if len(x_val):
            result.val_trace.append(
                evaluate(head_probs(x_val, proto, head), y_val, metric))
        else:
            result.val_trace.append(float("nan"))
    return result


def finetune(graphs: list, backbone: GVQParams, task: TaskSpec, epochs: int,
             lr: float, seed: int) -> FinetuneResult:
    """Embed every labeled instance through the frozen backbone, split,
    and train the heads.  The split indices ride along in the result so
    evaluation can reuse the same embeddings."""
    task.validate()
    x, y = embed_dataset(graphs, backbone)
    class_count = int(y.max()) + 1
    if task.few_shot_k is not None:
        tr, va, te = few_shot_split(y, task.few_shot_k, seed)
    else:
        tr, va, te = fraction_split(y, task.train_frac, task.val_frac, seed)
    labels = one_vs_rest_labels(y, class_count) if task.multilabel else y
    result = train_heads(x[tr], labels[tr], x[va], labels[va], class_count,
                         epochs, lr, seed, multilabel=task.multilabel,
                         metric=task.metric)
    result.train_idx, result.val_idx, result.test_idx = tr, va, te
    result.embeddings, result.labels = x, labels
    return result
