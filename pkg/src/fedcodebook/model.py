"""Masked graph autoencoder with a multi-head quantization bottleneck.

The backbone is a two-layer message-passing encoder over node (and
optional edge) features, a per-head nearest-token lookup with access
counters, a shared projection that mixes the heads, and a linear
decoder reconstructing node attributes.  Training minimizes attribute
reconstruction + adjacency reconstruction + the two quantization terms
(token pull and commitment), with the straight-through estimator
carrying decoder gradients past the discrete lookup.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .graphs import TextAttributedGraph
from .tensor import Tensor


@dataclass
class GVQDims:
    d: int                  # node/edge feature width
    d_h: int                # hidden width
    heads: int
    tokens_per_head: int
    d_e: int = 0            # 0 when graphs carry no edge features

    def validate(self):
        if min(self.d, self.d_h, self.heads, self.tokens_per_head) < 1:
            raise ConfigError(f"dims must be positive, got {self}")
        if self.d_e < 0:
            raise ConfigError("d_e must be >= 0")


@dataclass
class LayerParams:
    self_w: Tensor          # (d_in, d_h)
    nbr_w: Tensor           # (d_in, d_h)
    edge_w: Tensor          # (d_e, d_in); zero-sized when d_e = 0
    bias: Tensor            # (d_h,)


@dataclass
class GVQParams:
    dims: GVQDims
    enc1: LayerParams
    enc2: LayerParams
    tokens: list            # heads tensors of shape (N, d_h)
    head_proj: Tensor       # (heads * d_h, d_h)
    dec_w: Tensor           # (d_h, d)
    dec_b: Tensor           # (d,)
    mask_vec: Tensor        # (d,)
    counters: np.ndarray = None   # (heads, N) int64 token access counts

    def __post_init__(self):
        if self.counters is None:
            self.counters = np.zeros(
                (self.dims.heads, self.dims.tokens_per_head), dtype=np.int64)

    def named(self) -> list[tuple[str, Tensor]]:
        """Canonical (name, tensor) order; init, checkpoints, and
        aggregation all rely on this ordering being stable."""
        out = []
        for tag, lp in (("enc1", self.enc1), ("enc2", self.enc2)):
            out += [(f"{tag}.self_w", lp.self_w), (f"{tag}.nbr_w", lp.nbr_w),
                    (f"{tag}.edge_w", lp.edge_w), (f"{tag}.bias", lp.bias)]
        out += [(f"codebook.{h}", t) for h, t in enumerate(self.tokens)]
        out += [("head_proj", self.head_proj), ("dec.w", self.dec_w),
                ("dec.b", self.dec_b), ("mask_vec", self.mask_vec)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def other_named(self) -> list[tuple[str, Tensor]]:
        """Every parameter except the codebook tokens."""
        return [(n, t) for n, t in self.named() if not n.startswith("codebook.")]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named()}

    def clone(self) -> "GVQParams":
        return from_arrays(self.dims, self.to_arrays(), self.counters.copy())

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        """Overwrite parameter values in place from a name->array map."""
        for n, t in self.named():
            a = np.asarray(arrays[n], dtype=np.float64)
            if a.shape != t.data.shape:
                raise DimensionError(f"{n}: shape {a.shape} != {t.data.shape}")
            t.data[...] = a


def _shapes(dims: GVQDims) -> list[tuple[str, tuple]]:
    d, dh, de = dims.d, dims.d_h, dims.d_e
    out = []
    for tag, d_in in (("enc1", d), ("enc2", dh)):
        out += [(f"{tag}.self_w", (d_in, dh)), (f"{tag}.nbr_w", (d_in, dh)),
                (f"{tag}.edge_w", (de, d_in)), (f"{tag}.bias", (dh,))]
    out += [(f"codebook.{h}", (dims.tokens_per_head, dh)) for h in range(dims.heads)]
    out += [("head_proj", (dims.heads * dh, dh)), ("dec.w", (dh, d)),
            ("dec.b", (d,)), ("mask_vec", (d,))]
    return out


def from_arrays(dims: GVQDims, arrays: dict[str, np.ndarray],
                counters: np.ndarray | None = None) -> GVQParams:
    t = {}
    for name, shape in _shapes(dims):
        a = np.asarray(arrays[name], dtype=np.float64).reshape(shape)
        t[name] = Tensor(a.copy())
    return GVQParams(
        dims=dims,
        enc1=LayerParams(t["enc1.self_w"], t["enc1.nbr_w"], t["enc1.edge_w"], t["enc1.bias"]),
        enc2=LayerParams(t["enc2.self_w"], t["enc2.nbr_w"], t["enc2.edge_w"], t["enc2.bias"]),
        tokens=[t[f"codebook.{h}"] for h in range(dims.heads)],
        head_proj=t["head_proj"],
        dec_w=t["dec.w"],
        dec_b=t["dec.b"],
        mask_vec=t["mask_vec"],
        counters=None if counters is None else np.asarray(counters, dtype=np.int64).copy(),
    )


def init_params(dims: GVQDims, rng, weight_std: float = 0.02) -> GVQParams:
    """Gaussian weights (std 0.02), zero biases, unit-norm codebook rows."""
    dims.validate()
    arrays = {}
    for name, shape in _shapes(dims):
        if name.startswith("codebook."):
            tok = rng.standard_normal(shape)
            tok /= np.linalg.norm(tok, axis=1, keepdims=True)
            arrays[name] = tok
        elif name.endswith(("bias", "dec.b")):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.standard_normal(shape) * weight_std
    return from_arrays(dims, arrays)


# ------------------------------------------------------------ forward pass

def _mixing_operators(g: TextAttributedGraph):
    """P averages in-neighbor rows (rows of isolated nodes stay zero);
    Q distributes per-edge vectors to destination nodes with the same
    1/in-degree weights."""
    n, m = g.node_count, g.edge_count
    deg = np.zeros(n)
    if m:
        np.add.at(deg, g.edges[:, 1], 1.0)
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
    p = np.zeros((n, n))
    q = np.zeros((n, m))
    if m:
        np.add.at(p, (g.edges[:, 1], g.edges[:, 0]), 1.0)
        p *= inv[:, None]
        q[g.edges[:, 1], np.arange(m)] = inv[g.edges[:, 1]]
    return p, q


def choose_mask_rows(n: int, ratio: float, rng) -> np.ndarray:
    """Pick floor(ratio * n) distinct rows to corrupt."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio {ratio} outside [0, 1)")
    count = int(ratio * n)
    if count == 0:
        return np.zeros(0, dtype=np.intp)
    return np.sort(rng.choice(n, size=count, replace=False))


def encode(g: TextAttributedGraph, params: GVQParams, mask_rows=()) -> Tensor:
    """Two message-passing layers (ReLU after the first, linear second);
    node rows listed in mask_rows are replaced by the learnable mask
    vector before layer 1."""
    dims = params.dims
    if g.feature_dim != dims.d:
        raise DimensionError(f"graph feature dim {g.feature_dim} != model d {dims.d}")
    has_edge_feats = g.edge_features is not None
    if has_edge_feats != (dims.d_e > 0):
        raise DimensionError(
            f"edge features {'present' if has_edge_feats else 'absent'} "
            f"but model d_e = {dims.d_e}")
    if has_edge_feats and g.edge_features.shape[1] != dims.d_e:
        raise DimensionError(
            f"edge feature dim {g.edge_features.shape[1]} != model d_e {dims.d_e}")

    x = Tensor(g.node_features)
    mask_rows = np.asarray(mask_rows, dtype=np.intp)
    if mask_rows.size:
        x = T.replace_rows(x, mask_rows, params.mask_vec)

    p_arr, q_arr = _mixing_operators(g)
    p = Tensor(p_arr)
    q = Tensor(q_arr) if g.edge_count else None
    xe = Tensor(g.edge_features) if has_edge_feats and g.edge_count else None

    h = x
    for lp, last in ((params.enc1, False), (params.enc2, True)):
        nbr = T.matmul(p, h)
        if xe is not None:
            nbr = T.add(nbr, T.matmul(q, T.matmul(xe, lp.edge_w)))
        pre = T.add(T.add(T.matmul(h, lp.self_w), T.matmul(nbr, lp.nbr_w)), lp.bias)
        h = pre if last else T.relu(pre)
    return h


@dataclass
class QuantizeResult:
    indices: np.ndarray     # (n, heads) selected token per head
    z_q: Tensor             # straight-through: value of z_q_raw, gradient to z
    z_q_raw: Tensor         # differentiable w.r.t. tokens and head projection


def quantize(z: Tensor, params: GVQParams, count: bool = True) -> QuantizeResult:
    """Nearest token per head (squared Euclidean, ties to the lowest
    index), heads concatenated then mixed by the shared projection.
    Bumps the access counter of every selected token when count=True."""
    dims = params.dims
    if z.data.ndim != 2 or z.shape[1] != dims.d_h:
        raise DimensionError(f"embeddings {z.shape} do not match d_h {dims.d_h}")
    cols, picked = [], []
    for h in range(dims.heads):
        tok = params.tokens[h]
        if tok.shape[0] == 0:
            raise ContractError(f"codebook head {h} is empty")
        d2 = ((z.data[:, None, :] - tok.data[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)
        if count:
            np.add.at(params.counters[h], idx, 1)
        cols.append(idx)
        picked.append(T.take_rows(tok, idx))
    z_q_raw = T.matmul(T.concat_cols(picked), params.head_proj)
    return QuantizeResult(np.stack(cols, axis=1),
                          T.straight_through(z, z_q_raw), z_q_raw)


# ------------------------------------------------------------------ losses

def loss_feat(x: Tensor, x_hat: Tensor, gamma: float) -> Tensor:
    """Mean over rows of (1 - cosine(x_i, x_hat_i)) ** gamma."""
    if gamma <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    cos = T.row_cosine(x, x_hat)
    one = Tensor(np.ones(cos.shape[0]))
    return T.tmean(T.power(T.sub(one, cos), gamma))


def loss_topo(a: Tensor, x_hat: Tensor) -> Tensor:
    """Squared Frobenius distance between A and sigmoid(x_hat x_hat^T),
    diagonal included."""
    if not np.isin(a.data, (0.0, 1.0)).all():
        raise ContractError("adjacency entries must be 0 or 1")
    diff = T.sub(a, T.sigmoid(T.matmul(x_hat, T.transpose(x_hat))))
    return T.tsum(T.mul(diff, diff))


@dataclass
class LossParts:
    total: Tensor
    feat: Tensor
    topo: Tensor
    codebook: Tensor    # pulls selected tokens toward the (frozen) embeddings
    commit: Tensor      # pulls embeddings toward the (frozen) selected tokens


def pretrain_loss(g: TextAttributedGraph, params: GVQParams, gamma: float = 2.0,
                  mask_ratio: float = 0.0, rng=None, mask_rows=None,
                  count_freq: bool = True) -> tuple[LossParts, QuantizeResult]:
    """Reconstruction + quantization objective, all four terms unit-weighted.

    The codebook term freezes the embeddings, the commitment term
    freezes the tokens; the decoder consumes the straight-through value
    so its gradient reaches the encoder, not the codebook.
    """
    if mask_rows is None:
        if mask_ratio > 0 and rng is None:
            raise ConfigError("mask_ratio > 0 needs an rng (or explicit mask_rows)")
        mask_rows = choose_mask_rows(g.node_count, mask_ratio, rng) if mask_ratio > 0 else ()
    z = encode(g, params, mask_rows)
    q = quantize(z, params, count=count_freq)
    x_hat = T.add(T.matmul(q.z_q, params.dec_w), params.dec_b)

    lf = loss_feat(Tensor(g.node_features), x_hat, gamma)
    lt = loss_topo(Tensor(g.adjacency()), x_hat)
    inv_n = 1.0 / g.node_count
    d_cb = T.sub(T.stop_gradient(z), q.z_q_raw)
    l_cb = T.scale(T.tsum(T.mul(d_cb, d_cb)), inv_n)
    d_cm = T.sub(z, T.stop_gradient(q.z_q_raw))
    l_cm = T.scale(T.tsum(T.mul(d_cm, d_cm)), inv_n)
    total = T.add(T.add(lf, lt), T.add(l_cb, l_cm))
    return LossParts(total, lf, lt, l_cb, l_cm), q


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    loss_trace: list            # mean total loss per epoch
    sample_count: int           # nodes, edges, or graphs by label level


def count_instances(graphs: list[TextAttributedGraph]) -> int:
    level = graphs[0].label_level
    if level == "node":
        return sum(g.node_count for g in graphs)
    if level == "edge":
        return sum(g.edge_count for g in graphs)
    return len(graphs)


def local_train(graphs: list[TextAttributedGraph], params: GVQParams, epochs: int,
                optimizer, rng, gamma: float = 2.0, mask_ratio: float = 0.25,
                batch_size: int | None = None) -> TrainResult:
    """Full-batch epochs over the client's graphs; counters keep
    accumulating across epochs (the federation layer resets them after
    each upload).  batch_size only applies to graph-level collections.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if not graphs:
        raise ConfigError("local_train needs at least one graph")
    tensors = params.tensors()
    if batch_size and graphs[0].label_level == "graph":
        batches = [graphs[i:i + batch_size] for i in range(0, len(graphs), batch_size)]
    else:
        batches = [graphs]

    trace = []
    for _ in range(epochs):
        step_losses = []
        for batch in batches:
            parts = [pretrain_loss(g, params, gamma, mask_ratio, rng)[0].total
                     for g in batch]
            loss = parts[0]
            for extra in parts[1:]:
                loss = T.add(loss, extra)
            if len(parts) > 1:
                loss = T.scale(loss, 1.0 / len(parts))
            grads = T.backward(loss, tensors)
            optimizer.step(grads)
            step_losses.append(float(loss.data))
        trace.append(float(np.mean(step_losses)))
    return TrainResult(trace, count_instances(graphs))
