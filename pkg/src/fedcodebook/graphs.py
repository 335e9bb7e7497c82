"""Text-attributed graphs: data model, file format, synthesis, partitioning.

Graphs are dense and desk-scale (hundreds of nodes).  Edges are directed
pairs; undirected data is stored as both directions.  The on-disk format
is a UTF-8 line-record file, one graph per file, with a manifest mapping
files to clients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

LABEL_LEVELS = ("node", "edge", "graph")


@dataclass
class TextAttributedGraph:
    """A graph whose nodes (and optionally edges) carry dense feature vectors.

    labels is a 1-D integer vector whose meaning depends on label_level:
    per-node classes, per-edge classes, or a graph-level label (length 1,
    or a multi-label 0/1 bit vector of length > 1).
    """

    node_count: int
    edges: np.ndarray              # (m, 2) int, rows are (src, dst)
    node_features: np.ndarray      # (n, d) float64
    labels: np.ndarray             # 1-D int64
    label_level: str
    edge_features: np.ndarray | None = None   # (m, d) float64 or None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.edge_features is not None:
            self.edge_features = np.asarray(self.edge_features, dtype=np.float64)
        self.validate()

    def validate(self):
        n, m = self.node_count, len(self.edges)
        if n <= 0:
            raise ValidationError("graph must have at least one node")
        if self.node_features.shape[0] != n:
            raise ValidationError(
                f"feature rows ({self.node_features.shape[0]}) != node count ({n})")
        if m and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValidationError("edge endpoint out of range")
        if self.edge_features is not None:
            if self.edge_features.shape != (m, self.feature_dim):
                raise ValidationError(
                    f"edge feature shape {self.edge_features.shape} != ({m}, {self.feature_dim})")
        if self.label_level not in LABEL_LEVELS:
            raise ValidationError(f"unknown label level {self.label_level!r}")
        expected = {"node": n, "edge": m}.get(self.label_level)
        if expected is not None and len(self.labels) != expected:
            raise ValidationError(
                f"{self.label_level} labels have length {len(self.labels)}, expected {expected}")
        if self.label_level == "graph":
            if len(self.labels) == 0:
                raise ValidationError("graph-level labels must be non-empty")
            if len(self.labels) > 1 and not np.isin(self.labels, (0, 1)).all():
                raise ValidationError("multi-label graph labels must be a 0/1 bit vector")

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        """Dense 0/1 adjacency; A[src, dst] = 1 for every listed edge."""
        a = np.zeros((self.node_count, self.node_count))
        if len(self.edges):
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        return a


@dataclass
class PartitionAssignment:
    """How a dataset is split across clients.

    Subgraph-level splits fill node_to_client and per-client induced
    graphs; graph-level splits fill graph_to_client and per-client graph
    lists.
    """

    client_count: int
    node_to_client: np.ndarray | None = None
    graph_to_client: np.ndarray | None = None
    client_graphs: list = field(default_factory=list)
    client_nodes: list = field(default_factory=list)   # original node ids per client


# --------------------------------------------------------------- file format

def _fmt_float(x: float) -> str:
    return repr(float(x))


def save_graph(path, g: TextAttributedGraph, tag: str = "g"):
    """Write one graph in the line-record format (round-trips bit-exactly)."""
    lines = [f"#{tag} d={g.feature_dim} level={g.label_level}"]
    for i in range(g.node_count):
        fields = ["N", str(i)] + [_fmt_float(v) for v in g.node_features[i]]
        if g.label_level == "node":
            fields.append(str(int(g.labels[i])))
        lines.append(" ".join(fields))
    for e in range(g.edge_count):
        fields = ["E", str(int(g.edges[e, 0])), str(int(g.edges[e, 1]))]
        if g.edge_features is not None:
            fields += [_fmt_float(v) for v in g.edge_features[e]]
        if g.label_level == "edge":
            fields.append(str(int(g.labels[e])))
        lines.append(" ".join(fields))
    if g.label_level == "graph":
        lines.append("G " + " ".join(str(int(v)) for v in g.labels))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_graph(path) -> TextAttributedGraph:
    """Parse one graph file; raises ParseError with the offending line number."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ParseError("missing header line", line=1)
    header = lines[0][1:].split()
    kv = {}
    for tok in header[1:] if header and "=" not in header[0] else header:
        if "=" not in tok:
            raise ParseError(f"bad header token {tok!r}", line=1)
        k, v = tok.split("=", 1)
        kv[k] = v
    try:
        d = int(kv["d"])
        level = kv["level"]
    except (KeyError, ValueError) as exc:
        raise ParseError(f"header must carry d=<int> level=<...>: {exc}", line=1)
    if level not in LABEL_LEVELS:
        raise ParseError(f"unknown level {level!r}", line=1)

    node_rows: dict[int, np.ndarray] = {}
    node_labels: dict[int, int] = {}
    edges, edge_feats, edge_labels = [], [], []
    graph_label: list[int] | None = None

    for ln, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "N":
                want = 2 + d + (1 if level == "node" else 0)
                if len(parts) != want:
                    raise ParseError(f"node line has {len(parts)} fields, expected {want}", line=ln)
                nid = int(parts[1])
                node_rows[nid] = np.array([float(v) for v in parts[2:2 + d]])
                if level == "node":
                    node_labels[nid] = int(parts[-1])
            elif kind == "E":
                lab = 1 if level == "edge" else 0
                bare, full = 3 + lab, 3 + d + lab
                if len(parts) == bare:
                    feats = None
                elif len(parts) == full:
                    feats = np.array([float(v) for v in parts[3:3 + d]])
                else:
                    raise ParseError(
                        f"edge line has {len(parts)} fields, expected {bare} or {full}", line=ln)
                edges.append((int(parts[1]), int(parts[2])))
                edge_feats.append(feats)
                if lab:
                    edge_labels.append(int(parts[-1]))
            elif kind == "G":
                if level != "graph":
                    raise ParseError("graph-label line in a non-graph-level file", line=ln)
                graph_label = [int(v) for v in parts[1:]]
                if not graph_label:
                    raise ParseError("empty graph label", line=ln)
            else:
                raise ParseError(f"unknown record kind {kind!r}", line=ln)
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(str(exc), line=ln)

    n = len(node_rows)
    if n == 0:
        raise ParseError("file contains no node records", line=1)
    if sorted(node_rows) != list(range(n)):
        raise ValidationError(f"node ids must be exactly 0..{n - 1}")

    has_feats = [f is not None for f in edge_feats]
    if any(has_feats) and not all(has_feats):
        raise ValidationError("edge features must be present on all edges or none")

    if level == "node":
        labels = [node_labels[i] for i in range(n)]
    elif level == "edge":
        labels = edge_labels
    else:
        if graph_label is None:
            raise ValidationError("graph-level file is missing its G line")
        labels = graph_label

    return TextAttributedGraph(
        node_count=n,
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        node_features=np.stack([node_rows[i] for i in range(n)]) if n else np.zeros((0, d)),
        labels=np.array(labels, dtype=np.int64),
        label_level=level,
        edge_features=np.stack(edge_feats) if edges and all(has_feats) else None,
    )


@dataclass
class ClientDataset:
    client_id: int
    graphs: list
    domain: str | None = None


def save_dataset(out_dir, entries: list[tuple[TextAttributedGraph, int, str]],
                 client_count: int):
    """Write graphs plus a manifest of `<file> <client> <domain>` lines."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = [f"#manifest clients={client_count}"]
    for i, (g, client, domain) in enumerate(entries):
        name = f"graph_{i:04d}.graph"
        save_graph(out / name, g)
        manifest.append(f"{name} {client} {domain}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")


def load_dataset(path) -> list[ClientDataset]:
    """Read a manifest directory back into per-client graph lists."""
    root = Path(path)
    mf = root / "manifest.txt"
    if not mf.exists():
        raise ConfigError(f"no manifest.txt under {root}")
    lines = mf.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#manifest"):
        raise ParseError("manifest missing #manifest header", line=1)
    try:
        k = int(lines[0].split("clients=")[1].split()[0])
    except (IndexError, ValueError):
        raise ParseError("manifest header must carry clients=<int>", line=1)
    clients = [ClientDataset(client_id=i, graphs=[]) for i in range(k)]
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split()
        if len(parts) < 2:
            raise ParseError("manifest rows need <file> <client>", line=ln)
        fname, cid = parts[0], int(parts[1])
        if not 0 <= cid < k:
            raise ValidationError(f"manifest client {cid} out of range 0..{k - 1}")
        clients[cid].graphs.append(load_graph(root / fname))
        if len(parts) > 2 and clients[cid].domain is None:
            clients[cid].domain = parts[2]
    for c in clients:
        if not c.graphs:
            raise ValidationError(f"client {c.client_id} has no graphs in the manifest")
    return clients


# --------------------------------------------------------- synthetic domains

@dataclass
class SynthDomain:
    name: str
    feature_center: np.ndarray
    intra_edge_prob: float
    inter_edge_prob: float
    class_count: int
    nodes_per_graph: int


@dataclass
class SynthConfig:
    domains: list[SynthDomain]
    graphs_per_domain: int
    label_level: str
    class_sep: float = 1.0        # norm scale of per-class prototypes
    feature_noise: float = 0.3
    with_edge_features: bool = False

    def validate(self):
        if not self.domains:
            raise ConfigError("need at least one domain")
        if self.graphs_per_domain < 1:
            raise ConfigError("graphs_per_domain must be >= 1")
        if self.label_level not in LABEL_LEVELS:
            raise ConfigError(f"unknown label level {self.label_level!r}")
        dims = {len(np.asarray(d.feature_center)) for d in self.domains}
        if len(dims) != 1:
            raise ConfigError("all domain feature centers must share the dimension")
        for d in self.domains:
            for p in (d.intra_edge_prob, d.inter_edge_prob):
                if not 0.0 <= p <= 1.0:
                    raise ConfigError(f"edge probability {p} outside [0, 1]")
            if d.class_count < 2:
                raise ConfigError("class_count must be >= 2")
            if d.nodes_per_graph < d.class_count:
                raise ConfigError("nodes_per_graph must cover every class")


def synth_multidomain(config: SynthConfig, seed: int) -> list[tuple[TextAttributedGraph, str]]:
    """Generate block-model graphs per domain, deterministic given the seed.

    Topology: nodes are split into class blocks; an (undirected) edge is
    drawn intra-block with intra_edge_prob, across blocks with
    inter_edge_prob, then stored as both directed pairs.  Node features
    are class prototype + domain center + Gaussian noise, so labels
    correlate with features and same-domain graphs share a center.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    dim = len(np.asarray(config.domains[0].feature_center))
    out = []
    for dom in config.domains:
        prototypes = rng.normal(size=(dom.class_count, dim)) * config.class_sep
        center = np.asarray(dom.feature_center, dtype=np.float64)
        for gi in range(config.graphs_per_domain):
            out.append((_synth_graph(dom, center, prototypes, config, gi, rng), dom.name))
    return out


def _synth_graph(dom: SynthDomain, center, prototypes, config: SynthConfig,
                 graph_index: int, rng) -> TextAttributedGraph:
    n, c = dom.nodes_per_graph, dom.class_count
    if config.label_level == "graph":
        glabel = graph_index % c
        # mixture skewed toward the graph's class so features carry the label
        classes = np.where(rng.random(n) < 0.6, glabel, rng.integers(0, c, size=n))
    else:
        classes = (np.arange(n) * c) // n   # contiguous balanced blocks

    src, dst = [], []
    for i in range(n):
        for j in range(i + 1, n):
            p = dom.intra_edge_prob if classes[i] == classes[j] else dom.inter_edge_prob
            if rng.random() < p:
                src += [i, j]
                dst += [j, i]
    edges = np.array(list(zip(src, dst)), dtype=np.int64).reshape(-1, 2)

    feats = prototypes[classes] + center + rng.normal(size=(n, len(center))) * config.feature_noise

    edge_feats = None
    if config.with_edge_features and len(edges):
        mid = 0.5 * (feats[edges[:, 0]] + feats[edges[:, 1]])
        edge_feats = mid + rng.normal(size=mid.shape) * config.feature_noise

    if config.label_level == "node":
        labels = classes
    elif config.label_level == "edge":
        labels = classes[edges[:, 0]] if len(edges) else np.zeros(0, dtype=np.int64)
    else:
        labels = np.array([glabel])

    return TextAttributedGraph(
        node_count=n, edges=edges, node_features=feats,
        labels=labels, label_level=config.label_level, edge_features=edge_feats)


# ------------------------------------------------------------- partitioners

def _undirected_adjacency_sets(g: TextAttributedGraph) -> list[set[int]]:
    adj = [set() for _ in range(g.node_count)]
    for s, t in g.edges:
        if s != t:
            adj[s].add(int(t))
            adj[t].add(int(s))
    return adj


def _multi_source_bfs_dist(adj, sources, n) -> np.ndarray:
    dist = np.full(n, np.inf)
    frontier = list(sources)
    for s in sources:
        dist[s] = 0
    depth = 0
    while frontier:
        depth += 1
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if dist[v] == np.inf:
                    dist[v] = depth
                    nxt.append(v)
        frontier = nxt
    return dist


def partition_subgraph(g: TextAttributedGraph, k: int, seed: int) -> PartitionAssignment:
    """Community-style split by greedy multi-source BFS growth.

    The first seed is drawn from the rng; the remaining seeds are placed
    farthest-first (max BFS distance to the seeds so far, unreachable
    counting as farthest, ties to the lowest index).  Parts then grow
    smallest-first, each step claiming the frontier node that creates the
    fewest new cut edges (ties to the lowest node index), capped at
    ceil(ceil(n/k) * 1.2) nodes per part.
    """
    n = g.node_count
    if k < 1 or k > n:
        raise ConfigError(f"k={k} must be in 1..{n}")
    adj = _undirected_adjacency_sets(g)
    rng = np.random.default_rng(seed)

    seeds = [int(rng.integers(n))]
    while len(seeds) < k:
        dist = _multi_source_bfs_dist(adj, seeds, n)
        dist[seeds] = -1.0
        best = max(range(n), key=lambda v: (dist[v], -v))
        seeds.append(best)

    cap = math.ceil(math.ceil(n / k) * 1.2)
    part = np.full(n, -1, dtype=np.int64)
    members: list[list[int]] = [[] for _ in range(k)]
    for p, s in enumerate(seeds):
        part[s] = p
        members[p].append(s)

    remaining = n - k
    while remaining:
        grow = min((p for p in range(k) if len(members[p]) < cap),
                   key=lambda p: (len(members[p]), p))
        frontier = {v for u in members[grow] for v in adj[u] if part[v] == -1}
        if frontier:
            def new_cut(v):
                return sum(1 for u in adj[v] if part[u] not in (-1, grow))
            pick = min(frontier, key=lambda v: (new_cut(v), v))
        else:
            pick = int(np.flatnonzero(part == -1)[0])
        part[pick] = grow
        members[grow].append(pick)
        remaining -= 1

    client_nodes = [sorted(members[p]) for p in range(k)]
    client_graphs = [_induce_subgraph(g, nodes) for nodes in client_nodes]
    return PartitionAssignment(client_count=k, node_to_client=part,
                               client_graphs=client_graphs, client_nodes=client_nodes)


def _induce_subgraph(g: TextAttributedGraph, nodes: list[int]) -> TextAttributedGraph:
    """Keep the listed nodes and the edges between them, renumbered locally."""
    local = {orig: i for i, orig in enumerate(nodes)}
    keep = [e for e in range(g.edge_count)
            if int(g.edges[e, 0]) in local and int(g.edges[e, 1]) in local]
    edges = np.array([[local[int(g.edges[e, 0])], local[int(g.edges[e, 1])]] for e in keep],
                     dtype=np.int64).reshape(-1, 2)
    if g.label_level == "node":
        labels = g.labels[nodes]
    elif g.label_level == "edge":
        labels = g.labels[keep]
    else:
        labels = g.labels
    return TextAttributedGraph(
        node_count=len(nodes),
        edges=edges,
        node_features=g.node_features[nodes],
        labels=labels,
        label_level=g.label_level,
        edge_features=g.edge_features[keep] if g.edge_features is not None else None,
    )


def partition_graph_level(graphs: list[TextAttributedGraph], k: int,
                          seed: int) -> PartitionAssignment:
    """Seeded shuffle then round-robin; client sizes differ by at most one."""
    if not graphs:
        raise ConfigError("cannot partition an empty graph list")
    if k < 1 or k > len(graphs):
        raise ConfigError(f"k={k} must be in 1..{len(graphs)}")
    order = np.random.default_rng(seed).permutation(len(graphs))
    assignment = np.empty(len(graphs), dtype=np.int64)
    for pos, gi in enumerate(order):
        assignment[gi] = pos % k
    client_graphs = [[graphs[i] for i in range(len(graphs)) if assignment[i] == c]
                     for c in range(k)]
    return PartitionAssignment(client_count=k, graph_to_client=assignment,
                               client_graphs=client_graphs)
