"""Round/metric persistence and figure rendering.

Every artifact is a plain CSV plus a PNG rendered from it, written next
to each other in the run directory.  Writers are deterministic: row
order is fixed by (round, client) or (run, client), floats go through
repr so equal runs produce byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError

ROUND_FIELDS = ("round", "phase", "client", "loss", "weight")
DIAG_FIELDS = ("round", "kind", "i", "j", "value")
METRIC_FIELDS = ("run_id", "client", "level", "metric", "value", "seed")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def write_rounds_csv(path, reports) -> Path:
    rows = []
    for rep in reports:
        for client, loss in enumerate(rep.client_losses):
            weight = None if rep.weights is None else float(rep.weights[client])
            rows.append((rep.round_index, rep.phase, client, loss, weight))
    return _write_csv(path, ROUND_FIELDS, rows)


def write_diagnostics_csv(path, reports) -> Path:
    rows = []
    for rep in reports:
        if rep.delta is not None:
            for i in range(rep.delta.shape[0]):
                for j in range(rep.delta.shape[1]):
                    rows.append((rep.round_index, "delta", i, j,
                                 float(rep.delta[i, j])))
        if rep.nabla is not None:
            for i, v in enumerate(rep.nabla):
                rows.append((rep.round_index, "nabla", i, None, float(v)))
        if rep.weights is not None:
            for i, v in enumerate(rep.weights):
                rows.append((rep.round_index, "weight", i, None, float(v)))
    return _write_csv(path, DIAG_FIELDS, rows)


def write_metrics_csv(path, rows) -> Path:
    """rows: iterable of (run_id, client, level, metric, value, seed)."""
    return _write_csv(path, METRIC_FIELDS, rows)


def _read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ figures

def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def _loss_figure(rows, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    clients = sorted({int(r["client"]) for r in rows})
    for c in clients:
        pts = [(int(r["round"]), float(r["loss"]))
               for r in rows if int(r["client"]) == c]
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                marker="o", label=f"client {c}")
    phase2 = [int(r["round"]) for r in rows if int(r["phase"]) == 2]
    if phase2:
        ax.axvline(min(phase2) - 0.5, color="grey", linestyle="--",
                   linewidth=1, label="phase boundary")
    ax.set_xlabel("round")
    ax.set_ylabel("mean local loss")
    ax.set_title("Pretraining loss per client")
    ax.legend(fontsize=8)
    return _save(fig, path)


def _delta_figure(rows, path):
    last = max(int(r["round"]) for r in rows)
    cells = {(int(r["i"]), int(r["j"])): float(r["value"])
             for r in rows if int(r["round"]) == last}
    k = max(i for i, _ in cells) + 1
    mat = np.zeros((k, k))
    for (i, j), v in cells.items():
        mat[i, j] = v
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(mat, cmap="viridis", vmin=0.0, vmax=1.0)
    fig.colorbar(im, ax=ax, label="client similarity")
    ax.set_xlabel("client b")
    ax.set_ylabel("client a")
    ax.set_title(f"Codebook similarity, round {last}")
    return _save(fig, path)


def _nabla_figure(rows, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    clients = sorted({int(r["i"]) for r in rows})
    for c in clients:
        pts = sorted((int(r["round"]), float(r["value"]))
                     for r in rows if int(r["i"]) == c)
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                marker="s", label=f"client {c}")
    ax.set_xlabel("round")
    ax.set_ylabel("distinctiveness")
    ax.set_title("Domain distinctiveness per round")
    ax.legend(fontsize=8)
    return _save(fig, path)


def _weights_figure(rows, path):
    last = max(int(r["round"]) for r in rows)
    pts = sorted((int(r["i"]), float(r["value"]))
                 for r in rows if int(r["round"]) == last)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar([str(i) for i, _ in pts], [v for _, v in pts], color="#4878cf")
    ax.set_xlabel("client")
    ax.set_ylabel("aggregation weight")
    ax.set_title(f"Global aggregation weights, round {last}")
    return _save(fig, path)


def _metrics_figure(rows, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    metrics = sorted({r["metric"] for r in rows})
    width = 0.8 / len(metrics)
    clients = sorted({int(r["client"]) for r in rows})
    for m_pos, metric in enumerate(metrics):
        vals = {int(r["client"]): float(r["value"])
                for r in rows if r["metric"] == metric}
        xs = [c + m_pos * width for c in range(len(clients))]
        ax.bar(xs, [vals.get(c, 0.0) for c in clients], width=width,
               label=metric)
    ax.set_xticks([c + 0.4 - width / 2 for c in range(len(clients))])
    ax.set_xticklabels([str(c) for c in clients])
    ax.set_xlabel("client")
    ax.set_ylabel("score")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("Downstream metrics per client")
    ax.legend(fontsize=8)
    return _save(fig, path)


def render_report(out_dir) -> list[Path]:
    """Render PNG figures for every CSV present in the run directory."""
    out = Path(out_dir)
    if not out.exists():
        raise ConfigError(f"run directory {out_dir!r} does not exist")
    written = []
    rounds = out / "rounds.csv"
    if rounds.exists():
        rows = _read_csv(rounds)
        if rows:
            written.append(_loss_figure(rows, out / "loss_curves.png"))
    diagnostics = out / "diagnostics.csv"
    if diagnostics.exists():
        rows = _read_csv(diagnostics)
        deltas = [r for r in rows if r["kind"] == "delta"]
        nablas = [r for r in rows if r["kind"] == "nabla"]
        weights = [r for r in rows if r["kind"] == "weight"]
        if deltas:
            written.append(_delta_figure(deltas, out / "client_similarity.png"))
        if nablas:
            written.append(_nabla_figure(nablas, out / "distinctiveness.png"))
        if weights:
            written.append(_weights_figure(weights, out / "aggregation_weights.png"))
    metrics = out / "metrics.csv"
    if metrics.exists():
        rows = _read_csv(metrics)
        if rows:
            written.append(_metrics_figure(rows, out / "metrics.png"))
    if not written:
        raise ConfigError(f"no CSV artifacts found under {out_dir!r}")
    return written
