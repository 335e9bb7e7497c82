"""Command-line pipeline: synth/partition -> pretrain -> finetune/eval,
plus the verification battery and figure rendering.

Exit codes: 0 success, 1 configuration problem, 2 verification failure,
3 runtime failure.  Every command is deterministic given the config
file and seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, normalize_scheme, parse_config, save_config
from .errors import (
    ConfigError,
    ContractError,
    ParseError,
    ValidationError,
    VerificationError,
)
from .federation import run_pretraining
from .finetune import evaluate, finetune, head_probs
from .graphs import (
    ClientDataset,
    load_dataset,
    partition_graph_level,
    partition_subgraph,
    save_dataset,
    synth_multidomain,
)
from .reporting import (
    render_report,
    write_diagnostics_csv,
    write_metrics_csv,
    write_rounds_csv,
)
from .verify import format_report, run_checks


class _Parser(argparse.ArgumentParser):
    def error(self, message):            # argparse would exit(2); remap to 1
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedcodebook",
                     description="Federated codebook pretraining sandbox")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
            ("synth", "generate a synthetic multi-domain dataset"),
            ("partition", "split monolithic synthetic graphs across clients"),
            ("pretrain", "run the two-phase federated pretraining"),
            ("finetune", "train task heads on the frozen checkpoint"),
            ("eval", "report downstream metrics"),
            ("verify", "run the oracle battery"),
            ("report", "render figures next to the CSV artifacts")):
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", help="override [run] out directory")
        p.add_argument("--scheme",
                       help="fedbook | fedavg | no-phase1 | no-phase2")
        p.add_argument("--lambda", dest="lam", type=float,
                       help="phase-1 codebook retention in [0, 1]")
    return parser


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.scheme is not None:
        cfg.scheme = normalize_scheme(args.scheme)
    if args.lam is not None:
        cfg.lam = args.lam
    cfg.validate()
    return cfg


# --------------------------------------------------------------------- data

def _synth_entries(cfg: RunConfig) -> list[tuple]:
    """(graph, client, domain) rows; graphs grouped per client, clients
    grouped per domain."""
    pairs = synth_multidomain(cfg.synth_config(), seed=cfg.seed)
    per_domain = cfg.clients // cfg.domains
    entries = []
    for pos, (g, domain) in enumerate(pairs):
        domain_index = pos // (per_domain * cfg.graphs_per_client)
        slot = (pos // cfg.graphs_per_client) % per_domain
        entries.append((g, domain_index * per_domain + slot, domain))
    return entries


def _partition_entries(cfg: RunConfig) -> list[tuple]:
    """One monolithic graph per domain, community-split across that
    domain's clients (graph-level data is dealt round-robin instead)."""
    per_domain = cfg.clients // cfg.domains
    big = dataclasses.replace(cfg)
    entries = []
    if cfg.label_level == "graph":
        pairs = synth_multidomain(cfg.synth_config(), seed=cfg.seed)
        per_count = per_domain * cfg.graphs_per_client
        for d in range(cfg.domains):
            chunk = pairs[d * per_count:(d + 1) * per_count]
            assignment = partition_graph_level([g for g, _ in chunk],
                                               per_domain, seed=cfg.seed + d)
            for part, graphs in enumerate(assignment.client_graphs):
                for g in graphs:
                    entries.append((g, d * per_domain + part, chunk[0][1]))
        return entries
    big.nodes_per_graph = cfg.nodes_per_graph * per_domain
    big.graphs_per_client = 1
    big.clients = cfg.domains          # one monolith per domain
    pairs = synth_multidomain(big.synth_config(), seed=cfg.seed)
    for d, (g, domain) in enumerate(pairs):
        assignment = partition_subgraph(g, per_domain, seed=cfg.seed + d)
        for part, sub in enumerate(assignment.client_graphs):
            entries.append((sub, d * per_domain + part, domain))
    return entries


def _resolve_datasets(cfg: RunConfig) -> list[ClientDataset]:
    if cfg.source == "files":
        return load_dataset(cfg.data_dir)
    on_disk = Path(cfg.out) / "data"
    if (on_disk / "manifest.txt").exists():
        return load_dataset(on_disk)
    entries = _synth_entries(cfg)
    by_client = {}
    for g, client, domain in entries:
        by_client.setdefault(client, ClientDataset(client, [], domain)) \
            .graphs.append(g)
    return [by_client[c] for c in sorted(by_client)]


# ----------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig) -> int:
    entries = _synth_entries(cfg)
    out = Path(cfg.out) / "data"
    save_dataset(out, entries, cfg.clients)
    save_config(cfg, Path(cfg.out) / "config.ini")
    print(f"wrote {len(entries)} graphs for {cfg.clients} clients to {out}")
    return 0


def cmd_partition(cfg: RunConfig) -> int:
    entries = _partition_entries(cfg)
    out = Path(cfg.out) / "data"
    save_dataset(out, entries, cfg.clients)
    save_config(cfg, Path(cfg.out) / "config.ini")
    print(f"wrote {len(entries)} partitioned graphs for {cfg.clients} "
          f"clients to {out}")
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")    # run manifest: resolved settings
    datasets = _resolve_datasets(cfg)
    params, reports = run_pretraining(datasets, cfg.dims(), seed=cfg.seed,
                                      rounds_phase1=cfg.rounds_phase1,
                                      rounds_phase2=cfg.rounds_phase2,
                                      settings=cfg.train_settings(),
                                      scheme=cfg.scheme)
    save_checkpoint(out / "checkpoint.json", params,
                    meta={"scheme": cfg.scheme, "seed": cfg.seed,
                          "rounds_phase1": cfg.rounds_phase1,
                          "rounds_phase2": cfg.rounds_phase2})
    write_rounds_csv(out / "rounds.csv", reports)
    write_diagnostics_csv(out / "diagnostics.csv", reports)
    first = float(np.mean(reports[0].client_losses))
    last = float(np.mean(reports[-1].client_losses))
    print(f"pretrained {cfg.scheme} for {len(reports)} rounds on "
          f"{len(datasets)} clients; mean loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return 0


def _client_metrics(cfg: RunConfig) -> list[tuple]:
    ckpt = Path(cfg.out) / "checkpoint.json"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}; run pretrain first")
    params, _ = load_checkpoint(ckpt)
    datasets = _resolve_datasets(cfg)
    task = cfg.task_spec()
    run_id = Path(cfg.out).name
    rows = []
    for ds in datasets:
        res = finetune(ds.graphs, params, task, epochs=cfg.finetune_epochs,
                       lr=cfg.finetune_lr,
                       seed=np.random.SeedSequence([cfg.seed, ds.client_id]))
        rows.append((run_id, ds.client_id, task.level,
                     f"val_{task.metric}", res.val_trace[-1], cfg.seed))
        if len(res.test_idx):
            probs = head_probs(res.embeddings[res.test_idx], res.proto,
                               res.linear)
            score = evaluate(probs, res.labels[res.test_idx], task.metric)
            rows.append((run_id, ds.client_id, task.level,
                         f"test_{task.metric}", score, cfg.seed))
    return rows


def _print_metric_summary(rows) -> None:
    for row in rows:
        print(f"client {row[1]}  {row[3]} = {float(row[4]):.4f}")
    tests = [float(r[4]) for r in rows if str(r[3]).startswith("test_")]
    if tests:
        print(f"mean test metric over {len(tests)} clients: "
              f"{float(np.mean(tests)):.4f}")


def cmd_finetune(cfg: RunConfig) -> int:
    rows = _client_metrics(cfg)
    path = write_metrics_csv(Path(cfg.out) / "metrics.csv", rows)
    _print_metric_summary(rows)
    print(f"metrics: {path}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    path = Path(cfg.out) / "metrics.csv"
    if path.exists():
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [(r["run_id"], int(r["client"]), r["level"], r["metric"],
                     float(r["value"]), int(r["seed"]))
                    for r in csv.DictReader(fh)]
    else:
        rows = _client_metrics(cfg)
        write_metrics_csv(path, rows)
    _print_metric_summary(rows)
    return 0


def cmd_verify(cfg: RunConfig) -> int:
    results = run_checks(seed=cfg.seed)
    print(format_report(results))
    failed = [r for r in results if not r.passed]
    if failed:
        raise VerificationError(f"{len(failed)} of {len(results)} checks failed")
    print(f"all {len(results)} checks passed")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    for path in render_report(cfg.out):
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "partition": cmd_partition,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _load_config(args)
        return _COMMANDS[args.command](cfg)
    except (ConfigError, ParseError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:                       # noqa: BLE001
        print(f"runtime error: {exc!r}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
