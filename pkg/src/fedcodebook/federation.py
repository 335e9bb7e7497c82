"""The communication-round state machine.

Each round: every client trains its cached parameters locally for E
epochs, uploads codebook + counters + everything else + sample count,
and resets its counters.  During the first rounds_phase1 rounds the
server answers with personalized caches (frequency-gated codebook
mixing, similarity-weighted other parameters); afterwards it broadcasts
one distinctiveness-weighted global model to everyone.  Scheme variants
swap either phase (or both) for sample-weighted averaging.

Clients execute sequentially here, but every aggregation input is
ordered by client id, so any parallel schedule producing the same
uploads would yield bit-identical results.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .aggregation import (
    ClientUpload,
    _softmax,
    build_similarity_tables,
    fedavg_aggregate,
    global_aggregate_phase2,
    personalized_other_params,
    update_codebooks_phase1,
)
from .errors import ConfigError, ContractError
from .model import GVQDims, GVQParams, from_arrays, init_params, local_train
from .optim import make_optimizer

SCHEMES = ("fedbook", "fedavg", "fedbook_no_phase1", "fedbook_no_phase2")


@dataclass
class TrainSettings:
    local_epochs: int = 2
    optimizer: str = "adam"
    lr: float = 1e-4
    gamma: float = 2.0
    mask_ratio: float = 0.25
    lam: float = 0.5
    batch_size: int | None = None

    def validate(self):
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda {self.lam} outside [0, 1]")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} outside [0, 1)")


@dataclass
class ServerState:
    rounds_phase1: int
    rounds_phase2: int
    scheme: str
    global_params: GVQParams
    client_caches: list
    round: int = 0              # rounds completed so far


@dataclass
class ClientRuntime:
    client_id: int
    graphs: list
    domain: str | None
    rng: np.random.Generator
    params: GVQParams           # same object as the server-side cache


@dataclass
class RoundReport:
    round_index: int
    phase: int
    client_losses: list
    delta: np.ndarray | None = None
    nabla: np.ndarray | None = None
    weights: np.ndarray | None = None
    duration_s: float = 0.0
    uploads: list | None = None     # only kept when capture_uploads is set


def init_federation(datasets: list, dims: GVQDims, seed: int,
                    rounds_phase1: int, rounds_phase2: int,
                    scheme: str = "fedbook"):
    """One seeded global initialization, cloned into every client cache.

    datasets: one entry per client, each with .graphs and optionally
    .domain (the ClientDataset shape produced by the data loader).
    """
    if not datasets:
        raise ConfigError("need at least one client dataset")
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    if rounds_phase1 < 0:
        raise ConfigError("rounds_phase1 must be >= 0")
    if rounds_phase2 < 1:
        raise ConfigError("rounds_phase2 must be >= 1 (no global model otherwise)")
    k = len(datasets)
    seeds = np.random.SeedSequence(seed).spawn(k + 1)
    global_params = init_params(dims, np.random.default_rng(seeds[0]))
    caches = [global_params.clone() for _ in range(k)]
    clients = [ClientRuntime(client_id=i, graphs=ds.graphs,
                             domain=getattr(ds, "domain", None),
                             rng=np.random.default_rng(seeds[i + 1]),
                             params=caches[i])
               for i, ds in enumerate(datasets)]
    server = ServerState(rounds_phase1=rounds_phase1, rounds_phase2=rounds_phase2,
                         scheme=scheme, global_params=global_params,
                         client_caches=caches)
    return server, clients


def _upload_from(client: ClientRuntime, sample_count: int) -> ClientUpload:
    p = client.params
    return ClientUpload(
        client_id=client.client_id,
        tokens=np.stack([t.data.copy() for t in p.tokens]),
        counters=p.counters.copy(),
        other={name: t.data.copy() for name, t in p.other_named()},
        sample_count=sample_count,
    )


def _params_from(dims: GVQDims, tokens: np.ndarray, other: dict) -> GVQParams:
    arrays = dict(other)
    for h in range(tokens.shape[0]):
        arrays[f"codebook.{h}"] = tokens[h]
    return from_arrays(dims, arrays)       # counters start at zero


def _install_cache(server: ServerState, client: ClientRuntime, params: GVQParams):
    server.client_caches[client.client_id] = params
    client.params = params


def run_round(server: ServerState, clients: list, settings: TrainSettings,
              capture_uploads: bool = False) -> RoundReport:
    """One full communication round; increments the server round counter."""
    settings.validate()
    t0 = time.perf_counter()
    r = server.round + 1
    total = server.rounds_phase1 + server.rounds_phase2
    if r > total:
        raise ContractError(f"round {r} past the configured bound {total}")
    phase = 1 if r <= server.rounds_phase1 else 2
    by_id = {c.client_id: c for c in clients}
    if len(by_id) != len(clients):
        raise ContractError("duplicate client ids")

    uploads, losses = [], {}
    for client in clients:
        opt = make_optimizer(settings.optimizer, client.params.tensors(), settings.lr)
        res = local_train(client.graphs, client.params, settings.local_epochs,
                          opt, client.rng, gamma=settings.gamma,
                          mask_ratio=settings.mask_ratio,
                          batch_size=settings.batch_size)
        uploads.append(_upload_from(client, res.sample_count))
        client.params.counters[...] = 0         # reset after upload
        losses[client.client_id] = float(np.mean(res.loss_trace))
    uploads.sort(key=lambda u: u.client_id)     # arrival order never matters

    dims = server.global_params.dims
    report = RoundReport(round_index=r, phase=phase,
                         client_losses=[losses[u.client_id] for u in uploads])
    use_fedavg = (server.scheme == "fedavg"
                  or (phase == 1 and server.scheme == "fedbook_no_phase1")
                  or (phase == 2 and server.scheme == "fedbook_no_phase2"))

    if use_fedavg:
        tokens, other = fedavg_aggregate(uploads)
        total_m = sum(u.sample_count for u in uploads)
        report.weights = np.array([u.sample_count / total_m for u in uploads])
        new_global = _params_from(dims, tokens, other)
        for u in uploads:
            _install_cache(server, by_id[u.client_id], new_global.clone())
        server.global_params = new_global
    elif phase == 1:
        tables = build_similarity_tables(uploads)
        new_tokens = update_codebooks_phase1(uploads, settings.lam)
        personalized = personalized_other_params(uploads, tables.client_sim)
        for pos, u in enumerate(uploads):
            _install_cache(server, by_id[u.client_id],
                           _params_from(dims, new_tokens[pos], personalized[pos]))
        report.delta = tables.client_sim
        report.nabla = tables.distinctiveness
    else:
        tables = build_similarity_tables(uploads)
        tokens, other = global_aggregate_phase2(uploads, tables.distinctiveness)
        new_global = _params_from(dims, tokens, other)
        for u in uploads:
            _install_cache(server, by_id[u.client_id], new_global.clone())
        server.global_params = new_global
        report.delta = tables.client_sim
        report.nabla = tables.distinctiveness
        report.weights = _softmax(tables.distinctiveness)

    server.round = r
    report.duration_s = time.perf_counter() - t0
    if capture_uploads:
        report.uploads = uploads
    return report


def run_pretraining(datasets: list, dims: GVQDims, seed: int,
                    rounds_phase1: int, rounds_phase2: int,
                    settings: TrainSettings, scheme: str = "fedbook"):
    """R1 personalized rounds then R2 global rounds; returns the final
    global parameters and one report per round."""
    server, clients = init_federation(datasets, dims, seed,
                                      rounds_phase1, rounds_phase2, scheme)
    reports = [run_round(server, clients, settings)
               for _ in range(rounds_phase1 + rounds_phase2)]
    return server.global_params, reports
