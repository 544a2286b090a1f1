"""
Baseline federated algorithms on the same engine, data and evaluation:
FedAvg, FedProx, FedMD and local-only training.
"""

import logging
import time
from concurrent.futures import Executor
from dataclasses import replace
from enum import Enum
from typing import List, Optional, Sequence

from pydantic import Field, model_validator

from diagnostics import MetricsRecord, evaluate_pooled
from fed_protocol import (
    ClientModel,
    LogitsMatrix,
    ProtocolError,
    RoundConfig,
    RunHistory,
    aggregate_logits,
    aggregate_shared_params,
    client_eval_public,
    consensus_steps,
    eval_objective,
    local_steps,
    map_clients,
    sample_clients,
)
from litho_data import Dataset
from nn_engine import LayerParams, ParameterSet, eval_loss, mean_fold, param_count, reset_moments

logger = logging.getLogger(__name__)


class Algorithm(str, Enum):
    FEDKD_HYBRID = "fedkd_hybrid"
    FEDAVG = "fedavg"
    FEDMD = "fedmd"
    FEDPROX = "fedprox"
    LOCAL = "local"


class HeterogeneousModelError(ProtocolError):
    """Parameter averaging needs every client on the same architecture"""


class BaselineConfig(RoundConfig):
    algorithm: Algorithm = Algorithm.FEDAVG
    mu: float = Field(0.01, ge=0.0)

    @model_validator(mode="after")
    def _warn_zero_mu(self):
        if self.algorithm == Algorithm.FEDPROX and self.mu == 0:
            logger.warning("FedProx with mu = 0 runs plain FedAvg")
        return self


def check_homogeneous(clients: Sequence[ClientModel]) -> None:
    first = clients[0].spec
    for c in clients[1:]:
        if c.spec.layers != first.layers or c.spec.input_shape != first.input_shape:
            raise HeterogeneousModelError(
                f"client {c.client_id} has a different architecture than client 0; "
                f"parameter averaging needs identical models"
            )


def _mean_shard_loss(models, shards: Sequence[Dataset]) -> float:
    """Mean over clients of the cross-entropy of each model on its own shard"""
    values = [eval_loss(spec, params, shard.inputs(), shard.labels) for (spec, params), shard in zip(models, shards)]
    return float(mean_fold(values))


def _adopt_global(c: ClientModel, global_params: ParameterSet) -> ClientModel:
    params = {name: LayerParams(p.weights.copy(), p.bias.copy()) for name, p in global_params.items()}
    return replace(c, params=params, optimizer=reset_moments(c.optimizer, list(params)))


def _parameter_averaging(cfg: BaselineConfig, clients: Sequence[ClientModel], shards: Sequence[Dataset],
                         test: Dataset, mu: float, algorithm: str,
                         executor: Optional[Executor] = None) -> RunHistory:
    check_homogeneous(clients)
    history = RunHistory(algorithm)
    clients = list(clients)
    global_params: Optional[ParameterSet] = None
    for t in range(cfg.rounds):
        start = time.perf_counter()
        participants = sample_clients(cfg.n_clients, cfg.participation, t, cfg.seed)
        anchor = global_params

        def work(client_id: int) -> ClientModel:
            c = clients[client_id]
            if anchor is not None:
                c = _adopt_global(c, anchor)
            return local_steps(c, shards[client_id], cfg.e2, cfg.lr2, cfg.batch_size, mu, anchor)[0]

        for client_id, c in zip(participants, map_clients(work, participants, cfg.workers, executor)):
            clients[client_id] = c
        global_params = aggregate_shared_params([clients[i].params for i in participants])
        spec = clients[0].spec
        _, metrics = evaluate_pooled([(spec, global_params)], test)
        objective = _mean_shard_loss([(spec, global_params)] * len(shards), shards)
        history.records.append(MetricsRecord(
            round=t,
            **metrics.model_dump(),
            objective=objective,
            participants=len(participants),
            uplink_floats=len(participants) * param_count(global_params),
            wall_time=time.perf_counter() - start,
        ))
        history.global_trace.append(global_params)
        logger.info(f"{algorithm} round {t + 1}: accuracy={metrics.accuracy} tpr={metrics.tpr} fpr={metrics.fpr}")
    history.clients = clients
    return history


def run_fedavg(cfg: BaselineConfig, clients: Sequence[ClientModel], shards: Sequence[Dataset], test: Dataset,
               executor: Optional[Executor] = None) -> RunHistory:
    """Participants download the global model, train E2 local steps, and the server averages all parameters.

    Round 0 starts from each client's own initialization. The global model is
    what gets evaluated.
    """
    return _parameter_averaging(cfg, clients, shards, test, 0.0, Algorithm.FEDAVG.value, executor)


def run_fedprox(cfg: BaselineConfig, clients: Sequence[ClientModel], shards: Sequence[Dataset], test: Dataset,
                executor: Optional[Executor] = None) -> RunHistory:
    """FedAvg with local gradients g + mu * (w - w_global); no proximal anchor exists in round 0"""
    return _parameter_averaging(cfg, clients, shards, test, cfg.mu, Algorithm.FEDPROX.value, executor)


def run_fedmd(cfg: BaselineConfig, clients: Sequence[ClientModel], shards: Sequence[Dataset], public: Dataset,
              test: Dataset, executor: Optional[Executor] = None) -> RunHistory:
    """Logit averaging only: distill E1 steps towards the previous round's mean logits, then E2 local steps"""
    history = RunHistory(Algorithm.FEDMD.value)
    clients = list(clients)
    aggregated: Optional[LogitsMatrix] = None
    for t in range(cfg.rounds):
        start = time.perf_counter()
        participants = sample_clients(cfg.n_clients, cfg.participation, t, cfg.seed)
        target = aggregated

        def work(client_id: int):
            c = clients[client_id]
            if target is not None:
                c, _ = consensus_steps(c, target, public, cfg.e1, cfg.lr1, cfg.lam, cfg.batch_size,
                                        public_ce=False, full_batch=cfg.full_batch_public)
            c, _ = local_steps(c, shards[client_id], cfg.e2, cfg.lr2, cfg.batch_size)
            return c, client_eval_public(c, public)

        results = map_clients(work, participants, cfg.workers, executor)
        for client_id, (c, _) in zip(participants, results):
            clients[client_id] = c
        aggregated = aggregate_logits([logits for _, logits in results])
        _, metrics = evaluate_pooled([(c.spec, c.params) for c in clients], test)
        history.records.append(MetricsRecord(
            round=t,
            **metrics.model_dump(),
            objective=eval_objective(clients, None, aggregated, public, cfg.lam),
            participants=len(participants),
            uplink_floats=len(participants) * aggregated.values.size,
            wall_time=time.perf_counter() - start,
        ))
        logger.info(f"fedmd round {t + 1}: accuracy={metrics.accuracy} tpr={metrics.tpr} fpr={metrics.fpr}")
    history.clients = clients
    return history


def run_local(cfg: BaselineConfig, clients: Sequence[ClientModel], shards: Sequence[Dataset], test: Dataset,
              executor: Optional[Executor] = None) -> RunHistory:
    """Every client trains E2 steps per round on its own shard; nothing is exchanged"""
    history = RunHistory(Algorithm.LOCAL.value)
    clients = list(clients)
    ids: List[int] = list(range(len(clients)))
    for t in range(cfg.rounds):
        start = time.perf_counter()

        def work(client_id: int) -> ClientModel:
            return local_steps(clients[client_id], shards[client_id], cfg.e2, cfg.lr2, cfg.batch_size)[0]

        clients = map_clients(work, ids, cfg.workers, executor)
        models = [(c.spec, c.params) for c in clients]
        _, metrics = evaluate_pooled(models, test)
        history.records.append(MetricsRecord(
            round=t,
            **metrics.model_dump(),
            objective=_mean_shard_loss(models, shards),
            participants=len(clients),
            uplink_floats=0,
            wall_time=time.perf_counter() - start,
        ))
        logger.info(f"local round {t + 1}: accuracy={metrics.accuracy} tpr={metrics.tpr} fpr={metrics.fpr}")
    history.clients = clients
    return history
