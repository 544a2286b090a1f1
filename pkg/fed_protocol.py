"""
FedKD-hybrid round engine
Clients train on their private shards, publish logits on the shared public
dataset plus the parameters of the shared layers, and the server averages
both. Each round a participating client first adopts the averaged shared
layers and distills towards the averaged logits (consensus update), then
trains locally.
"""

import copy
import logging
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from diagnostics import (
    ClassificationMetrics,
    MetricsRecord,
    compute_metrics,
    confusion_from_logits,
    evaluate_pooled,
)
from litho_data import Dataset, round_half_up
from nn_engine import (
    LayerParams,
    ModelSpec,
    NonFiniteError,
    OptimizerKind,
    OptimizerState,
    ParameterSet,
    check_finite,
    copy_params,
    hybrid_loss,
    init_optimizer,
    init_params,
    loss_and_grads,
    mean_fold,
    optimizer_step,
    param_count,
    params_equal,
    params_mean,
    predict_logits,
    reset_moments,
    select_layers,
)

logger = logging.getLogger(__name__)

# Keys of the independent random streams derived from the run seed
CLIENT_STREAM = 1
SAMPLING_STREAM = 2
INIT_STREAM = 3

AGGREGATED = "aggregated"


class ProtocolError(ValueError):
    """Invalid federated protocol input"""


class AggregationError(ProtocolError):
    """Client contributions cannot be averaged"""

    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(message)
        self.layer = layer


class ClientDivergedError(NonFiniteError):
    """A client's training produced NaN/Inf"""

    def __init__(self, client_id: int, phase: str, step: int, detail: str = ""):
        message = f"client {client_id} diverged during {phase} step {step}"
        super().__init__(f"{message}: {detail}" if detail else message)
        self.client_id = client_id
        self.phase = phase
        self.step = step


class InvariantViolation(AssertionError):
    """Round engine self-check failed (check_invariants mode)"""


class RoundConfig(BaseModel):
    """Protocol hyperparameters shared by every client of a run"""

    model_config = ConfigDict(frozen=True)

    rounds: int = Field(10, ge=1)
    n_clients: int = Field(8, ge=1)
    participation: float = Field(1.0, gt=0.0, le=1.0)
    e1: int = Field(20, ge=0)
    e2: int = Field(10, ge=0)
    lr1: float = Field(1e-3, gt=0.0)
    lr2: float = Field(1e-3, gt=0.0)
    lam: float = Field(0.5, ge=0.0)
    batch_size: int = Field(64, ge=1)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    seed: int = Field(0, ge=0)
    full_batch_public: bool = False
    public_ce: bool = True
    check_invariants: bool = False
    workers: int = Field(1, ge=1)


@dataclass(frozen=True, eq=False)
class ClientModel:
    client_id: int
    spec: ModelSpec
    params: ParameterSet
    optimizer: OptimizerState
    rng: np.random.Generator = field(repr=False)

    @property
    def shared_params(self) -> ParameterSet:
        return select_layers(self.params, self.spec.shared_param_layers)


@dataclass(frozen=True, eq=False)
class LogitsMatrix:
    values: np.ndarray
    source: Union[int, str] = AGGREGATED

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ProtocolError(f"logits matrix must be 2-D, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class ServerState:
    shared: Optional[ParameterSet] = None
    logits: Optional[LogitsMatrix] = None
    t: int = 0

    @property
    def has_aggregate(self) -> bool:
        return self.shared is not None and self.logits is not None


@dataclass
class ClientReport:
    client_id: int
    consensus_losses: List[float]
    local_losses: List[float]
    public_metrics: ClassificationMetrics
    uplink_floats: int
    shared_after_replace: Optional[ParameterSet] = None


class RoundResult(NamedTuple):
    state: ServerState
    clients: List[ClientModel]
    reports: Dict[int, ClientReport]
    participants: List[int]

    @property
    def uplink_floats(self) -> int:
        return sum(r.uplink_floats for r in self.reports.values())


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------

def client_stream(seed: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, CLIENT_STREAM, client_id])


def make_client(client_id: int, spec: ModelSpec, seed: int, optimizer=OptimizerKind.ADAM,
                lr: float = 1e-3, params: Optional[ParameterSet] = None) -> ClientModel:
    """Client with its own RNG stream; parameters drawn from that stream unless given"""
    rng = client_stream(seed, client_id)
    if params is None:
        params = init_params(spec, rng)
    return ClientModel(client_id, spec, params, init_optimizer(optimizer, params, lr), rng)


def make_clients(specs: Sequence[ModelSpec], seed: int, optimizer=OptimizerKind.ADAM, lr: float = 1e-3,
                 common_init: bool = False) -> List[ClientModel]:
    """One client per spec. With common_init, clients sharing an architecture start from one draw."""
    shared_init: Dict[ModelSpec, ParameterSet] = {}
    clients = []
    for client_id, spec in enumerate(specs):
        params = None
        if common_init:
            if spec not in shared_init:
                rng = np.random.default_rng([seed, INIT_STREAM, len(shared_init)])
                shared_init[spec] = init_params(spec, rng)
            params = copy_params(shared_init[spec])
        clients.append(make_client(client_id, spec, seed, optimizer, lr, params))
    return clients


def sample_clients(n: int, participation: float, t: int, seed: int) -> List[int]:
    """Participants of round t in ascending id order.

    k = max(1, round_half_up(participation * n)) ids are the prefix of a
    Fisher-Yates shuffle of 0..n-1 driven by the (seed, t) sampling stream:
    for i < k, swap position i with i + rng.integers(n - i).
    """
    if n < 1:
        raise ProtocolError(f"need at least one client, got {n}")
    if not 0 < participation <= 1:
        raise ProtocolError(f"participation must be in (0, 1], got {participation}")
    k = max(1, round_half_up(participation * n))
    rng = np.random.default_rng([seed, SAMPLING_STREAM, t])
    perm = np.arange(n)
    for i in range(k):
        j = i + int(rng.integers(n - i))
        perm[i], perm[j] = perm[j], perm[i]
    return sorted(int(i) for i in perm[:k])


def _draw_batch(rng: np.random.Generator, n: int, batch_size: int, full_batch: bool = False):
    if full_batch or batch_size >= n:
        return None
    return rng.choice(n, size=batch_size, replace=False)


def _proximal(grads: ParameterSet, params: ParameterSet, anchor: ParameterSet, mu: float) -> ParameterSet:
    return {
        name: LayerParams(g.weights + mu * (params[name].weights - anchor[name].weights),
                          g.bias + mu * (params[name].bias - anchor[name].bias))
        for name, g in grads.items()
    }


def local_steps(c: ClientModel, shard: Dataset, e2: int, lr: float, batch_size: int,
                 mu: float = 0.0, anchor: Optional[ParameterSet] = None) -> Tuple[ClientModel, List[float]]:
    if e2 < 0:
        raise ProtocolError(f"E2 must be >= 0, got {e2}")
    if len(shard) == 0:
        raise ProtocolError(f"client {c.client_id} has an empty private shard")
    if e2 == 0:
        return c, []
    rng = copy.deepcopy(c.rng)
    params, opt = c.params, c.optimizer
    inputs = shard.inputs()
    losses = []
    for step in range(e2):
        idx = _draw_batch(rng, len(shard), batch_size)
        xb, yb = (inputs, shard.labels) if idx is None else (inputs[idx], shard.labels[idx])
        try:
            loss, grads = loss_and_grads(c.spec, params, xb, yb)
            if anchor is not None and mu > 0:
                grads = _proximal(grads, params, anchor, mu)
            params, opt = optimizer_step(params, grads, opt, lr)
        except NonFiniteError as e:
            raise ClientDivergedError(c.client_id, "local", step, str(e)) from e
        losses.append(loss)
    return replace(c, params=params, optimizer=opt, rng=rng), losses


def client_local_train(c: ClientModel, shard: Dataset, e2: int, lr: float, batch_size: int,
                       mu: float = 0.0, anchor: Optional[ParameterSet] = None) -> ClientModel:
    """E2 optimizer steps of cross-entropy on private minibatches.

    When `mu` > 0 and `anchor` is given, the proximal gradient mu * (w - anchor)
    is added to every anchored layer.
    """
    return local_steps(c, shard, e2, lr, batch_size, mu, anchor)[0]


def client_eval_public(c: ClientModel, public: Dataset) -> LogitsMatrix:
    if len(public) == 0:
        raise ProtocolError("public dataset is empty")
    try:
        values = predict_logits(c.spec, c.params, public.inputs())
    except NonFiniteError as e:
        raise ClientDivergedError(c.client_id, "eval", 0, str(e)) from e
    return LogitsMatrix(values, c.client_id)


def _check_shared_shapes(expected: ParameterSet, given: ParameterSet, client_id=None) -> None:
    who = "" if client_id is None else f" (client {client_id})"
    if set(expected) != set(given):
        missing = sorted(set(expected) ^ set(given))
        raise AggregationError(f"shared layer {missing[0]} missing on one side{who}", missing[0])
    for name, p in expected.items():
        q = given[name]
        if p.weights.shape != q.weights.shape or p.bias.shape != q.bias.shape:
            raise AggregationError(f"shared layer {name} shape mismatch{who}", name)


def replace_shared(c: ClientModel, shared: ParameterSet) -> ClientModel:
    """Adopt the averaged shared layers and zero their Adam moments"""
    names = c.spec.shared_param_layers
    if set(shared) != set(names):
        raise ProtocolError(
            f"client {c.client_id}: aggregate covers {sorted(shared)}, shared layers are {sorted(names)}"
        )
    _check_shared_shapes(c.shared_params, shared, c.client_id)
    params = dict(c.params)
    for name in names:
        params[name] = LayerParams(shared[name].weights.copy(), shared[name].bias.copy())
    return replace(c, params=params, optimizer=reset_moments(c.optimizer, names))


def consensus_steps(c: ClientModel, logits: LogitsMatrix, public: Dataset, e1: int, lr: float, lam: float,
                     batch_size: int, public_ce: bool = True,
                     full_batch: bool = False) -> Tuple[ClientModel, List[float]]:
    if e1 < 0:
        raise ProtocolError(f"E1 must be >= 0, got {e1}")
    if logits.shape[0] != len(public):
        raise ProtocolError(f"aggregated logits have {logits.shape[0]} rows, public dataset has {len(public)}")
    if e1 == 0:
        return c, []
    rng = copy.deepcopy(c.rng)
    params, opt = c.params, c.optimizer
    inputs = public.inputs()
    losses = []
    for step in range(e1):
        idx = _draw_batch(rng, len(public), batch_size, full_batch)
        if idx is None:
            xb, yb, target = inputs, public.labels, logits.values
        else:
            xb, yb, target = inputs[idx], public.labels[idx], logits.values[idx]
        try:
            loss, grads = loss_and_grads(c.spec, params, xb, yb, target, lam, include_ce=public_ce)
            params, opt = optimizer_step(params, grads, opt, lr)
        except NonFiniteError as e:
            raise ClientDivergedError(c.client_id, "consensus", step, str(e)) from e
        losses.append(loss)
    return replace(c, params=params, optimizer=opt, rng=rng), losses


def client_consensus_update(c: ClientModel, shared: ParameterSet, logits: LogitsMatrix, public: Dataset,
                            e1: int, lr: float, lam: float, batch_size: int, public_ce: bool = True,
                            full_batch: bool = False) -> ClientModel:
    """Replace shared layers, reset their moments, then E1 steps of CE + lam * MSE on the public set"""
    c = replace_shared(c, shared)
    return consensus_steps(c, logits, public, e1, lr, lam, batch_size, public_ce, full_batch)[0]


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------

def aggregate_logits(ms: Sequence[LogitsMatrix]) -> LogitsMatrix:
    """Entrywise mean folded in ascending client id order"""
    if not ms:
        raise AggregationError("no logits to aggregate")
    if all(isinstance(m.source, int) for m in ms):
        ms = sorted(ms, key=lambda m: m.source)
    shape = ms[0].shape
    for m in ms[1:]:
        if m.shape != shape:
            raise AggregationError(f"logits shape mismatch: {m.shape} from client {m.source}, expected {shape}")
    return LogitsMatrix(mean_fold([m.values for m in ms]), AGGREGATED)


def aggregate_shared_params(ps: Sequence[ParameterSet]) -> ParameterSet:
    """Per-entry mean of the shared layers, folded in list order"""
    if not ps:
        raise AggregationError("no parameters to aggregate")
    for p in ps[1:]:
        _check_shared_shapes(ps[0], p)
    return params_mean(list(ps))


def shared_layer_names(clients: Sequence[ClientModel]) -> List[str]:
    names = clients[0].spec.shared_param_layers
    for c in clients[1:]:
        if c.spec.shared_param_layers != names:
            raise AggregationError(
                f"client {c.client_id} shares {c.spec.shared_param_layers}, client 0 shares {names}"
            )
    return names


def map_clients(fn: Callable, client_ids: Sequence[int], workers: int = 1,
                executor: Optional[Executor] = None) -> list:
    """fn over client ids, on a thread pool when workers > 1; results keep id order"""
    if executor is not None:
        return list(executor.map(fn, client_ids))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, client_ids))
    return [fn(client_id) for client_id in client_ids]


def _client_round(c: ClientModel, state: ServerState, public: Dataset, shard: Dataset,
                  cfg: RoundConfig) -> Tuple[ClientModel, LogitsMatrix, ClientReport]:
    consensus_losses: List[float] = []
    snapshot = None
    if state.has_aggregate:
        c = replace_shared(c, state.shared)
        if cfg.check_invariants:
            snapshot = copy_params(c.shared_params)
        c, consensus_losses = consensus_steps(c, state.logits, public, cfg.e1, cfg.lr1, cfg.lam, cfg.batch_size,
                                               cfg.public_ce, cfg.full_batch_public)
    c, local_losses = local_steps(c, shard, cfg.e2, cfg.lr2, cfg.batch_size)
    logits = client_eval_public(c, public)
    report = ClientReport(
        client_id=c.client_id,
        consensus_losses=consensus_losses,
        local_losses=local_losses,
        public_metrics=compute_metrics(confusion_from_logits(logits.values, public.labels)),
        uplink_floats=param_count(c.shared_params) + logits.values.size,
        shared_after_replace=snapshot,
    )
    return c, logits, report


def check_shared_consensus(reports: Dict[int, ClientReport], shared: ParameterSet, t: int) -> None:
    """Every participant's post-replacement shared layers equal the aggregate bit for bit"""
    for client_id, report in reports.items():
        if report.shared_after_replace is None:
            continue
        if not params_equal(report.shared_after_replace, shared):
            raise InvariantViolation(
                f"round {t}: client {client_id} shared layers differ from the aggregate after replacement"
            )


def run_round(state: ServerState, clients: Sequence[ClientModel], public: Dataset, shards: Sequence[Dataset],
              cfg: RoundConfig, executor: Optional[Executor] = None) -> RoundResult:
    """One FedKD-hybrid round: sample, consensus, local train, publish, aggregate"""
    if state.t >= cfg.rounds:
        raise ProtocolError(f"round {state.t} is past the configured {cfg.rounds} rounds")
    if len(clients) != cfg.n_clients or len(shards) != cfg.n_clients:
        raise ProtocolError(f"{len(clients)} clients and {len(shards)} shards for n_clients={cfg.n_clients}")
    names = shared_layer_names(clients)
    participants = sample_clients(cfg.n_clients, cfg.participation, state.t, cfg.seed)

    def work(client_id: int):
        return _client_round(clients[client_id], state, public, shards[client_id], cfg)

    results = map_clients(work, participants, cfg.workers, executor)

    updated = list(clients)
    reports = {}
    for client_id, (client, _, report) in zip(participants, results):
        updated[client_id] = client
        reports[client_id] = report

    if cfg.check_invariants and state.has_aggregate:
        check_shared_consensus(reports, state.shared, state.t)

    logits = aggregate_logits([logits for _, logits, _ in results])
    shared = aggregate_shared_params([select_layers(updated[i].params, names) for i in participants])
    new_state = ServerState(shared, logits, state.t + 1)
    logger.info(f"Round {state.t + 1}/{cfg.rounds}: {len(participants)} participants, "
                f"uplink {sum(r.uplink_floats for r in reports.values())} floats")
    for client_id, report in reports.items():
        logger.debug(f"client {client_id}: consensus {report.consensus_losses[-1:]} "
                     f"local {report.local_losses[-1:]} public acc {report.public_metrics.accuracy}")
    return RoundResult(new_state, updated, reports, participants)


def eval_objective(clients: Sequence[ClientModel], shared: Optional[ParameterSet],
                   logits: Optional[LogitsMatrix], public: Dataset, lam: float) -> float:
    """Global hybrid objective on the public set.

    F = mean_i [ CE(w_bar, w_i^p ; D) + lam * MSE(f_i(D), f_bar(D)) ], where client
    i's shared layers are substituted by w_bar. The distillation term is dropped
    while no aggregate exists.
    """
    if not clients:
        raise ProtocolError("no clients to evaluate")
    inputs = public.inputs()
    target = None if logits is None else logits.values
    values = []
    for c in clients:
        params = c.params
        if shared:
            _check_shared_shapes(c.shared_params, shared, c.client_id)
            params = {**c.params, **shared}
        client_logits = predict_logits(c.spec, params, inputs)
        values.append(hybrid_loss(client_logits, public.labels, target, lam))
    return float(check_finite(mean_fold([np.float64(v) for v in values]), "global objective"))


@dataclass
class RunHistory:
    """Outcome of a multi-round run of any algorithm"""

    algorithm: str
    records: List[MetricsRecord] = field(default_factory=list)
    clients: List[ClientModel] = field(default_factory=list)
    # aggregated parameters after each round (shared layers, or the full global model)
    global_trace: List[ParameterSet] = field(default_factory=list)
    reports: List[Dict[int, ClientReport]] = field(default_factory=list)
    state: Optional[ServerState] = None


def run_fedkd_hybrid(cfg: RoundConfig, clients: Sequence[ClientModel], public: Dataset,
                     shards: Sequence[Dataset], test: Dataset, executor: Optional[Executor] = None) -> RunHistory:
    """T rounds of run_round, evaluating every client's deployed model on `test` after each"""
    history = RunHistory("fedkd_hybrid")
    state = ServerState()
    clients = list(clients)
    for t in range(cfg.rounds):
        start = time.perf_counter()
        result = run_round(state, clients, public, shards, cfg, executor)
        state, clients = result.state, result.clients
        _, metrics = evaluate_pooled([(c.spec, c.params) for c in clients], test)
        objective = eval_objective(clients, state.shared, state.logits, public, cfg.lam)
        history.records.append(MetricsRecord(
            round=t,
            **metrics.model_dump(),
            objective=objective,
            participants=len(result.participants),
            uplink_floats=result.uplink_floats,
            wall_time=time.perf_counter() - start,
        ))
        history.global_trace.append(state.shared)
        history.reports.append(result.reports)
        logger.info(f"fedkd_hybrid round {t + 1}: accuracy={metrics.accuracy} tpr={metrics.tpr} "
                    f"fpr={metrics.fpr} objective={objective:.6f}")
    history.clients = clients
    history.state = state
    return history
