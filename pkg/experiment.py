"""
Experiment configuration, orchestration and result files
"""

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from pathlib import Path
from typing import Dict, List, Literal, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from baselines import Algorithm, BaselineConfig, run_fedavg, run_fedmd, run_fedprox, run_local
from diagnostics import (
    ConvergenceConstants,
    LogisticSurrogate,
    MetricsRecord,
    NetworkOracle,
    QuadraticSurrogate,
    check_descent,
    check_rate,
    estimate_constants,
    evaluate_pooled,
)
from fed_protocol import RunHistory, make_clients, run_fedkd_hybrid
from litho_data import (
    PRESETS,
    Dataset,
    DatasetError,
    PartitionPlan,
    concat_datasets,
    dataset_stats,
    generate_synthetic,
    load_dataset,
    partition,
    save_dataset,
    split_public_private,
)
from nn_engine import (
    SHARED_LAYERS,
    GradcheckReport,
    ModelSpec,
    OptimizerKind,
    compact_hetero_spec,
    compact_spec,
    gradcheck,
    init_params,
    predict_logits,
    hotspot_cnn_wide_spec,
    hotspot_cnn_spec,
)

logger = logging.getLogger(__name__)

__version__ = "1.0.0"

ENV_PREFIX = "FEDKD_"
DATA_FILES = {"public": "public.lhd", "private": "private.lhd", "test": "test.lhd"}
METRICS_COLUMNS = ["round", "algorithm", "seed", "accuracy", "tpr", "fpr", "objective", "participants"]

# Keys of the data streams derived from the run seed
TRAIN_STREAM = 10
TEST_STREAM = 11
SPLIT_STREAM = 12
PARTITION_STREAM = 13

# Client populations of a mixed run, by client id parity
CLIENT_GROUPS = ("iccad", "fab")


class ConfigError(ValueError):
    """Configuration could not be parsed or validated"""


class DataError(RuntimeError):
    """Input datasets are missing or unusable"""


class ExperimentConfig(BaseModel):
    """Every knob of a run; unknown keys are rejected"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    algorithm: Algorithm = Field(Algorithm.FEDKD_HYBRID, description="fedkd_hybrid, fedavg, fedmd, fedprox or local")
    rounds: int = Field(10, ge=1, description="communication rounds T")
    n_clients: int = Field(8, ge=1, description="client count N")
    participation: float = Field(1.0, gt=0.0, le=1.0, description="fraction of clients sampled per round")
    e1: int = Field(20, ge=0, description="public-set (consensus) minibatch steps per round")
    e2: int = Field(10, ge=0, description="private-set minibatch steps per round")
    lr1: float = Field(1e-3, gt=0.0, description="consensus learning rate")
    lr2: float = Field(1e-3, gt=0.0, description="local learning rate")
    lam: float = Field(0.5, ge=0.0, description="distillation weight")
    batch_size: int = Field(64, ge=1)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    seed: int = Field(0, ge=0)
    mu: float = Field(0.01, ge=0.0, description="FedProx proximal coefficient")
    full_batch_public: bool = Field(False, description="consensus steps use the whole public set")
    public_ce: bool = Field(True, description="cross-entropy on public labels during consensus")
    shared_layers: Tuple[str, ...] = Field(SHARED_LAYERS, description="comma list, 'all' or 'none'")
    model: Literal["hotspot_cnn", "compact"] = "compact"
    heterogeneous: bool = Field(False, description="odd client ids use the widened architecture")
    populations: Literal["single", "mixed"] = Field(
        "single", description="mixed: even ids are ICCAD-like clients, odd ids FAB-like clients on the widened model"
    )
    common_init: bool = Field(False, description="clients of one architecture start from one draw")
    partition: Literal["iid", "dirichlet"] = "iid"
    alpha: float = Field(0.5, gt=0.0, description="Dirichlet concentration")
    data_dir: str = Field("", description="directory with public/private/test .lhd files; empty generates")
    preset: Literal["none", "iccad", "fab"] = Field("none", description="class balance preset for generation")
    n_train: int = Field(2000, ge=2)
    hotspot_rate: float = Field(0.0658, gt=0.0, lt=1.0)
    n_test: int = Field(4000, ge=2)
    test_hotspot_rate: float = Field(0.018, gt=0.0, lt=1.0)
    public_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    out_dir: str = "runs"
    workers: int = Field(1, ge=1)
    check_invariants: bool = False
    diag_pairs: int = Field(4, ge=2, description="parameter pairs for the manifest's constant estimates")

    @field_validator("shared_layers", mode="before")
    @classmethod
    def _split_layers(cls, value):
        if isinstance(value, str):
            value = value.strip()
            if value.lower() == "none" or not value:
                return ()
            return tuple(part.strip() for part in value.split(",") if part.strip())
        return tuple(value)

    @model_validator(mode="after")
    def _check_populations(self):
        if self.populations == "mixed":
            if self.n_clients < len(CLIENT_GROUPS):
                raise ValueError(f"mixed populations need at least {len(CLIENT_GROUPS)} clients")
            if self.data_dir:
                raise ValueError("mixed populations generate their own data; leave data_dir empty")
            if self.preset != "none":
                raise ValueError("mixed populations take each group's own preset; leave preset as none")
        return self

    def baseline_config(self) -> BaselineConfig:
        fields = set(BaselineConfig.model_fields)
        return BaselineConfig(**{k: v for k, v in self.model_dump().items() if k in fields})

    def generation_counts(self, group: Optional[str] = None) -> Tuple[int, float, int, float]:
        """Counts and hotspot rates to generate; a client group keeps n_train / n_test at its preset's rates"""
        if group is not None:
            p = PRESETS[group]
            return self.n_train, p.train_rate, self.n_test, p.test_rate
        if self.preset != "none":
            p = PRESETS[self.preset]
            return p.train, p.train_rate, p.test, p.test_rate
        return self.n_train, self.hotspot_rate, self.n_test, self.test_hotspot_rate


def _canonical_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    return repr(value) if isinstance(value, float) else str(value)


def canonical_text(cfg: ExperimentConfig, exclude: Sequence[str] = ("out_dir",)) -> str:
    """Sorted `key = value` lines; the hashed form of a config"""
    items = cfg.model_dump()
    lines = [f"{key} = {_canonical_value(items[key])}" for key in sorted(items) if key not in exclude]
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()


def family_hash(cfg: ExperimentConfig) -> str:
    """Hash of the config modulo seed"""
    return hashlib.sha256(canonical_text(cfg, ("out_dir", "seed")).encode("utf-8")).hexdigest()


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, object]] = None,
                environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """defaults < config file < FEDKD_* environment variables < explicit overrides"""
    values: Dict[str, object] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        for key, value in dotenv_values(path).items():
            if value is None:
                raise ConfigError(f"{path}: key '{key}' has no value")
            values[key.strip().lower()] = value.strip()
    environ = os.environ if environ is None else environ
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            values[key[len(ENV_PREFIX):].lower()] = value
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"{where}: {first['msg']} ({e.error_count()} error(s))") from e


# ---------------------------------------------------------------------------
# Data and models
# ---------------------------------------------------------------------------

class ExperimentData(NamedTuple):
    public: Dataset
    private: Dataset
    test: Dataset
    plan: PartitionPlan
    shards: List[Dataset]
    # mixed populations only: client ids and test set per group
    groups: Dict[str, List[int]] = {}
    group_tests: Dict[str, Dataset] = {}


def client_groups(cfg: ExperimentConfig) -> Dict[str, List[int]]:
    """Client ids per population; empty for a single population"""
    if cfg.populations != "mixed":
        return {}
    return {group: list(range(g, cfg.n_clients, len(CLIENT_GROUPS))) for g, group in enumerate(CLIENT_GROUPS)}


def generate_datasets(cfg: ExperimentConfig, group: Optional[str] = None) -> Dict[str, Dataset]:
    """Public, private and test sets; a client group draws from its own streams"""
    n_train, train_rate, n_test, test_rate = cfg.generation_counts(group)
    key = [] if group is None else [CLIENT_GROUPS.index(group)]
    prefix = "" if group is None else f"{group}-"
    try:
        train = generate_synthetic(n_train, train_rate, [cfg.seed, TRAIN_STREAM, *key], f"{prefix}train")
        test = generate_synthetic(n_test, test_rate, [cfg.seed, TEST_STREAM, *key], f"{prefix}test")
        public, private = split_public_private(train, cfg.public_fraction, [cfg.seed, SPLIT_STREAM, *key])
    except DatasetError as e:
        raise DataError(str(e)) from e
    return {"public": public, "private": private, "test": test}


def write_datasets(datasets: Mapping[str, Dataset], out_dir: Union[str, Path]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    try:
        return {key: save_dataset(datasets[key], out_dir / name) for key, name in DATA_FILES.items()}
    except OSError as e:
        raise DataError(f"cannot write datasets to {out_dir}: {e}") from e


def load_datasets(data_dir: Union[str, Path]) -> Dict[str, Dataset]:
    data_dir = Path(data_dir)
    datasets = {}
    for key, name in DATA_FILES.items():
        path = data_dir / name
        if not path.is_file():
            raise DataError(f"missing dataset file {path}")
        try:
            datasets[key] = load_dataset(path, key)
        except DatasetError as e:
            raise DataError(str(e)) from e
    return datasets


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    if cfg.populations == "mixed":
        return prepare_mixed_data(cfg)
    datasets = load_datasets(cfg.data_dir) if cfg.data_dir else generate_datasets(cfg)
    private = datasets["private"]
    try:
        plan = partition(private, cfg.n_clients, cfg.partition, cfg.alpha if cfg.partition == "dirichlet" else None,
                         [cfg.seed, PARTITION_STREAM])
    except DatasetError as e:
        raise DataError(str(e)) from e
    logger.info(f"Data ready: public={len(datasets['public'])} private={len(private)} test={len(datasets['test'])} "
                f"shards={plan.shard_sizes().tolist()}")
    return ExperimentData(datasets["public"], private, datasets["test"], plan, plan.shards(private))


def prepare_mixed_data(cfg: ExperimentConfig) -> ExperimentData:
    """Each group's private pool is partitioned over that group's clients only.

    The public and test sets are the groups' sets concatenated in group order.
    """
    groups = client_groups(cfg)
    per_group = {group: generate_datasets(cfg, group) for group in groups}
    assignments = []
    for g, (group, ids) in enumerate(groups.items()):
        private = per_group[group]["private"]
        try:
            plan = partition(private, len(ids), cfg.partition, cfg.alpha if cfg.partition == "dirichlet" else None,
                             [cfg.seed, PARTITION_STREAM, g])
        except DatasetError as e:
            raise DataError(f"{group}: {e}") from e
        assignments.append(np.asarray(ids, dtype=np.int64)[plan.assignment])
        logger.info(f"{group} clients {ids}: private={len(private)} shards={plan.shard_sizes().tolist()}")
    private = concat_datasets([per_group[g]["private"] for g in groups], "private")
    assignment = np.concatenate(assignments)
    assignment.setflags(write=False)
    plan = PartitionPlan(cfg.n_clients, assignment, cfg.partition,
                         cfg.alpha if cfg.partition == "dirichlet" else None)
    return ExperimentData(
        public=concat_datasets([per_group[g]["public"] for g in groups], "public"),
        private=private,
        test=concat_datasets([per_group[g]["test"] for g in groups], "test"),
        plan=plan,
        shards=plan.shards(private),
        groups=groups,
        group_tests={g: per_group[g]["test"] for g in groups},
    )


def build_specs(cfg: ExperimentConfig) -> List[ModelSpec]:
    """One ModelSpec per client; odd ids get the wide variant when heterogeneous or on mixed populations"""
    standard, wide = (hotspot_cnn_spec, hotspot_cnn_wide_spec) if cfg.model == "hotspot_cnn" else (compact_spec, compact_hetero_spec)
    base = standard()
    shared = base.param_layers if cfg.shared_layers == ("all",) else cfg.shared_layers
    try:
        standard_spec = base.with_shared(shared)
        wide_spec = wide().with_shared(shared)
    except ValueError as e:
        raise ConfigError(f"shared_layers: {e}") from e
    widen = cfg.heterogeneous or cfg.populations == "mixed"
    return [wide_spec if widen and i % 2 == 1 else standard_spec for i in range(cfg.n_clients)]


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

class GroupMetrics(BaseModel):
    """Final-round metrics of one client population, pooled over its clients on its own test set"""

    clients: List[int]
    accuracy: float
    tpr: Optional[float]
    fpr: Optional[float]


class RunManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    config_hash: str
    family_hash: str
    algorithm: str
    seed: int
    version: str = __version__
    config: Dict[str, str]
    records: List[dict]
    constants: Optional[ConvergenceConstants] = None
    groups: Dict[str, GroupMetrics] = Field(default_factory=dict)


def execute(cfg: ExperimentConfig, data: ExperimentData) -> RunHistory:
    """Run the configured algorithm over prepared data"""
    round_cfg = cfg.baseline_config()
    clients = make_clients(build_specs(cfg), cfg.seed, cfg.optimizer, cfg.lr1, cfg.common_init)
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else nullcontext()
    with pool as executor:
        if cfg.algorithm == Algorithm.FEDKD_HYBRID:
            return run_fedkd_hybrid(round_cfg, clients, data.public, data.shards, data.test, executor)
        if cfg.algorithm == Algorithm.FEDAVG:
            return run_fedavg(round_cfg, clients, data.shards, data.test, executor)
        if cfg.algorithm == Algorithm.FEDPROX:
            return run_fedprox(round_cfg, clients, data.shards, data.test, executor)
        if cfg.algorithm == Algorithm.FEDMD:
            return run_fedmd(round_cfg, clients, data.shards, data.public, data.test, executor)
        return run_local(round_cfg, clients, data.shards, data.test, executor)


def final_constants(cfg: ExperimentConfig, history: RunHistory, data: ExperimentData) -> ConvergenceConstants:
    """Constant estimates around client 0's final model (recorded only)"""
    client = history.clients[0]
    if history.state is not None and history.state.logits is not None:
        target = history.state.logits.values
    else:
        target = predict_logits(client.spec, client.params, data.public.inputs())
    public_oracle = NetworkOracle(client.spec, client.params, data.public, target)
    shard = data.shards[0]
    private_oracle = NetworkOracle(client.spec, client.params, shard,
                                   predict_logits(client.spec, client.params, shard.inputs()))
    return estimate_constants(public_oracle, cfg.lam, cfg.diag_pairs, cfg.seed, cfg.batch_size, private_oracle)


def metrics_frame(records: Sequence[MetricsRecord], algorithm: str, seed: int) -> pd.DataFrame:
    df = pd.DataFrame([r.model_dump() for r in records])
    df["round"] = df["round"] + 1
    df["algorithm"] = algorithm
    df["seed"] = seed
    for column in ("accuracy", "tpr", "fpr", "objective"):
        df[column] = df[column].astype(float)
    return df[METRICS_COLUMNS]


def write_metrics_csv(df: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Six-decimal floats, undefined rates as empty fields"""
    path = Path(path)
    df.to_csv(path, index=False, float_format="%.6f", na_rep="", lineterminator="\n")
    return path


def group_metrics(history: RunHistory, data: ExperimentData) -> Dict[str, GroupMetrics]:
    out = {}
    for group, ids in data.groups.items():
        models = [(history.clients[i].spec, history.clients[i].params) for i in ids]
        _, m = evaluate_pooled(models, data.group_tests[group])
        out[group] = GroupMetrics(clients=ids, accuracy=m.accuracy, tpr=m.tpr, fpr=m.fpr)
        logger.info(f"{group}: accuracy={m.accuracy:.4f} tpr={m.tpr} fpr={m.fpr}")
    return out


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> Tuple[RunManifest, Path]:
    """Execute a configured run and write metrics.csv, timings.csv and manifest.json"""
    out_dir = Path(out_dir or cfg.out_dir)
    run_dir = out_dir / f"{cfg.algorithm.value}-seed{cfg.seed}-{config_hash(cfg)[:10]}"
    data = prepare_data(cfg)
    logger.info(f"Running {cfg.algorithm.value} for {cfg.rounds} rounds with {cfg.n_clients} clients (seed={cfg.seed})")
    history = execute(cfg, data)
    constants = final_constants(cfg, history, data)
    groups = group_metrics(history, data)

    try:
        run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {run_dir}: {e}") from e
    write_metrics_csv(metrics_frame(history.records, cfg.algorithm.value, cfg.seed), run_dir / "metrics.csv")
    timings = pd.DataFrame({
        "round": [r.round + 1 for r in history.records],
        "wall_time": [r.wall_time for r in history.records],
        "uplink_floats": [r.uplink_floats for r in history.records],
    })
    timings.to_csv(run_dir / "timings.csv", index=False, float_format="%.6f", lineterminator="\n")

    manifest = RunManifest(
        config_hash=config_hash(cfg),
        family_hash=family_hash(cfg),
        algorithm=cfg.algorithm.value,
        seed=cfg.seed,
        config={line.split(" = ", 1)[0]: line.split(" = ", 1)[1] for line in canonical_text(cfg).splitlines()},
        records=[{**r.model_dump(exclude={"wall_time"}), "round": r.round + 1} for r in history.records],
        constants=constants,
        groups=groups,
    )
    (run_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Results written to {run_dir}")
    return manifest, run_dir


# ---------------------------------------------------------------------------
# Compare
# ---------------------------------------------------------------------------

def median(values: Sequence[Optional[float]]) -> Optional[float]:
    """Sort-middle median ignoring undefined values; mean of the two middles for even counts"""
    ordered = sorted(v for v in values if v is not None)
    if not ordered:
        return None
    mid = len(ordered) // 2
    if len(ordered) % 2:
        return ordered[mid]
    return (ordered[mid - 1] + ordered[mid]) / 2.0


def compare_runs(root: Union[str, Path]) -> pd.DataFrame:
    """Final-round accuracy/TPR/FPR per config family, median over seeds, sorted by algorithm"""
    root = Path(root)
    paths = sorted(root.rglob("manifest.json"))
    if not paths:
        raise DataError(f"no manifests found under {root}")
    groups: Dict[Tuple[str, str], List[dict]] = {}
    for path in paths:
        manifest = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
        if not manifest.records:
            continue
        groups.setdefault((manifest.algorithm, manifest.family_hash), []).append(manifest.records[-1])
    rows = []
    for (algorithm, family), finals in sorted(groups.items()):
        rows.append({
            "algorithm": algorithm,
            "family": family[:10],
            "seeds": len(finals),
            "accuracy": median([r.get("accuracy") for r in finals]),
            "tpr": median([r.get("tpr") for r in finals]),
            "fpr": median([r.get("fpr") for r in finals]),
        })
    df = pd.DataFrame(rows, columns=["algorithm", "family", "seeds", "accuracy", "tpr", "fpr"])
    for column in ("accuracy", "tpr", "fpr"):
        df[column] = df[column].astype(float)
    return df


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def run_gradcheck(seed: int = 0, lam: float = 0.5) -> GradcheckReport:
    """Finite-difference check of the full hotspot CNN on a 2-sample batch with a distillation target"""
    spec = hotspot_cnn_spec()
    rng = np.random.default_rng([seed, 0])
    params = init_params(spec, rng)
    batch = generate_synthetic(2, 0.5, [seed, 1], "gradcheck")
    target = rng.standard_normal((2, spec.num_classes))
    report = gradcheck(spec, params, batch.inputs(), batch.labels, lam, target, seed=seed)
    for line in report.summary_lines():
        logger.info(f"gradcheck {line}")
    return report


def run_diagnostics(cfg: ExperimentConfig, out_path: Optional[Union[str, Path]] = None) -> Tuple[dict, bool]:
    """Descent and rate checks on convex surrogates plus constant estimates; writes diagnostics.json"""
    rng = np.random.default_rng([cfg.seed, 20])
    unit = QuadraticSurrogate([[1.0]])
    quad5 = QuadraticSurrogate.random(5, rng)
    features = generate_synthetic(200, 0.3, [cfg.seed, 21], "surrogate")
    logistic = LogisticSurrogate.from_dataset(features)

    descent_cases = {
        "quadratic_1d": check_descent(unit, 0.1, 100, w0=[1.0]),
        "quadratic_5d": check_descent(quad5, 0.1 / quad5.smoothness, 100, seed=cfg.seed),
        "logistic": check_descent(logistic, 0.5 / logistic.smoothness, 100, seed=cfg.seed),
    }
    rate_cases = {
        "quadratic_1d": check_rate(unit, 0.1, w0=[1.0]),
        "quadratic_5d": check_rate(quad5, 0.1 / quad5.smoothness, seed=cfg.seed),
    }
    first = descent_cases["quadratic_1d"].steps[0]
    report = {
        "descent": {
            name: {"passed": r.passed, "violations": r.violations, "eta": r.eta, "L": r.smoothness}
            for name, r in descent_cases.items()
        },
        "descent_equality_case": {"lhs": first.next_value, "rhs": first.bound},
        "rate": {
            name: {
                "passed": r.passed,
                "failures": r.failures,
                "checkpoints": [
                    {"T": c.T, "average_gap": c.average_gap, "bound": c.bound, "ratio": c.ratio}
                    for c in r.checkpoints
                ],
            }
            for name, r in rate_cases.items()
        },
        "constants": {
            "logistic": estimate_constants(logistic, cfg.lam, max(cfg.diag_pairs, 2), cfg.seed,
                                           batch_size=min(cfg.batch_size, logistic.n_samples - 1)).model_dump(),
            "quadratic_5d": estimate_constants(quad5, cfg.lam, max(cfg.diag_pairs, 2), cfg.seed).model_dump(),
        },
    }
    passed = all(r.passed for r in descent_cases.values()) and all(r.passed for r in rate_cases.values())
    report["passed"] = passed
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report, passed


def stats_block(datasets: Mapping[str, Dataset]) -> pd.DataFrame:
    return dataset_stats([datasets[key] for key in DATA_FILES])
