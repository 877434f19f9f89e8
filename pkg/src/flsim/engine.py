"""Round engine: broadcast, client sampling, local updates, aggregation.

Client updates within a round are pure functions of the broadcast model,
the client's own state, and a stream keyed by (seed, round, client), so
they may run on any number of workers; aggregation is a deterministic
fold in ascending client id and results are identical at any worker count.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import methods as _m
from .data import IID, LabeledDataset, PartitionPlan, partition_dirichlet, partition_iid
from .errors import ConfigError, DivergenceError, NumericalOverflowError
from .models import Batch, ModelSpec, ParamVector, init_params, top1_accuracy

# reserved stream channels (client_id slot for server-side draws,
# round slot for pre-training setup draws)
SERVER_CHANNEL = -1
INIT_ROUND = -1
PARTITION_ROUND = -2
DATA_ROUND = -3
SPLIT_ROUND = -4

_MASK = (1 << 64) - 1
_GOLD = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLD) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_stream(seed: int, round_idx: int, client_id: int) -> np.random.Generator:
    """Independent stream per (seed, round, client); keyed, order-free."""
    h = seed & _MASK
    for v in (round_idx, client_id):
        h = _splitmix64(h ^ ((v & _MASK) * _GOLD & _MASK))
    return np.random.Generator(np.random.PCG64(h))


@dataclass
class RunConfig:
    method: str
    model: ModelSpec
    n_clients: int = 100
    sample_size: int = 10
    rounds: int = 100
    local_epochs: int = 2
    batch_size: int = 32
    client_lr: float = 0.05
    client_hparams: dict = field(default_factory=dict)
    server_hparams: dict = field(default_factory=dict)
    partition: str = IID  # "iid" or "dirichlet"
    alpha: float = 0.0  # dirichlet concentration (used when partition=dirichlet)
    seed: int = 0
    eval_every: int = 10
    weighted_avg: bool = False
    local_epochs_overrides: dict = field(default_factory=dict)  # client id -> epochs

    def hyperparams(self) -> _m.HyperParams:
        merged = dict(self.client_hparams)
        merged.update(self.server_hparams)
        return _m.HyperParams.for_method(self.method, merged)

    def validate(self):
        if self.method not in _m.METHOD_NAMES:
            raise ConfigError(f"unknown method '{self.method}'")
        if not (1 <= self.sample_size <= self.n_clients):
            raise ConfigError("need 1 <= sample_size <= n_clients")
        if self.rounds < 1 or self.local_epochs < 1:
            raise ConfigError("rounds and local_epochs must be >= 1")
        if self.client_lr < 0:
            raise ConfigError("client_lr must be non-negative")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1")
        if self.partition not in (IID, "dirichlet"):
            raise ConfigError(f"unknown partition '{self.partition}'")
        if self.partition == "dirichlet" and self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        self.model.validate()
        self.hyperparams()


@dataclass
class ServerState:
    round: int
    global_params: ParamVector
    momentum: ParamVector | None = None  # fedcm
    global_control: ParamVector | None = None  # fedgamma
    global_perturb: ParamVector | None = None  # fedsmoo


def init_server_state(cfg: RunConfig, theta0: ParamVector) -> ServerState:
    state = ServerState(round=0, global_params=theta0)
    field_name = _m.SERVER_STATE_FIELD.get(cfg.method)
    if field_name is not None:
        state = replace(state, **{field_name: theta0.zeros_like()})
    return state


def init_client_states(cfg: RunConfig, theta0: ParamVector) -> list:
    return [
        _m.init_client_state(cfg.method, cid, theta0) for cid in range(cfg.n_clients)
    ]


@dataclass
class RoundMetrics:
    round: int
    sampled_clients: list
    mean_train_loss: float
    update_norm: float
    grad_evals: int
    wall_time_seconds: float
    test_top1: float | None = None


def sample_clients(n_clients: int, sample_size: int, rng: np.random.Generator) -> list:
    """Uniform sample without replacement, returned in ascending id order."""
    if not (1 <= sample_size <= n_clients):
        raise ConfigError("need 1 <= sample_size <= n_clients")
    ids = rng.choice(n_clients, size=sample_size, replace=False)
    return sorted(int(i) for i in ids)


def build_partition(cfg: RunConfig, train: LabeledDataset) -> PartitionPlan:
    rng = derive_stream(cfg.seed, PARTITION_ROUND, SERVER_CHANNEL)
    if cfg.partition == IID:
        return partition_iid(train, cfg.n_clients, rng)
    return partition_dirichlet(train, cfg.n_clients, cfg.alpha, rng)


def run_round(
    server: ServerState,
    states: list,
    plan: PartitionPlan,
    train: LabeledDataset,
    cfg: RunConfig,
    workers: int = 1,
):
    """One communication round; returns (server', states', RoundMetrics)."""
    t0 = time.perf_counter()
    hp = cfg.hyperparams()
    rng = derive_stream(cfg.seed, server.round, SERVER_CHANNEL)
    sampled = sample_clients(cfg.n_clients, cfg.sample_size, rng)

    def one_client(cid: int):
        shard_idx = plan.assignments[cid]
        if len(shard_idx) == 0:
            raise ConfigError(f"client {cid} has an empty shard")
        shard = train.subset(shard_idx)
        crng = derive_stream(cfg.seed, server.round, cid)
        epochs = cfg.local_epochs_overrides.get(cid, cfg.local_epochs)
        return _m.client_opt(
            cfg.method, server.global_params, server, shard, states[cid], hp, cfg, crng, epochs
        )

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(one_client, sampled))
        else:
            outcomes = [one_client(cid) for cid in sampled]
    except NumericalOverflowError as exc:
        raise DivergenceError(cfg.method, server.round) from exc

    outcomes.sort(key=lambda pair: pair[0].client_id)
    results = [r for r, _ in outcomes]
    new_states = list(states)
    for _, st in outcomes:
        new_states[st.client_id] = st

    new_server = _m.server_opt(cfg.method, server, results, hp, cfg)
    if not np.isfinite(new_server.global_params.values).all():
        raise DivergenceError(cfg.method, server.round)

    metrics = RoundMetrics(
        round=server.round,
        sampled_clients=sampled,
        mean_train_loss=float(np.mean([r.mean_loss for r in results])),
        update_norm=float(
            np.linalg.norm(new_server.global_params.values - server.global_params.values)
        ),
        grad_evals=int(sum(r.grad_evals for r in results)),
        wall_time_seconds=time.perf_counter() - t0,
    )
    return new_server, new_states, metrics


def run_training(
    cfg: RunConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    workers: int = 1,
    on_round=None,
) -> list:
    """Full training loop; returns the list of RoundMetrics.

    Evaluates test accuracy every ``eval_every`` rounds and at the final
    round. On divergence, raises DivergenceError with the completed
    metrics prefix attached.
    """
    cfg.validate()
    theta0 = init_params(cfg.model, derive_stream(cfg.seed, INIT_ROUND, SERVER_CHANNEL))
    plan = build_partition(cfg, train)
    server = init_server_state(cfg, theta0)
    states = init_client_states(cfg, theta0)
    test_batch = Batch(test.features, test.labels)

    records = []
    for r in range(cfg.rounds):
        try:
            server, states, metrics = run_round(server, states, plan, train, cfg, workers)
        except DivergenceError as exc:
            exc.metrics = records
            raise
        if r % cfg.eval_every == 0 or r == cfg.rounds - 1:
            metrics.test_top1 = top1_accuracy(cfg.model, server.global_params, test_batch)
        records.append(metrics)
        if on_round is not None:
            on_round(server, states, metrics)
    return records
