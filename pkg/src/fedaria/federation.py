"""Round orchestration, local training and the FedAvg / FedOpt / SCAFFOLD servers.

A round is: broadcast the server model, let every client run a fixed number
of local minibatch steps, then aggregate. All clients take part in every
round. Client work inside a round may run on a thread pool; results are
gathered in client-id order, so the outcome does not depend on scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .data import Dataset, Partition
from .errors import DivergenceError, ValidationError
from .metrics import accuracy, balanced_accuracy, confusion_matrix
from .models import ModelSpec, ModelState, backward, bn_stat_mismatch, forward, param_count, predict
from .numkit import RngStream
from .optim import LossConfig, OptimizerState, inverse_frequency_weights, loss_and_grad, optimizer_step, schedule_lr

STRATEGIES = ("fedavg", "fedopt", "scaffold")
BYTES_PER_SCALAR = 8


@dataclass
class StrategyConfig:
    kind: str = "fedavg"
    server_lr: float = 1.0
    server_momentum: float = 0.6
    server_lr_schedule: str = "cosine"
    server_lr_min: float = 0.0
    scaffold_server_lr: float = 1.0
    scaffold_weighting: str = "uniform"

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.kind!r}")
        if self.server_lr <= 0 or self.scaffold_server_lr <= 0:
            raise ValidationError("server learning rates must be > 0")
        if not 0 <= self.server_momentum < 1:
            raise ValidationError("server_momentum must be in [0, 1)")
        if self.server_lr_schedule not in ("constant", "cosine"):
            raise ValidationError(f"unknown server_lr_schedule {self.server_lr_schedule!r}")
        if self.scaffold_weighting not in ("uniform", "sample_weighted"):
            raise ValidationError(f"unknown scaffold_weighting {self.scaffold_weighting!r}")


@dataclass
class RoundConfig:
    rounds: int = 20
    local_steps: int = 50
    batch_size: int = 32
    optimizer: str = "sgd_momentum"
    lr: float = 0.01
    momentum: float = 0.9
    lr_schedule: str = "cosine"
    # "round": the client schedule restarts every round; "global": it spans rounds * local_steps.
    lr_horizon: str = "round"
    lr_min: float = 0.0
    persist_optimizer: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    share_bn_stats: bool = True

    def __post_init__(self):
        if self.rounds < 0 or self.local_steps < 0:
            raise ValidationError("rounds and local_steps must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be > 0")
        if self.lr_horizon not in ("round", "global"):
            raise ValidationError(f"unknown lr_horizon {self.lr_horizon!r}")

    def client_lr(self, round_index: int, step: int) -> float:
        if self.lr_horizon == "round":
            return schedule_lr(self.lr_schedule, step, max(self.local_steps, 1), self.lr, self.lr_min)
        total = max(self.rounds * self.local_steps, 1)
        return schedule_lr(self.lr_schedule, round_index * self.local_steps + step, total, self.lr, self.lr_min)


@dataclass
class ClientState:
    client_id: int
    shard: np.ndarray
    data: Dataset
    optimizer: OptimizerState
    rng: RngStream
    loss: LossConfig
    control: np.ndarray | None = None
    local_stats: np.ndarray | None = None
    bytes_sent: int = 0
    bytes_received: int = 0

    @property
    def sample_count(self) -> int:
        return len(self.shard)


@dataclass
class ServerState:
    params: np.ndarray
    stats: np.ndarray
    momentum_buffer: np.ndarray
    control: np.ndarray
    round: int = 0
    total_rounds: int = 0

    @classmethod
    def from_model(cls, state: ModelState, total_rounds: int) -> "ServerState":
        n = state.params.size
        return cls(state.params.copy(), state.stats_vector(), np.zeros(n), np.zeros(n), 0, total_rounds)

    def model(self, spec: ModelSpec) -> ModelState:
        st = ModelState(spec, self.params.copy())
        st.set_stats_vector(self.stats)
        return st


@dataclass
class ClientUpdate:
    client_id: int
    params: np.ndarray
    stats: np.ndarray
    sample_count: int
    loss_trace: list[float]
    bytes: int
    mean_lr: float
    control_delta: np.ndarray | None = None
    control: np.ndarray | None = None


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    balanced_accuracy: float
    drift: float
    bn_mismatch: float | None
    cumulative_bytes: int
    mean_loss: float | None


@dataclass
class FederationResult:
    history: list[RoundMetrics]
    final_state: ModelState
    server: ServerState | None = None
    clients: list[ClientState] = field(default_factory=list)

    @property
    def final(self) -> RoundMetrics:
        return self.history[-1]


# -- accounting ----------------------------------------------------------------


def comm_cost(strategy: str | StrategyConfig, n_params: int) -> int:
    """Bytes one client exchanges with the server per round, both directions."""
    kind = strategy.kind if isinstance(strategy, StrategyConfig) else strategy
    if kind not in STRATEGIES:
        raise ValidationError(f"unknown strategy {kind!r}")
    vectors_each_way = 2 if kind == "scaffold" else 1
    return 2 * vectors_each_way * n_params * BYTES_PER_SCALAR


def local_storage(strategy: str | StrategyConfig, n_params: int) -> int:
    """Scalars a client keeps resident: model, plus c_i and c under SCAFFOLD."""
    kind = strategy.kind if isinstance(strategy, StrategyConfig) else strategy
    if kind not in STRATEGIES:
        raise ValidationError(f"unknown strategy {kind!r}")
    return (3 if kind == "scaffold" else 1) * n_params


def client_drift(updates: list[ClientUpdate], x: np.ndarray) -> float:
    if not updates:
        raise ValidationError("client_drift needs at least one update")
    dim = max(x.size, 1)
    return float(np.mean([np.linalg.norm(u.params - x) for u in updates]) / math.sqrt(dim))


# -- client side -------------------------------------------------------------------


def make_client(
    client_id: int,
    shard,
    ds: Dataset,
    spec: ModelSpec,
    cfg: RoundConfig,
    rng: RngStream,
    scaffold: bool = False,
) -> ClientState:
    shard = np.asarray(shard, dtype=np.int64)
    data = ds.subset(shard, f"{ds.name}-client{client_id}")
    loss = cfg.loss
    if loss.kind == "weighted_focal" and loss.class_weights is None:
        loss = LossConfig(loss.kind, inverse_frequency_weights(data.labels, ds.num_classes), loss.gamma)
    n = param_count(spec)
    opt = OptimizerState(cfg.optimizer, cfg.lr, n, momentum=cfg.momentum)
    control = np.zeros(n) if scaffold else None
    return ClientState(client_id, shard, data, opt, rng, loss, control)


def local_update(
    client: ClientState,
    x: ModelState,
    cfg: RoundConfig,
    correction: np.ndarray | None = None,
    round_index: int = 0,
    upload_vectors: int = 1,
) -> ClientUpdate:
    """Run ``cfg.local_steps`` minibatch steps starting from the broadcast model.

    Minibatches are drawn with replacement from the client's shard. When a
    ``correction`` vector is given it is added to every gradient before the
    optimizer step.
    """
    if client.sample_count == 0:
        raise ValidationError(f"client {client.client_id} has an empty shard")
    state = x.copy()
    if not cfg.share_bn_stats and client.local_stats is not None:
        state.set_stats_vector(client.local_stats)
    if not cfg.persist_optimizer:
        client.optimizer.reset()
    feats, labels = client.data.features, client.data.labels
    params = state.params
    trace: list[float] = []
    # Displacement a constant unit gradient would cause; divided by K it is the
    # effective step size the SCAFFOLD variate update needs.
    unit_disp = 0.0
    unit_buf = 0.0
    for k in range(cfg.local_steps):
        lr = cfg.client_lr(round_index, k)
        idx = numkit.integers(client.rng, cfg.batch_size, client.sample_count)
        state.params = params
        logits, cache = forward(state, feats[idx], "train")
        loss, dlogits = loss_and_grad(client.loss, logits, labels[idx])
        if not math.isfinite(loss):
            raise DivergenceError(client.client_id, k, loss)
        grad = backward(state, cache, dlogits)
        if correction is not None:
            grad = grad + correction
        params = optimizer_step(client.optimizer, params, grad, lr)
        if not np.all(np.isfinite(params)):
            raise DivergenceError(client.client_id, k, loss)
        trace.append(loss)
        if client.optimizer.kind == "sgd_momentum":
            unit_buf = client.optimizer.momentum * unit_buf + 1.0
            unit_disp += lr * unit_buf
        else:
            unit_disp += lr
    state.params = params
    stats = state.stats_vector()
    if not cfg.share_bn_stats:
        client.local_stats = stats.copy()
    return ClientUpdate(
        client_id=client.client_id,
        params=params.copy(),
        stats=stats,
        sample_count=client.sample_count,
        loss_trace=trace,
        bytes=upload_vectors * params.size * BYTES_PER_SCALAR,
        mean_lr=unit_disp / cfg.local_steps if cfg.local_steps else 0.0,
    )


# -- server side ---------------------------------------------------------------------


def sample_weights(updates: list[ClientUpdate]) -> np.ndarray:
    n = np.array([u.sample_count for u in updates], dtype=np.float64)
    return n / n.sum()


def fedavg_aggregate(x: np.ndarray, updates: list[ClientUpdate]) -> np.ndarray:
    """Sample-weighted average of client parameters."""
    if not updates:
        raise ValidationError("no client updates to aggregate")
    return numkit.weighted_sum([u.params for u in updates], sample_weights(updates))


def aggregate_stats(updates: list[ClientUpdate]) -> np.ndarray:
    if updates[0].stats.size == 0:
        return updates[0].stats.copy()
    return numkit.weighted_sum([u.stats for u in updates], sample_weights(updates))


def server_lr_at(strategy: StrategyConfig, round_index: int, total_rounds: int) -> float:
    if strategy.server_lr_schedule == "constant":
        return strategy.server_lr
    return schedule_lr("cosine", round_index, max(total_rounds, 1), strategy.server_lr, strategy.server_lr_min)


def fedopt_aggregate(server: ServerState, updates: list[ClientUpdate], strategy: StrategyConfig) -> ServerState:
    """Server SGD with momentum on the sample-weighted pseudo-gradient.

    Updates ``server`` in place and returns it.
    """
    if not updates:
        raise ValidationError("no client updates to aggregate")
    w = sample_weights(updates)
    delta = numkit.weighted_sum([u.params - server.params for u in updates], w)
    server.momentum_buffer = strategy.server_momentum * server.momentum_buffer + delta
    eta = server_lr_at(strategy, server.round, server.total_rounds)
    server.params = server.params + eta * server.momentum_buffer
    return server


def scaffold_control_update(
    client: ClientState, update: ClientUpdate, x: np.ndarray, server_control: np.ndarray, local_steps: int
) -> np.ndarray:
    """Delta-based variate refresh: c_i+ = c_i - c + (x - y_i) / (K * lr)."""
    denom = local_steps * update.mean_lr
    if denom == 0:
        raise ValidationError("SCAFFOLD needs local_steps * lr > 0")
    new_c = client.control - server_control + (x - update.params) / denom
    delta = new_c - client.control
    client.control = new_c
    update.control_delta = delta
    update.control = new_c.copy()
    return delta


def scaffold_aggregate(
    server: ServerState, updates: list[ClientUpdate], strategy: StrategyConfig, num_clients: int
) -> ServerState:
    """Apply the global step and fold client variate deltas into c."""
    if not updates:
        raise ValidationError("no client updates to aggregate")
    if strategy.scaffold_weighting == "uniform":
        w = np.full(len(updates), 1.0 / len(updates))
    else:
        w = sample_weights(updates)
    # x + eta * mean(y_i - x), written so that eta = 1 reproduces mean(y_i) exactly.
    eta = strategy.scaffold_server_lr
    mean_y = numkit.weighted_sum([u.params for u in updates], w)
    server.params = mean_y if eta == 1.0 else (1.0 - eta) * server.params + eta * mean_y
    if len(updates) == num_clients and all(u.control is not None for u in updates):
        # With every client reporting, c + mean(c_i+ - c_i) is mean(c_i+); the
        # direct form avoids the rounding residue in c - c_i that an adaptive
        # optimizer would otherwise amplify on zero-gradient coordinates.
        server.control = numkit.weighted_sum([u.control for u in updates], np.full(num_clients, 1.0 / num_clients))
    else:
        server.control = server.control + sum(u.control_delta for u in updates) / num_clients
    return server


def _run_clients(clients, fn, workers: int):
    if workers <= 1 or len(clients) <= 1:
        return [fn(c) for c in clients]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, clients))


def scaffold_round(
    server: ServerState,
    clients: list[ClientState],
    spec: ModelSpec,
    cfg: RoundConfig,
    strategy: StrategyConfig,
    workers: int = 1,
) -> tuple[ServerState, list[ClientUpdate]]:
    """One full SCAFFOLD round; mutates ``server`` and each client's variate."""
    x = server.model(spec)

    def work(client):
        return local_update(client, x, cfg, server.control - client.control, server.round, upload_vectors=2)

    updates = _run_clients(clients, work, workers)
    for client, upd in zip(clients, updates):
        scaffold_control_update(client, upd, x.params, server.control, cfg.local_steps)
    scaffold_aggregate(server, updates, strategy, len(clients))
    server.stats = aggregate_stats(updates)
    return server, updates


# -- evaluation and orchestration ------------------------------------------------------


def evaluate(state: ModelState, ds: Dataset) -> tuple[float, float]:
    cm = confusion_matrix(predict(state, ds.features), ds.labels, ds.num_classes)
    return accuracy(cm), balanced_accuracy(cm)


def run_federation(
    train: Dataset,
    test: Dataset,
    partition: Partition,
    spec: ModelSpec,
    init_state: ModelState,
    strategy: StrategyConfig,
    cfg: RoundConfig,
    rng: RngStream,
    workers: int = 1,
) -> FederationResult:
    """Train a global model for ``cfg.rounds`` rounds; history starts at round 0."""
    if init_state.spec != spec:
        raise ValidationError("init_state spec differs from model spec")
    if train.dim != spec.input_dim or test.dim != spec.input_dim:
        raise ValidationError("dataset feature dim does not match model input_dim")
    scaffold = strategy.kind == "scaffold"
    clients = [
        make_client(i, ix, train, spec, cfg, rng.derive("client", i), scaffold)
        for i, ix in enumerate(partition.client_indices)
    ]
    server = ServerState.from_model(init_state, cfg.rounds)
    n_params = param_count(spec)
    per_client_bytes = comm_cost(strategy, n_params)

    acc, bacc = evaluate(init_state, test)
    history = [RoundMetrics(0, acc, bacc, 0.0, None, 0, None)]
    cumulative = 0
    for r in range(cfg.rounds):
        server.round = r
        x = server.model(spec)
        if scaffold:
            _, updates = scaffold_round(server, clients, spec, cfg, strategy, workers)
        else:
            updates = _run_clients(clients, lambda c: local_update(c, x, cfg, None, r), workers)
            if strategy.kind == "fedavg":
                server.params = fedavg_aggregate(server.params, updates)
            else:
                fedopt_aggregate(server, updates, strategy)
            server.stats = aggregate_stats(updates)
        for c, u in zip(clients, updates):
            c.bytes_sent += u.bytes
            c.bytes_received += per_client_bytes - u.bytes
        cumulative += per_client_bytes * len(clients)

        global_state = server.model(spec)
        mismatch = None
        if spec.has_bn:
            client_models = []
            for u in updates:
                cm = ModelState(spec, u.params)
                cm.set_stats_vector(u.stats)
                client_models.append(cm)
            mismatch = bn_stat_mismatch(client_models, global_state)
        acc, bacc = evaluate(global_state, test)
        losses = [l for u in updates for l in u.loss_trace]
        history.append(
            RoundMetrics(
                r + 1,
                acc,
                bacc,
                client_drift(updates, x.params),
                mismatch,
                cumulative,
                float(np.mean(losses)) if losses else None,
            )
        )
        server.round = r + 1
    return FederationResult(history, server.model(spec), server, clients)


def centralized_baseline(
    train: Dataset,
    test: Dataset,
    spec: ModelSpec,
    init_state: ModelState,
    cfg: RoundConfig,
    rng: RngStream,
) -> FederationResult:
    """Pooled-data training with the same step count, optimizer and schedule.

    Training proceeds in ``cfg.rounds`` chunks of ``cfg.local_steps`` steps so
    the history lines up round-for-round with a federated run.
    """
    client = make_client(0, np.arange(len(train)), train, spec, cfg, rng)
    state = init_state.copy()
    acc, bacc = evaluate(state, test)
    history = [RoundMetrics(0, acc, bacc, 0.0, None, 0, None)]
    for r in range(cfg.rounds):
        upd = local_update(client, state, cfg, None, r)
        state = ModelState(spec, upd.params)
        state.set_stats_vector(upd.stats)
        acc, bacc = evaluate(state, test)
        mean_loss = float(np.mean(upd.loss_trace)) if upd.loss_trace else None
        history.append(RoundMetrics(r + 1, acc, bacc, 0.0, None, 0, mean_loss))
    return FederationResult(history, state, None, [client])
