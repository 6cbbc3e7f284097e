"""Synchronous federated LoRA: client/server state and aggregation rules.

One round is: every client trains its adapters locally, the server
aggregates, clients adopt whatever the strategy hands back.  Aggregation is
done in unscaled ``B @ A`` units; the ``alpha / r`` factor only enters via
:func:`fedlora.lora.effective_weight` and :func:`fedlora.lora.merge_residual`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from fedlora.errors import ContractError
from fedlora.linalg import best_rank_approx, frobenius_norm, gram_schmidt_qr, numerical_rank
from fedlora.lora import effective_weight, gaussian_a, merge_residual
from fedlora.metrics import CommLedger, RoundReport, divergence_norm, layer_comm
from fedlora.strategy import AggregationStrategy, Assignment, Kind
from fedlora.task import Dataset, ToyModel, TrainConfig, local_train, mse


@dataclass
class ClientState:
    id: int
    model: ToyModel
    data: Dataset
    cfg: TrainConfig


@dataclass
class ServerState:
    strategy: AggregationStrategy
    round: int = 0
    reference_dense: list[np.ndarray] = field(default_factory=list)
    seed: int = 0
    last_result: AggregationResult | None = None


@dataclass
class LayerAggregate:
    a_global: np.ndarray
    b_global: np.ndarray
    residual: np.ndarray
    residual_rank: int
    comm: CommLedger
    residual_factors: tuple[np.ndarray, np.ndarray] | None = None
    client_residuals: list[np.ndarray] | None = None


@dataclass
class AggregationResult:
    layers: list[LayerAggregate]

    @property
    def comm(self) -> CommLedger:
        total = CommLedger(round=self.layers[0].comm.round, clients=self.layers[0].comm.clients)
        for layer in self.layers:
            total = total + layer.comm
        return total


def init_clients(model: ToyModel, datasets: list[Dataset], cfg: TrainConfig) -> list[ClientState]:
    """Give every client an identical copy of ``model``."""
    return [ClientState(i, model.copy(), data, dataclasses.replace(cfg)) for i, data in enumerate(datasets)]


def _check_homogeneous(clients: list[ClientState]):
    if not clients:
        raise ContractError("no clients to aggregate")
    ref = clients[0].model.layers
    for c in clients[1:]:
        layers = c.model.layers
        if len(layers) != len(ref):
            raise ContractError(f"client {c.id} has {len(layers)} layers, expected {len(ref)}")
        for i, (lay, want) in enumerate(zip(layers, ref)):
            if lay.adapter.a.shape != want.adapter.a.shape or lay.adapter.b.shape != want.adapter.b.shape:
                raise ContractError(f"client {c.id} layer {i} adapter shapes differ")
            if lay.adapter.alpha != want.adapter.alpha:
                raise ContractError(f"client {c.id} layer {i} alpha differs")


def _stacks(clients, layer_index):
    ads = [c.model.layers[layer_index].adapter for c in clients]
    return np.stack([ad.a for ad in ads]), np.stack([ad.b for ad in ads])


def average_adapters(clients: list[ClientState]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Uniform per-layer means ``(a_avg, b_avg)`` of the client adapters."""
    _check_homogeneous(clients)
    out = []
    for i in range(len(clients[0].model.layers)):
        a, b = _stacks(clients, i)
        out.append((a.mean(axis=0), b.mean(axis=0)))
    return out


def compute_residual(clients: list[ClientState]) -> list[np.ndarray]:
    """Per layer: mean of ``B_i @ A_i`` minus ``mean(B_i) @ mean(A_i)``."""
    _check_homogeneous(clients)
    out = []
    for i in range(len(clients[0].model.layers)):
        a, b = _stacks(clients, i)
        out.append(np.mean(b @ a, axis=0) - b.mean(axis=0) @ a.mean(axis=0))
    return out


def _ideal_weight(clients, layer_index):
    return np.mean([effective_weight(c.model.layers[layer_index]) for c in clients], axis=0)


def _set_adapters(clients, layer_index, a, b):
    for c in clients:
        ad = c.model.layers[layer_index].adapter
        ad.a = a.copy()
        ad.b = b.copy()


def _fresh_adapters(server, layer_index, shape, rank):
    m, n = shape
    rng = np.random.default_rng([server.seed, server.round, layer_index])
    return gaussian_a(rank, n, rng), np.zeros((m, rank))


def _aggregate_layer(server: ServerState, clients: list[ClientState], li: int) -> LayerAggregate:
    strategy = server.strategy
    k = len(clients)
    first = clients[0].model.layers[li]
    m, n = first.shape
    r = first.adapter.rank
    a_stack, b_stack = _stacks(clients, li)
    a_avg, b_avg = a_stack.mean(axis=0), b_stack.mean(axis=0)
    mean_prod = np.mean(b_stack @ a_stack, axis=0)
    kind = strategy.kind
    factors = None
    client_res = None

    if kind is Kind.FEDIT:
        residual = np.zeros((m, n))
        _set_adapters(clients, li, a_avg, b_avg)
    elif kind is Kind.FFA_LORA:
        a_shared = first.adapter.a
        if any(not np.array_equal(a, a_shared) for a in a_stack):
            raise ContractError(f"ffa-lora expects a shared frozen A, layer {li} differs across clients")
        a_avg = a_shared
        residual = np.zeros((m, n))
        _set_adapters(clients, li, a_shared, b_avg)
    elif kind is Kind.DENSE_ORACLE or (kind is Kind.FEDEX_LORA and strategy.assignment is Assignment.REINITIALIZE):
        # fold the whole mean update into w0 and restart the adapters
        residual = mean_prod
        a_avg, b_avg = _fresh_adapters(server, li, (m, n), r)
        for c in clients:
            merge_residual(c.model.layers[li], residual)
        _set_adapters(clients, li, a_avg, b_avg)
    elif kind is Kind.FEDEX_LORA and strategy.assignment is Assignment.KEEP_LOCAL:
        ideal = _ideal_weight(clients, li)
        client_res = []
        for c in clients:
            layer = c.model.layers[li]
            s = layer.adapter.scaling
            # offset that makes w0_i + s B_i A_i equal the ideal weight
            offset = (ideal - layer.w0) / s - layer.adapter.product()
            client_res.append(offset)
            merge_residual(layer, offset)
        residual = mean_prod - b_avg @ a_avg
    else:
        residual = mean_prod - b_avg @ a_avg
        if kind is Kind.FEDEX_TRUNCATED:
            residual = best_rank_approx(residual, strategy.r_prime)
        for c in clients:
            merge_residual(c.model.layers[li], residual)
        _set_adapters(clients, li, a_avg, b_avg)

    if client_res is not None:
        rank = max(numerical_rank(res) for res in client_res)
    else:
        rank = numerical_rank(residual)
    comm = layer_comm(strategy, k, m, n, r, rank, round=server.round + 1)
    cap = strategy.r_prime if kind is Kind.FEDEX_TRUNCATED else k * r
    if kind in (Kind.FEDEX_LORA, Kind.FEDEX_TRUNCATED) and client_res is None and cap * (m + n) < m * n:
        factors = gram_schmidt_qr(residual)
    return LayerAggregate(a_avg, b_avg, residual, rank, comm, factors, client_res)


def aggregate(server: ServerState, clients: list[ClientState]) -> AggregationResult:
    """Aggregate one round in place and advance ``server.round``.

    Before anything changes, the dense ideal (mean of client effective
    weights) is recorded in ``server.reference_dense`` for gap metrics.
    """
    _check_homogeneous(clients)
    n_layers = len(clients[0].model.layers)
    server.strategy.check_rank_cap(len(clients), clients[0].model.layers[0].adapter.rank)
    server.reference_dense = [_ideal_weight(clients, i) for i in range(n_layers)]
    result = AggregationResult([_aggregate_layer(server, clients, i) for i in range(n_layers)])
    server.round += 1
    server.last_result = result
    return result


def exactness_gap(server: ServerState, clients: list[ClientState], *, relative: bool = False) -> list[float]:
    """Per layer, the Frobenius distance of client weights from the dense ideal.

    The worst client is reported (after aggregation all clients agree).  With
    ``relative`` the distance is divided by ``max(1, ||ideal||_F)``.
    """
    if not server.reference_dense:
        raise ContractError("no dense reference recorded; call aggregate first")
    gaps = []
    for i, ideal in enumerate(server.reference_dense):
        gap = max(frobenius_norm(effective_weight(c.model.layers[i]) - ideal) for c in clients)
        if relative:
            gap /= max(1.0, frobenius_norm(ideal))
        gaps.append(gap)
    return gaps


def round_seed(base_seed: int, client_id: int, round_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, client_id, round_index]).generate_state(1)[0])


def train_clients(server: ServerState, clients: list[ClientState]):
    """Run local training for the current round (ffa-lora keeps ``A`` frozen)."""
    freeze_a = server.strategy.kind is Kind.FFA_LORA
    for c in clients:
        cfg = dataclasses.replace(c.cfg, seed=round_seed(c.cfg.seed, c.id, server.round))
        c.model = local_train(c.model, c.data, cfg, freeze_a=freeze_a)


def run_round(server: ServerState, clients: list[ClientState]) -> RoundReport:
    """Local training on every client, then aggregation and metrics."""
    train_clients(server, clients)
    n_layers = len(clients[0].model.layers)
    divergence = [divergence_norm(clients, i) for i in range(n_layers)]
    result = aggregate(server, clients)
    gaps = exactness_gap(server, clients, relative=True)
    loss = float(np.mean([mse(c.model, c.data) for c in clients]))
    return RoundReport(
        round=server.round,
        strategy=server.strategy.tag,
        divergence=divergence,
        mean_client_loss=loss,
        residual_rank=[layer.residual_rank for layer in result.layers],
        layer_comm=[layer.comm for layer in result.layers],
        exactness_gap=gaps,
    )
