"""Desk-scale federated LoRA simulator with exact (residual) aggregation."""

from fedlora._jit import USE_JIT
from fedlora.errors import ContractError, NumericalError, TrainingError
from fedlora.federation import (
    AggregationResult,
    ClientState,
    ServerState,
    aggregate,
    average_adapters,
    compute_residual,
    exactness_gap,
    run_round,
)
from fedlora.linalg import best_rank_approx, frobenius_norm, gram_schmidt_qr, matmul, numerical_rank, svd
from fedlora.lora import LoraAdapter, LoraLayer, effective_weight, init_adapter, merge_residual
from fedlora.metrics import CommLedger, RoundReport, comm_cost, divergence_norm, emit_reports
from fedlora.strategy import AggregationStrategy, Assignment, Kind

__version__ = "0.1.0"
