"""Divergence, communication accounting and report emission."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedlora.errors import ContractError
from fedlora.linalg import frobenius_norm
from fedlora.strategy import AggregationStrategy, Assignment, Kind

CSV_HEADER = ["round", "strategy", "layer", "divergence", "residual_rank", "uplink_params", "downlink_params", "mean_loss"]
SUMMARY_KEYS = ["strategy", "rounds", "final_mean_loss", "max_exactness_gap", "total_uplink_params", "total_downlink_params"]


@dataclass(frozen=True)
class CommLedger:
    """Scalars sent in one round.  Both directions are summed over clients."""

    uplink_params: int = 0
    downlink_params: int = 0
    round: int = 0
    clients: int = 1

    def __post_init__(self):
        if self.uplink_params < 0 or self.downlink_params < 0:
            raise ContractError("parameter counts cannot be negative")

    def __add__(self, other: CommLedger) -> CommLedger:
        return CommLedger(
            self.uplink_params + other.uplink_params,
            self.downlink_params + other.downlink_params,
            self.round,
            self.clients,
        )

    @property
    def total(self) -> int:
        return self.uplink_params + self.downlink_params

    @property
    def downlink_per_client(self) -> int:
        return self.downlink_params // self.clients


@dataclass
class RoundReport:
    round: int
    strategy: str
    divergence: list[float]
    mean_client_loss: float
    residual_rank: list[int]
    layer_comm: list[CommLedger]
    exactness_gap: list[float] = field(default_factory=list)

    def __post_init__(self):
        if any(d < 0 for d in self.divergence):
            raise ContractError("divergence must be non-negative")

    @property
    def comm(self) -> CommLedger:
        total = CommLedger(round=self.round, clients=self.layer_comm[0].clients)
        for c in self.layer_comm:
            total = total + c
        return total


def _adapters(clients, layer_index):
    models = [getattr(c, "model", c) for c in clients]
    ads = [mdl.layers[layer_index].adapter for mdl in models]
    return ads


def divergence_norm(clients, layer_index: int) -> float:
    """RMS-scaled gap between the mean of products and the product of means.

    Returns ``s * ||mean(B_i A_i) - mean(B_i) mean(A_i)||_F / sqrt(m n)`` for
    the adapters of one layer, i.e. how far plain averaging of ``A`` and
    ``B`` lands from averaging the updates themselves.
    """
    ads = _adapters(clients, layer_index)
    if not ads:
        raise ContractError("no clients")
    a = np.stack([ad.a for ad in ads])
    b = np.stack([ad.b for ad in ads])
    gap = np.mean(b @ a, axis=0) - b.mean(axis=0) @ a.mean(axis=0)
    m, n = gap.shape
    return ads[0].scaling * frobenius_norm(gap) / math.sqrt(m * n)


def residual_downlink(k: int, m: int, n: int, r: int, residual_rank: int, cap: int | None = None) -> int:
    """Scalars needed to ship a residual of the given rank.

    Factored ``(q, r)`` transmission is used iff ``cap * (m + n) < m * n``,
    where ``cap`` is the a-priori rank bound (``k * r`` unless given).
    """
    cap = k * r if cap is None else cap
    if cap * (m + n) < m * n:
        return residual_rank * (m + n)
    return m * n


def layer_comm(
    strategy: AggregationStrategy,
    k: int,
    m: int,
    n: int,
    r: int,
    residual_rank: int | None = None,
    round: int = 0,
) -> CommLedger:
    adapter = m * r + r * n
    kind = strategy.kind
    if kind is Kind.DENSE_ORACLE:
        return CommLedger(k * m * n, k * m * n, round, k)
    if kind is Kind.FFA_LORA:
        return CommLedger(k * m * r, k * m * r, round, k)
    up = k * adapter
    if kind is Kind.FEDIT:
        return CommLedger(up, k * adapter, round, k)
    if kind is Kind.FEDEX_TRUNCATED:
        rho = strategy.r_prime if residual_rank is None else min(residual_rank, strategy.r_prime)
        down = adapter + residual_downlink(k, m, n, r, rho, cap=strategy.r_prime)
        return CommLedger(up, k * down, round, k)
    rho = k * r if residual_rank is None else residual_rank
    res = residual_downlink(k, m, n, r, rho)
    if strategy.assignment is Assignment.KEEP_LOCAL:
        # clients keep their own adapters; only the per-client offset is sent
        return CommLedger(up, k * res, round, k)
    return CommLedger(up, k * (adapter + res), round, k)


def comm_cost(
    strategy: AggregationStrategy,
    k: int,
    dims,
    r: int,
    residual_ranks=None,
    round: int = 0,
) -> CommLedger:
    """Closed-form per-round parameter counts for one or several layers.

    ``dims`` is an ``(m, n)`` pair or a list of them.  ``residual_ranks``
    gives the observed residual rank per layer; when omitted the worst case
    (``k * r``, or ``r'`` for truncation) is charged.
    """
    if isinstance(dims, tuple) and len(dims) == 2 and all(isinstance(d, (int, np.integer)) for d in dims):
        dims = [dims]
    dims = list(dims)
    if residual_ranks is None:
        residual_ranks = [None] * len(dims)
    total = CommLedger(round=round, clients=k)
    for (m, n), rho in zip(dims, residual_ranks, strict=True):
        if min(m, n, r, k) < 1:
            raise ContractError(f"invalid dims m={m} n={n} r={r} k={k}")
        total = total + layer_comm(strategy, k, m, n, r, rho, round)
    return total


def summarize(reports: list[RoundReport]) -> dict:
    last = reports[-1]
    gaps = [g for rep in reports for g in rep.exactness_gap]
    return {
        "strategy": last.strategy,
        "rounds": len(reports),
        "final_mean_loss": last.mean_client_loss,
        "max_exactness_gap": max(gaps) if gaps else 0.0,
        "total_uplink_params": sum(rep.comm.uplink_params for rep in reports),
        "total_downlink_params": sum(rep.comm.downlink_params for rep in reports),
    }


def reports_to_csv(reports: list[RoundReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rep in reports:
        for layer, comm in enumerate(rep.layer_comm):
            writer.writerow(
                [
                    rep.round,
                    rep.strategy,
                    layer,
                    repr(float(rep.divergence[layer])),
                    rep.residual_rank[layer],
                    comm.uplink_params,
                    comm.downlink_params,
                    repr(float(rep.mean_client_loss)),
                ]
            )
    return buf.getvalue()


def _write(path: Path, text: str):
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"could not write report file {path}: {exc.strerror or exc}") from exc


def emit_reports(reports: list[RoundReport], out_dir, *, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``rounds.csv`` (one row per round and layer) and ``summary.json``.

    ``extra`` entries are appended to the summary after the fixed keys.
    """
    if not reports:
        raise ContractError("no reports to emit")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"could not create report directory {out}: {exc.strerror or exc}") from exc
    csv_path = out / "rounds.csv"
    json_path = out / "summary.json"
    _write(csv_path, reports_to_csv(reports))
    summary = summarize(reports)
    summary.update(extra or {})
    _write(json_path, json.dumps(summary, indent=2) + "\n")
    return csv_path, json_path
