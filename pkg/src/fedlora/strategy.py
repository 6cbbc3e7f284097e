from __future__ import annotations

import enum
from dataclasses import dataclass

from fedlora.errors import ContractError


class Kind(str, enum.Enum):
    DENSE_ORACLE = "dense-oracle"
    FEDIT = "fedit"
    FFA_LORA = "ffa-lora"
    FEDEX_LORA = "fedex-lora"
    FEDEX_TRUNCATED = "fedex-trunc"


class Assignment(str, enum.Enum):
    """How clients' adapters are set after a FedEx-LoRA aggregation."""

    AVERAGE = "average"
    REINITIALIZE = "reinit"
    KEEP_LOCAL = "keep-local"


@dataclass(frozen=True)
class AggregationStrategy:
    kind: Kind
    r_prime: int | None = None
    assignment: Assignment = Assignment.AVERAGE

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "assignment", Assignment(self.assignment))
        if self.kind is Kind.FEDEX_TRUNCATED:
            if self.r_prime is None or self.r_prime < 1:
                raise ContractError("fedex-trunc needs a positive truncation rank")
        elif self.r_prime is not None:
            raise ContractError(f"truncation rank only applies to fedex-trunc, not {self.kind.value}")
        if self.assignment is not Assignment.AVERAGE and self.kind is not Kind.FEDEX_LORA:
            raise ContractError(f"assignment {self.assignment.value} only applies to fedex-lora")

    @property
    def tag(self) -> str:
        if self.kind is Kind.FEDEX_TRUNCATED:
            return f"{self.kind.value}:{self.r_prime}"
        if self.assignment is not Assignment.AVERAGE:
            return f"{self.kind.value}:{self.assignment.value}"
        return self.kind.value

    def check_rank_cap(self, clients: int, rank: int):
        if self.kind is Kind.FEDEX_TRUNCATED and self.r_prime > clients * rank:
            raise ContractError(f"truncation rank {self.r_prime} exceeds k*r = {clients * rank}")


DENSE_ORACLE = AggregationStrategy(Kind.DENSE_ORACLE)
FEDIT = AggregationStrategy(Kind.FEDIT)
FFA_LORA = AggregationStrategy(Kind.FFA_LORA)
FEDEX_LORA = AggregationStrategy(Kind.FEDEX_LORA)


def fedex_truncated(r_prime: int) -> AggregationStrategy:
    return AggregationStrategy(Kind.FEDEX_TRUNCATED, r_prime=r_prime)


def fedex_assignment(assignment: Assignment | str) -> AggregationStrategy:
    return AggregationStrategy(Kind.FEDEX_LORA, assignment=Assignment(assignment))
