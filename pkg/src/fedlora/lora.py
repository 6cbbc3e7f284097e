"""LoRA adapter algebra.

Adapters hold ``a`` (r x n) and ``b`` (m x r) in unscaled units.  The
``alpha / r`` scaling is applied whenever the product reaches a weight
matrix: in :func:`effective_weight` and in :func:`merge_residual`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedlora.errors import ContractError
from fedlora.linalg import as_matrix

INIT_STD = 0.02


@dataclass
class LoraAdapter:
    a: np.ndarray
    b: np.ndarray
    alpha: float

    def __post_init__(self):
        self.a = as_matrix(self.a, "a")
        self.b = as_matrix(self.b, "b")
        if self.a.shape[0] != self.b.shape[1]:
            raise ContractError(f"adapter ranks disagree: a {self.a.shape}, b {self.b.shape}")
        if self.rank > min(self.b.shape[0], self.a.shape[1]):
            raise ContractError(f"rank {self.rank} exceeds min{(self.b.shape[0], self.a.shape[1])}")
        if self.alpha <= 0:
            raise ContractError(f"alpha must be positive, got {self.alpha}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        return self.b.shape[0], self.a.shape[1]

    def product(self) -> np.ndarray:
        """Unscaled ``b @ a``."""
        return self.b @ self.a

    def copy(self) -> LoraAdapter:
        return LoraAdapter(self.a.copy(), self.b.copy(), self.alpha)


@dataclass
class LoraLayer:
    w0: np.ndarray
    adapter: LoraAdapter

    def __post_init__(self):
        self.w0 = as_matrix(self.w0, "w0")
        if self.w0.shape != self.adapter.shape:
            raise ContractError(f"w0 {self.w0.shape} does not match adapter {self.adapter.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0.shape

    def copy(self) -> LoraLayer:
        return LoraLayer(self.w0.copy(), self.adapter.copy())


def gaussian_a(r: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, INIT_STD, size=(r, n))


def init_adapter(m: int, n: int, r: int, alpha: float, seed) -> LoraAdapter:
    """Standard LoRA init: ``b = 0`` and Gaussian ``a`` with std 0.02."""
    if not 1 <= r <= min(m, n):
        raise ContractError(f"rank {r} outside [1, {min(m, n)}]")
    rng = np.random.default_rng(seed)
    return LoraAdapter(gaussian_a(r, n, rng), np.zeros((m, r)), alpha)


def effective_weight(layer: LoraLayer) -> np.ndarray:
    ad = layer.adapter
    return layer.w0 + ad.scaling * (ad.b @ ad.a)


def merge_residual(layer: LoraLayer, residual) -> LoraLayer:
    """Fold ``(alpha/r) * residual`` into the frozen base of ``layer``.

    The base array is replaced rather than written in place, so earlier
    references to ``layer.w0`` keep their old values.
    """
    residual = as_matrix(residual, "residual")
    if residual.shape != layer.w0.shape:
        raise ContractError(f"residual {residual.shape} does not match w0 {layer.w0.shape}")
    layer.w0 = layer.w0 + layer.adapter.scaling * residual
    return layer
