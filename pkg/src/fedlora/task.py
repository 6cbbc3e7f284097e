"""Synthetic regression task and a deep linear model carrying LoRA layers.

Every layer computes ``h -> (w0 + s * b @ a) @ h`` with no activation, and
the loss is the mean squared error over all outputs of a batch.  Gradients
are derived by hand so they can be checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fedlora.errors import ContractError, TrainingError
from fedlora.lora import LoraLayer, effective_weight, init_adapter

NOISE_STD = 0.01
DELTA_SCALE = 1.0


@dataclass
class Dataset:
    inputs: np.ndarray  # (count, n)
    targets: np.ndarray  # (count, m)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if len(self.inputs) != len(self.targets):
            raise ContractError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        if len(self.inputs) == 0:
            raise ContractError("dataset is empty")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ContractError("dataset contains non-finite entries")

    @property
    def count(self) -> int:
        return len(self.inputs)

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, idx) -> Dataset:
        return Dataset(self.inputs[idx], self.targets[idx])


@dataclass
class TrainConfig:
    learning_rate: float
    local_epochs: int
    batch_size: int
    seed: int = 0

    def validate(self, data: Dataset | None = None):
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ContractError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.local_epochs < 1:
            raise ContractError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if data is not None and self.batch_size > data.count:
            raise ContractError(f"batch_size {self.batch_size} exceeds dataset size {data.count}")


@dataclass
class ToyModel:
    layers: list[LoraLayer]
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ContractError("model needs at least one layer")
        for lo, hi in zip(self.layers, self.layers[1:]):
            if hi.shape[1] != lo.shape[0]:
                raise ContractError(f"layer dims do not compose: {lo.shape} then {hi.shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].shape[0]

    def copy(self) -> ToyModel:
        return ToyModel([layer.copy() for layer in self.layers], list(self.loss_history))


def layer_dims(m: int, n: int, depth: int) -> list[int]:
    """Widths ``[n, n, ..., m]``: hidden layers keep the input width."""
    if depth < 1:
        raise ContractError(f"depth must be >= 1, got {depth}")
    return [n] * depth + [m]


def pretrained_weights(dims: list[int], seed) -> list[np.ndarray]:
    """Seeded stand-ins for pretrained base weights, variance-preserving."""
    rng = np.random.default_rng(seed)
    return [rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_out, d_in)) for d_in, d_out in zip(dims, dims[1:])]


def compose(weights: list[np.ndarray]) -> np.ndarray:
    out = weights[0]
    for w in weights[1:]:
        out = w @ out
    return out


def build_model(w0s: list[np.ndarray], rank: int, alpha: float, seed) -> ToyModel:
    """Attach freshly initialised adapters to copies of ``w0s``."""
    seeds = np.random.SeedSequence(seed).spawn(len(w0s))
    layers = []
    for w0, s in zip(w0s, seeds):
        m, n = w0.shape
        layers.append(LoraLayer(w0.copy(), init_adapter(m, n, rank, alpha, s)))
    return ToyModel(layers)


def make_task(
    m: int,
    n: int,
    clients: int,
    samples_per_client: int,
    heterogeneity: float,
    seed,
    base_map: np.ndarray | None = None,
) -> list[Dataset]:
    """Per-client regression data ``y = (W* + h * H_i) x + noise``.

    ``W* = base_map + delta`` with a dense seeded ``delta``; each ``H_i`` is a
    seeded perturbation rescaled to ``||delta||_F``.  With
    ``heterogeneity == 0`` every client samples the same map.
    """
    if clients < 1:
        raise ContractError(f"need at least one client, got {clients}")
    if samples_per_client < 1:
        raise ContractError(f"samples_per_client must be >= 1, got {samples_per_client}")
    if not 0.0 <= heterogeneity <= 1.0:
        raise ContractError(f"heterogeneity must lie in [0, 1], got {heterogeneity}")
    root = np.random.SeedSequence(seed)
    shared_seq, *client_seqs = root.spawn(clients + 1)
    shared = np.random.default_rng(shared_seq)
    if base_map is None:
        base_map = shared.normal(0.0, 1.0 / math.sqrt(n), size=(m, n))
    else:
        base_map = np.asarray(base_map, dtype=np.float64)
        if base_map.shape != (m, n):
            raise ContractError(f"base_map shape {base_map.shape} != {(m, n)}")
    delta = shared.normal(0.0, DELTA_SCALE / math.sqrt(n), size=(m, n))
    delta_norm = np.linalg.norm(delta)
    target = base_map + delta

    datasets = []
    for seq in client_seqs:
        rng = np.random.default_rng(seq)
        h = rng.normal(size=(m, n))
        h *= delta_norm / np.linalg.norm(h)
        x = rng.normal(size=(samples_per_client, n))
        noise = rng.normal(0.0, NOISE_STD, size=(samples_per_client, m))
        y = x @ (target + heterogeneity * h).T + noise
        datasets.append(Dataset(x, y))
    return datasets


def forward(model: ToyModel, x) -> np.ndarray:
    """Apply the model to one input vector or to a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.in_dim:
        raise ContractError(f"input has length {x.shape[-1]}, model expects {model.in_dim}")
    h = x
    for layer in model.layers:
        h = h @ effective_weight(layer).T
    return h


def mse(model: ToyModel, data: Dataset) -> float:
    err = forward(model, data.inputs) - data.targets
    return float(np.mean(err * err))


def _loss_and_grads(model: ToyModel, x: np.ndarray, y: np.ndarray):
    weights = [effective_weight(layer) for layer in model.layers]
    acts = [x]
    for w in weights:
        acts.append(acts[-1] @ w.T)
    err = acts[-1] - y
    loss = float(np.mean(err * err))
    delta = 2.0 * err / err.size
    out = []
    for layer, w, h in zip(reversed(model.layers), reversed(weights), reversed(acts[:-1])):
        g = delta.T @ h  # dL/dW_eff
        ad = layer.adapter
        out.append((ad.scaling * (ad.b.T @ g), ad.scaling * (g @ ad.a.T)))
        delta = delta @ w
    out.reverse()
    return loss, out


def grads(model: ToyModel, batch: Dataset) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact MSE gradients ``(dA, dB)`` for each layer's adapter.

    Base weights are frozen and get no gradient.
    """
    if batch.count == 0:
        raise ContractError("empty batch")
    return _loss_and_grads(model, batch.inputs, batch.targets)[1]


def local_train(model: ToyModel, data: Dataset, cfg: TrainConfig, *, freeze_a: bool = False) -> ToyModel:
    """Mini-batch SGD on the adapters of a copy of ``model``.

    Each epoch shuffles once with the seeded generator and walks the
    permutation in fixed strides of ``cfg.batch_size``.  The per-epoch mean
    loss (measured before each step) is appended to ``loss_history``.  With
    ``freeze_a`` only ``b`` is updated.
    """
    cfg.validate(data)
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    for epoch in range(cfg.local_epochs):
        perm = rng.permutation(data.count)
        total = 0.0
        for start in range(0, data.count, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, layer_grads = _loss_and_grads(model, data.inputs[idx], data.targets[idx])
            if not math.isfinite(loss):
                raise TrainingError(epoch, loss)
            total += loss * len(idx)
            for layer, (d_a, d_b) in zip(model.layers, layer_grads):
                ad = layer.adapter
                if not freeze_a:
                    ad.a = ad.a - lr * d_a
                ad.b = ad.b - lr * d_b
        epoch_loss = total / data.count
        if not math.isfinite(epoch_loss):
            raise TrainingError(epoch, epoch_loss)
        model.loss_history.append(epoch_loss)
    return model
