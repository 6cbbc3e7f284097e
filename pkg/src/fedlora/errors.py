from __future__ import annotations


class ContractError(ValueError):
    """A precondition on shapes, ranks or arguments was violated."""


class NumericalError(ArithmeticError):
    """An iterative kernel failed to converge."""

    def __init__(self, message: str, iterations: int):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class TrainingError(RuntimeError):
    """Local training produced a non-finite loss."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss
