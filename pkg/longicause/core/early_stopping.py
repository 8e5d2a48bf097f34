"""
Early-stopping state machine for epoch-level validation losses.
"""
import logging
import math
from enum import Enum
from typing import Optional

logger = logging.getLogger(__name__)


class StopState(str, Enum):
    """Early-stopping states."""
    IMPROVING = "improving"  # Last observation set a new best
    STALLED = "stalled"  # No improvement for fewer than `patience` epochs
    STOPPED = "stopped"  # Patience exhausted


class EarlyStopping:
    """
    Tracks a validation loss and decides when training should stop.

    States:
    - IMPROVING: the latest loss improved on the best by more than min_delta
    - STALLED: the latest loss did not improve; counter below patience
    - STOPPED: `patience` consecutive non-improving epochs were observed

    Usage:
        stopper = EarlyStopping(patience=4)
        for epoch in ...:
            if stopper.update(val_loss):
                break
    """

    def __init__(self, patience: int = 4, min_delta: float = 0.0, name: str = "val_total"):
        """
        Initialize the stopper.

        Args:
            patience: Consecutive non-improving epochs tolerated before stopping
            min_delta: Minimum decrease that counts as an improvement
            name: Name of the monitored quantity (for logging)
        """
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.name = name
        self.patience = patience
        self.min_delta = min_delta

        self._state = StopState.IMPROVING
        self._best: Optional[float] = None
        self._best_epoch: Optional[int] = None
        self._stall_count = 0
        self._epoch = 0

    @property
    def state(self) -> StopState:
        return self._state

    @property
    def best(self) -> Optional[float]:
        return self._best

    @property
    def best_epoch(self) -> Optional[int]:
        return self._best_epoch

    @property
    def stall_count(self) -> int:
        return self._stall_count

    def update(self, value: float) -> bool:
        """
        Record one epoch's loss.

        Args:
            value: Monitored loss for the epoch just finished

        Returns:
            True when training should stop
        """
        self._epoch += 1
        improved = (
            math.isfinite(value)
            and (self._best is None or value < self._best - self.min_delta)
        )

        if improved:
            self._best = value
            self._best_epoch = self._epoch
            self._stall_count = 0
            self._state = StopState.IMPROVING
            return False

        self._stall_count += 1
        if self._stall_count >= self.patience:
            self._state = StopState.STOPPED
            logger.info(
                f"Early stopping on '{self.name}' after {self._stall_count} non-improving epochs "
                f"(best {self._best} at epoch {self._best_epoch})"
            )
            return True

        self._state = StopState.STALLED
        return False

    def reset(self) -> None:
        self._state = StopState.IMPROVING
        self._best = None
        self._best_epoch = None
        self._stall_count = 0
        self._epoch = 0

    def get_status(self) -> dict:
        """Get early-stopping status."""
        return {
            "name": self.name,
            "state": self._state.value,
            "best": self._best,
            "best_epoch": self._best_epoch,
            "stall_count": self._stall_count,
            "patience": self.patience,
            "epochs_seen": self._epoch,
        }
