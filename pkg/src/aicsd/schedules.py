"""Adaptive loss weighting: the per-epoch coefficient alpha.

Epochs are 1-based.  Three modes are provided:

``linear``
    ``(e - 1) / N_e``, rising from 0.
``exponential``
    ``beta ** (e - 1)``, falling from 1.
``exponential_complement``
    ``1 - beta ** (e - 1)``, rising from 0.  This is the default for AICSD runs
    because it gives the pixel-wise KD term most weight in the first epochs.
"""

from dataclasses import dataclass

from aicsd.errors import ConfigurationError, ScheduleError

MODES = ("linear", "exponential", "exponential_complement")


@dataclass(frozen=True)
class ALWConfig:
    mode: str = "exponential_complement"
    beta: float = 0.985
    total_epochs: int = 50
    clamp: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown ALW mode '{self.mode}', expected one of {MODES}")
        if self.total_epochs < 1:
            raise ConfigurationError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.mode != "linear" and not 0.0 < self.beta < 1.0:
            raise ConfigurationError(f"beta must lie in (0, 1), got {self.beta}")


def alpha_linear(epoch, total_epochs):
    if total_epochs < 1 or not 1 <= epoch <= total_epochs:
        raise ScheduleError(f"epoch {epoch} outside 1..{total_epochs}")
    return (epoch - 1) / total_epochs


def alpha_exponential(epoch, beta):
    if epoch < 1:
        raise ScheduleError(f"epoch must be >= 1, got {epoch}")
    if not 0.0 < beta < 1.0:
        raise ScheduleError(f"beta must lie in (0, 1), got {beta}")
    return beta ** (epoch - 1)


def alpha(config, epoch):
    """Weight of ``CE + ICSD`` at ``epoch`` under ``config``; ``1 - alpha`` weights KD."""
    if config.mode == "linear":
        value = alpha_linear(epoch, config.total_epochs)
    elif config.mode == "exponential":
        value = alpha_exponential(epoch, config.beta)
    elif config.mode == "exponential_complement":
        value = 1.0 - alpha_exponential(epoch, config.beta)
    else:
        raise ConfigurationError(f"unknown ALW mode '{config.mode}'")
    if config.clamp:
        value = min(1.0, max(0.0, value))
    return value
