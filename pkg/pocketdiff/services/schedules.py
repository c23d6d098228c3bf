import math
from typing import Sequence

import numpy as np
import pandas as pd

from pocketdiff.api.dependencies.custom_exception import ScheduleError, UnknownAnnealKindError
from pocketdiff.schemas.enums import AnnealKind
from pocketdiff.schemas.schedule import AnnealSpec, NoiseSchedule
from pocketdiff.utils.logger import get_logger


logger = get_logger(__name__)


class ScheduleService:
    """Noise schedule construction and probability temperature annealing."""

    def build_noise_schedule(
        self,
        T: int,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
    ) -> NoiseSchedule:
        """
        Linear-in-β schedule over T steps.

        Raises:
            ScheduleError: T < 1 or betas outside (0, 1) or beta_start > beta_end.
        """
        if T < 1:
            raise ScheduleError(f"T must be at least 1, got {T}", errors={"T": T})
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ScheduleError(
                f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}",
                errors={"beta_start": beta_start, "beta_end": beta_end},
            )
        return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))

    def raw_curve(self, spec: AnnealSpec, epoch: float) -> float:
        """Unclamped curve value at ``epoch``."""
        if spec.disabled:
            return 1.0
        e = float(epoch)
        if spec.kind == AnnealKind.ORIGINAL:
            # exp(e/mu) overflows long after the curve has hit zero
            try:
                return spec.mu / (spec.mu + math.exp(e / spec.mu))
            except OverflowError:
                return 0.0
        if spec.kind == AnnealKind.LINEAR:
            return 1.0 + spec.slope * e
        if spec.kind == AnnealKind.ARC:
            return math.sqrt(max(spec.r ** 2 - (e / 100.0) ** 2, 0.0)) / spec.r
        raise UnknownAnnealKindError(f"unknown annealing curve '{spec.kind}'")

    def anneal_probability(self, spec: AnnealSpec, epoch: float) -> float:
        """p_T at ``epoch``: p_init · curve, floored at lower_bound, clipped to [0, 1]."""
        if epoch < 0:
            raise ScheduleError(f"epoch must be non-negative, got {epoch}", errors={"epoch": epoch})
        raw = spec.p_init * self.raw_curve(spec, epoch)
        return min(max(raw, spec.lower_bound, 0.0), 1.0)

    def epoch_from_step(self, step: int, epoch_divisor: int = 1000) -> int:
        if epoch_divisor == 0:
            raise ScheduleError("epoch_divisor must be non-zero")
        if step < 0:
            raise ScheduleError(f"step must be non-negative, got {step}", errors={"step": step})
        return int(step) // int(epoch_divisor)

    def probability_at_step(self, spec: AnnealSpec, step: int) -> float:
        return self.anneal_probability(spec, self.epoch_from_step(step, spec.epoch_divisor))

    def dump_curves(self, specs: Sequence[AnnealSpec], max_epoch: int) -> pd.DataFrame:
        """
        Tabulate p_T for each spec over epochs 0..max_epoch (inclusive).

        Columns are ``epoch`` followed by each spec's ``name``; duplicate names get a
        positional suffix.
        """
        if max_epoch < 1:
            raise ScheduleError(f"max_epoch must be at least 1, got {max_epoch}")
        epochs = np.arange(0, max_epoch + 1)
        frame = pd.DataFrame({"epoch": epochs})
        for i, spec in enumerate(specs):
            column = spec.name if spec.name not in frame.columns else f"{spec.name}#{i}"
            frame[column] = [self.anneal_probability(spec, e) for e in epochs]
        logger.debug("Tabulated %d curves over %d epochs", len(specs), len(epochs))
        return frame


schedule_service = ScheduleService()
