import math
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from pocketdiff.api.dependencies.custom_exception import ScheduleError, TimestepRangeError, UnknownAnnealKindError
from pocketdiff.schemas.enums import AnnealKind


class NoiseSchedule(BaseModel):
    """
    β/α/ᾱ tables indexed directly by timestep.

    Index 0 is the clean-data endpoint (β_0 = 0, α_0 = ᾱ_0 = 1); indices 1..T hold the
    schedule proper.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @model_validator(mode="after")
    def _check_tables(self):
        for name in ("betas", "alphas", "alpha_bars"):
            getattr(self, name).flags.writeable = False
        b = self.betas[1:]
        if b.size < 1:
            raise ScheduleError("a schedule needs at least one step")
        if not (np.all(b > 0.0) and np.all(b < 1.0)):
            raise ScheduleError("every beta must lie in (0, 1)", errors={"min": float(b.min()), "max": float(b.max())})
        return self

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        b = np.asarray(betas, dtype=np.float64).reshape(-1)
        if b.size < 1:
            raise ScheduleError("a schedule needs at least one step")
        if not (np.all(b > 0.0) and np.all(b < 1.0)):
            raise ScheduleError("every beta must lie in (0, 1)")
        betas_full = np.concatenate([[0.0], b])
        alphas = 1.0 - betas_full
        alphas[0] = 1.0
        # sequential product, so alpha_bar[t] == alpha_bar[t-1] * alpha[t] exactly
        alpha_bars = np.cumprod(alphas)
        return cls(betas=betas_full, alphas=alphas, alpha_bars=alpha_bars)

    @property
    def T(self) -> int:
        return self.betas.shape[0] - 1

    def check_t(self, t: int, lowest: int = 1) -> int:
        if not (lowest <= int(t) <= self.T):
            raise TimestepRangeError(
                f"timestep {t} outside [{lowest}, {self.T}]",
                errors={"t": int(t), "T": self.T},
            )
        return int(t)

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_t(t, lowest=0)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self.check_t(t, lowest=0)])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self.check_t(t, lowest=0)])


class AnnealSpec(BaseModel):
    """Annealing curve family and hyperparameters producing p_T per pseudo-epoch."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: AnnealKind = AnnealKind.ARC
    mu: float = Field(default=12.0, gt=0)
    slope: float = -0.005
    r: float = Field(default=2.0, gt=0)
    lower_bound: float = Field(default=0.5, ge=0.0, le=1.0)
    epoch_divisor: int = Field(default=1000, ge=1)
    p_init: float = Field(default=1.0, ge=0.0, le=1.0)
    disabled: bool = False

    @field_validator("r", mode="before")
    @classmethod
    def _finite_r(cls, value):
        if isinstance(value, (int, float)) and math.isinf(value):
            raise ScheduleError("r=inf is expressed with disabled=True")
        return value

    @property
    def name(self) -> str:
        if self.disabled:
            detail = "r=inf" if self.kind == AnnealKind.ARC else "off"
        elif self.kind == AnnealKind.ARC:
            detail = f"r={self.r:g}"
        elif self.kind == AnnealKind.ORIGINAL:
            detail = f"mu={self.mu:g}"
        else:
            detail = f"slope={self.slope:g}"
        return f"{self.kind.value}({detail},lb={self.lower_bound:g})"


INFINITE_TOKENS = {"inf", "+inf", "infinity", "none", "off"}


def parse_anneal(text: str, defaults: Optional[dict] = None) -> AnnealSpec:
    """
    Build an AnnealSpec from ``kind[:key=value,...]``, e.g. ``arc:r=2,lower_bound=0``.

    ``r=inf`` marks the curve as disabled (p ≡ 1).
    """
    head, _, tail = text.strip().partition(":")
    values = dict(defaults or {})
    try:
        values["kind"] = AnnealKind(head.strip().lower())
    except ValueError:
        raise UnknownAnnealKindError(
            f"unknown annealing curve '{head}'",
            errors={"valid": [k.value for k in AnnealKind]},
        )
    for chunk in filter(None, (c.strip() for c in tail.split(","))):
        if "=" not in chunk:
            raise ScheduleError(f"expected key=value in anneal spec, got '{chunk}'")
        key, value = (s.strip() for s in chunk.split("=", 1))
        if key == "r" and value.lower() in INFINITE_TOKENS:
            values["disabled"] = True
            continue
        values[key] = value
    try:
        return AnnealSpec.model_validate(values)
    except ValueError as e:
        raise ScheduleError(f"invalid anneal spec '{text}': {e}")
