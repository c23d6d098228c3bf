from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from pocketdiff.api.dependencies.custom_exception import BinningMismatchError
from pocketdiff.schemas.enums import BondOrder


REPORT_COLUMNS: List[str] = ["metric", "class", "jsd", "flag"]


class BondSpec(BaseModel):
    """A bond class between two ligand atom types with its accepted length window (Å)."""
    model_config = ConfigDict(frozen=True)

    type_a: int
    type_b: int
    order: BondOrder
    length: float
    lo: float
    hi: float
    label: str

    @model_validator(mode="after")
    def _window(self):
        if not (0.0 < self.lo < self.hi):
            raise ValueError(f"bond window must satisfy 0 < lo < hi, got [{self.lo}, {self.hi}]")
        return self

    @property
    def pair(self) -> Tuple[int, int]:
        return (min(self.type_a, self.type_b), max(self.type_a, self.type_b))

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def contains(self, distance: float) -> bool:
        return self.lo <= distance <= self.hi


class DetectedBond(BaseModel):
    model_config = ConfigDict(frozen=True)

    i: int
    j: int
    spec: BondSpec
    distance: float


class Binning(BaseModel):
    model_config = ConfigDict(frozen=True)

    lo: float
    hi: float
    bins: int

    @model_validator(mode="after")
    def _range(self):
        if self.bins < 1 or not (self.lo < self.hi):
            raise ValueError(f"invalid binning [{self.lo}, {self.hi}] x {self.bins}")
        return self

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bins + 1)


class Histogram(BaseModel):
    """Counts on fixed edges; ``probabilities`` is all zeros for an empty histogram."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    edges: np.ndarray
    counts: np.ndarray

    @field_validator("edges", "counts", mode="before")
    @classmethod
    def _array(cls, value):
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        return arr

    @model_validator(mode="after")
    def _shapes(self):
        if self.counts.shape != (self.edges.shape[0] - 1,):
            raise BinningMismatchError(
                f"{self.counts.shape[0]} counts for {self.edges.shape[0]} edges"
            )
        return self

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def probabilities(self) -> np.ndarray:
        total = self.total
        if total == 0:
            return np.zeros_like(self.counts)
        return self.counts / total
