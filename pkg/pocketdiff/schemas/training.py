from typing import Dict, List, Sequence

from pydantic import BaseModel, field_validator

from pocketdiff.schemas.molecule import Complex


METRIC_COLUMNS: List[str] = ["step", "epoch", "p_T", "mse", "kl", "loss", "chose_gt_fraction"]


class StepRecord(BaseModel):
    """One row of the metrics CSV."""
    step: int
    epoch: int
    p_T: float
    mse: float
    kl: float
    loss: float
    chose_gt_fraction: float


class AtomCountStats(BaseModel):
    """Histogram of ligand sizes seen in the training corpus."""
    counts: Dict[int, int]

    @field_validator("counts", mode="before")
    @classmethod
    def _int_keys(cls, value):
        # orjson round trips turn the keys into strings
        return {int(k): int(v) for k, v in dict(value).items()}

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "AtomCountStats":
        counts: Dict[int, int] = {}
        for m in sizes:
            counts[int(m)] = counts.get(int(m), 0) + 1
        return cls(counts=counts)

    @classmethod
    def from_complexes(cls, complexes: Sequence[Complex]) -> "AtomCountStats":
        return cls.from_sizes([c.ligand.num_atoms for c in complexes])

    def to_meta(self) -> Dict[str, int]:
        return {str(k): v for k, v in sorted(self.counts.items())}

    @property
    def total(self) -> int:
        return sum(self.counts.values())

