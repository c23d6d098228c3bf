from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from pocketdiff.api.dependencies.custom_exception import InvalidDistributionError, ShapeMismatchError


def _frozen_array(value, ndim: int, name: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim != ndim:
        raise ShapeMismatchError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def check_one_hot(types: np.ndarray, name: str = "types") -> None:
    """Raise unless every row holds exactly one 1 and zeros elsewhere."""
    ones = types == 1.0
    zeros = types == 0.0
    if not np.all(ones | zeros) or not np.all(ones.sum(axis=1) == 1):
        raise InvalidDistributionError(f"{name} rows must be one-hot")


def one_hot(indices: np.ndarray, num_classes: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros((indices.shape[0], num_classes))
    out[np.arange(indices.shape[0]), indices] = 1.0
    return out


class AtomSet(BaseModel):
    """Positions (Å) and one-hot types for a set of atoms."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    positions: np.ndarray
    types: np.ndarray

    @field_validator("positions", mode="before")
    @classmethod
    def _positions(cls, value):
        arr = _frozen_array(value, 2, "positions")
        if arr.shape[1] != 3:
            raise ShapeMismatchError(f"positions must have 3 columns, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidDistributionError("positions must be finite")
        return arr

    @field_validator("types", mode="before")
    @classmethod
    def _types(cls, value):
        arr = _frozen_array(value, 2, "types")
        check_one_hot(arr)
        return arr

    @model_validator(mode="after")
    def _rows_agree(self):
        if self.positions.shape[0] != self.types.shape[0]:
            raise ShapeMismatchError(
                f"{self.positions.shape[0]} positions but {self.types.shape[0]} type rows"
            )
        if self.positions.shape[0] < 1:
            raise ShapeMismatchError("an atom set needs at least one atom")
        return self

    @property
    def num_atoms(self) -> int:
        return self.positions.shape[0]

    @property
    def num_types(self) -> int:
        return self.types.shape[1]

    @property
    def type_indices(self) -> np.ndarray:
        return np.argmax(self.types, axis=1)

    def translated(self, offset: np.ndarray):
        return type(self)(positions=self.positions + offset, types=self.types)


class Molecule(AtomSet):
    """Ligand M_0 = [x_0, v_0] with K ligand atom categories."""


class ProteinContext(AtomSet):
    """Pocket atoms P = [x_P, v_P] with K_P protein atom categories."""


class Complex(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    protein: ProteinContext
    ligand: Molecule
    complex_id: Optional[str] = None
    template: Optional[str] = None


class NoisyState(BaseModel):
    """M_t = [x_t, v_t] at timestep t."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x_t: np.ndarray
    v_t: np.ndarray
    t: int

    @field_validator("x_t", mode="before")
    @classmethod
    def _x(cls, value):
        return _frozen_array(value, 2, "x_t")

    @field_validator("v_t", mode="before")
    @classmethod
    def _v(cls, value):
        arr = _frozen_array(value, 2, "v_t")
        check_one_hot(arr, "v_t")
        return arr


class PseudoMolecule(BaseModel):
    """The condition y_t = [y_xt, y_vt] selected for the denoiser, with its provenance."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    y_xt: np.ndarray
    y_vt: np.ndarray
    chose_ground_truth: bool

    @field_validator("y_xt", "y_vt", mode="before")
    @classmethod
    def _arrays(cls, value):
        return _frozen_array(value, 2, "pseudo molecule")


class Prediction(BaseModel):
    """Network output [x̂_0, v̂_0]; v̂_0 rows are probabilities."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x0_hat: np.ndarray
    v0_hat: np.ndarray

    @field_validator("x0_hat", "v0_hat", mode="before")
    @classmethod
    def _arrays(cls, value):
        return _frozen_array(value, 2, "prediction")
