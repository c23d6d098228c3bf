from enum import Enum


class OpKind(str, Enum):
    """Primitive operations recorded on the autodiff tape."""
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    SCALAR_MUL = "scalar-mul"
    MATMUL = "matmul"
    SUM = "sum"
    MEAN = "mean"
    SEGMENT_SUM = "segment-sum"
    CONCAT = "concat"
    SLICE = "slice"
    RELU = "relu"
    SILU = "silu"
    TANH = "tanh"
    EXP = "exp"
    LOG = "log"
    SQRT = "sqrt"
    SOFTMAX = "softmax"
    SQUARED_NORM = "squared-norm"


class AnnealKind(str, Enum):
    """Probability temperature annealing curve families."""
    ORIGINAL = "original"
    LINEAR = "linear"
    ARC = "arc"


class AtomRole(str, Enum):
    LIGAND = "ligand"
    PROTEIN = "protein"


class BondOrder(str, Enum):
    SINGLE = "single"
    DOUBLE = "double"
    AROMATIC = "aromatic"

    @property
    def symbol(self) -> str:
        return {"single": "-", "double": "=", "aromatic": ":"}[self.value]
