"""
E(n)-equivariant denoiser predicting [x̂_0, v̂_0] from a noisy ligand and its pocket.

Ligand and protein atoms share one graph. Each layer computes edge messages from the two
endpoint features and their squared distance, moves ligand coordinates along relative
position vectors weighted by a scalar gate on the message, and updates node features
from the mean incoming message. Protein coordinates never move.
"""
import math
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.spatial.distance import pdist, squareform

from pocketdiff.api.dependencies.custom_exception import DenoiserShapeError
from pocketdiff.core import autodiff as ad
from pocketdiff.core.autodiff import Tensor
from pocketdiff.schemas.config import DenoiserConfig
from pocketdiff.schemas.molecule import Prediction, ProteinContext
from pocketdiff.utils.logger import get_logger


logger = get_logger(__name__)

# scale of the last coordinate-gate layer at initialization
COORD_GATE_INIT = 1e-3
# keeps the distance normalizer differentiable at coincident atoms
DIST_EPS = 1e-8

PredictFn = Callable[[np.ndarray, np.ndarray, int, ProteinContext], Prediction]


def layer_names(layer: int) -> Dict[str, str]:
    prefix = f"layer{layer}"
    return {k: f"{prefix}.{k}" for k in ("We1", "be1", "We2", "be2", "Wx1", "bx1", "Wx2", "Wh1", "bh1", "Wh2", "bh2")}


def expected_shapes(config: DenoiserConfig) -> Dict[str, Tuple[int, ...]]:
    """Name → shape for every weight of a network with ``config``'s dimensions."""
    H = config.hidden_dim
    in_dim = config.K + config.K_P + 1 + config.time_dim
    shapes: Dict[str, Tuple[int, ...]] = {"embed.W": (in_dim, H), "embed.b": (H,)}
    for layer in range(config.num_layers):
        n = layer_names(layer)
        shapes.update({
            n["We1"]: (2 * H + 1, H), n["be1"]: (H,),
            n["We2"]: (H, H), n["be2"]: (H,),
            n["Wx1"]: (H, H), n["bx1"]: (H,),
            n["Wx2"]: (H, 1),
            n["Wh1"]: (2 * H, H), n["bh1"]: (H,),
            n["Wh2"]: (H, H), n["bh2"]: (H,),
        })
    shapes["out.W"] = (H, config.K)
    shapes["out.b"] = (config.K,)
    return shapes


class DenoiserParams(BaseModel):
    """Named float64 weight arrays plus the dimensions they were built for."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    config: DenoiserConfig
    weights: Dict[str, np.ndarray]

    @classmethod
    def initialize(cls, config: DenoiserConfig, rng: np.random.Generator) -> "DenoiserParams":
        """Normal weights with std 1/√fan_in, zero biases, near-zero coordinate gates."""
        weights: Dict[str, np.ndarray] = {}
        for name, shape in expected_shapes(config).items():
            if len(shape) == 1:
                weights[name] = np.zeros(shape)
                continue
            w = rng.standard_normal(shape) / math.sqrt(shape[0])
            if name.endswith(".Wx2"):
                w = w * COORD_GATE_INIT
            weights[name] = w
        return cls(config=config, weights=weights)

    def with_weights(self, weights: Dict[str, np.ndarray]) -> "DenoiserParams":
        return DenoiserParams(config=self.config, weights=dict(weights))

    def tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.weights.items()}

    @property
    def num_parameters(self) -> int:
        return int(sum(w.size for w in self.weights.values()))


def timestep_embedding(t: int, dim: int, T: int) -> np.ndarray:
    """[sin(s·ω_k), cos(s·ω_k)] with s = t/T and ω spaced geometrically from 1 to 1000."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    s = float(t) / float(T)
    return np.concatenate([np.sin(s * freqs), np.cos(s * freqs)])


def build_edges(positions: np.ndarray, cutoff: float, fc_threshold: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Directed edges (src → dst), i ≠ j.

    Graphs with at most ``fc_threshold`` nodes are fully connected; larger ones keep
    pairs closer than ``cutoff``.
    """
    N = positions.shape[0]
    if N <= fc_threshold:
        adjacency = ~np.eye(N, dtype=bool)
    else:
        dist = squareform(pdist(positions))
        adjacency = (dist < cutoff) & ~np.eye(N, dtype=bool)
    dst, src = np.nonzero(adjacency)
    return src.astype(np.int64), dst.astype(np.int64)


def _linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = ad.matmul(x, W)
    return ad.add(out, b) if b is not None else out


def egnn_layer(
    h: Tensor,
    x: Tensor,
    src: np.ndarray,
    dst: np.ndarray,
    weights: Dict[str, Tensor],
    layer: int,
    move_mask: np.ndarray,
) -> Tuple[Tensor, Tensor]:
    """
    One message-passing round.

    ``move_mask`` is 1 for nodes whose coordinates may move (ligand) and 0 otherwise.
    """
    n = layer_names(layer)
    N = h.shape[0]
    deg = np.bincount(dst, minlength=N).astype(np.float64)
    inv_deg = 1.0 / np.maximum(deg, 1.0)

    if src.size == 0:
        return h, x

    diff = ad.sub(ad.slice_(x, dst), ad.slice_(x, src))
    d2 = ad.squared_norm(diff, axis=1, keepdims=True)

    edge_in = ad.concat([ad.slice_(h, dst), ad.slice_(h, src), d2], axis=1)
    m = ad.silu(_linear(ad.silu(_linear(edge_in, weights[n["We1"]], weights[n["be1"]])), weights[n["We2"]], weights[n["be2"]]))

    gate = ad.tanh(_linear(ad.silu(_linear(m, weights[n["Wx1"]], weights[n["bx1"]])), weights[n["Wx2"]]))
    norm = ad.add(ad.sqrt(ad.add(d2, DIST_EPS)), 1.0)
    update = ad.div(ad.mul(diff, gate), norm)
    shift = ad.segment_sum(update, dst, N)
    x_new = ad.add(x, ad.mul(shift, (move_mask * inv_deg)[:, None]))

    agg = ad.mul(ad.segment_sum(m, dst, N), inv_deg[:, None])
    node_in = ad.concat([h, agg], axis=1)
    delta = _linear(ad.silu(_linear(node_in, weights[n["Wh1"]], weights[n["bh1"]])), weights[n["Wh2"]], weights[n["bh2"]])
    return ad.add(h, delta), x_new


def _check_inputs(
    config: DenoiserConfig, y_xt: np.ndarray, y_vt: np.ndarray, protein: ProteinContext
) -> None:
    if y_xt.ndim != 2 or y_xt.shape[1] != 3 or y_xt.shape[0] < 1:
        raise DenoiserShapeError(f"ligand positions must be m×3 with m ≥ 1, got {y_xt.shape}")
    if y_vt.shape != (y_xt.shape[0], config.K):
        raise DenoiserShapeError(
            f"ligand types must be {y_xt.shape[0]}×{config.K}, got {y_vt.shape}",
            errors={"expected_K": config.K, "got": list(y_vt.shape)},
        )
    if protein.num_types != config.K_P:
        raise DenoiserShapeError(
            f"protein types must have {config.K_P} columns, got {protein.num_types}",
            errors={"expected_K_P": config.K_P, "got": protein.num_types},
        )


def forward(
    weights: Dict[str, Tensor],
    config: DenoiserConfig,
    y_xt: np.ndarray,
    y_vt: np.ndarray,
    t: int,
    protein: ProteinContext,
) -> Tuple[Tensor, Tensor]:
    """
    Differentiable pass returning (x̂_0, v̂_0) tensors.

    Inputs are expected in the protein-centered frame.
    """
    y_xt = np.asarray(y_xt, dtype=np.float64)
    y_vt = np.asarray(y_vt, dtype=np.float64)
    _check_inputs(config, y_xt, y_vt, protein)
    m = y_xt.shape[0]
    n = protein.num_atoms

    temb = timestep_embedding(t, config.time_dim, config.T)
    lig_feats = np.hstack([y_vt, np.zeros((m, config.K_P)), np.zeros((m, 1)), np.tile(temb, (m, 1))])
    pro_feats = np.hstack([np.zeros((n, config.K)), protein.types, np.ones((n, 1)), np.tile(temb, (n, 1))])
    feats = np.vstack([lig_feats, pro_feats])
    coords = np.vstack([y_xt, protein.positions])
    move_mask = np.concatenate([np.ones(m), np.zeros(n)])

    src, dst = build_edges(coords, config.cutoff, config.fc_threshold)

    h = _linear(ad.as_tensor(feats), weights["embed.W"], weights["embed.b"])
    x = ad.as_tensor(coords)
    for layer in range(config.num_layers):
        h, x = egnn_layer(h, x, src, dst, weights, layer, move_mask)

    x0_hat = ad.slice_(x, slice(0, m))
    logits = _linear(ad.slice_(h, slice(0, m)), weights["out.W"], weights["out.b"])
    return x0_hat, ad.softmax(logits, axis=1)


def predict(
    y_xt: np.ndarray,
    y_vt: np.ndarray,
    t: int,
    protein: ProteinContext,
    params: DenoiserParams,
) -> Prediction:
    """Inference-mode prediction; nothing is recorded on any active tape."""
    with ad.no_grad():
        x0_hat, v0_hat = forward(params.tensors(), params.config, y_xt, y_vt, t, protein)
    return Prediction(x0_hat=x0_hat.data, v0_hat=v0_hat.data)


def make_predictor(params: DenoiserParams) -> PredictFn:
    """Bind ``params`` so callers can swap in a stub with the same signature."""
    def _predict(y_xt, y_vt, t, protein):
        return predict(y_xt, y_vt, t, protein, params)
    return _predict
