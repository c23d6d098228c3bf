"""
Checkpoint files.

A checkpoint is an uncompressed ``.npz`` archive holding one float64 array per weight
under ``weights/<name>`` and a ``__meta__`` entry with orjson-encoded metadata stored as
a uint8 array. Metadata carries the format version, the denoiser config echo and any
extra fields the trainer adds (atom-count statistics, step, seed).
"""
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import orjson

from pocketdiff.api.dependencies.custom_exception import CheckpointError
from pocketdiff.schemas.config import DenoiserConfig
from pocketdiff.services.denoiser import DenoiserParams, expected_shapes
from pocketdiff.utils.logger import get_logger


logger = get_logger(__name__)

CHECKPOINT_FORMAT = "pocketdiff-checkpoint"
CHECKPOINT_VERSION = 1
_META_KEY = "__meta__"
_WEIGHT_PREFIX = "weights/"


def save_checkpoint(path: Path, params: DenoiserParams, extra: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.config.model_dump(),
        **(extra or {}),
    }
    arrays = {f"{_WEIGHT_PREFIX}{name}": np.asarray(w, dtype=np.float64) for name, w in params.weights.items()}
    arrays[_META_KEY] = np.frombuffer(orjson.dumps(meta, option=orjson.OPT_SERIALIZE_NUMPY), dtype=np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}", errors={"path": str(path)})
    logger.debug("Wrote checkpoint %s (%d arrays)", path, len(params.weights))
    return path


def load_checkpoint(path: Path) -> Tuple[DenoiserParams, Dict[str, Any]]:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointError: unreadable file, unknown format/version, or weights whose
            names or shapes disagree with the stored config.
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            contents = {k: archive[k] for k in archive.files}
    except (OSError, ValueError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}", errors={"path": str(path)})

    if _META_KEY not in contents:
        raise CheckpointError(f"{path} has no metadata entry", errors={"path": str(path)})
    try:
        meta = orjson.loads(contents.pop(_META_KEY).tobytes())
    except orjson.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt metadata: {e}", errors={"path": str(path)})
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format {meta.get('format')!r} v{meta.get('version')}",
            errors={"path": str(path), "version": meta.get("version")},
        )

    try:
        config = DenoiserConfig.model_validate(meta["config"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid config echo: {e}", errors={"path": str(path)})

    weights = {k[len(_WEIGHT_PREFIX):]: v for k, v in contents.items() if k.startswith(_WEIGHT_PREFIX)}
    expected = expected_shapes(config)
    missing = sorted(set(expected) - set(weights))
    surplus = sorted(set(weights) - set(expected))
    wrong = {k: [list(weights[k].shape), list(s)] for k, s in expected.items() if k in weights and weights[k].shape != s}
    if missing or surplus or wrong:
        raise CheckpointError(
            f"{path}: weights do not match the stored config",
            errors={"missing": missing, "unexpected": surplus, "shape": wrong},
        )
    return DenoiserParams(config=config, weights=weights), meta
