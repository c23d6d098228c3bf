"""
Reverse-process sampling of ligands inside a fixed pocket.

The rng is only asked for ``normal(size=...)`` and ``random(size=...)`` draws, so a
caller can pass any object exposing those two methods (tests use this to feed a
rotated noise stream).
"""
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from pocketdiff.api.dependencies.custom_exception import (
    CorpusError,
    EmptyStatsError,
    SamplingDivergedError,
)
from pocketdiff.core.config import Config
from pocketdiff.schemas.molecule import Molecule, ProteinContext, one_hot
from pocketdiff.schemas.schedule import NoiseSchedule
from pocketdiff.schemas.training import AtomCountStats
from pocketdiff.services.dataio import dataio_service
from pocketdiff.services.denoiser import DenoiserParams, PredictFn, make_predictor
from pocketdiff.services.diffusion import diffusion_service
from pocketdiff.services.trainer import trainer_service
from pocketdiff.utils.logger import get_logger


logger = get_logger(__name__)

MANIFEST_COLUMNS = ["sample_id", "seed", "m", "pocket_id"]


class SamplerService:
    """Reverse-process sampling of ligands inside a fixed pocket."""

    def choose_atom_count(
        self,
        stats: Optional[AtomCountStats],
        rng: np.random.Generator,
        fixed_m: Optional[int] = None,
    ) -> int:
        """Draw a ligand size from the corpus histogram unless ``fixed_m`` is given."""
        if fixed_m is not None:
            if fixed_m < 1:
                raise EmptyStatsError(f"atom count must be at least 1, got {fixed_m}")
            return int(fixed_m)
        if stats is None or stats.total == 0:
            raise EmptyStatsError("no atom-count statistics to draw from")
        sizes = np.array(sorted(stats.counts), dtype=np.int64)
        weights = np.array([stats.counts[s] for s in sizes], dtype=np.float64)
        return int(rng.choice(sizes, p=weights / weights.sum()))

    def sample_molecule(
        self,
        protein: ProteinContext,
        m: int,
        params: Optional[DenoiserParams],
        schedule: NoiseSchedule,
        rng: np.random.Generator,
        K: Optional[int] = None,
        predict_fn: Optional[PredictFn] = None,
        position_scale: float = 1.0,
    ) -> Molecule:
        """
        Denoise m atoms from x_T ~ N(0, I), v_T ~ uniform one-hot down to t = 0.

        The pocket is centered (and divided by ``position_scale``, matching training)
        internally, and the returned ligand is mapped back into the pocket's original
        frame. At t = 1 the posterior mean (= x̂_0) and argmax types are emitted.

        Raises:
            SamplingDivergedError: positions become non-finite.
        """
        if m < 1:
            raise EmptyStatsError(f"atom count must be at least 1, got {m}")
        predictor = predict_fn or make_predictor(params)
        if K is None:
            K = params.config.K
        (protein_x,), offset = trainer_service.center_positions(protein.positions, scale=position_scale)
        centered = ProteinContext(positions=protein_x, types=protein.types)

        x_t = rng.normal(size=(m, 3))
        v_t = diffusion_service.sample_categorical(np.full((m, K), 1.0 / K), rng)
        for t in range(schedule.T, 0, -1):
            prediction = predictor(x_t, v_t, t, centered)
            if t == 1:
                x_t = np.array(prediction.x0_hat)
                v_t = one_hot(np.argmax(prediction.v0_hat, axis=1), K)
            else:
                posterior = diffusion_service.gaussian_posterior(x_t, prediction.x0_hat, t, schedule)
                x_t = posterior.mean + np.sqrt(posterior.variance) * rng.normal(size=(m, 3))
                probs = diffusion_service.categorical_posterior(v_t, prediction.v0_hat, t, schedule).probs
                v_t = diffusion_service.sample_categorical(probs, rng)
            if not np.all(np.isfinite(x_t)):
                raise SamplingDivergedError(
                    f"positions became non-finite at t={t}",
                    errors={"t": t, "m": m},
                )
        return Molecule(positions=x_t * position_scale + offset, types=v_t)

    def sample_many(
        self,
        protein: ProteinContext,
        n: int,
        params: DenoiserParams,
        schedule: NoiseSchedule,
        seed: int,
        out_dir: Path,
        stats: Optional[AtomCountStats] = None,
        fixed_m: Optional[int] = None,
        pocket_id: str = "pocket",
        num_workers: Optional[int] = None,
        symbols: Optional[List[str]] = None,
        position_scale: float = 1.0,
    ) -> pd.DataFrame:
        """
        Draw ``n`` ligands with per-sample streams ``default_rng([seed, i])`` and write
        ``sample_<i>.xyz`` files plus ``manifest.csv`` into ``out_dir``.
        """
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise CorpusError(f"Cannot create {out_dir}: {e}", errors={"path": str(out_dir)})

        def _one(i: int) -> dict:
            rng = np.random.default_rng([seed, i])
            m = self.choose_atom_count(stats, rng, fixed_m)
            molecule = self.sample_molecule(protein, m, params, schedule, rng, position_scale=position_scale)
            sample_id = f"sample_{i:05d}"
            dataio_service.write_xyz(
                out_dir / f"{sample_id}.xyz",
                molecule,
                provenance=f"sampled seed={seed} index={i} pocket={pocket_id}",
                symbols=symbols,
            )
            logger.debug("Sampled %s with %d atoms", sample_id, m)
            return {"sample_id": sample_id, "seed": seed, "m": m, "pocket_id": pocket_id}

        workers = max(1, num_workers or Config.NUM_WORKERS)
        if workers == 1 or n <= 1:
            rows = [_one(i) for i in range(n)]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(_one, range(n)))

        manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
        manifest.to_csv(out_dir / "manifest.csv", index=False)
        logger.info("Wrote %d samples to %s", n, out_dir)
        return manifest


sampler_service = SamplerService()
