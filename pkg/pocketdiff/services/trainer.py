"""
Training loop with pseudo molecule estimation and annealed condition selection.

Each batch item gets its own rng stream derived from (seed, step, item), so a run is a
pure function of its config and corpus. Within an item the draws happen in a fixed
order: timestep, noisy positions, noisy types, then the selection draw and whatever
the estimation branch consumes. Keeping the selection last means a run that never
estimates and a classic run share every other draw.
"""
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from pocketdiff.api.dependencies.custom_exception import (
    CorpusError,
    EmptyProteinError,
    NonFiniteError,
    TrainingDivergedError,
)
from pocketdiff.core import autodiff as ad
from pocketdiff.core.autodiff import Tape, Tensor
from pocketdiff.core.config import dump_key_values
from pocketdiff.core.optim import AdamState, adam_step
from pocketdiff.schemas.config import TrainConfig
from pocketdiff.schemas.molecule import (
    Complex,
    Molecule,
    NoisyState,
    ProteinContext,
    PseudoMolecule,
    one_hot,
)
from pocketdiff.schemas.schedule import AnnealSpec, NoiseSchedule
from pocketdiff.schemas.training import METRIC_COLUMNS, AtomCountStats, StepRecord
from pocketdiff.services.checkpoint import save_checkpoint
from pocketdiff.services.denoiser import DenoiserParams, PredictFn, forward, make_predictor
from pocketdiff.services.diffusion import diffusion_service
from pocketdiff.services.schedules import schedule_service
from pocketdiff.utils.logger import get_logger


logger = get_logger(__name__)


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: DenoiserParams
    metrics: pd.DataFrame
    checkpoint_path: Optional[Path] = None
    metrics_path: Optional[Path] = None


class TrainerService:
    """Denoiser training with annealed pseudo molecule estimation."""

    def center_positions(
        self, protein_positions: np.ndarray, *others: np.ndarray, scale: float = 1.0
    ) -> Tuple[List[np.ndarray], np.ndarray]:
        """
        Shift every array so the protein centroid sits at the origin, then divide by
        ``scale``; returns (shifted, offset). ``x * scale + offset`` undoes it.
        """
        protein_positions = np.asarray(protein_positions, dtype=np.float64)
        if protein_positions.ndim != 2 or protein_positions.shape[0] == 0:
            raise EmptyProteinError("cannot center on a protein with no atoms")
        offset = protein_positions.mean(axis=0)
        shifted = [protein_positions - offset] + [np.asarray(o, dtype=np.float64) - offset for o in others]
        return [s / scale for s in shifted], offset

    def center_complex(self, complex_: Complex, scale: float = 1.0) -> Tuple[Complex, np.ndarray]:
        """Translate a complex so its protein CoM is at the origin; add ``offset`` to undo."""
        (protein_x, ligand_x), offset = self.center_positions(
            complex_.protein.positions, complex_.ligand.positions, scale=scale
        )
        centered = Complex(
            protein=ProteinContext(positions=protein_x, types=complex_.protein.types),
            ligand=Molecule(positions=ligand_x, types=complex_.ligand.types),
            complex_id=complex_.complex_id,
            template=complex_.template,
        )
        return centered, offset

    def pseudo_molecule_estimation(
        self,
        complex0: Complex,
        noisy: NoisyState,
        t: int,
        p: float,
        params: Optional[DenoiserParams],
        schedule: NoiseSchedule,
        rng: np.random.Generator,
        predict_fn: Optional[PredictFn] = None,
    ) -> PseudoMolecule:
        """
        Pick the denoiser's condition for one sample.

        With probability ``p`` (or whenever t = T) the true noisy state is returned.
        Otherwise the clean ligand is perturbed to t+1, denoised with the current model,
        hardened to one-hot types, and perturbed back to t. Positions and types always come
        from the same source. ``predict_fn`` overrides ``params`` when given.
        """
        t = schedule.check_t(t)
        ground_truth = PseudoMolecule(y_xt=noisy.x_t, y_vt=noisy.v_t, chose_ground_truth=True)
        if rng.random() < p or t >= schedule.T:
            return ground_truth

        predictor = predict_fn or make_predictor(params)
        ligand = complex0.ligand
        K = ligand.num_types
        x_next = diffusion_service.perturb_positions(ligand.positions, t + 1, schedule, rng)
        v_next = diffusion_service.perturb_types(ligand.types, t + 1, schedule, K, rng)
        with ad.no_grad():
            estimate = predictor(x_next, v_next, t + 1, complex0.protein)

        # argmax breaks ties toward the lowest index
        v0_hard = one_hot(np.argmax(estimate.v0_hat, axis=1), K)
        x_hat_t = diffusion_service.perturb_positions(estimate.x0_hat, t, schedule, rng)
        v_hat_t = diffusion_service.perturb_types(v0_hard, t, schedule, K, rng)
        return PseudoMolecule(y_xt=x_hat_t, y_vt=v_hat_t, chose_ground_truth=False)

    def compute_loss(
        self,
        x0_hat: Tensor,
        v0_hat: Tensor,
        ligand: Molecule,
        y_vt: np.ndarray,
        t: int,
        schedule: NoiseSchedule,
        kl_weight: float,
    ) -> Tuple[Tensor, Tensor, Tensor]:
        """
        mean_atoms ‖x_0 − x̂_0‖² + α · KL(c̃(y_vt, v_0) ‖ c̃(y_vt, v̂_0)).

        Returns:
            (loss, mse, kl) tensors, all scalar.
        """
        mse = ad.mean(ad.squared_norm(ad.sub(x0_hat, ligand.positions), axis=1))
        target = diffusion_service.categorical_posterior(y_vt, ligand.types, t, schedule).probs
        predicted = diffusion_service.categorical_posterior_tensor(y_vt, v0_hat, t, schedule)
        kl = diffusion_service.kl_categorical_tensor(target, predicted)
        return ad.add(mse, ad.scalar_mul(kl, kl_weight)), mse, kl

    def item_rng(self, seed: int, step: int, item: int) -> np.random.Generator:
        return np.random.default_rng([seed, step, item])

    def batch_indices(self, seed: int, step: int, dataset_size: int, batch_size: int) -> np.ndarray:
        return np.random.default_rng([seed, step]).integers(0, dataset_size, size=batch_size)

    def training_step(
        self,
        batch: Sequence[Complex],
        step: int,
        config: TrainConfig,
        params: DenoiserParams,
        opt_state: AdamState,
        schedule: NoiseSchedule,
        anneal: AnnealSpec,
        estimator: Optional[PredictFn] = None,
    ) -> Tuple[StepRecord, DenoiserParams, AdamState]:
        """
        One optimizer update over ``batch``.

        ``estimator`` replaces the live-weights predictor inside pseudo molecule
        estimation; the estimation branch never contributes gradient either way.

        Raises:
            TrainingDivergedError: the loss, the estimate, or any intermediate is not finite.
        """
        epoch = schedule_service.epoch_from_step(step, anneal.epoch_divisor)
        p = 1.0 if config.classic_mode else schedule_service.probability_at_step(anneal, step)
        estimator = estimator or make_predictor(params)
        weights = params.tensors(requires_grad=True)

        diagnostic: Dict[str, object] = {"step": step, "epoch": epoch, "p_T": p}
        mse_parts: List[float] = []
        kl_parts: List[float] = []
        chose_gt = 0
        with Tape() as tape:
            total: Optional[Tensor] = None
            for i, item in enumerate(batch):
                rng = self.item_rng(config.seed, step, i)
                centered, _ = self.center_complex(item, config.position_scale)
                ligand = centered.ligand
                t = int(rng.integers(1, schedule.T + 1))
                diagnostic.update({"item": i, "t": t})
                noisy = diffusion_service.perturb(ligand.positions, ligand.types, t, schedule, rng)
                try:
                    if config.classic_mode:
                        pseudo = PseudoMolecule(y_xt=noisy.x_t, y_vt=noisy.v_t, chose_ground_truth=True)
                    else:
                        pseudo = self.pseudo_molecule_estimation(
                            centered, noisy, t, p, params, schedule, rng, predict_fn=estimator
                        )
                    x0_hat, v0_hat = forward(weights, params.config, pseudo.y_xt, pseudo.y_vt, t, centered.protein)
                    loss, mse, kl = self.compute_loss(
                        x0_hat, v0_hat, ligand, pseudo.y_vt, t, schedule, config.kl_weight
                    )
                except NonFiniteError as e:
                    diagnostic.update({"mse": mse_parts, "kl": kl_parts, "cause": e.message})
                    raise TrainingDivergedError(f"non-finite value at step {step}", errors=diagnostic)
                chose_gt += int(pseudo.chose_ground_truth)
                mse_parts.append(mse.item())
                kl_parts.append(kl.item())
                total = loss if total is None else ad.add(total, loss)

            batch_loss = ad.scalar_mul(total, 1.0 / len(batch))
            if not np.isfinite(batch_loss.item()):
                diagnostic.update({"mse": mse_parts, "kl": kl_parts})
                raise TrainingDivergedError(f"non-finite loss at step {step}", errors=diagnostic)
            grads = tape.backward(batch_loss)

        new_weights, new_state = adam_step(
            params.weights,
            {name: grads[w] for name, w in weights.items()},
            opt_state,
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
        )
        record = StepRecord(
            step=step,
            epoch=epoch,
            p_T=p,
            mse=float(np.mean(mse_parts)),
            kl=float(np.mean(kl_parts)),
            loss=batch_loss.item(),
            chose_gt_fraction=chose_gt / len(batch),
        )
        return record, params.with_weights(new_weights), new_state

    def _write_metrics(self, records: List[StepRecord], path: Path) -> pd.DataFrame:
        frame = pd.DataFrame([r.model_dump() for r in records], columns=METRIC_COLUMNS)
        try:
            frame.to_csv(path, index=False)
        except OSError as e:
            raise CorpusError(f"Cannot write metrics {path}: {e}", errors={"path": str(path)})
        return frame

    def train(
        self,
        config: TrainConfig,
        dataset: Sequence[Complex],
        out_dir: Path,
        on_step: Optional[Callable[[StepRecord], None]] = None,
    ) -> TrainResult:
        """
        Run ``config.total_steps`` updates and write metrics, checkpoints and a config echo.

        Files under ``out_dir``: ``metrics.csv``, ``checkpoint.npz`` (final),
        ``checkpoints/step_<n>.npz`` every ``checkpoint_every`` steps, ``resolved_config.txt``.
        """
        if not dataset:
            raise CorpusError("training corpus is empty")
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "resolved_config.txt").write_text(dump_key_values(config.echo()), encoding="utf-8")
        except OSError as e:
            raise CorpusError(f"Cannot write to {out_dir}: {e}", errors={"path": str(out_dir)})

        schedule = schedule_service.build_noise_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
        anneal = config.anneal_spec()
        first = dataset[0]
        params = DenoiserParams.initialize(
            config.denoiser_config(first.ligand.num_types, first.protein.num_types),
            np.random.default_rng(config.seed),
        )
        stats = AtomCountStats.from_complexes(dataset)
        state = AdamState()
        meta = {"atom_counts": stats.to_meta(), "seed": config.seed, "train_config": config.echo()}

        logger.info(
            "Training %d steps on %d complexes (%s, %d parameters)",
            config.total_steps,
            len(dataset),
            "classic" if config.classic_mode else anneal.name,
            params.num_parameters,
        )
        records: List[StepRecord] = []
        metrics_path = out_dir / "metrics.csv"
        for step in range(config.total_steps):
            idx = self.batch_indices(config.seed, step, len(dataset), config.batch_size)
            record, params, state = self.training_step(
                [dataset[i] for i in idx], step, config, params, state, schedule, anneal
            )
            records.append(record)
            if on_step is not None:
                on_step(record)
            if (step + 1) % config.log_every == 0:
                logger.info("step %d loss %.5f", step + 1, record.loss, extra={"context": record.model_dump()})
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(out_dir / "checkpoints" / f"step_{step + 1:07d}.npz", params, {**meta, "step": step + 1})
                self._write_metrics(records, metrics_path)

        frame = self._write_metrics(records, metrics_path)
        checkpoint_path = save_checkpoint(out_dir / "checkpoint.npz", params, {**meta, "step": config.total_steps})
        logger.info("Training finished; checkpoint at %s", checkpoint_path)
        return TrainResult(params=params, metrics=frame, checkpoint_path=checkpoint_path, metrics_path=metrics_path)

    def smoothed_loss_ratio(self, metrics: pd.DataFrame, window: int = 100) -> float:
        """Mean loss of the last ``window`` steps over the mean of the first ``window``; nan without rows."""
        if len(metrics) == 0:
            return math.nan
        losses = metrics["loss"].to_numpy(dtype=np.float64)
        window = max(1, min(window, losses.size))
        return float(losses[-window:].mean() / losses[:window].mean())


trainer_service = TrainerService()
