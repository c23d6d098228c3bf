"""
Multi-arm training comparison on a synthetic corpus with held-out pockets.

Every arm trains on the same training split from the same seed, then samples the
same number of ligands into the held-out pockets with the same sampling seeds, so
arms differ only in how the denoiser's condition was chosen during training.
"""
import math
import re
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from pocketdiff.api.dependencies.custom_exception import ConfigKeyError, CorpusError, ScheduleError
from pocketdiff.core.config import dump_key_values
from pocketdiff.schemas.config import (
    DESK_TRAIN_DEFAULTS,
    CorpusSpec,
    EvalConfig,
    ExperimentConfig,
    TrainConfig,
    resolve_config,
)
from pocketdiff.schemas.evaluation import Binning
from pocketdiff.schemas.molecule import Complex, Molecule, ProteinContext
from pocketdiff.schemas.schedule import parse_anneal
from pocketdiff.schemas.training import AtomCountStats
from pocketdiff.services.dataio import dataio_service
from pocketdiff.services.evalkit import eval_service
from pocketdiff.services.sampler import sampler_service
from pocketdiff.services.schedules import schedule_service
from pocketdiff.services.trainer import trainer_service
from pocketdiff.utils.logger import get_logger


logger = get_logger(__name__)

CLASSIC_ARM = "classic"

ARM_PRESETS: Dict[str, Tuple[str, ...]] = {
    "directional": (CLASSIC_ARM, "arc:r=2"),
    "curves": tuple(
        f"{curve},lower_bound={lb}"
        for curve in ("original:mu=12", "linear:slope=-0.005", "arc:r=2")
        for lb in ("0.5", "0.8")
    ),
    "radius": tuple(f"arc:r={r}" for r in ("1.5", "2", "3", "4", "8", "inf")),
}

SUMMARY_COLUMNS = [
    "arm",
    "loss_ratio",
    "min_p_T",
    "estimated_fraction",
    "mean_bond_jsd",
    "all_atom_jsd",
    "containment",
]


class Arm(BaseModel):
    """One training variant: a label plus the TrainConfig keys it sets."""
    model_config = ConfigDict(frozen=True)

    text: str
    overrides: Dict[str, str]


class ArmResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    label: str
    directory: Path
    train_config: TrainConfig
    report: pd.DataFrame
    loss_ratio: float
    min_p_T: float
    estimated_fraction: float
    containment: float
    contained: bool


class ExperimentResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    arms: List[ArmResult]
    summary: pd.DataFrame
    comparison: pd.DataFrame
    consistency: float
    checks: Dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


class ExperimentService:
    """Train several arms, sample held-out pockets, and compare the JSD reports."""

    def parse_arm(self, text: str) -> Arm:
        """
        ``classic`` turns pseudo molecule estimation off; anything else is an anneal spec
        such as ``arc:r=2,lower_bound=0.8``. Only keys written in the text override the
        experiment's training values.
        """
        text = text.strip()
        if text.lower() == CLASSIC_ARM:
            return Arm(text=CLASSIC_ARM, overrides={"classic_mode": "true"})
        spec = parse_anneal(text)
        overrides = {"anneal": spec.kind.value, "classic_mode": "false"}
        _, _, tail = text.partition(":")
        for chunk in filter(None, (c.strip() for c in tail.split(","))):
            key, value = (s.strip() for s in chunk.split("=", 1))
            overrides[key] = value
        return Arm(text=text, overrides=overrides)

    def resolve_arms(self, arms: Optional[Sequence[str]], presets: Optional[Sequence[str]]) -> List[Arm]:
        texts: List[str] = []
        for preset in presets or ():
            if preset not in ARM_PRESETS:
                raise ScheduleError(
                    f"unknown arm preset '{preset}'",
                    errors={"valid": sorted(ARM_PRESETS)},
                )
            texts.extend(ARM_PRESETS[preset])
        texts.extend(arms or ())
        if not texts:
            texts = list(ARM_PRESETS["directional"])
        return [self.parse_arm(text) for text in texts]

    def split_values(
        self, values: Mapping[str, str]
    ) -> Tuple[Dict[str, str], Dict[str, str], Dict[str, str]]:
        """Route flat keys to (experiment, eval, train) by field name."""
        experiment_keys = set(ExperimentConfig.model_fields)
        eval_keys = set(EvalConfig.model_fields)
        train_keys = set(TrainConfig.model_fields)
        unknown = sorted(set(values) - experiment_keys - eval_keys - train_keys)
        if unknown:
            valid = sorted(experiment_keys | eval_keys | train_keys)
            raise ConfigKeyError(
                f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(valid)}",
                errors={"unknown": unknown, "valid": valid},
            )
        experiment = {k: v for k, v in values.items() if k in experiment_keys}
        evaluation = {k: v for k, v in values.items() if k in eval_keys}
        train = {k: v for k, v in values.items() if k in train_keys}
        return experiment, evaluation, train

    def arm_config(
        self, config: ExperimentConfig, train_values: Mapping[str, str], arm: Arm
    ) -> TrainConfig:
        base = dict(DESK_TRAIN_DEFAULTS) if config.desk_defaults else {}
        return resolve_config(TrainConfig, {**base, **train_values, **arm.overrides})

    def arm_label(self, train_config: TrainConfig) -> str:
        return CLASSIC_ARM if train_config.classic_mode else train_config.anneal_spec().name

    def samples_per_pocket(self, total: int, pockets: int) -> List[int]:
        """Spread ``total`` samples over ``pockets``, the first ones taking the remainder."""
        if pockets < 1:
            raise CorpusError("no held-out pockets to sample into")
        base, extra = divmod(total, pockets)
        return [base + (1 if k < extra else 0) for k in range(pockets)]

    def run_arm(
        self,
        index: int,
        arm: Arm,
        config: ExperimentConfig,
        train_values: Mapping[str, str],
        eval_config: EvalConfig,
        train_set: Sequence[Complex],
        held_out: Sequence[Complex],
        reference: Sequence[Molecule],
        out_dir: Path,
    ) -> ArmResult:
        train_config = self.arm_config(config, train_values, arm)
        label = self.arm_label(train_config)
        arm_dir = out_dir / f"arm{index}_{re.sub(r'[^A-Za-z0-9.=-]+', '_', label).strip('_')}"
        logger.info("Arm %d: %s", index, label, extra={"context": {"arm": arm.text, "dir": str(arm_dir)}})

        result = trainer_service.train(train_config, train_set, arm_dir / "train")
        schedule = schedule_service.build_noise_schedule(
            train_config.diffusion_steps, train_config.beta_start, train_config.beta_end
        )
        stats = AtomCountStats.from_complexes(train_set)

        generated: List[Molecule] = []
        placed: List[Tuple[ProteinContext, List[Molecule]]] = []
        counts = self.samples_per_pocket(config.samples_per_arm, len(held_out))
        for k, (complex_, n) in enumerate(zip(held_out, counts)):
            if n == 0:
                continue
            pocket_dir = arm_dir / "samples" / (complex_.complex_id or f"pocket{k:05d}")
            sampler_service.sample_many(
                complex_.protein,
                n,
                result.params,
                schedule,
                seed=config.sample_seed + k,
                out_dir=pocket_dir,
                stats=stats,
                pocket_id=complex_.complex_id or f"pocket{k:05d}",
                position_scale=train_config.position_scale,
            )
            molecules = dataio_service.load_ligands(pocket_dir)
            generated.extend(molecules)
            placed.append((complex_.protein, molecules))

        report = eval_service.evaluation_report(generated, reference, eval_config)
        report.to_csv(arm_dir / "report.csv", index=False)
        containment, contained = eval_service.containment_check(placed, eval_config)

        metrics = result.metrics
        has_rows = len(metrics) > 0
        return ArmResult(
            label=label,
            directory=arm_dir,
            train_config=train_config,
            report=report,
            loss_ratio=trainer_service.smoothed_loss_ratio(metrics, config.smoothing_window),
            min_p_T=float(metrics["p_T"].min()) if has_rows else math.nan,
            estimated_fraction=float(1.0 - metrics["chose_gt_fraction"].mean()) if has_rows else math.nan,
            containment=containment,
            contained=contained,
        )

    def summarize(self, arms: Sequence[ArmResult]) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """(one row per arm, JSD per report row with one column per arm)."""
        rows = []
        comparison: Optional[pd.DataFrame] = None
        for arm in arms:
            report = arm.report
            bonds = report[report["metric"] == "bond_length"]["jsd"]
            all_atom = report[report["metric"] == "all_atom"]["jsd"]
            rows.append({
                "arm": arm.label,
                "loss_ratio": arm.loss_ratio,
                "min_p_T": arm.min_p_T,
                "estimated_fraction": arm.estimated_fraction,
                "mean_bond_jsd": float(bonds.mean()) if len(bonds) else math.nan,
                "all_atom_jsd": float(all_atom.iloc[0]) if len(all_atom) else math.nan,
                "containment": arm.containment,
            })
            column = report[["metric", "class", "jsd"]].rename(columns={"jsd": arm.label})
            comparison = column if comparison is None else comparison.merge(column, on=["metric", "class"], how="outer")
        summary = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
        return summary, comparison if comparison is not None else pd.DataFrame(columns=["metric", "class"])

    def run(
        self,
        config: ExperimentConfig,
        arms: Sequence[Arm],
        out_dir: Path,
        train_values: Optional[Mapping[str, str]] = None,
        eval_config: Optional[EvalConfig] = None,
    ) -> ExperimentResult:
        """
        Corpus → held-out split → per arm: train, sample, evaluate → summary files.

        Files under ``out_dir``: ``corpus/``, ``arm<i>_<label>/{train,samples,report.csv}``,
        ``summary.csv``, ``comparison.csv``, ``experiment_config.txt``.
        """
        train_values = dict(train_values or {})
        eval_config = eval_config or EvalConfig()
        out_dir = Path(out_dir)
        if not arms:
            raise ScheduleError("an experiment needs at least one arm")
        labels = [self.arm_label(self.arm_config(config, train_values, arm)) for arm in arms]

        spec = CorpusSpec(num_complexes=config.num_complexes, seed=config.corpus_seed)
        corpus = dataio_service.filter_complexes(dataio_service.generate_corpus(spec), spec.max_rmsd)
        dataio_service.write_corpus(corpus, out_dir / "corpus")
        train_set, held_out = dataio_service.split_corpus(corpus, config.held_out_fraction, config.split_seed)
        if not train_set or not held_out:
            raise CorpusError(
                "the split left no training or no held-out complexes",
                errors={"train": len(train_set), "held_out": len(held_out)},
            )
        reference = [c.ligand for c in corpus]
        consistency = eval_service.split_half_consistency(
            reference,
            config.consistency_seed,
            Binning(lo=eval_config.distance_min, hi=eval_config.distance_max, bins=eval_config.distance_bins),
        )
        logger.info(
            "Experiment over %d arms: %d training and %d held-out complexes, split-half JSD %.4f",
            len(arms), len(train_set), len(held_out), consistency,
        )

        results = [
            self.run_arm(i, arm, config, train_values, eval_config, train_set, held_out, reference, out_dir)
            for i, arm in enumerate(arms)
        ]
        summary, comparison = self.summarize(results)
        summary.to_csv(out_dir / "summary.csv", index=False)
        comparison.to_csv(out_dir / "comparison.csv", index=False)
        (out_dir / "experiment_config.txt").write_text(
            dump_key_values({**config.echo(), **eval_config.echo(), "arms": " | ".join(labels)}),
            encoding="utf-8",
        )

        checks = {
            "finite_jsd": bool(all(np.all(np.isfinite(r.report["jsd"])) for r in results)),
            "split_half_consistency": consistency < config.consistency_threshold,
            "containment": all(r.contained for r in results),
            "loss_ratio": all(r.loss_ratio < config.loss_ratio_threshold for r in results),
        }
        for name, ok in checks.items():
            if not ok:
                logger.warning("Experiment check %s failed", name)
        return ExperimentResult(
            arms=results, summary=summary, comparison=comparison, consistency=consistency, checks=checks
        )


experiment_service = ExperimentService()
