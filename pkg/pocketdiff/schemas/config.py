import math
from typing import Dict, Mapping, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from pocketdiff.api.dependencies.custom_exception import ConfigKeyError
from pocketdiff.schemas.enums import AnnealKind
from pocketdiff.schemas.schedule import INFINITE_TOKENS, AnnealSpec


ModelT = TypeVar("ModelT", bound=BaseModel)


class RunConfig(BaseModel):
    """Base for flat key=value run configurations; unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    def echo(self) -> Dict[str, object]:
        return {k: _render(v) for k, v in self.model_dump().items()}


def _render(value: object) -> object:
    if isinstance(value, AnnealKind):
        return value.value
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return value


class DenoiserConfig(RunConfig):
    """Network dimensions; fixed for the lifetime of a parameter set."""
    hidden_dim: int = Field(default=64, ge=1)
    num_layers: int = Field(default=3, ge=1)
    time_dim: int = Field(default=16, ge=2)
    K: int = Field(default=4, ge=2)
    K_P: int = Field(default=2, ge=1)
    cutoff: float = Field(default=6.0, gt=0)
    fc_threshold: int = Field(default=24, ge=0)
    T: int = Field(default=100, ge=1)

    @field_validator("time_dim")
    @classmethod
    def _even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("time_dim must be even")
        return value


class TrainConfig(RunConfig):
    """Everything `train` needs besides the corpus."""
    total_steps: int = Field(default=3000, ge=0)
    batch_size: int = Field(default=4, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    beta1: float = Field(default=0.95, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    kl_weight: float = Field(default=100.0, ge=0)

    diffusion_steps: int = Field(default=100, ge=1)
    beta_start: float = Field(default=1e-4, gt=0, lt=1)
    beta_end: float = Field(default=0.02, gt=0, lt=1)
    # diffusion runs on centered coordinates divided by this (Å per model unit)
    position_scale: float = Field(default=1.0, gt=0)

    anneal: AnnealKind = AnnealKind.ARC
    mu: float = Field(default=12.0, gt=0)
    slope: float = -0.005
    r: float = Field(default=2.0, gt=0)
    lower_bound: float = Field(default=0.5, ge=0, le=1)
    epoch_divisor: int = Field(default=1000, ge=1)
    p_init: float = Field(default=1.0, ge=0, le=1)
    classic_mode: bool = False

    seed: int = Field(default=2021, ge=0)
    checkpoint_every: int = Field(default=1000, ge=0)
    log_every: int = Field(default=100, ge=1)

    hidden_dim: int = Field(default=64, ge=1)
    num_layers: int = Field(default=3, ge=1)
    time_dim: int = Field(default=16, ge=2)
    cutoff: float = Field(default=6.0, gt=0)
    fc_threshold: int = Field(default=24, ge=0)

    @field_validator("r", mode="before")
    @classmethod
    def _infinite_r(cls, value):
        if isinstance(value, str) and value.strip().lower() in INFINITE_TOKENS:
            return math.inf
        return value

    def anneal_spec(self) -> AnnealSpec:
        disabled = math.isinf(self.r)
        return AnnealSpec(
            kind=self.anneal,
            mu=self.mu,
            slope=self.slope,
            r=2.0 if disabled else self.r,
            lower_bound=self.lower_bound,
            epoch_divisor=self.epoch_divisor,
            p_init=self.p_init,
            disabled=disabled,
        )

    def denoiser_config(self, K: int, K_P: int) -> DenoiserConfig:
        return DenoiserConfig(
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            time_dim=self.time_dim,
            K=K,
            K_P=K_P,
            cutoff=self.cutoff,
            fc_threshold=self.fc_threshold,
            T=self.diffusion_steps,
        )


class CorpusSpec(RunConfig):
    """Synthetic corpus parameters; templates outside the ligand size range are skipped."""
    num_complexes: int = Field(default=500, ge=1)
    min_ligand_atoms: int = Field(default=4, ge=1)
    max_ligand_atoms: int = Field(default=12, ge=1)
    min_pocket_atoms: int = Field(default=10, ge=1)
    max_pocket_atoms: int = Field(default=24, ge=1)
    shell_radius: float = Field(default=4.0, gt=0)
    shell_width: float = Field(default=0.3, ge=0)
    pocket_spacing: float = Field(default=1.2, ge=0)
    jitter: float = Field(default=0.02, ge=0)
    max_rmsd: float = Field(default=1.0, gt=0)
    seed: int = Field(default=2021, ge=0)

    @model_validator(mode="after")
    def _ranges(self):
        if self.min_ligand_atoms > self.max_ligand_atoms:
            raise ValueError("ligand size range is empty")
        if self.min_pocket_atoms > self.max_pocket_atoms:
            raise ValueError("pocket size range is empty")
        if self.shell_width >= self.shell_radius:
            raise ValueError("shell_width must be smaller than shell_radius")
        return self


class EvalConfig(RunConfig):
    bond_bins: int = Field(default=64, ge=1)
    bond_min: float = 0.8
    bond_max: float = 2.2
    distance_bins: int = Field(default=100, ge=1)
    distance_min: float = 0.0
    distance_max: float = 12.0
    containment_cutoff: float = Field(default=6.0, gt=0)
    containment_margin: float = Field(default=4.0, ge=0)
    containment_threshold: float = Field(default=0.95, ge=0, le=1)


# Desk-scale training overrides. Coordinates are shrunk 2x under a heavier noise
# schedule so x_T is close to N(0, I), and 15 steps per pseudo-epoch let 3000 steps
# cover the arc curve's 200 epochs.
DESK_TRAIN_DEFAULTS: Dict[str, str] = {
    "lr": "5e-4",
    "kl_weight": "10",
    "beta_start": "1e-3",
    "beta_end": "0.2",
    "position_scale": "2.0",
    "cutoff": "3.0",
    "epoch_divisor": "15",
    "checkpoint_every": "0",
}


class ExperimentConfig(RunConfig):
    """Corpus, split, sampling and check settings of a multi-arm comparison."""
    num_complexes: int = Field(default=500, ge=2)
    corpus_seed: int = Field(default=2021, ge=0)
    held_out_fraction: float = Field(default=0.1, gt=0, lt=1)
    split_seed: int = Field(default=2021, ge=0)
    samples_per_arm: int = Field(default=200, ge=1)
    sample_seed: int = Field(default=2021, ge=0)
    consistency_seed: int = Field(default=2021, ge=0)
    consistency_threshold: float = Field(default=0.05, gt=0, le=1)
    loss_ratio_threshold: float = Field(default=0.5, gt=0)
    smoothing_window: int = Field(default=100, ge=1)
    desk_defaults: bool = True


def resolve_config(cls: Type[ModelT], values: Mapping[str, object]) -> ModelT:
    """
    Validate raw ``key=value`` strings into ``cls``.

    Raises:
        ConfigKeyError: an unknown key (the message lists the valid ones) or a bad value.
    """
    valid = sorted(cls.model_fields)
    unknown = sorted(set(values) - set(valid))
    if unknown:
        raise ConfigKeyError(
            f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(valid)}",
            errors={"unknown": unknown, "valid": valid},
        )
    try:
        return cls.model_validate(dict(values))
    except ValidationError as e:
        problems = {".".join(str(p) for p in err["loc"]): err["msg"] for err in e.errors()}
        raise ConfigKeyError(f"invalid config values: {problems}", errors=problems)
